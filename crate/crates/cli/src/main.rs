//! Benchmark and verification harness for the mbfgs solver family.
//!
//! Three subcommands: `solve` runs one (problem, variant) pair and prints a
//! run record, `bench` sweeps a problem list and writes Table-style metrics
//! as CSV, and `verify` runs the randomized equivalence suites.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use mbfgs::problems::Problem;
use mbfgs::solver::{minimize, Objective, SolveResult, SolveStatus, SolverConfig, Variant};
use mbfgs::verify;

const CSV_HEADER: &str =
    "name,dim,variant,iters,func_evals,agg_count,final_f,final_gnorm,status,wall_ms";

#[derive(Parser)]
#[command(name = "mbfgs-bench")]
#[command(about = "Benchmark and verification harness for the mbfgs solvers")]
struct Cli {
    #[command(subcommand)]
    command: Commands,
}

#[derive(Subcommand)]
enum Commands {
    /// Run a single solve and print its metrics.
    Solve(SolveArgs),
    /// Run a (problem, variant) sweep and emit CSV metrics.
    Bench(BenchArgs),
    /// Run the randomized equivalence suites.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct CommonSolverArgs {
    /// Limited-memory capacity (3..=10).
    #[arg(long, default_value_t = 5)]
    memory: usize,
    /// Gradient tolerance for the relative stopping rule.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 100_000)]
    max_iters: usize,
    /// Backtracking contraction factor in (0,1).
    #[arg(long, default_value_t = 0.5)]
    ls_contraction: f64,
    /// Sufficient-decrease constant in (0,1).
    #[arg(long, default_value_t = 1e-4)]
    ls_sufficient: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl CommonSolverArgs {
    fn config(&self, variant: Variant) -> Result<SolverConfig, String> {
        if !(3..=10).contains(&self.memory) {
            return Err(format!(
                "--memory {} outside the supported range 3..=10",
                self.memory
            ));
        }
        if !(self.ls_contraction > 0.0 && self.ls_contraction < 1.0) {
            return Err("--ls-contraction must lie in (0,1)".into());
        }
        if !(self.ls_sufficient > 0.0 && self.ls_sufficient < 1.0) {
            return Err("--ls-sufficient must lie in (0,1)".into());
        }
        if self.tol <= 0.0 {
            return Err("--tol must be positive".into());
        }
        Ok(SolverConfig {
            variant,
            memory: self.memory,
            grad_tol: self.tol,
            max_iters: self.max_iters,
            ls_contraction: self.ls_contraction,
            ls_sufficient: self.ls_sufficient,
            seed: self.seed,
            ..SolverConfig::default()
        })
    }
}

#[derive(Args)]
struct SolveArgs {
    /// Problem name from the catalog (e.g. ARWHEAD).
    #[arg(long)]
    problem: String,
    /// Problem dimension; omitted means the family default.
    #[arg(long)]
    dim: Option<usize>,
    /// Solver variant: mbfgs | mlbfgs | agg.
    #[arg(long, default_value = "agg")]
    variant: Variant,
    #[command(flatten)]
    solver: CommonSolverArgs,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated variants to run (mbfgs, mlbfgs, agg).
    #[arg(long, value_delimiter = ',', default_values_t = [Variant::MLBFGS, Variant::AggMBFGS])]
    variants: Vec<Variant>,
    /// Restrict to a comma-separated list of problem names.
    #[arg(long, value_delimiter = ',')]
    problems: Option<Vec<String>>,
    /// Config file with one "name dim" pair per line (# for comments).
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV output path.
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    solver: CommonSolverArgs,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 200)]
    trials: usize,
    #[arg(long, default_value_t = 50)]
    max_n: usize,
    #[arg(long, default_value_t = 10)]
    max_m: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

struct RunRecord {
    name: String,
    dim: usize,
    variant: Variant,
    result: SolveResult,
    wall_ms: u128,
}

impl RunRecord {
    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.15e},{:.15e},{},{}",
            self.name,
            self.dim,
            self.variant.as_str(),
            self.result.iters,
            self.result.func_evals,
            self.result.agg_count,
            self.result.f_final,
            self.result.grad_inf_norm,
            self.result.status.as_str(),
            self.wall_ms
        )
    }

    fn human_row(&self) -> String {
        format!(
            "{:<12} {:>6}  {:<7} {:>8} {:>10} {:>6}  {:>14.6e} {:>12.3e}  {:<18} {:>7}",
            self.name,
            self.dim,
            self.variant.as_str(),
            self.result.iters,
            self.result.func_evals,
            self.result.agg_count,
            self.result.f_final,
            self.result.grad_inf_norm,
            self.result.status.as_str(),
            self.wall_ms
        )
    }
}

fn run_one(
    name: &str,
    dim: Option<usize>,
    variant: Variant,
    cfg: &SolverConfig,
) -> Result<RunRecord, String> {
    let problem = Problem::by_name(name, dim).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let result = minimize(&problem, cfg);
    Ok(RunRecord {
        name: problem.name().to_string(),
        dim: problem.dim(),
        variant,
        result,
        wall_ms: start.elapsed().as_millis(),
    })
}

fn cmd_solve(args: &SolveArgs) -> ExitCode {
    let cfg = match args.solver.config(args.variant) {
        Ok(cfg) => cfg,
        Err(msg) => return usage_error(&msg),
    };
    match run_one(&args.problem, args.dim, args.variant, &cfg) {
        Ok(record) => {
            println!("{CSV_HEADER}");
            println!("{}", record.csv_row());
            match record.result.status {
                SolveStatus::Converged => ExitCode::SUCCESS,
                SolveStatus::IterLimit => ExitCode::from(2),
                SolveStatus::LineSearchFailure => ExitCode::from(3),
            }
        }
        Err(msg) => usage_error(&msg),
    }
}

fn parse_config_file(path: &PathBuf) -> Result<Vec<(String, Option<usize>)>, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let mut jobs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let name = parts.next().unwrap().to_string();
        let dim = match parts.next() {
            Some(tok) => Some(
                tok.parse::<usize>()
                    .map_err(|_| format!("bad dimension `{tok}` on line {}", lineno + 1))?,
            ),
            None => None,
        };
        if parts.next().is_some() {
            return Err(format!("trailing tokens on line {}", lineno + 1));
        }
        jobs.push((name, dim));
    }
    Ok(jobs)
}

fn cmd_bench(args: &BenchArgs) -> ExitCode {
    if args.variants.is_empty() {
        return usage_error("no variants requested");
    }
    let jobs: Vec<(String, Option<usize>)> = if let Some(path) = &args.config {
        match parse_config_file(path) {
            Ok(jobs) => jobs,
            Err(msg) => return usage_error(&msg),
        }
    } else if let Some(names) = &args.problems {
        names.iter().map(|n| (n.clone(), None)).collect()
    } else {
        Problem::catalog()
            .iter()
            .map(|p| (p.name().to_string(), Some(p.dim())))
            .collect()
    };
    if jobs.is_empty() {
        return usage_error("empty problem list");
    }

    let mut records = Vec::new();
    for (name, dim) in &jobs {
        for &variant in &args.variants {
            let cfg = match args.solver.config(variant) {
                Ok(cfg) => cfg,
                Err(msg) => return usage_error(&msg),
            };
            match run_one(name, *dim, variant, &cfg) {
                Ok(record) => records.push(record),
                Err(msg) => return usage_error(&msg),
            }
        }
    }
    records.sort_by(|a, b| {
        (a.name.as_str(), a.dim, a.variant.as_str())
            .cmp(&(b.name.as_str(), b.dim, b.variant.as_str()))
    });

    println!(
        "{:<12} {:>6}  {:<7} {:>8} {:>10} {:>6}  {:>14} {:>12}  {:<18} {:>7}",
        "name", "dim", "variant", "iters", "func", "agg", "final_f", "final_gnorm", "status", "ms"
    );
    for record in &records {
        println!("{}", record.human_row());
    }

    if let Some(path) = &args.output {
        let mut csv = String::new();
        let _ = writeln!(csv, "{CSV_HEADER}");
        for record in &records {
            let _ = writeln!(csv, "{}", record.csv_row());
        }
        if let Err(e) = std::fs::write(path, csv) {
            eprintln!("error: cannot write {}: {e}", path.display());
            return ExitCode::FAILURE;
        }
    }
    ExitCode::SUCCESS
}

fn cmd_verify(args: &VerifyArgs) -> ExitCode {
    if args.trials == 0 {
        return usage_error("--trials must be positive");
    }
    let reports = verify::run_all(args.trials, args.max_n, args.max_m, args.seed);
    let mut all_passed = true;
    for report in &reports {
        let verdict = if report.passed() { "PASS" } else { "FAIL" };
        println!(
            "{verdict}  {:<36} trials={:<5} worst={:.3e}  tol={:.1e}",
            report.name, report.trials, report.worst, report.tol
        );
        all_passed &= report.passed();
    }
    if all_passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn usage_error(msg: &str) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Commands::Solve(args) => cmd_solve(&args),
        Commands::Bench(args) => cmd_bench(&args),
        Commands::Verify(args) => cmd_verify(&args),
    }
}
