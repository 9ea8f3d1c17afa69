//! End-to-end checks of the CLI surface: exit codes, CSV format, and the
//! config-file parser, exercised through the built binary.

use std::path::PathBuf;
use std::process::{Command, Output};

fn bench_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mbfgs-bench"))
}

fn run(args: &[&str]) -> Output {
    bench_bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn solve_converged_exits_zero_with_record() {
    let out = run(&["solve", "--problem", "ARWHEAD", "--dim", "10", "--variant", "agg"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "name,dim,variant,iters,func_evals,agg_count,final_f,final_gnorm,status,wall_ms"
    );
    let row = lines.next().unwrap();
    assert!(row.starts_with("ARWHEAD,10,agg,"));
    assert!(row.contains("Converged"));
}

#[test]
fn solve_unknown_problem_exits_one() {
    let out = run(&["solve", "--problem", "NOPE"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown problem"));
}

#[test]
fn solve_invalid_dimension_exits_one() {
    let out = run(&["solve", "--problem", "DIXMAANA", "--dim", "100"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid dimension"));
}

#[test]
fn solve_iteration_cap_exits_two() {
    let out = run(&[
        "solve",
        "--problem",
        "CHNROSNB",
        "--max-iters",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stdout(&out).contains("IterLimit"));
}

#[test]
fn bench_writes_stable_csv() {
    let dir = std::env::temp_dir();
    let config = dir.join("mbfgs_bench_config.txt");
    std::fs::write(
        &config,
        "# two tiny jobs\nARWHEAD 10\nBOX 3   # fixed-dimension entry\n",
    )
    .unwrap();

    let csv_path = |tag: &str| -> PathBuf { dir.join(format!("mbfgs_bench_{tag}.csv")) };
    let mut csvs = Vec::new();
    for tag in ["a", "b"] {
        let path = csv_path(tag);
        let out = run(&[
            "bench",
            "--config",
            config.to_str().unwrap(),
            "--variants",
            "mlbfgs,agg",
            "--output",
            path.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
        csvs.push(std::fs::read_to_string(&path).unwrap());
    }

    let strip_wall = |text: &str| -> Vec<String> {
        text.lines()
            .map(|l| l.rsplit_once(',').map(|(head, _)| head.to_string()).unwrap())
            .collect()
    };
    // Byte-stable modulo the wall_ms column.
    assert_eq!(strip_wall(&csvs[0]), strip_wall(&csvs[1]));

    let lines: Vec<&str> = csvs[0].lines().collect();
    assert_eq!(
        lines[0],
        "name,dim,variant,iters,func_evals,agg_count,final_f,final_gnorm,status,wall_ms"
    );
    // 2 problems x 2 variants, sorted by (name, dim, variant).
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("ARWHEAD,10,agg,"));
    assert!(lines[2].starts_with("ARWHEAD,10,mlbfgs,"));
    assert!(lines[3].starts_with("BOX,3,agg,"));
    assert!(lines[4].starts_with("BOX,3,mlbfgs,"));
}

#[test]
fn bench_empty_problem_list_exits_one() {
    let dir = std::env::temp_dir();
    let config = dir.join("mbfgs_bench_empty.txt");
    std::fs::write(&config, "# nothing here\n").unwrap();
    let out = run(&["bench", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn verify_small_budget_passes() {
    let out = run(&["verify", "--trials", "10", "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0), "stdout: {}", stdout(&out));
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 7);
    assert!(text.lines().all(|l| l.starts_with("PASS")));
}
