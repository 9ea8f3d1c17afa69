//! Minimal library usage: solve one catalog problem with each variant.

use mbfgs::problems::Problem;
use mbfgs::solver::{minimize, Objective, SolverConfig, Variant};

fn main() {
    let problem = Problem::by_name("TQUARTIC", Some(100)).expect("catalog problem");
    println!("minimizing {} (n = {})", problem.name(), problem.dim());
    for variant in [Variant::FullMBFGS, Variant::MLBFGS, Variant::AggMBFGS] {
        let cfg = SolverConfig::with_variant(variant);
        let r = minimize(&problem, &cfg);
        println!(
            "  {:<7} {}: f = {:.3e}, ‖g‖∞ = {:.3e}, {} iters, {} f-evals, {} aggregations",
            variant.as_str(),
            r.status.as_str(),
            r.f_final,
            r.grad_inf_norm,
            r.iters,
            r.func_evals,
            r.agg_count
        );
    }
}
