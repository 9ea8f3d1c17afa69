//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! (visible with `--nocapture`; the test verdicts carry the same
//! information). Tolerances are pinned in the assertions.

use std::cell::RefCell;
use std::time::{Duration, Instant};

use nalgebra::DVector;

use mbfgs::problems::{fd_gradient_check, Problem};
use mbfgs::solver::{minimize, FnObjective, Objective, SolveStatus, SolverConfig, Variant};
use mbfgs::verify;

const SEED: u64 = 2024;

fn report(name: &str, passed: bool, detail: &str) {
    println!(
        "{}  {:<44} {}",
        if passed { "PASS" } else { "FAIL" },
        name,
        detail
    );
    assert!(passed, "{name}: {detail}");
}

fn within(budget: Duration, start: Instant, name: &str) {
    // Wall-clock budgets are meaningful for optimized builds only.
    let elapsed = start.elapsed();
    if !cfg!(debug_assertions) {
        assert!(
            elapsed <= budget,
            "{name} exceeded its runtime budget: {elapsed:?} > {budget:?}"
        );
    }
}

#[test]
fn compact_equals_iterative() {
    let start = Instant::now();
    let r = verify::compact_vs_iterative(200, 50, 10, SEED);
    within(Duration::from_secs(10), start, r.name);
    report(
        "compact-vs-iterative (200 trials, n<=50, m<=10)",
        r.worst <= 1e-10,
        &format!("worst rel Frobenius diff {:.3e} (tol 1e-10)", r.worst),
    );
}

#[test]
fn parallel_displacement_drop_is_exact() {
    let start = Instant::now();
    let r = verify::theorem2_parallel(200, SEED);
    within(Duration::from_secs(5), start, r.name);
    report(
        "parallel-drop equality (200 trials)",
        r.worst <= 1e-12,
        &format!("worst rel diff {:.3e} (tol 1e-12)", r.worst),
    );
}

#[test]
fn aggregation_reproduces_full_memory_matrix() {
    let start = Instant::now();
    let reports = verify::theorem3_aggregation(200, 12, 6, SEED);
    within(Duration::from_secs(30), start, "aggregation suite");
    let tols = [1e-7, 1e-10, 1e-7];
    for (r, tol) in reports.iter().zip(tols) {
        report(
            r.name,
            r.worst <= tol,
            &format!("worst {:.3e} (tol {tol:.0e})", r.worst),
        );
    }
}

#[test]
fn two_loop_equals_dense_inverse() {
    let start = Instant::now();
    let r = verify::two_loop_vs_dense(200, SEED);
    within(Duration::from_secs(5), start, r.name);
    report(
        "two-loop-vs-dense (200 trials)",
        r.worst <= 1e-10,
        &format!("worst scaled mismatch {:.3e} (tol 1e-10)", r.worst),
    );
}

#[test]
fn dense_update_satisfies_secant_equation() {
    let r = verify::secant_property(200, SEED);
    report(
        "secant property (200 trials)",
        r.worst <= 1e-10,
        &format!("worst rel residual {:.3e} (tol 1e-10)", r.worst),
    );
}

#[test]
fn catalog_gradients_validate_against_finite_differences() {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(SEED);
    let mut worst: f64 = 0.0;
    let mut worst_name = "";
    for problem in Problem::catalog() {
        let x0 = problem.x0();
        let mut check = |x: &DVector<f64>| {
            let err = fd_gradient_check(&problem, x, 1e-6);
            if err > worst {
                worst = err;
                worst_name = problem.name();
            }
        };
        check(&x0);
        for _ in 0..20 {
            let x = DVector::from_fn(x0.len(), |i, _| x0[i] + rng.gen_range(-0.5..0.5));
            check(&x);
        }
    }
    report(
        "gradient validation (catalog, x0 + 20 random points)",
        worst <= 1e-5,
        &format!("worst rel error {worst:.3e} on {worst_name} (tol 1e-5)"),
    );
}

const CONVERGENCE_SET: [(&str, usize); 11] = [
    ("ARWHEAD", 100),
    ("LIARWHD", 100),
    ("POWELLSG", 100),
    ("BDQRTIC", 100),
    ("BROYDN3DLS", 100),
    ("DIXMAANA", 99),
    ("DIXMAANE", 99),
    ("DIXMAANI", 99),
    ("CHNROSNB", 50),
    ("NONDQUAR", 100),
    ("TQUARTIC", 100),
];

#[test]
fn convergence_suite_all_variants() {
    let start = Instant::now();
    let mut all_ok = true;
    let mut detail = String::new();
    for (name, dim) in CONVERGENCE_SET {
        let problem = Problem::by_name(name, Some(dim)).unwrap();
        for variant in [Variant::FullMBFGS, Variant::MLBFGS, Variant::AggMBFGS] {
            let result = minimize(&problem, &SolverConfig::with_variant(variant));
            if result.status != SolveStatus::Converged {
                all_ok = false;
                detail.push_str(&format!("{name}/{variant}: {:?}; ", result.status));
            }
        }
    }
    within(Duration::from_secs(120), start, "convergence suite");
    if detail.is_empty() {
        detail = "11 problems x 3 variants converged".into();
    }
    report("convergence suite (relative gradient rule)", all_ok, &detail);
}

/// Full-memory and aggregated final objectives within 1e-6 absolute.
///
/// Pinned exactly as stated. Note: the relative stopping rule leaves a wide
/// landing region on problems with large initial gradients (LIARWHD,
/// POWELLSG, BDQRTIC, NONDQUAR), where the two trajectories legitimately
/// stop at objective values more than 1e-6 apart even though both satisfy
/// the gradient test; see the per-problem printout on failure.
#[test]
fn convergence_suite_objective_agreement() {
    let mut all_ok = true;
    let mut lines = String::new();
    for (name, dim) in CONVERGENCE_SET {
        let problem = Problem::by_name(name, Some(dim)).unwrap();
        let full = minimize(&problem, &SolverConfig::with_variant(Variant::FullMBFGS));
        let agg = minimize(&problem, &SolverConfig::with_variant(Variant::AggMBFGS));
        if full.status == SolveStatus::Converged && agg.status == SolveStatus::Converged {
            let diff = (full.f_final - agg.f_final).abs();
            let ok = diff <= 1e-6;
            all_ok &= ok;
            lines.push_str(&format!(
                "{}  {name}: |f_full - f_agg| = {diff:.3e}\n",
                if ok { "  ok  " } else { " over " }
            ));
        }
    }
    println!("{lines}");
    report(
        "full-vs-aggregated objective agreement (1e-6 absolute)",
        all_ok,
        "see per-problem lines above",
    );
}

/// With memory covering the whole horizon, the aggregated variant must
/// reproduce the full-memory iterates on a strictly convex quadratic.
#[test]
fn short_horizon_trajectories_coincide() {
    let n = 8;
    let diag: Vec<f64> = (1..=n).map(|i| i as f64).collect();

    let run = |variant: Variant| -> Vec<DVector<f64>> {
        let iterates = RefCell::new(Vec::new());
        struct Recorder<'a> {
            diag: &'a [f64],
            n: usize,
            iterates: &'a RefCell<Vec<DVector<f64>>>,
        }
        impl Objective for Recorder<'_> {
            fn dim(&self) -> usize {
                self.n
            }
            fn x0(&self) -> DVector<f64> {
                DVector::from_element(self.n, 1.0)
            }
            fn eval(&self, x: &DVector<f64>) -> f64 {
                0.5 * x
                    .iter()
                    .zip(self.diag)
                    .map(|(v, d)| d * v * v)
                    .sum::<f64>()
            }
            fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
                // The gradient is evaluated exactly once per iterate, so the
                // recorded arguments are the iterate sequence.
                self.iterates.borrow_mut().push(x.clone());
                DVector::from_fn(self.n, |i, _| self.diag[i] * x[i])
            }
        }
        let problem = Recorder {
            diag: &diag,
            n,
            iterates: &iterates,
        };
        let cfg = SolverConfig {
            memory: 10,
            ..SolverConfig::with_variant(variant)
        };
        let result = minimize(&problem, &cfg);
        assert_eq!(result.status, SolveStatus::Converged);
        iterates.into_inner()
    };

    let full = run(Variant::FullMBFGS);
    let agg = run(Variant::AggMBFGS);
    let horizon = full.len().min(agg.len()).min(9); // x0 plus 8 steps
    let mut worst: f64 = 0.0;
    for k in 0..horizon {
        let scale = full[k].norm().max(1.0);
        worst = worst.max((&full[k] - &agg[k]).norm() / scale);
    }
    report(
        "short-horizon trajectory equality (n=8, memory 10)",
        worst <= 1e-6,
        &format!(
            "worst rel iterate distance {worst:.3e} over {horizon} iterates (tol 1e-6)"
        ),
    );
}

/// Qualitative large-scale check: aggregation events occur on ARWHEAD at
/// n = 5000 and both limited-memory variants converge.
#[test]
fn arwhead_large_scale_shape() {
    let problem = Problem::by_name("ARWHEAD", Some(5000)).unwrap();
    let ml = minimize(&problem, &SolverConfig::with_variant(Variant::MLBFGS));
    let agg = minimize(&problem, &SolverConfig::with_variant(Variant::AggMBFGS));
    let ok = ml.status == SolveStatus::Converged
        && agg.status == SolveStatus::Converged
        && agg.agg_count > 0;
    report(
        "large-scale shape (ARWHEAD n=5000)",
        ok,
        &format!(
            "mlbfgs {} in {} iters; aggregated {} in {} iters with {} aggregations",
            ml.status.as_str(),
            ml.iters,
            agg.status.as_str(),
            agg.iters,
            agg.agg_count
        ),
    );
}

/// The quadratic sanity example: any variant solves 0.5‖x‖² from a constant
/// start in at most two iterations.
#[test]
fn identity_quadratic_is_immediate() {
    for variant in [Variant::FullMBFGS, Variant::MLBFGS, Variant::AggMBFGS] {
        let problem = FnObjective {
            dim: 10,
            x0: DVector::from_element(10, 5.0),
            f: |x: &DVector<f64>| 0.5 * x.norm_squared(),
            g: |x: &DVector<f64>| x.clone(),
        };
        let result = minimize(&problem, &SolverConfig::with_variant(variant));
        assert_eq!(result.status, SolveStatus::Converged);
        assert!(result.iters <= 2);
    }
    report("identity quadratic sanity", true, "<= 2 iterations, all variants");
}
