//! Randomized equivalence suites over seeded instances: compact vs
//! iterative inverse-Hessian forms, the two-loop recursion against the dense
//! matrix, the parallel-drop and aggregation matrix equalities, the secant
//! property of the dense update, and the quadratic-equation residual of the
//! aggregation coefficients.
//!
//! Each suite reports its worst observed residual against the tolerance it
//! is judged by, so the CLI can print one line per suite and tests can
//! assert on the same numbers.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{
    aggregate_pair, build_workspace, compute_a, drop_parallel_pair, quadratic_residual,
    quadratic_residual_scale, AggregationInputs,
};
use crate::qn::{
    apply_direct_hessian, apply_inverse_hessian, hessian_update_dense, mbfgs_compact,
    mbfgs_iterative, modified_displacement, two_loop_direction, CurvaturePair, DisplacementStore,
};

/// Outcome of one suite: worst residual over all trials vs its tolerance.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: &'static str,
    pub trials: usize,
    pub worst: f64,
    pub tol: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.worst <= self.tol
    }
}

fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0))
}

/// Well-conditioned random SPD matrix: A Aᵀ/n plus a positive shift.
fn rand_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    &a * a.transpose() / (n as f64) + DMatrix::identity(n, n) * rng.gen_range(0.3..1.0)
}

/// Valid curvature pair through the real constructor (resampling the raw
/// vectors until the curvature guard accepts them).
fn rand_pair(n: usize, rng: &mut ChaCha8Rng) -> CurvaturePair {
    loop {
        let s = rand_vec(n, rng);
        let y = rand_vec(n, rng);
        let g = rand_vec(n, rng);
        if let Ok(pair) = modified_displacement(s, y, &g, false) {
            return pair;
        }
    }
}

/// Valid pair with a prescribed displacement.
fn rand_pair_with_s(s: DVector<f64>, rng: &mut ChaCha8Rng) -> CurvaturePair {
    loop {
        let y = rand_vec(s.len(), rng);
        let g = rand_vec(s.len(), rng);
        if let Ok(pair) = modified_displacement(s.clone(), y, &g, false) {
            return pair;
        }
    }
}

fn rand_store(n: usize, m: usize, rng: &mut ChaCha8Rng) -> DisplacementStore {
    let pairs = (0..m).map(|_| rand_pair(n, rng)).collect();
    DisplacementStore::from_pairs_unchecked(pairs, m.max(1))
}

/// Compact form vs the update-by-update fold, over random SPD bases.
pub fn compact_vs_iterative(trials: usize, max_n: usize, max_m: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x636f6d70);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let n = rng.gen_range(2..=max_n.max(2));
        let m = rng.gen_range(1..=max_m.min(n).max(1));
        let store = rand_store(n, m, &mut rng);
        let w0 = rand_spd(n, &mut rng);
        let wi = mbfgs_iterative(&w0, &store);
        let wc = mbfgs_compact(&w0, &store).expect("valid store");
        worst = worst.max((&wi - &wc).norm() / wi.norm());
    }
    SuiteReport {
        name: "compact-vs-iterative",
        trials,
        worst,
        tol: 1e-10,
    }
}

/// Dropping the earlier of two parallel displacements leaves the matrix
/// unchanged, for any SPD base and any nonzero scale factor.
pub fn theorem2_parallel(trials: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70617261);
    let sigmas = [3.0, -3.0, 1.0, -1.0, 0.01];
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let n = rng.gen_range(2..=8);
        let m = rng.gen_range(2..=5.min(n));
        let mut pairs: Vec<CurvaturePair> = (0..m).map(|_| rand_pair(n, &mut rng)).collect();
        let j = rng.gen_range(0..m - 1);
        let sigma = sigmas[trial % sigmas.len()];
        let parallel_s = &pairs[j + 1].s * sigma;
        pairs[j] = rand_pair_with_s(parallel_s, &mut rng);

        let full = DisplacementStore::from_pairs_unchecked(pairs.clone(), m);
        pairs.remove(j);
        let reduced = DisplacementStore::from_pairs_unchecked(pairs, m);

        let w0 = if trial % 2 == 0 {
            rand_spd(n, &mut rng)
        } else {
            DMatrix::identity(n, n)
        };
        let wf = mbfgs_iterative(&w0, &full);
        let wr = mbfgs_iterative(&w0, &reduced);
        worst = worst.max((&wf - &wr).norm() / wf.norm());

        // The dedicated drop operation must agree when the parallel pair is
        // the second newest.
        if j == m - 2 {
            let dropped = drop_parallel_pair(&full, sigma);
            let wd = mbfgs_iterative(&w0, &dropped);
            worst = worst.max((&wf - &wd).norm() / wf.norm());
        }
    }
    SuiteReport {
        name: "parallel-drop-equality",
        trials,
        worst,
        tol: 1e-12,
    }
}

/// One random aggregation instance: `prefix_len` older pairs forming the
/// base, one dependent pair, `m` newer pairs with `s0 = S sigma`.
struct AggInstance {
    store: DisplacementStore,
    sigma: DVector<f64>,
    dependent_index: usize,
    gamma0: f64,
}

fn rand_agg_instance(max_n: usize, max_m: usize, rng: &mut ChaCha8Rng) -> AggInstance {
    let m = rng.gen_range(1..=max_m.max(1));
    let prefix_len = rng.gen_range(0..=2.min(max_m));
    let n = rng.gen_range((m + prefix_len + 1).max(3)..=max_n.max(m + prefix_len + 1).max(3));
    let prefix: Vec<CurvaturePair> = (0..prefix_len).map(|_| rand_pair(n, rng)).collect();
    let newer: Vec<CurvaturePair> = (0..m).map(|_| rand_pair(n, rng)).collect();
    let mut sigma = rand_vec(m, rng);
    if sigma.norm() < 0.1 {
        sigma[0] += 0.5;
    }
    let mut s0 = DVector::zeros(n);
    for (k, pair) in newer.iter().enumerate() {
        s0 += &pair.s * sigma[k];
    }
    let pair0 = rand_pair_with_s(s0, rng);

    let mut pairs = prefix;
    let dependent_index = pairs.len();
    pairs.push(pair0);
    pairs.extend(newer);
    AggInstance {
        store: DisplacementStore::from_pairs_unchecked(pairs, m + prefix_len + 1),
        sigma,
        dependent_index,
        gamma0: rng.gen_range(0.5..2.0),
    }
}

/// Aggregation oracle: the matrix over the aggregated store equals the
/// full-memory matrix, diagonal inner products are preserved, and the
/// coefficient matrix satisfies its quadratic equation. Returns the three
/// sub-reports in that order.
pub fn theorem3_aggregation(
    trials: usize,
    max_n: usize,
    max_m: usize,
    seed: u64,
) -> Vec<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x61676772);
    let mut worst_matrix: f64 = 0.0;
    let mut worst_curv: f64 = 0.0;
    let mut worst_quad: f64 = 0.0;
    for _ in 0..trials {
        let instance = rand_agg_instance(max_n, max_m, &mut rng);
        let store = &instance.store;
        let aggregated = aggregate_pair(
            store,
            instance.dependent_index,
            &instance.sigma,
            instance.gamma0,
        )
        .expect("aggregation on a valid random instance");

        let n = store.pairs()[0].s.len();
        let w0 = DMatrix::identity(n, n) * instance.gamma0;
        let full = mbfgs_iterative(&w0, store);
        let agg = mbfgs_iterative(&w0, &aggregated);
        worst_matrix = worst_matrix.max((&full - &agg).norm() / full.norm());

        for (k, pair) in aggregated.pairs()[instance.dependent_index..]
            .iter()
            .enumerate()
        {
            let old = &store.pairs()[instance.dependent_index + 1 + k];
            let co = old.s.dot(&old.ybar);
            let cn = pair.s.dot(&pair.ybar);
            worst_curv = worst_curv.max((cn - co).abs() / co.abs());
        }

        // Rebuild the coefficient pipeline to expose the residual.
        let prefix = &store.pairs()[..instance.dependent_index];
        let pair0 = &store.pairs()[instance.dependent_index];
        let newer = &store.pairs()[instance.dependent_index + 1..];
        let s_cols: Vec<_> = newer.iter().map(|p| p.s.clone()).collect();
        let y_cols: Vec<_> = newer.iter().map(|p| p.ybar.clone()).collect();
        let s_mat = DMatrix::from_columns(&s_cols);
        let ybar_mat = DMatrix::from_columns(&y_cols);
        let rho0 = 1.0 / pair0.s.dot(&pair0.ybar);
        let w_inv_s = apply_direct_hessian(prefix, &s_mat, instance.gamma0);
        let w_y0 = apply_inverse_hessian(prefix, &pair0.ybar, instance.gamma0);
        let inputs = AggregationInputs {
            sigma: instance.sigma.clone(),
            s0: pair0.s.clone(),
            ybar0: pair0.ybar.clone(),
            rho0,
            s_mat,
            ybar_mat,
            rho: DVector::from_fn(newer.len(), |i, _| newer[i].rho),
            w_inv_s,
            chi0: 1.0 + rho0 * pair0.ybar.dot(&w_y0),
        };
        let mut ws = build_workspace(&inputs).expect("workspace");
        let a_mat = compute_a(&mut ws, &inputs).expect("coefficients");
        if newer.len() > 1 {
            let resid = quadratic_residual(&ws, &a_mat);
            worst_quad = worst_quad.max(resid / quadratic_residual_scale(&ws).max(1e-300));
        }
    }
    vec![
        SuiteReport {
            name: "aggregation-matrix-equality",
            trials,
            worst: worst_matrix,
            tol: 1e-7,
        },
        SuiteReport {
            name: "aggregation-curvature-preservation",
            trials,
            worst: worst_curv,
            tol: 1e-10,
        },
        SuiteReport {
            name: "aggregation-quadratic-residual",
            trials,
            worst: worst_quad,
            tol: 1e-7,
        },
    ]
}

/// Two-loop recursion vs the dense inverse-Hessian product.
pub fn two_loop_vs_dense(trials: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x74776f6c);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let n = rng.gen_range(2..=20);
        let m = rng.gen_range(0..=6.min(n - 1));
        let store = rand_store(n, m, &mut rng);
        let g = rand_vec(n, &mut rng);
        let gamma0 = rng.gen_range(0.5..2.0);
        let d = two_loop_direction(&store, &g, gamma0);
        let w = mbfgs_iterative(&(DMatrix::identity(n, n) * gamma0), &store);
        let err = (&d + &w * &g).norm() / (g.norm() * w.norm());
        worst = worst.max(err);
    }
    SuiteReport {
        name: "two-loop-vs-dense",
        trials,
        worst,
        tol: 1e-10,
    }
}

/// Modified secant equation of the dense direct update: `B' s = ybar`.
pub fn secant_property(trials: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x73656361);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let n = rng.gen_range(2..=20);
        let b = rand_spd(n, &mut rng);
        let pair = rand_pair(n, &mut rng);
        let b_new = hessian_update_dense(&b, &pair);
        let err = (&b_new * &pair.s - &pair.ybar).norm() / pair.ybar.norm();
        worst = worst.max(err);
    }
    SuiteReport {
        name: "secant-property",
        trials,
        worst,
        tol: 1e-10,
    }
}

/// Runs every suite with a common trial count and seed.
pub fn run_all(trials: usize, max_n: usize, max_m: usize, seed: u64) -> Vec<SuiteReport> {
    let mut reports = vec![compact_vs_iterative(trials, max_n.min(50), max_m.min(10), seed)];
    reports.push(theorem2_parallel(trials, seed));
    reports.extend(theorem3_aggregation(trials, max_n.min(12), max_m.min(6), seed));
    reports.push(two_loop_vs_dense(trials, seed));
    reports.push(secant_property(trials, seed));
    reports
}
