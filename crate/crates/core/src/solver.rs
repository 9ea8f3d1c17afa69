//! The outer minimization loop: Armijo backtracking line search, curvature
//! pair generation, the three-case store maintenance for the aggregated
//! variant, and the stopping rule `‖g‖_∞ ≤ tol · max(1, ‖g0‖_∞)`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::aggregation::aggregate_pairs;
use crate::linalg::{chol_lower, gram_append, solve_lower, solve_lower_transpose, DependenceReport};
use crate::qn::{
    hessian_update_dense, modified_displacement, two_loop_direction, CurvaturePair,
    DisplacementStore, QnError,
};

/// Which update scheme drives the solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Dense direct-Hessian updates, direction from a Cholesky solve.
    FullMBFGS,
    /// Limited memory with plain FIFO eviction.
    MLBFGS,
    /// Limited memory with dependence detection and displacement aggregation.
    AggMBFGS,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::FullMBFGS => "mbfgs",
            Variant::MLBFGS => "mlbfgs",
            Variant::AggMBFGS => "agg",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mbfgs" | "full" => Ok(Variant::FullMBFGS),
            "mlbfgs" => Ok(Variant::MLBFGS),
            "agg" | "aggmbfgs" => Ok(Variant::AggMBFGS),
            other => Err(format!("unknown variant `{other}` (expected mbfgs|mlbfgs|agg)")),
        }
    }
}

/// Solver parameters. Defaults follow the experimental protocol: gradient
/// tolerance 1e-6, iteration cap 1e5, identity initial Hessian, memory 5.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub variant: Variant,
    /// Limited-memory capacity (3..=10 is the sensible range).
    pub memory: usize,
    pub grad_tol: f64,
    pub max_iters: usize,
    /// Backtracking contraction factor in (0,1).
    pub ls_contraction: f64,
    /// Sufficient-decrease constant in (0,1).
    pub ls_sufficient: f64,
    pub ls_max_backtracks: usize,
    /// Initial inverse-Hessian scale: W0 = gamma0·I.
    pub gamma0: f64,
    /// Divide the curvature correction by ‖g‖ (guarantees positivity).
    pub lifukushima_scaling: bool,
    /// Barzilai-Borwein initial scaling for the plain limited-memory
    /// variant. The aggregated variant ignores it: aggregation equivalence
    /// is stated against a fixed base matrix.
    pub bb_scaling: bool,
    /// Reserved for randomized tie-breaking; the core path is deterministic.
    pub seed: u64,
    pub collect_trace: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            variant: Variant::AggMBFGS,
            memory: 5,
            grad_tol: 1e-6,
            max_iters: 100_000,
            ls_contraction: 0.5,
            ls_sufficient: 1e-4,
            ls_max_backtracks: 60,
            gamma0: 1.0,
            lifukushima_scaling: false,
            bb_scaling: false,
            seed: 0,
            collect_trace: false,
        }
    }
}

impl SolverConfig {
    pub fn with_variant(variant: Variant) -> Self {
        SolverConfig {
            variant,
            ..SolverConfig::default()
        }
    }

    fn validate(&self) {
        assert!(self.memory >= 1, "memory must be positive");
        assert!(self.grad_tol > 0.0);
        assert!(
            self.ls_contraction > 0.0 && self.ls_contraction < 1.0,
            "contraction must lie in (0,1)"
        );
        assert!(
            self.ls_sufficient > 0.0 && self.ls_sufficient < 1.0,
            "sufficient-decrease constant must lie in (0,1)"
        );
        assert!(self.gamma0 > 0.0);
    }
}

/// Terminal state of a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    IterLimit,
    LineSearchFailure,
}

impl SolveStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolveStatus::Converged => "Converged",
            SolveStatus::IterLimit => "IterLimit",
            SolveStatus::LineSearchFailure => "LineSearchFailure",
        }
    }
}

/// What happened to the store on one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoreEvent {
    Append,
    ParallelDrop,
    Aggregate,
    FifoEvict,
    SkipDegenerate,
}

/// Optional per-iteration log record.
#[derive(Debug, Clone)]
pub struct IterationTrace {
    pub k: usize,
    pub f: f64,
    pub grad_inf_norm: f64,
    pub alpha: f64,
    pub store_size: usize,
    pub event: StoreEvent,
}

/// Final iterate plus the exact counters of the run.
#[derive(Debug, Clone)]
pub struct SolveResult {
    pub x_final: DVector<f64>,
    pub f_final: f64,
    pub grad_inf_norm: f64,
    pub iters: usize,
    pub func_evals: usize,
    pub grad_evals: usize,
    pub agg_count: usize,
    pub parallel_drops: usize,
    pub fifo_evictions: usize,
    pub status: SolveStatus,
    pub trace: Vec<IterationTrace>,
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("search direction is not a descent direction (g'd = {0:.3e})")]
    NotDescent(f64),
    #[error("line search failed after {0} backtracks")]
    LineSearchFailure(usize),
}

/// The problem interface the solver consumes.
pub trait Objective {
    fn dim(&self) -> usize;
    fn x0(&self) -> DVector<f64>;
    fn eval(&self, x: &DVector<f64>) -> f64;
    fn grad(&self, x: &DVector<f64>) -> DVector<f64>;
}

/// Closure-backed objective, mostly for tests and custom problems.
pub struct FnObjective<F, G> {
    pub dim: usize,
    pub x0: DVector<f64>,
    pub f: F,
    pub g: G,
}

impl<F, G> Objective for FnObjective<F, G>
where
    F: Fn(&DVector<f64>) -> f64,
    G: Fn(&DVector<f64>) -> DVector<f64>,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn x0(&self) -> DVector<f64> {
        self.x0.clone()
    }
    fn eval(&self, x: &DVector<f64>) -> f64 {
        (self.f)(x)
    }
    fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.g)(x)
    }
}

/// One accepted line-search step.
#[derive(Debug, Clone, Copy)]
pub struct LineSearchStep {
    pub alpha: f64,
    pub f_new: f64,
    pub evals: usize,
}

/// Backtracking line search: the smallest j ≥ 0 with
/// `f(x + τ^j d) ≤ f(x) + c·τ^j·gᵀd` gives the step `α = τ^j`.
pub fn armijo_backtracking<F>(
    objective: F,
    x: &DVector<f64>,
    d: &DVector<f64>,
    g: &DVector<f64>,
    f_x: f64,
    cfg: &SolverConfig,
) -> Result<LineSearchStep, SolverError>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let gd = g.dot(d);
    if gd >= 0.0 {
        return Err(SolverError::NotDescent(gd));
    }
    let mut alpha = 1.0;
    for j in 0..=cfg.ls_max_backtracks {
        let trial = x + d * alpha;
        let f_new = objective(&trial);
        if f_new <= f_x + cfg.ls_sufficient * alpha * gd {
            return Ok(LineSearchStep {
                alpha,
                f_new,
                evals: j + 1,
            });
        }
        alpha *= cfg.ls_contraction;
    }
    Err(SolverError::LineSearchFailure(cfg.ls_max_backtracks))
}

/// Three-case store maintenance for the aggregated variant: append when the
/// new displacement is independent (evicting the oldest pair at capacity),
/// drop the previous pair when it is parallel to the new one, and run the
/// aggregation transform when an interior pair becomes dependent. Any
/// numerical failure degrades to FIFO eviction of the affected pair.
pub fn step_store_update(
    store: &mut DisplacementStore,
    pair_new: CurvaturePair,
    gamma0: f64,
) -> StoreEvent {
    if store.gram().is_none() {
        let _ = store.refresh_gram();
    }
    let columns = store.s_columns();
    let report = match store.gram() {
        Some(gram) => gram_append(gram, &columns, &pair_new.s),
        None => {
            // Factor unavailable even after a rebuild: degrade to FIFO.
            if store.len() >= store.capacity() {
                store.pairs_mut().remove(0);
            }
            store.pairs_mut().push(pair_new);
            if store.refresh_gram().is_err() {
                fifo_recover(store);
            }
            return StoreEvent::FifoEvict;
        }
    };

    match report {
        Ok(DependenceReport::Independent { factor }) => {
            if store.len() < store.capacity() {
                store.push_with_factor(pair_new, factor);
                StoreEvent::Append
            } else {
                // Newest-first factor: evicting the oldest pair keeps the
                // leading principal block valid, no rebuild needed.
                let m = factor.len();
                let trimmed = crate::linalg::GramCholesky::from_leading_block(&factor, m - 1);
                store.pairs_mut().remove(0);
                store.push_with_factor(pair_new, trimmed);
                StoreEvent::FifoEvict
            }
        }
        Ok(DependenceReport::ParallelNewest { .. }) => {
            // Case 2: the stored newest is subsumed by the incoming pair.
            let deleted = store.len() - 1;
            let factor = factor_delete_append(store, deleted, &pair_new.s);
            store.pairs_mut().remove(deleted);
            store.pairs_mut().push(pair_new);
            store.set_gram(factor);
            if store.gram().is_none() && store.refresh_gram().is_err() {
                fifo_recover(store);
            }
            StoreEvent::ParallelDrop
        }
        Ok(DependenceReport::DependentAt { store_index, sigma }) => {
            // The report's coefficients are ordered newest-first over
            // [s_new, stored newest, ...]; the aggregation wants them
            // oldest-first over the retained newer pairs plus the new one.
            let mut candidate = store.pairs().to_vec();
            candidate.push(pair_new.clone());
            let mut sigma_oldest = DVector::zeros(sigma.len());
            for (k, value) in sigma.iter().enumerate() {
                sigma_oldest[sigma.len() - 1 - k] = *value;
            }
            match aggregate_pairs(&candidate, store_index, &sigma_oldest, gamma0) {
                Ok(new_pairs) => {
                    // The s-columns of the result are the stored ones minus
                    // the dependent plus the new, so the factor is patched by
                    // one deletion repair and one bordered append.
                    let factor = factor_delete_append(store, store_index, &pair_new.s);
                    store.set_state(new_pairs, factor);
                    if store.gram().is_none() && store.refresh_gram().is_err() {
                        fifo_recover(store);
                    }
                    StoreEvent::Aggregate
                }
                Err(_) => {
                    // Degrade: evict the dependent pair without rewriting.
                    let factor = factor_delete_append(store, store_index, &pair_new.s);
                    store.pairs_mut().remove(store_index);
                    store.pairs_mut().push(pair_new);
                    store.set_gram(factor);
                    if store.gram().is_none() && store.refresh_gram().is_err() {
                        fifo_recover(store);
                    }
                    StoreEvent::FifoEvict
                }
            }
        }
        Err(_) => {
            // Detection itself failed (corrupt factor or zero step): fall
            // back to a plain FIFO append and rebuild the factor.
            if store.len() >= store.capacity() {
                store.pairs_mut().remove(0);
            }
            store.pairs_mut().push(pair_new);
            if store.refresh_gram().is_err() {
                fifo_recover(store);
            }
            StoreEvent::FifoEvict
        }
    }
}

/// Factor for "delete stored column, then append the new displacement":
/// Givens-repairs the deletion and re-runs the bordered downdate for the
/// append, so pivots certified when the columns entered the store are never
/// re-derived from scratch. `None` means the caller must fall back to a
/// from-scratch rebuild.
fn factor_delete_append(
    store: &DisplacementStore,
    delete_index: usize,
    s_new: &DVector<f64>,
) -> Option<crate::linalg::GramCholesky> {
    let gram = store.gram()?;
    let repaired = gram.with_column_deleted(delete_index).ok()?;
    let columns = store.s_columns().remove_column(delete_index);
    match gram_append(&repaired, &columns, s_new) {
        Ok(DependenceReport::Independent { factor }) => Some(factor),
        _ => None,
    }
}

/// Last-resort recovery: drop oldest pairs until the Gram factor builds
/// again. Terminates because a single-column factor of a nonzero
/// displacement always succeeds.
fn fifo_recover(store: &mut DisplacementStore) {
    while store.len() > 1 {
        store.pairs_mut().remove(0);
        if store.refresh_gram().is_ok() {
            return;
        }
    }
    let _ = store.refresh_gram();
}

/// Runs the configured variant until the gradient test
/// `‖g‖_∞ ≤ grad_tol · max(1, ‖g0‖_∞)` holds, the iteration cap is reached,
/// or the line search fails.
pub fn minimize(problem: &dyn Objective, cfg: &SolverConfig) -> SolveResult {
    cfg.validate();
    let mut x = problem.x0();
    let mut f = problem.eval(&x);
    let mut g = problem.grad(&x);
    let mut func_evals = 1usize;
    let mut grad_evals = 1usize;
    let g0_inf = g.amax();
    let threshold = cfg.grad_tol * g0_inf.max(1.0);

    let n = problem.dim();
    let mut store = DisplacementStore::new(cfg.memory);
    let mut b_dense = if cfg.variant == Variant::FullMBFGS {
        Some(DMatrix::identity(n, n) / cfg.gamma0)
    } else {
        None
    };

    let mut agg_count = 0usize;
    let mut parallel_drops = 0usize;
    let mut fifo_evictions = 0usize;
    let mut trace = Vec::new();
    let mut status = SolveStatus::IterLimit;
    let mut iters = 0usize;

    for k in 0..cfg.max_iters {
        if g.amax() <= threshold {
            status = SolveStatus::Converged;
            break;
        }

        let d = match &b_dense {
            Some(b) => match dense_direction(b, &g) {
                Some(d) => d,
                None => {
                    // Factorization lost positive definiteness to rounding:
                    // reset the model and take a gradient step.
                    b_dense = Some(DMatrix::identity(n, n) / cfg.gamma0);
                    -&g
                }
            },
            None => {
                let gamma = if cfg.bb_scaling && cfg.variant == Variant::MLBFGS {
                    store
                        .pairs()
                        .last()
                        .map(|p| p.s.dot(&p.ybar) / p.ybar.norm_squared())
                        .filter(|g| g.is_finite() && *g > 0.0)
                        .unwrap_or(cfg.gamma0)
                } else {
                    cfg.gamma0
                };
                two_loop_direction(&store, &g, gamma)
            }
        };

        let step = match armijo_backtracking(|p| problem.eval(p), &x, &d, &g, f, cfg) {
            Ok(step) => step,
            Err(_) => {
                status = SolveStatus::LineSearchFailure;
                iters = k;
                break;
            }
        };
        func_evals += step.evals;

        let x_new = &x + &d * step.alpha;
        let g_new = problem.grad(&x_new);
        grad_evals += 1;
        let s = &x_new - &x;
        let y = &g_new - &g;

        let event = match modified_displacement(s, y, &g, cfg.lifukushima_scaling) {
            Ok(pair) => match cfg.variant {
                Variant::FullMBFGS => {
                    let b = b_dense.take().expect("dense state");
                    b_dense = Some(hessian_update_dense(&b, &pair));
                    StoreEvent::Append
                }
                Variant::MLBFGS => {
                    if store.len() == store.capacity() {
                        store.pairs_mut().remove(0);
                        store.pairs_mut().push(pair);
                        StoreEvent::FifoEvict
                    } else {
                        store.pairs_mut().push(pair);
                        StoreEvent::Append
                    }
                }
                Variant::AggMBFGS => step_store_update(&mut store, pair, cfg.gamma0),
            },
            Err(QnError::DegenerateCurvature(..)) | Err(QnError::ZeroDisplacement(_)) => {
                StoreEvent::SkipDegenerate
            }
            Err(QnError::SingularBbar(_)) => unreachable!("not raised by pair construction"),
        };
        match event {
            StoreEvent::Aggregate => agg_count += 1,
            StoreEvent::ParallelDrop => parallel_drops += 1,
            StoreEvent::FifoEvict => fifo_evictions += 1,
            StoreEvent::Append | StoreEvent::SkipDegenerate => {}
        }

        x = x_new;
        f = step.f_new;
        g = g_new;
        iters = k + 1;

        if cfg.collect_trace {
            trace.push(IterationTrace {
                k: iters,
                f,
                grad_inf_norm: g.amax(),
                alpha: step.alpha,
                store_size: store.len(),
                event,
            });
        }
    }

    if status == SolveStatus::IterLimit && g.amax() <= threshold {
        // Converged exactly at the iteration cap.
        status = SolveStatus::Converged;
    }

    SolveResult {
        grad_inf_norm: g.amax(),
        x_final: x,
        f_final: f,
        iters,
        func_evals,
        grad_evals,
        agg_count,
        parallel_drops,
        fifo_evictions,
        status,
        trace,
    }
}

/// Direction for the dense variant: solve `B d = −g` by Cholesky.
fn dense_direction(b: &DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    let l = chol_lower(b).ok()?;
    let rhs = DMatrix::from_column_slice(g.len(), 1, g.as_slice());
    let sol = solve_lower_transpose(&l, &solve_lower(&l, &rhs));
    Some(-DVector::from_column_slice(sol.column(0).as_slice()))
}
