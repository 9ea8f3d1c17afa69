//! Curvature pairs built on the modified secant equation, the displacement
//! store, and the inverse-Hessian machinery: iterative and compact forms of
//! the modified BFGS update, the two-loop recursion, dense direct-Hessian
//! updates, and prefix applications of the direct Hessian.
//!
//! The modified update replaces the raw gradient displacement `y` by
//! `ybar = y + r‖g‖s` with `r = 1 + max(0, −yᵀs/sᵀs)`, which restores
//! positive curvature on nonconvex objectives.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{
    rebuild_factor, solve_lower, solve_lower_transpose, GramCholesky, LinalgError,
    MIN_DISPLACEMENT_NORM,
};

/// Curvature pairs whose normalized curvature `sᵀybar / (‖s‖‖ybar‖)` falls at
/// or below this are rejected so the store never loses positive definiteness.
pub const CURVATURE_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum QnError {
    #[error("curvature s'ybar = {0:.3e} is too small relative to ‖s‖‖ybar‖ = {1:.3e}")]
    DegenerateCurvature(f64, f64),
    #[error("displacement norm {0:.3e} is below machine scale")]
    ZeroDisplacement(f64),
    #[error("triangular factor Bbar has a non-positive diagonal at {0}")]
    SingularBbar(usize),
}

/// One stored curvature record: iterate displacement `s`, raw gradient
/// displacement `y`, modified displacement `ybar = y + r·gnorm·s`, and the
/// curvature reciprocal `rho = 1/(sᵀybar)`.
#[derive(Debug, Clone)]
pub struct CurvaturePair {
    pub s: DVector<f64>,
    pub y: DVector<f64>,
    pub ybar: DVector<f64>,
    pub r: f64,
    pub gnorm: f64,
    pub rho: f64,
}

impl CurvaturePair {
    /// Curvature product `sᵀybar` (always positive for a stored pair).
    pub fn curvature(&self) -> f64 {
        1.0 / self.rho
    }
}

/// Builds the modified curvature pair for a step with displacement `s`,
/// gradient displacement `y`, and gradient `g` at the step's origin.
///
/// With `lifukushima_scaling` the correction term is divided by `‖g‖`
/// (so `ybar = y + (‖g‖ + max(0, −yᵀs/sᵀs)/‖g‖·‖g‖)… = y + (r‖g‖)s` with the
/// max term made scale-free), which provably keeps `sᵀybar > 0`; the plain
/// form applies the formula literally and relies on the curvature guard.
pub fn modified_displacement(
    s: DVector<f64>,
    y: DVector<f64>,
    g: &DVector<f64>,
    lifukushima_scaling: bool,
) -> Result<CurvaturePair, QnError> {
    let s_norm_sq = s.norm_squared();
    let s_norm = s_norm_sq.sqrt();
    if !(s_norm.is_finite() && s_norm > MIN_DISPLACEMENT_NORM) {
        return Err(QnError::ZeroDisplacement(s_norm));
    }
    let gnorm = g.norm();
    let ys = y.dot(&s);
    let deficit = (-ys / s_norm_sq).max(0.0);
    let r = if lifukushima_scaling && gnorm > 0.0 {
        1.0 + deficit / gnorm
    } else {
        1.0 + deficit
    };
    let ybar = &y + &s * (r * gnorm);
    let curv = s.dot(&ybar);
    let ybar_norm = ybar.norm();
    if curv <= CURVATURE_TOL * s_norm * ybar_norm {
        return Err(QnError::DegenerateCurvature(curv, s_norm * ybar_norm));
    }
    Ok(CurvaturePair {
        s,
        y,
        ybar,
        r,
        gnorm,
        rho: 1.0 / curv,
    })
}

/// Ordered window of curvature pairs, oldest first, with the Gram factor of
/// the `s`-columns used for dependence detection.
///
/// The factor is optional: the aggregated variant maintains it, the plain
/// limited-memory variant does not need it, and transient stores used inside
/// the aggregation math may briefly hold dependent columns.
#[derive(Debug, Clone)]
pub struct DisplacementStore {
    pairs: Vec<CurvaturePair>,
    m_max: usize,
    gram: Option<GramCholesky>,
}

impl DisplacementStore {
    pub fn new(m_max: usize) -> Self {
        assert!(m_max >= 1, "memory capacity must be at least 1");
        DisplacementStore {
            pairs: Vec::new(),
            m_max,
            gram: Some(GramCholesky::empty()),
        }
    }

    /// Builds a store and its Gram factor; fails if the displacement columns
    /// are linearly dependent.
    pub fn from_pairs(pairs: Vec<CurvaturePair>, m_max: usize) -> Result<Self, LinalgError> {
        let mut store = Self::from_pairs_unchecked(pairs, m_max);
        store.gram = Some(rebuild_factor(&store.s_columns())?);
        Ok(store)
    }

    /// Builds a store without a Gram factor. Intended for oracle tests and
    /// for the transient state inside aggregation, where the columns may be
    /// dependent on purpose.
    pub fn from_pairs_unchecked(pairs: Vec<CurvaturePair>, m_max: usize) -> Self {
        assert!(m_max >= 1, "memory capacity must be at least 1");
        DisplacementStore {
            pairs,
            m_max,
            gram: None,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.m_max
    }

    pub fn pairs(&self) -> &[CurvaturePair] {
        &self.pairs
    }

    pub fn gram(&self) -> Option<&GramCholesky> {
        self.gram.as_ref()
    }

    /// Iterate displacements as columns, oldest first (n×m).
    pub fn s_columns(&self) -> DMatrix<f64> {
        columns_of(&self.pairs, |p| &p.s)
    }

    /// Modified gradient displacements as columns, oldest first (n×m).
    pub fn ybar_columns(&self) -> DMatrix<f64> {
        columns_of(&self.pairs, |p| &p.ybar)
    }

    pub(crate) fn set_state(&mut self, pairs: Vec<CurvaturePair>, gram: Option<GramCholesky>) {
        self.pairs = pairs;
        self.gram = gram;
    }

    pub(crate) fn set_gram(&mut self, gram: Option<GramCholesky>) {
        self.gram = gram;
    }

    pub(crate) fn push_with_factor(&mut self, pair: CurvaturePair, gram: GramCholesky) {
        self.pairs.push(pair);
        self.gram = Some(gram);
    }

    pub(crate) fn pairs_mut(&mut self) -> &mut Vec<CurvaturePair> {
        &mut self.pairs
    }

    /// Rebuilds the Gram factor from the current columns.
    pub fn refresh_gram(&mut self) -> Result<(), LinalgError> {
        self.gram = Some(rebuild_factor(&self.s_columns())?);
        Ok(())
    }
}

fn columns_of<F>(pairs: &[CurvaturePair], pick: F) -> DMatrix<f64>
where
    F: Fn(&CurvaturePair) -> &DVector<f64>,
{
    if pairs.is_empty() {
        return DMatrix::zeros(0, 0);
    }
    let cols: Vec<_> = pairs.iter().map(|p| pick(p).clone()).collect();
    DMatrix::from_columns(&cols)
}

/// Triangular pieces of the compact representation: `Bbar` upper-triangular
/// with `(i,j) = s_iᵀybar_j` for `i ≤ j`, `Cbar` its diagonal, and the full
/// product `SᵀYbar`.
#[derive(Debug, Clone)]
pub struct CompactFactors {
    pub bbar: DMatrix<f64>,
    pub cbar: DMatrix<f64>,
    pub sty: DMatrix<f64>,
}

/// Assembles the compact factors from a store.
pub fn compact_factors(store: &DisplacementStore) -> CompactFactors {
    let m = store.len();
    let pairs = store.pairs();
    let mut sty = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            sty[(i, j)] = pairs[i].s.dot(&pairs[j].ybar);
        }
    }
    let mut bbar = DMatrix::zeros(m, m);
    let mut cbar = DMatrix::zeros(m, m);
    for i in 0..m {
        cbar[(i, i)] = sty[(i, i)];
        for j in i..m {
            bbar[(i, j)] = sty[(i, j)];
        }
    }
    CompactFactors { bbar, cbar, sty }
}

/// Applies the stored updates one by one: `W ← EᵀWE + ρ ssᵀ` with
/// `E = I − ρ ybar sᵀ`, oldest pair first. The result is symmetrized.
pub fn mbfgs_iterative(w0: &DMatrix<f64>, store: &DisplacementStore) -> DMatrix<f64> {
    let mut w = w0.clone();
    for pair in store.pairs() {
        let n = w.nrows();
        let e = DMatrix::identity(n, n) - (&pair.ybar * pair.s.transpose()) * pair.rho;
        w = e.transpose() * w * &e + (&pair.s * pair.s.transpose()) * pair.rho;
    }
    symmetrize(w)
}

/// Compact form of the stacked updates:
/// `W̄ = W + [S WȲ] K [S WȲ]ᵀ` with the 2×2 block `K` built from `Bbar`,
/// `Cbar`, and `ȲᵀWȲ`. Matches [`mbfgs_iterative`] to rounding.
pub fn mbfgs_compact(w0: &DMatrix<f64>, store: &DisplacementStore) -> Result<DMatrix<f64>, QnError> {
    let m = store.len();
    if m == 0 {
        return Ok(w0.clone());
    }
    let f = compact_factors(store);
    for i in 0..m {
        if f.bbar[(i, i)] <= 0.0 {
            return Err(QnError::SingularBbar(i + 1));
        }
    }
    let s = store.s_columns();
    let ybar = store.ybar_columns();
    let w_ybar = w0 * &ybar;
    let mid = &f.cbar + ybar.transpose() * &w_ybar;

    // With U = [S, WȲ] and K the 2×2 block of Bbar^{-T}(Cbar + ȲᵀWȲ)Bbar^{-1},
    // −Bbar^{-T}, −Bbar^{-1}, 0, the product U K Uᵀ expands to
    //   S Bbar^{-T} (Cbar + ȲᵀWȲ) Bbar^{-1} Sᵀ − S Bbar^{-T} ȲᵀW − WȲ Bbar^{-1} Sᵀ.
    // All Bbar applications are triangular solves against lbar = Bbarᵀ.
    let lbar = f.bbar.transpose();
    let inv_b_st = solve_lower_transpose(&lbar, &s.transpose()); // Bbar^{-1} Sᵀ
    let inv_bt_ytw = solve_lower(&lbar, &w_ybar.transpose()); // Bbar^{-T} ȲᵀW
    let k11_st = solve_lower(&lbar, &(&mid * &inv_b_st)); // Bbar^{-T} mid Bbar^{-1} Sᵀ

    let w_bar = w0 + &s * k11_st - &s * inv_bt_ytw - &w_ybar * inv_b_st;
    Ok(symmetrize(w_bar))
}

/// Two-loop recursion: returns `d = −W g` for `W` the inverse Hessian built
/// from `gamma0·I` and the stored pairs, in O(mn) time.
pub fn two_loop_direction(store: &DisplacementStore, g: &DVector<f64>, gamma0: f64) -> DVector<f64> {
    -apply_inverse_hessian(store.pairs(), g, gamma0)
}

/// Applies the limited-memory inverse Hessian `W = MBFGS(gamma0·I, pairs)` to
/// an arbitrary vector by the two-loop recursion.
pub fn apply_inverse_hessian(pairs: &[CurvaturePair], v: &DVector<f64>, gamma0: f64) -> DVector<f64> {
    let m = pairs.len();
    let mut q = v.clone();
    let mut alpha = vec![0.0; m];
    for (i, pair) in pairs.iter().enumerate().rev() {
        alpha[i] = pair.rho * pair.s.dot(&q);
        q.axpy(-alpha[i], &pair.ybar, 1.0);
    }
    let mut r = q * gamma0;
    for (i, pair) in pairs.iter().enumerate() {
        let beta = pair.rho * pair.ybar.dot(&r);
        r.axpy(alpha[i] - beta, &pair.s, 1.0);
    }
    r
}

/// One modified BFGS update of the direct Hessian approximation:
/// `B' = B − (Bs sᵀB)/(sᵀBs) + (ybar ybarᵀ)/(ybarᵀs)`.
/// Satisfies the modified secant equation `B' s = ybar`.
pub fn hessian_update_dense(b: &DMatrix<f64>, pair: &CurvaturePair) -> DMatrix<f64> {
    let bs = b * &pair.s;
    let sbs = pair.s.dot(&bs);
    let updated = b - (&bs * bs.transpose()) / sbs
        + (&pair.ybar * pair.ybar.transpose()) * pair.rho;
    symmetrize(updated)
}

/// Applies the direct Hessian of the leading `prefix_len` stored pairs
/// (folded from `B0 = (1/gamma0)·I`) to the columns of `v`.
///
/// Uses the compact representation of the stacked direct updates, so the
/// cost is O(prefix_len²·n) instead of a dense n×n fold; the dense fold is
/// the test oracle.
pub fn apply_prefix_hessian(
    store: &DisplacementStore,
    prefix_len: usize,
    v: &DMatrix<f64>,
    gamma0: f64,
) -> DMatrix<f64> {
    apply_direct_hessian(&store.pairs()[..prefix_len], v, gamma0)
}

/// Compact application of the direct Hessian folded over `pairs` from
/// `B0 = (1/gamma0)·I`:
/// `B = B0 − [B0S Ȳ] [[SᵀB0S, Lo],[Loᵀ, −D]]⁻¹ [SᵀB0; Ȳᵀ]`
/// with `Lo` the strictly lower triangle of `SᵀȲ` and `D` its diagonal.
pub fn apply_direct_hessian(pairs: &[CurvaturePair], v: &DMatrix<f64>, gamma0: f64) -> DMatrix<f64> {
    let k = pairs.len();
    let b0_scale = 1.0 / gamma0;
    if k == 0 {
        return v * b0_scale;
    }
    let s = columns_of(pairs, |p| &p.s);
    let ybar = columns_of(pairs, |p| &p.ybar);
    let sty = s.transpose() * &ybar;
    let mut middle = DMatrix::zeros(2 * k, 2 * k);
    let sts = s.transpose() * &s;
    for i in 0..k {
        for j in 0..k {
            middle[(i, j)] = b0_scale * sts[(i, j)];
            if i > j {
                middle[(i, k + j)] = sty[(i, j)];
                middle[(k + j, i)] = sty[(i, j)];
            }
        }
        middle[(k + i, k + i)] = -sty[(i, i)];
    }
    let mut rhs = DMatrix::zeros(2 * k, v.ncols());
    let stv = s.transpose() * v;
    let ytv = ybar.transpose() * v;
    rhs.view_mut((0, 0), (k, v.ncols()))
        .copy_from(&(&stv * b0_scale));
    rhs.view_mut((k, 0), (k, v.ncols())).copy_from(&ytv);
    let solved = middle
        .full_piv_lu()
        .solve(&rhs)
        .expect("compact middle matrix is invertible for valid pairs");
    let top = solved.view((0, 0), (k, v.ncols())).into_owned();
    let bottom = solved.view((k, 0), (k, v.ncols())).into_owned();
    v * b0_scale - (&s * top) * b0_scale - &ybar * bottom
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}
