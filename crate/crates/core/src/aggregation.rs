//! Displacement aggregation: when a stored iterate displacement is a linear
//! combination of newer ones, the pair can be dropped without changing the
//! quasi-Newton matrix, provided the retained gradient displacements are
//! rewritten as
//!
//! `Yhat = W⁻¹ S [A 0] + ybar0 [b; 0]ᵀ + Ybar`
//!
//! for a coefficient matrix `A` and vector `b` chosen so the inner products
//! `triu(SᵀYhat)` match `triu(SᵀYbar)` and the quadratic matrix equation
//! `AᵀMA + ΨᵀA + AᵀΨ − ϖϖᵀ = 0` holds (with `M = SᵀW⁻¹S` and `Ψ`, `ϖ` built
//! from the dropped pair). `b` has a closed form; `A` is assembled column by
//! column in reverse, each column solving a small affine system plus one
//! scalar quadratic along a constrained null-space direction.
//!
//! Everything here works on the pairs *newer* than the dependent one; the
//! base matrix `W` is the inverse Hessian composed from the pairs older than
//! it, applied through the compact forms in [`crate::qn`].

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{
    chol_lower, col_piv_qr_rank, null_space_vector_with_zero_prefix, solve_lower,
    solve_lower_transpose, LinalgError,
};
use crate::qn::{apply_direct_hessian, apply_inverse_hessian, CurvaturePair, DisplacementStore};

/// Rank threshold for the span basis selection inside the column recursion.
const SPAN_RANK_TOL: f64 = 1e-10;

/// Relative slack allowed on a lambda-quadratic discriminant before the
/// instance is declared infeasible; small negatives are clamped to zero.
const DISCRIMINANT_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum AggregationError {
    #[error("lambda quadratic discriminant {disc:.3e} is negative beyond tolerance")]
    NegativeDiscriminant { disc: f64 },
    #[error("aggregation inputs are inconsistent: {0}")]
    InvalidInputs(&'static str),
    #[error("aggregated store failed validation: {0}")]
    ValidationFailed(&'static str),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Everything the transform needs about one dependence event: the dropped
/// pair `(s0, ybar0, rho0)`, the retained newer pairs as columns, the
/// combination coefficients, and the action of the base `W` (precomputed as
/// `W⁻¹S` and `chi0 = 1 + rho0·‖ybar0‖²_W` by the caller).
#[derive(Debug, Clone)]
pub struct AggregationInputs {
    pub sigma: DVector<f64>,
    pub s0: DVector<f64>,
    pub ybar0: DVector<f64>,
    pub rho0: f64,
    pub s_mat: DMatrix<f64>,
    pub ybar_mat: DMatrix<f64>,
    pub rho: DVector<f64>,
    pub w_inv_s: DMatrix<f64>,
    pub chi0: f64,
}

/// Intermediates of the transform, kept around so tests can check the
/// reconstruction identities directly.
#[derive(Debug, Clone)]
pub struct AggregationWorkspace {
    /// `M = Sᵀ W⁻¹ S`, symmetric positive definite.
    pub m_mat: DMatrix<f64>,
    /// Lower Cholesky factor of `M`.
    pub m_chol: DMatrix<f64>,
    /// Lower-triangular `L` with `LᵀL = M⁻¹` (the inverse of `m_chol`).
    pub l_fac: DMatrix<f64>,
    pub chi0: f64,
    pub b: DVector<f64>,
    /// The upper-triangular inner-product matrix without its last column,
    /// m×(m−1).
    pub ubar: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    pub varpi: DVector<f64>,
    /// `ϖϖᵀ + ΨᵀM⁻¹Ψ`; every inner product the column recursion consumes is
    /// an entry of this matrix.
    pub q_gram: DMatrix<f64>,
    /// A factor `Z` with `ZᵀZ = q_gram` (by symmetric eigendecomposition).
    pub z: DMatrix<f64>,
    /// `Sᵀ ybar0` and `Sᵀ Ybar`, reused across columns.
    pub sty0: DVector<f64>,
    pub sty: DMatrix<f64>,
    /// Span coefficients and quadratic roots per column.
    pub beta: Vec<Option<DVector<f64>>>,
    pub lambda: Vec<f64>,
}

/// `b = −rho0 (Sᵀ Ybar_{1:m−1} − Ubar)ᵀ sigma`.
pub fn compute_b(
    s_mat: &DMatrix<f64>,
    ybar_mat: &DMatrix<f64>,
    ubar: &DMatrix<f64>,
    sigma: &DVector<f64>,
    rho0: f64,
) -> DVector<f64> {
    let m = s_mat.ncols();
    if m <= 1 {
        return DVector::zeros(0);
    }
    let sty_head = s_mat.transpose() * ybar_mat.columns(0, m - 1);
    ((sty_head - ubar).transpose() * sigma) * (-rho0)
}

/// The upper-triangular inner products `s_iᵀ ybar_j` (i ≤ j) without the
/// last column: m×(m−1).
pub fn build_ubar(sty: &DMatrix<f64>) -> DMatrix<f64> {
    let m = sty.nrows();
    let w = m.saturating_sub(1);
    let mut ubar = DMatrix::zeros(m, w);
    for j in 0..w {
        for i in 0..=j {
            ubar[(i, j)] = sty[(i, j)];
        }
    }
    ubar
}

/// Builds the workspace shared by the column recursion.
pub fn build_workspace(
    inputs: &AggregationInputs,
) -> Result<AggregationWorkspace, AggregationError> {
    let m = inputs.s_mat.ncols();
    let m_mat = symmetrize(inputs.s_mat.transpose() * &inputs.w_inv_s);
    let m_chol =
        chol_lower(&m_mat).map_err(|p| AggregationError::Linalg(LinalgError::NotSpd(p)))?;
    // L = m_chol⁻¹ is lower-triangular with LᵀL = M⁻¹.
    let l_fac = solve_lower(&m_chol, &DMatrix::identity(m, m));

    let sty0 = &inputs.s_mat.transpose() * &inputs.ybar0;
    let sty = inputs.s_mat.transpose() * &inputs.ybar_mat;
    let ubar = build_ubar(&sty);
    let b = compute_b(
        &inputs.s_mat,
        &inputs.ybar_mat,
        &ubar,
        &inputs.sigma,
        inputs.rho0,
    );

    let w = m.saturating_sub(1);
    let psi = if w == 0 {
        DMatrix::zeros(m, 0)
    } else {
        &sty0 * b.transpose() + sty.columns(0, w) - &ubar
    };
    let varpi = &b / inputs.rho0.sqrt();
    let minv_psi = solve_lower_transpose(&m_chol, &solve_lower(&m_chol, &psi));
    let q_gram = symmetrize(&varpi * varpi.transpose() + psi.transpose() * minv_psi);
    let z = psd_factor(&q_gram);

    Ok(AggregationWorkspace {
        m_mat,
        m_chol,
        l_fac,
        chi0: inputs.chi0,
        b,
        ubar,
        psi,
        varpi,
        q_gram,
        z,
        sty0,
        sty,
        beta: vec![None; w],
        lambda: vec![0.0; w],
    })
}

/// A factor `Z` with `ZᵀZ = q` for symmetric positive semidefinite `q`,
/// via eigendecomposition with negative eigenvalues clamped to zero.
fn psd_factor(q: &DMatrix<f64>) -> DMatrix<f64> {
    let n = q.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let eig = q.clone().symmetric_eigen();
    let mut z = DMatrix::zeros(n, n);
    for i in 0..n {
        let scale = eig.eigenvalues[i].max(0.0).sqrt();
        for j in 0..n {
            z[(i, j)] = scale * eig.eigenvectors[(j, i)];
        }
    }
    z
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}

/// Runs the reverse column recursion and assembles
/// `A = [a_1 … a_{m−1}]` with `a_l = M⁻¹ [a_{l,1}; a_{l,2}]`, so that `A`
/// satisfies the quadratic matrix equation of the transform.
pub fn compute_a(
    ws: &mut AggregationWorkspace,
    inputs: &AggregationInputs,
) -> Result<DMatrix<f64>, AggregationError> {
    let m = inputs.s_mat.ncols();
    if m <= 1 {
        return Ok(DMatrix::zeros(m, 0));
    }
    let b = ws.b.clone();
    // tail(t) = S_{t+1:m}ᵀ (b_t ybar0 + ybar_t), length m−t, for t in 1..m−1.
    let tail = |t: usize| -> DVector<f64> {
        DVector::from_fn(m - t, |i, _| {
            b[t - 1] * ws.sty0[t + i] + ws.sty[(t + i, t - 1)]
        })
    };
    // q_gram entry for 1-based column indices.
    let qg = |i: usize, j: usize| ws.q_gram[(i - 1, j - 1)];

    let mut a2: Vec<DVector<f64>> = vec![DVector::zeros(0); m - 1];

    // Newest unknown (l = m−1) is scalar: the centered choice zeroes gamma
    // exactly, so only the quadratic along the last coordinate remains.
    {
        let l = m - 1;
        let t_l = tail(l);
        let a_star = -t_l[0];
        let u = DVector::zeros(m);
        let v = ws.l_fac.column(m - 1).into_owned();
        let lambda = solve_lambda(&u, &v, qg(l, l))?;
        ws.lambda[l - 1] = lambda;
        a2[l - 1] = DVector::from_element(1, a_star + lambda);
    }

    for l in (1..=m.saturating_sub(2)).rev() {
        let mt = m - l - 1; // columns Θ_{l+1,t}, t = l+1..m−1
        let mut theta = DMatrix::zeros(mt, mt);
        for (tc, t) in (l + 1..=m - 1).enumerate() {
            let pad = t - (l + 1);
            let block = &a2[t - 1] + tail(t);
            for i in 0..(m - t) {
                theta[(pad + i, tc)] = block[i];
            }
        }
        let (pivots, c) = col_piv_qr_rank(&theta, SPAN_RANK_TOL);
        let tail_l = tail(l);

        let a_star: DVector<f64> = if c == 0 {
            // Every Θ column vanished: the affine equations are void and the
            // centered choice zeroes gamma.
            -&tail_l
        } else {
            // Lifted selected columns [0_{l+1}; Θ_t] in R^m.
            let mut t_sel = DMatrix::zeros(m, c);
            let mut rhs = DVector::zeros(c);
            for (k, &pc) in pivots[..c].iter().enumerate() {
                let t = l + 1 + pc;
                for i in 0..mt {
                    t_sel[(l + 1 + i, k)] = theta[(i, pc)];
                }
                rhs[k] = qg(t, l);
            }
            let minv_tsel = solve_lower_transpose(&ws.m_chol, &solve_lower(&ws.m_chol, &t_sel));
            let gram_small = symmetrize(t_sel.transpose() * minv_tsel);
            let chol_small = chol_lower(&gram_small)
                .map_err(|p| AggregationError::Linalg(LinalgError::NotSpd(p)))?;
            let beta_mat = solve_lower_transpose(
                &chol_small,
                &solve_lower(
                    &chol_small,
                    &DMatrix::from_column_slice(c, 1, rhs.as_slice()),
                ),
            );
            let beta = DVector::from_column_slice(beta_mat.column(0).as_slice());
            let mut a = -tail_l.clone();
            for (k, &pc) in pivots[..c].iter().enumerate() {
                for i in 0..mt {
                    a[1 + i] += theta[(i, pc)] * beta[k];
                }
            }
            ws.beta[l - 1] = Some(beta);
            a
        };

        // Null direction: lift all Θ columns and find a vector annihilated
        // by T_allᵀ M⁻¹ whose first l entries vanish. The system is
        // (m−l−1)×m with an l-zero prefix, so one always exists.
        let mut t_all = DMatrix::zeros(m, mt);
        for tc in 0..mt {
            for i in 0..mt {
                t_all[(l + 1 + i, tc)] = theta[(i, tc)];
            }
        }
        let minv_tall = solve_lower_transpose(&ws.m_chol, &solve_lower(&ws.m_chol, &t_all));
        let abar_lifted = null_space_vector_with_zero_prefix(&minv_tall.transpose(), l);

        let u = &ws.l_fac * lift(&(&a_star + &tail_l), l, m);
        let v = &ws.l_fac * &abar_lifted;
        let lambda = solve_lambda(&u, &v, qg(l, l))?;
        ws.lambda[l - 1] = lambda;
        let abar = DVector::from_fn(m - l, |i, _| abar_lifted[l + i]);
        a2[l - 1] = a_star + abar * lambda;
    }

    // Assemble A: column l−1 solves M a_l = [a_{l,1}; a_{l,2}].
    let mut a_mat = DMatrix::zeros(m, m - 1);
    for l in 1..=m - 1 {
        let mut stacked = DVector::zeros(m);
        for i in 0..l {
            stacked[i] = -b[l - 1] * ws.sty0[i];
        }
        for i in 0..(m - l) {
            stacked[l + i] = a2[l - 1][i];
        }
        let col = solve_lower_transpose(
            &ws.m_chol,
            &solve_lower(
                &ws.m_chol,
                &DMatrix::from_column_slice(m, 1, stacked.as_slice()),
            ),
        );
        a_mat.set_column(l - 1, &col.column(0));
    }
    Ok(a_mat)
}

fn lift(tail: &DVector<f64>, zeros: usize, m: usize) -> DVector<f64> {
    let mut v = DVector::zeros(m);
    for i in 0..tail.len() {
        v[zeros + i] = tail[i];
    }
    v
}

/// Root of `‖u + λv‖² = target` with the smaller magnitude; ties take the
/// nonnegative root. The construction guarantees `‖u‖² ≤ target`, so the
/// discriminant is nonnegative up to rounding; small negatives are clamped.
fn solve_lambda(u: &DVector<f64>, v: &DVector<f64>, target: f64) -> Result<f64, AggregationError> {
    let vv = v.norm_squared();
    if vv == 0.0 {
        // Degenerate direction; the centered point must already satisfy the
        // quadratic, which the downstream validation checks.
        return Ok(0.0);
    }
    let uv = u.dot(v);
    let uu = u.norm_squared();
    let disc = uv * uv - vv * (uu - target);
    let scale = uv * uv + vv * (uu + target.abs());
    if disc < -DISCRIMINANT_TOL * scale.max(f64::MIN_POSITIVE) {
        return Err(AggregationError::NegativeDiscriminant { disc });
    }
    let sq = disc.max(0.0).sqrt();
    let r1 = (-uv + sq) / vv;
    let r2 = (-uv - sq) / vv;
    Ok(if r1.abs() < r2.abs() {
        r1
    } else if r2.abs() < r1.abs() {
        r2
    } else {
        r1.max(r2)
    })
}

/// `Yhat = W⁻¹S [A 0] + ybar0 [b; 0]ᵀ + Ybar`. The appended zero column pins
/// the newest gradient displacement: the last column is returned
/// bit-identical to the input.
pub fn assemble_yhat(
    inputs: &AggregationInputs,
    a_mat: &DMatrix<f64>,
    b: &DVector<f64>,
) -> DMatrix<f64> {
    let m = inputs.s_mat.ncols();
    let mut yhat = inputs.ybar_mat.clone();
    for j in 0..m.saturating_sub(1) {
        let update = &inputs.w_inv_s * a_mat.column(j) + &inputs.ybar0 * b[j];
        let mut col = yhat.column_mut(j);
        col += update;
    }
    yhat
}

/// Residual of the quadratic matrix equation
/// `AᵀMA + ΨᵀA + AᵀΨ − ϖϖᵀ`, in Frobenius norm.
pub fn quadratic_residual(ws: &AggregationWorkspace, a_mat: &DMatrix<f64>) -> f64 {
    let ata = a_mat.transpose() * &ws.m_mat * a_mat;
    let cross = ws.psi.transpose() * a_mat;
    let resid = ata + cross.transpose() + cross - &ws.varpi * ws.varpi.transpose();
    resid.norm()
}

/// Scale against which the quadratic residual is judged:
/// `‖ϖ‖² + ‖Ψ‖²_F / λ_min(M)`.
pub fn quadratic_residual_scale(ws: &AggregationWorkspace) -> f64 {
    let eigs = ws.m_mat.clone().symmetric_eigenvalues();
    let lam_min = eigs
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
        .max(f64::MIN_POSITIVE);
    ws.varpi.norm_squared() + ws.psi.norm_squared() / lam_min
}

/// Runs the whole transform on a store: drops the pair at `dependent_index`
/// and rewrites the gradient displacements of the newer pairs so the
/// quasi-Newton matrix over the base `gamma0·I` is unchanged.
///
/// `sigma` gives the dependent displacement as a combination of the newer
/// stored displacements, oldest first. Pairs older than the dependent one
/// contribute only through the base matrix and are returned untouched.
pub fn aggregate_pair(
    store: &DisplacementStore,
    dependent_index: usize,
    sigma: &DVector<f64>,
    gamma0: f64,
) -> Result<DisplacementStore, AggregationError> {
    let new_pairs = aggregate_pairs(store.pairs(), dependent_index, sigma, gamma0)?;
    DisplacementStore::from_pairs(new_pairs, store.capacity()).map_err(AggregationError::Linalg)
}

/// Pair-level body of [`aggregate_pair`]: returns the rewritten pair list
/// and leaves factor bookkeeping to the caller.
pub fn aggregate_pairs(
    pairs: &[CurvaturePair],
    dependent_index: usize,
    sigma: &DVector<f64>,
    gamma0: f64,
) -> Result<Vec<CurvaturePair>, AggregationError> {
    let total = pairs.len();
    if dependent_index >= total {
        return Err(AggregationError::InvalidInputs(
            "dependent index out of range",
        ));
    }
    let m = total - dependent_index - 1;
    if m == 0 {
        return Err(AggregationError::InvalidInputs(
            "no newer pairs to aggregate into",
        ));
    }
    if sigma.len() != m {
        return Err(AggregationError::InvalidInputs(
            "sigma length must match newer pair count",
        ));
    }

    let prefix = &pairs[..dependent_index];
    let pair0 = &pairs[dependent_index];
    let newer = &pairs[dependent_index + 1..];

    let s_mat = stack(newer, |p| &p.s);
    let ybar_mat = stack(newer, |p| &p.ybar);
    let rho = DVector::from_fn(m, |i, _| newer[i].rho);

    // Entry guard: sigma must actually reproduce the dependent column.
    let combo = &s_mat * sigma;
    let resid = (&combo - &pair0.s).norm();
    if resid > 1e-6 * pair0.s.norm().max(f64::MIN_POSITIVE) {
        return Err(AggregationError::InvalidInputs(
            "sigma does not reproduce the dependent displacement",
        ));
    }

    // rho0 is recomputed from the currently stored vectors, which may
    // themselves be the product of earlier aggregations.
    let curv0 = pair0.s.dot(&pair0.ybar);
    if curv0 <= 0.0 {
        return Err(AggregationError::InvalidInputs(
            "dependent pair has nonpositive curvature",
        ));
    }
    let rho0 = 1.0 / curv0;

    let w_inv_s = apply_direct_hessian(prefix, &s_mat, gamma0);
    let w_ybar0 = apply_inverse_hessian(prefix, &pair0.ybar, gamma0);
    let chi0 = 1.0 + rho0 * pair0.ybar.dot(&w_ybar0);

    let inputs = AggregationInputs {
        sigma: sigma.clone(),
        s0: pair0.s.clone(),
        ybar0: pair0.ybar.clone(),
        rho0,
        s_mat,
        ybar_mat,
        rho,
        w_inv_s,
        chi0,
    };

    let mut ws = build_workspace(&inputs)?;
    let a_mat = compute_a(&mut ws, &inputs)?;

    if m > 1 {
        let resid = quadratic_residual(&ws, &a_mat);
        if resid > 1e-7 * quadratic_residual_scale(&ws).max(f64::MIN_POSITIVE) {
            return Err(AggregationError::ValidationFailed(
                "quadratic equation residual too large",
            ));
        }
    }

    let yhat = assemble_yhat(&inputs, &a_mat, &ws.b);

    // Rebuild the retained pairs around the new gradient displacements. The
    // raw y is shifted by the same amount so ybar = y + r·gnorm·s keeps
    // holding for every stored pair; curvatures are preserved by
    // construction and only refreshed here.
    let mut new_pairs: Vec<CurvaturePair> = prefix.to_vec();
    for (k, pair) in newer.iter().enumerate() {
        let ybar_new = yhat.column(k).clone_owned();
        let curv_old = pair.s.dot(&pair.ybar);
        let curv_new = pair.s.dot(&ybar_new);
        if curv_new <= 0.0 || (curv_new - curv_old).abs() > 1e-8 * curv_old.abs() {
            return Err(AggregationError::ValidationFailed(
                "curvature not preserved",
            ));
        }
        let y_new = &ybar_new - &pair.s * (pair.r * pair.gnorm);
        new_pairs.push(CurvaturePair {
            s: pair.s.clone(),
            y: y_new,
            ybar: ybar_new,
            r: pair.r,
            gnorm: pair.gnorm,
            rho: 1.0 / curv_new,
        });
    }
    Ok(new_pairs)
}

/// Drops the second-newest pair when its displacement is parallel to the
/// newest one; the newer pair's update subsumes the older one, so the stored
/// gradient displacements are left untouched.
pub fn drop_parallel_pair(store: &DisplacementStore, _sigma_scalar: f64) -> DisplacementStore {
    let pairs = store.pairs();
    assert!(pairs.len() >= 2, "needs the parallel pair and its successor");
    let mut kept: Vec<CurvaturePair> = pairs.to_vec();
    kept.remove(pairs.len() - 2);
    DisplacementStore::from_pairs(kept.clone(), store.capacity())
        .unwrap_or_else(|_| DisplacementStore::from_pairs_unchecked(kept, store.capacity()))
}

fn stack<F>(pairs: &[CurvaturePair], pick: F) -> DMatrix<f64>
where
    F: Fn(&CurvaturePair) -> &DVector<f64>,
{
    let cols: Vec<_> = pairs.iter().map(|p| pick(p).clone()).collect();
    DMatrix::from_columns(&cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qn::mbfgs_iterative;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};

    fn vecn(data: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(data)
    }

    fn synthetic_pair(s: DVector<f64>, ybar: DVector<f64>) -> CurvaturePair {
        let curv = s.dot(&ybar);
        assert!(curv > 0.0);
        CurvaturePair {
            y: ybar.clone(),
            rho: 1.0 / curv,
            r: 1.0,
            gnorm: 0.0,
            s,
            ybar,
        }
    }

    /// Three independent pairs in R^4 plus a dependent older pair with
    /// s0 = S sigma.
    fn small_instance() -> (DisplacementStore, DVector<f64>) {
        let newer = vec![
            synthetic_pair(vecn(&[1.0, 0.1, -0.2, 0.3]), vecn(&[0.9, 0.0, 0.1, 0.2])),
            synthetic_pair(vecn(&[-0.1, 1.2, 0.4, -0.3]), vecn(&[0.0, 1.0, 0.3, -0.1])),
            synthetic_pair(vecn(&[0.2, -0.3, 0.8, 0.5]), vecn(&[0.1, -0.2, 1.1, 0.4])),
        ];
        let sigma = vecn(&[0.7, -0.4, 0.5]);
        let s_mat = stack(&newer, |p| &p.s);
        let s0 = &s_mat * &sigma;
        // ybar0 with definite positive curvature against s0.
        let mut ybar0 = vecn(&[0.3, 0.2, -0.1, 0.4]);
        if s0.dot(&ybar0) <= 0.1 {
            let fix = (0.5 - s0.dot(&ybar0)) / s0.norm_squared();
            ybar0 += &s0 * fix;
        }
        let pair0 = synthetic_pair(s0, ybar0);
        let mut pairs = vec![pair0];
        pairs.extend(newer);
        (DisplacementStore::from_pairs_unchecked(pairs, 6), sigma)
    }

    #[test]
    fn compute_b_degenerate_and_zero_cases() {
        // m = 1: no unknowns.
        let s = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
        let y = s.clone();
        let ubar = DMatrix::zeros(1, 0);
        let b = compute_b(&s, &y, &ubar, &vecn(&[1.0]), 2.0);
        assert_eq!(b.len(), 0);

        // Vanishing strictly-upper part makes b = 0: orthogonal s/ybar pairs.
        let s = DMatrix::from_columns(&[vecn(&[1.0, 0.0, 0.0]), vecn(&[0.0, 1.0, 0.0])]);
        let y = s.clone();
        let sty = s.transpose() * &y;
        let ubar = build_ubar(&sty);
        let b = compute_b(&s, &y, &ubar, &vecn(&[0.5, 0.5]), 1.5);
        assert_relative_eq!(b, DVector::zeros(1), epsilon = 0.0);
    }

    #[test]
    fn compute_b_matches_entrywise_evaluation() {
        let (store, sigma) = small_instance();
        let newer = &store.pairs()[1..];
        let s_mat = stack(newer, |p| &p.s);
        let ybar_mat = stack(newer, |p| &p.ybar);
        let sty = s_mat.transpose() * &ybar_mat;
        let ubar = build_ubar(&sty);
        let rho0 = store.pairs()[0].rho;
        let b = compute_b(&s_mat, &ybar_mat, &ubar, &sigma, rho0);

        let m = 3;
        for l in 1..m {
            // b_l = −rho0 Σ_i sigma_i (SᵀYbar − Ubar)_{i,l}: only the strictly
            // lower part of column l survives the subtraction.
            let mut acc = 0.0;
            for i in 0..m {
                let entry = if i < l { 0.0 } else { sty[(i, l - 1)] };
                acc += sigma[i] * entry;
            }
            assert_relative_eq!(b[l - 1], -rho0 * acc, epsilon = 1e-13);
        }
    }

    #[test]
    fn aggregate_matches_full_memory_matrix() {
        let (store, sigma) = small_instance();
        let gamma0 = 1.0;
        let n = 4;
        let aggregated = aggregate_pair(&store, 0, &sigma, gamma0).expect("aggregation");
        assert_eq!(aggregated.len(), 3);

        let w0 = DMatrix::identity(n, n) * gamma0;
        let full = mbfgs_iterative(&w0, &store);
        let agg = mbfgs_iterative(&w0, &aggregated);
        assert!(
            (&full - &agg).norm() <= 1e-7 * full.norm(),
            "relative error {}",
            (&full - &agg).norm() / full.norm()
        );

        // Curvature preservation and last-column fixity.
        let old = store.pairs();
        let new = aggregated.pairs();
        for k in 0..3 {
            let co = old[k + 1].s.dot(&old[k + 1].ybar);
            let cn = new[k].s.dot(&new[k].ybar);
            assert_relative_eq!(co, cn, epsilon = 1e-10 * co.abs());
        }
        assert_relative_eq!(new[2].ybar, old[3].ybar, epsilon = 0.0);

        // The whole upper triangle of the inner products is preserved, not
        // just the diagonal.
        let s_new = stack(new, |p| &p.s);
        let sty_new = s_new.transpose() * stack(new, |p| &p.ybar);
        let s_old = stack(&old[1..], |p| &p.s);
        let sty_old = s_old.transpose() * stack(&old[1..], |p| &p.ybar);
        for i in 0..3 {
            for j in i..3 {
                assert_relative_eq!(
                    sty_new[(i, j)],
                    sty_old[(i, j)],
                    epsilon = 1e-9 * sty_old[(i, j)].abs().max(1e-12)
                );
            }
        }
    }

    #[test]
    fn homogeneous_instance_yields_zero_coefficients() {
        // With the strictly-lower inner products vanishing, b = 0, Psi = 0,
        // varpi = 0, and the recursion must return A = 0 so Yhat = Ybar.
        let e = |i: usize| {
            let mut v = DVector::zeros(4);
            v[i] = 1.0;
            v
        };
        let newer = vec![
            synthetic_pair(e(0), e(0)),
            synthetic_pair(e(1), e(0) * 0.3 + e(1)),
        ];
        let sigma = vecn(&[0.8, -0.6]);
        let s0 = e(0) * 0.8 - e(1) * 0.6;
        let ybar0 = {
            let raw = vecn(&[0.2, -0.1, 0.4, 0.3]);
            let fix = (0.5 - s0.dot(&raw)) / s0.norm_squared();
            raw + &s0 * fix
        };
        let pair0 = synthetic_pair(s0, ybar0);
        let mut pairs = vec![pair0];
        pairs.extend(newer);
        let store = DisplacementStore::from_pairs_unchecked(pairs, 4);

        let pair0 = &store.pairs()[0];
        let newer = &store.pairs()[1..];
        let s_mat = stack(newer, |p| &p.s);
        let inputs = AggregationInputs {
            sigma: sigma.clone(),
            s0: pair0.s.clone(),
            ybar0: pair0.ybar.clone(),
            rho0: pair0.rho,
            s_mat: s_mat.clone(),
            ybar_mat: stack(newer, |p| &p.ybar),
            rho: DVector::from_fn(2, |i, _| newer[i].rho),
            w_inv_s: s_mat,
            chi0: 1.0 + pair0.rho * pair0.ybar.norm_squared(),
        };
        let mut ws = build_workspace(&inputs).unwrap();
        assert_relative_eq!(ws.b, DVector::zeros(1), epsilon = 0.0);
        assert!(ws.psi.norm() == 0.0 && ws.varpi.norm() == 0.0);
        let a_mat = compute_a(&mut ws, &inputs).unwrap();
        assert_relative_eq!(a_mat, DMatrix::zeros(2, 1), epsilon = 0.0);
        let yhat = assemble_yhat(&inputs, &a_mat, &ws.b);
        assert_relative_eq!(yhat, inputs.ybar_mat, epsilon = 0.0);
    }

    #[test]
    fn aggregate_with_prefix_matches_composed_base() {
        // Dependent pair in the interior: one older pair forms the base W.
        let prefix = synthetic_pair(vecn(&[0.5, 0.5, -0.2, 0.1]), vecn(&[0.4, 0.3, 0.0, 0.2]));
        let (inner, sigma) = small_instance();
        let mut pairs = vec![prefix];
        pairs.extend(inner.pairs().iter().cloned());
        let store = DisplacementStore::from_pairs_unchecked(pairs, 6);
        let gamma0 = 0.9;

        let aggregated = aggregate_pair(&store, 1, &sigma, gamma0).expect("aggregation");
        assert_eq!(aggregated.len(), 4);

        let w0 = DMatrix::identity(4, 4) * gamma0;
        let full = mbfgs_iterative(&w0, &store);
        let agg = mbfgs_iterative(&w0, &aggregated);
        assert!((&full - &agg).norm() <= 1e-7 * full.norm());
        // Prefix pair is untouched.
        assert_relative_eq!(
            aggregated.pairs()[0].ybar,
            store.pairs()[0].ybar,
            epsilon = 0.0
        );
    }

    #[test]
    fn aggregate_single_newer_pair_reduces_to_drop() {
        // m = 1: A and b are empty, the newer ybar is untouched.
        let s1 = vecn(&[1.0, 0.2, -0.1]);
        let ybar1 = vecn(&[0.8, 0.3, 0.0]);
        let newer = synthetic_pair(s1.clone(), ybar1.clone());
        let s0 = &s1 * -2.0;
        let ybar0 = {
            let raw = vecn(&[-1.0, 0.1, 0.2]);
            let fix = (0.4 - s0.dot(&raw)) / s0.norm_squared();
            raw + &s0 * fix
        };
        let pair0 = synthetic_pair(s0, ybar0);
        let store = DisplacementStore::from_pairs_unchecked(vec![pair0, newer], 4);
        let sigma = vecn(&[-2.0]);
        let aggregated = aggregate_pair(&store, 0, &sigma, 1.0).expect("aggregation");
        assert_eq!(aggregated.len(), 1);
        assert_relative_eq!(aggregated.pairs()[0].ybar, ybar1, epsilon = 0.0);

        // Matches the parallel-drop path exactly.
        let dropped = drop_parallel_pair(&store, -2.0);
        assert_relative_eq!(
            dropped.pairs()[0].ybar,
            aggregated.pairs()[0].ybar,
            epsilon = 0.0
        );
    }

    #[test]
    fn parallel_drop_preserves_matrix() {
        // Two pairs with parallel displacements and distinct ybar vectors.
        let s2 = vecn(&[0.4, -0.2, 0.7, 0.1, 0.3]);
        let s1 = &s2 * -2.0;
        let ybar1 = {
            let raw = vecn(&[-0.7, 0.3, -0.2, 0.1, 0.0]);
            let fix = (0.4 - s1.dot(&raw)) / s1.norm_squared();
            raw + &s1 * fix
        };
        let ybar2 = {
            let raw = vecn(&[0.2, 0.5, 0.9, -0.3, 0.4]);
            let fix = (0.6 - s2.dot(&raw)) / s2.norm_squared();
            raw + &s2 * fix
        };
        let pairs = vec![synthetic_pair(s1, ybar1), synthetic_pair(s2, ybar2)];
        let store = DisplacementStore::from_pairs_unchecked(pairs, 4);

        let a = DMatrix::from_row_slice(
            5,
            5,
            &[
                1.1, 0.2, 0.0, -0.1, 0.3, //
                0.2, 0.9, 0.1, 0.0, -0.2, //
                0.0, 0.1, 1.4, 0.2, 0.1, //
                -0.1, 0.0, 0.2, 1.0, 0.0, //
                0.3, -0.2, 0.1, 0.0, 0.8,
            ],
        );
        let w0 = &a * a.transpose() + DMatrix::identity(5, 5) * 0.4;

        let dropped = drop_parallel_pair(&store, -2.0);
        assert_eq!(dropped.len(), 1);
        let full = mbfgs_iterative(&w0, &store);
        let reduced = mbfgs_iterative(&w0, &dropped);
        assert!((&full - &reduced).norm() <= 1e-12 * full.norm());
    }

    #[test]
    fn identical_pairs_drop_is_idempotent() {
        let s = vecn(&[1.0, -0.5, 0.25]);
        let ybar = vecn(&[0.75, 0.0, 0.5]);
        let pairs = vec![
            synthetic_pair(s.clone(), ybar.clone()),
            synthetic_pair(s.clone(), ybar.clone()),
        ];
        let store = DisplacementStore::from_pairs_unchecked(pairs, 4);
        let dropped = drop_parallel_pair(&store, 1.0);
        assert_eq!(dropped.len(), 1);
        let w0 = DMatrix::identity(3, 3);
        let full = mbfgs_iterative(&w0, &store);
        let reduced = mbfgs_iterative(&w0, &dropped);
        assert!((&full - &reduced).norm() <= 1e-13 * full.norm());
    }

    #[test]
    fn quadratic_residual_is_small_on_valid_instance() {
        let (store, sigma) = small_instance();
        let pair0 = &store.pairs()[0];
        let newer = &store.pairs()[1..];
        let s_mat = stack(newer, |p| &p.s);
        let ybar_mat = stack(newer, |p| &p.ybar);
        let rho = DVector::from_fn(3, |i, _| newer[i].rho);
        let rho0 = 1.0 / pair0.s.dot(&pair0.ybar);
        let w_inv_s = s_mat.clone(); // identity base
        let chi0 = 1.0 + rho0 * pair0.ybar.norm_squared();
        let inputs = AggregationInputs {
            sigma,
            s0: pair0.s.clone(),
            ybar0: pair0.ybar.clone(),
            rho0,
            s_mat,
            ybar_mat,
            rho,
            w_inv_s,
            chi0,
        };
        let mut ws = build_workspace(&inputs).unwrap();
        let a_mat = compute_a(&mut ws, &inputs).unwrap();
        let resid = quadratic_residual(&ws, &a_mat);
        assert!(resid <= 1e-9 * quadratic_residual_scale(&ws).max(1e-30));

        // Z really factors the Gram it was built from.
        let zz = ws.z.transpose() * &ws.z;
        assert!((zz - &ws.q_gram).norm() <= 1e-9 * ws.q_gram.norm().max(1e-30));
        assert_eq!(a_mat.nrows(), 3);
        assert_eq!(a_mat.ncols(), 2);
    }

    #[test]
    fn assemble_yhat_identity_when_coefficients_vanish() {
        let (store, sigma) = small_instance();
        let pair0 = &store.pairs()[0];
        let newer = &store.pairs()[1..];
        let s_mat = stack(newer, |p| &p.s);
        let ybar_mat = stack(newer, |p| &p.ybar);
        let inputs = AggregationInputs {
            sigma,
            s0: pair0.s.clone(),
            ybar0: pair0.ybar.clone(),
            rho0: 1.0,
            s_mat: s_mat.clone(),
            ybar_mat: ybar_mat.clone(),
            rho: DVector::from_element(3, 1.0),
            w_inv_s: s_mat,
            chi0: 1.0,
        };
        let a = DMatrix::zeros(3, 2);
        let b = DVector::zeros(2);
        let yhat = assemble_yhat(&inputs, &a, &b);
        assert_relative_eq!(yhat, ybar_mat, epsilon = 0.0);

        // Diagonal inner products are preserved by the real transform.
        let (store2, sigma2) = small_instance();
        let agg = aggregate_pair(&store2, 0, &sigma2, 1.0).unwrap();
        for (k, pair) in agg.pairs().iter().enumerate() {
            let old = &store2.pairs()[k + 1];
            assert_relative_eq!(
                pair.s.dot(&pair.ybar),
                old.s.dot(&old.ybar),
                epsilon = 1e-10 * old.s.dot(&old.ybar)
            );
        }
    }

    #[test]
    fn aggregate_rejects_bad_sigma() {
        let (store, _) = small_instance();
        let bad = vecn(&[9.0, 9.0, 9.0]);
        match aggregate_pair(&store, 0, &bad, 1.0) {
            Err(AggregationError::InvalidInputs(_)) => {}
            other => panic!("expected invalid inputs, got {other:?}"),
        }
    }
}
