//! Dense triangular/SPD kernels and the Gram-factor maintenance machinery
//! that detects linear dependence among stored iterate displacements.
//!
//! The displacement store keeps a lower-triangular Cholesky factor `L` of the
//! Gram matrix of its `s`-vectors ordered newest-first. Appending a candidate
//! vector reduces to a rank-one downdate of `L`; a breakdown of the downdate
//! pinpoints which stored vector just became a linear combination of newer
//! ones and yields the combination coefficients by a triangular solve.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Relative tolerance under which a downdated Cholesky diagonal is treated as
/// zero, i.e. the corresponding column is declared linearly dependent.
pub const DEPENDENCE_TOL: f64 = 1e-8;

/// Displacements with norm below this are rejected outright; their squared
/// norms would underflow inside the Gram matrix.
pub const MIN_DISPLACEMENT_NORM: f64 = 1e-150;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("triangular factor has a non-positive diagonal at index {0}")]
    NotPositiveDiagonal(usize),
    #[error("downdate produced an indefinite pivot at index {index} (d^2 = {diag_sq:.3e})")]
    NumericalDowndateFailure { index: usize, diag_sq: f64 },
    #[error("displacement norm {0:.3e} is below machine scale")]
    ZeroDisplacement(f64),
    #[error("Gram matrix is rank deficient (pivot {0} not positive)")]
    RankDeficient(usize),
    #[error("matrix is not positive definite (pivot {0} not positive)")]
    NotSpd(usize),
}

/// Result of [`rank_one_downdate`].
#[derive(Debug, Clone)]
pub enum DowndateOutcome {
    /// Full factor `M` with `M Mᵀ = L Lᵀ − v vᵀ`.
    Success(DMatrix<f64>),
    /// The downdated diagonal vanished while processing column `index`
    /// (1-based). `leading` is the `(index−1)×(index−1)` block that was
    /// already downdated and `row` the downdated prefix of row `index`;
    /// together they factor the leading `index × index` block of
    /// `L Lᵀ − v vᵀ`, whose final pivot is zero.
    Breakdown {
        index: usize,
        leading: DMatrix<f64>,
        row: DVector<f64>,
    },
}

/// Cholesky rank-one downdate by hyperbolic rotations.
///
/// Computes the lower-triangular factor of `L Lᵀ − v vᵀ`. A computed diagonal
/// whose magnitude falls at or below `diag_tol` stops the sweep and reports
/// the breakdown column; a diagonal that goes negative beyond the tolerance
/// means the downdated matrix is genuinely indefinite and is reported as an
/// error.
pub fn rank_one_downdate(
    l: &DMatrix<f64>,
    v: &DVector<f64>,
    diag_tol: f64,
) -> Result<DowndateOutcome, LinalgError> {
    let m = l.nrows();
    assert_eq!(l.ncols(), m, "factor must be square");
    assert_eq!(v.len(), m, "downdate vector length must match factor");
    for j in 0..m {
        if l[(j, j)] <= 0.0 || !l[(j, j)].is_finite() {
            return Err(LinalgError::NotPositiveDiagonal(j + 1));
        }
    }

    let mut out = l.clone();
    let mut w = v.clone();
    let tol_sq = diag_tol * diag_tol;
    for j in 0..m {
        let d_sq = out[(j, j)] * out[(j, j)] - w[j] * w[j];
        if d_sq <= tol_sq {
            // Negatives inside the cancellation noise of this pivot are
            // still a clean breakdown; anything larger means the downdated
            // matrix is genuinely indefinite.
            let noise = diag_tol.max(DEPENDENCE_TOL * out[(j, j)]);
            if d_sq < -(noise * noise) {
                return Err(LinalgError::NumericalDowndateFailure {
                    index: j + 1,
                    diag_sq: d_sq,
                });
            }
            // |d| <= diag_tol: clean breakdown at this column.
            let leading = out.view((0, 0), (j, j)).into_owned();
            let row = DVector::from_fn(j, |k, _| out[(j, k)]);
            return Ok(DowndateOutcome::Breakdown {
                index: j + 1,
                leading,
                row,
            });
        }
        let d = d_sq.sqrt();
        let c = d / out[(j, j)];
        let s = w[j] / out[(j, j)];
        out[(j, j)] = d;
        for k in j + 1..m {
            out[(k, j)] = (out[(k, j)] - s * w[k]) / c;
            w[k] = c * w[k] - s * out[(k, j)];
        }
    }
    Ok(DowndateOutcome::Success(out))
}

/// Lower-triangular Cholesky factor of a symmetric matrix.
///
/// A pivot fails when it drops to or below `rel_tol² · a[j,j]` (the diagonal
/// entry is the squared column norm, the natural scale); `rel_tol = 0` keeps
/// the strict non-positive test. Returns the 1-based index of the failing
/// pivot so callers can map it onto their own error vocabulary.
pub(crate) fn chol_lower_with_tol(a: &DMatrix<f64>, rel_tol: f64) -> Result<DMatrix<f64>, usize> {
    let n = a.nrows();
    let mut l = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[(i, j)];
            for k in 0..j {
                sum -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                let floor = rel_tol * rel_tol * a[(i, i)].abs();
                if sum <= floor || !sum.is_finite() {
                    return Err(i + 1);
                }
                l[(i, j)] = sum.sqrt();
            } else {
                l[(i, j)] = sum / l[(j, j)];
            }
        }
    }
    Ok(l)
}

pub(crate) fn chol_lower(a: &DMatrix<f64>) -> Result<DMatrix<f64>, usize> {
    chol_lower_with_tol(a, 0.0)
}

/// Forward substitution: solves `L x = b` for lower-triangular `L`.
pub fn solve_lower(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for col in 0..x.ncols() {
        for i in 0..n {
            let mut sum = x[(i, col)];
            for k in 0..i {
                sum -= l[(i, k)] * x[(k, col)];
            }
            x[(i, col)] = sum / l[(i, i)];
        }
    }
    x
}

/// Backward substitution: solves `Lᵀ x = b` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for col in 0..x.ncols() {
        for i in (0..n).rev() {
            let mut sum = x[(i, col)];
            for k in i + 1..n {
                sum -= l[(k, i)] * x[(k, col)];
            }
            x[(i, col)] = sum / l[(i, i)];
        }
    }
    x
}

/// Solves `M X = rhs` for symmetric positive definite `M` by Cholesky.
pub fn spd_solve(m: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    let l = chol_lower(m).map_err(LinalgError::NotSpd)?;
    Ok(solve_lower_transpose(&l, &solve_lower(&l, rhs)))
}

/// A nonzero vector in the null space of a wide matrix `a` (p×m, p < m).
///
/// Uses a Householder QR of `aᵀ`: the last column of the full orthogonal
/// factor is orthogonal to the column space of `aᵀ`, i.e. annihilated by `a`.
/// The result has unit norm. Works for any rank, including `a = 0`.
pub fn null_space_vector(a: &DMatrix<f64>) -> DVector<f64> {
    let p = a.nrows();
    let m = a.ncols();
    assert!(p < m, "null_space_vector requires p < m (got {p}x{m})");

    // Householder reflectors of aᵀ (m×p), stored as (v, beta) pairs.
    let mut at = a.transpose();
    let mut reflectors: Vec<(DVector<f64>, f64)> = Vec::with_capacity(p);
    for j in 0..p {
        let mut v = DVector::zeros(m);
        let mut norm_sq = 0.0;
        for i in j..m {
            v[i] = at[(i, j)];
            norm_sq += v[i] * v[i];
        }
        let norm = norm_sq.sqrt();
        if norm == 0.0 {
            reflectors.push((v, 0.0));
            continue;
        }
        let alpha = if v[j] >= 0.0 { -norm } else { norm };
        v[j] -= alpha;
        let v_sq = v.dot(&v);
        let beta = if v_sq == 0.0 { 0.0 } else { 2.0 / v_sq };
        // Apply to the remaining columns of at.
        for col in j..p {
            let mut proj = 0.0;
            for i in j..m {
                proj += v[i] * at[(i, col)];
            }
            for i in j..m {
                at[(i, col)] -= beta * proj * v[i];
            }
        }
        reflectors.push((v, beta));
    }
    // Last column of the full Q: apply reflectors to e_{m-1} in reverse order.
    let mut q = DVector::zeros(m);
    q[m - 1] = 1.0;
    for (v, beta) in reflectors.iter().rev() {
        let proj = v.dot(&q);
        q.axpy(-beta * proj, v, 1.0);
    }
    q
}

/// Constrained null-space variant: a nonzero `v` of length `m` whose first
/// `prefix_zeros` entries vanish and with `A v = 0`. Requires
/// `p < m − prefix_zeros`; the vector is found as a null vector of the
/// trailing column block and lifted back with zeros.
pub fn null_space_vector_with_zero_prefix(a: &DMatrix<f64>, prefix_zeros: usize) -> DVector<f64> {
    let p = a.nrows();
    let m = a.ncols();
    assert!(
        p + prefix_zeros < m,
        "constrained null vector needs p < m - prefix ({p}x{m}, prefix {prefix_zeros})"
    );
    let tail = a.columns(prefix_zeros, m - prefix_zeros).into_owned();
    let v_tail = null_space_vector(&tail);
    let mut v = DVector::zeros(m);
    for i in 0..v_tail.len() {
        v[prefix_zeros + i] = v_tail[i];
    }
    v
}

/// Column-pivoted Householder QR used as a rank decision.
///
/// Returns the pivot order and the numerical rank at the relative threshold
/// `rel_tol` (pivot magnitudes are compared against the largest one).
pub fn col_piv_qr_rank(a: &DMatrix<f64>, rel_tol: f64) -> (Vec<usize>, usize) {
    let rows = a.nrows();
    let cols = a.ncols();
    let mut work = a.clone();
    let mut pivots: Vec<usize> = (0..cols).collect();
    let mut diag = Vec::new();
    let steps = rows.min(cols);
    for j in 0..steps {
        // Pivot on the column with the largest remaining norm.
        let mut best = j;
        let mut best_norm = 0.0;
        for c in j..cols {
            let mut nrm = 0.0;
            for i in j..rows {
                nrm += work[(i, c)] * work[(i, c)];
            }
            if nrm > best_norm {
                best_norm = nrm;
                best = c;
            }
        }
        if best_norm == 0.0 {
            break;
        }
        if best != j {
            work.swap_columns(best, j);
            pivots.swap(best, j);
        }
        // Householder on column j.
        let mut v = DVector::zeros(rows);
        for i in j..rows {
            v[i] = work[(i, j)];
        }
        let norm = v.norm();
        let alpha = if v[j] >= 0.0 { -norm } else { norm };
        v[j] -= alpha;
        let v_sq = v.dot(&v);
        let beta = if v_sq == 0.0 { 0.0 } else { 2.0 / v_sq };
        for c in j..cols {
            let mut proj = 0.0;
            for i in j..rows {
                proj += v[i] * work[(i, c)];
            }
            for i in j..rows {
                work[(i, c)] -= beta * proj * v[i];
            }
        }
        diag.push(work[(j, j)].abs());
    }
    let max_diag = diag.iter().cloned().fold(0.0_f64, f64::max);
    let rank = if max_diag == 0.0 {
        0
    } else {
        diag.iter().take_while(|d| **d > rel_tol * max_diag).count()
    };
    (pivots, rank)
}

/// Lower-triangular factor of the newest-first Gram matrix of the stored
/// iterate displacements, plus the map from factor columns back to store
/// positions (the store itself is kept oldest-first).
#[derive(Debug, Clone)]
pub struct GramCholesky {
    l: DMatrix<f64>,
    order_map: Vec<usize>,
}

/// Outcome of appending a candidate displacement to the Gram factor.
#[derive(Debug, Clone)]
pub enum DependenceReport {
    /// The candidate extends the independent set; the augmented factor
    /// (candidate first) is returned.
    Independent { factor: GramCholesky },
    /// The stored newest displacement is a multiple of the candidate:
    /// `s_stored_newest = sigma * s_new`.
    ParallelNewest { sigma: f64 },
    /// The stored column at `store_index` (oldest-first indexing) is a
    /// combination of the `sigma.len()` newer vectors, newest first and
    /// counting the candidate itself: `[s_new, s_last, ...] * sigma = s_dep`.
    DependentAt {
        store_index: usize,
        sigma: DVector<f64>,
    },
}

impl GramCholesky {
    /// Factor over an empty store.
    pub fn empty() -> Self {
        GramCholesky {
            l: DMatrix::zeros(0, 0),
            order_map: Vec::new(),
        }
    }

    /// Number of columns covered by the factor.
    pub fn len(&self) -> usize {
        self.l.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.l.nrows() == 0
    }

    /// The lower-triangular factor (newest-first column order).
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// Store index of factor column `j` (factor is newest-first).
    pub fn order_map(&self) -> &[usize] {
        &self.order_map
    }

    /// Leading principal block of a factor. Valid because columns are held
    /// newest-first: trimming the factor drops the oldest columns.
    pub fn from_leading_block(factor: &GramCholesky, k: usize) -> GramCholesky {
        assert!(k <= factor.len());
        GramCholesky {
            l: factor.l.view((0, 0), (k, k)).into_owned(),
            order_map: (0..k).map(|j| k - 1 - j).collect(),
        }
    }

    /// Factor with one column removed, repaired in place by Givens rotations.
    ///
    /// Unlike a from-scratch rebuild this never re-derives the pivots from
    /// the Gram matrix, so margins the downdate certified at append time
    /// survive deletion (a fresh Cholesky cannot resolve margins near the
    /// dependence tolerance, which sits at the cancellation noise floor).
    pub fn with_column_deleted(&self, store_index: usize) -> Result<GramCholesky, LinalgError> {
        let m = self.len();
        assert!(store_index < m);
        let pos = m - 1 - store_index; // newest-first position
        let mut work = self.l.clone().remove_row(pos);
        // Rows below the deleted one gained a superdiagonal entry; chase it
        // off with column rotations, which leave the row Gram unchanged.
        for j in pos..m - 1 {
            let a = work[(j, j)];
            let b = work[(j, j + 1)];
            let r = a.hypot(b);
            if r <= 0.0 || !r.is_finite() {
                return Err(LinalgError::RankDeficient(j + 1));
            }
            let (c, s) = (a / r, b / r);
            for i in j..m - 1 {
                let (u, v) = (work[(i, j)], work[(i, j + 1)]);
                work[(i, j)] = c * u + s * v;
                work[(i, j + 1)] = -s * u + c * v;
            }
            work[(j, j)] = r;
            work[(j, j + 1)] = 0.0;
        }
        let l = work.remove_column(m - 1);
        Ok(GramCholesky {
            l,
            order_map: (0..m - 1).map(|j| m - 2 - j).collect(),
        })
    }

    /// Relative Frobenius error of `L Lᵀ` against the newest-first Gram
    /// matrix recomputed from `columns` (store order).
    pub fn reconstruction_error(&self, columns: &DMatrix<f64>) -> f64 {
        let m = self.len();
        assert_eq!(columns.ncols(), m);
        let gram = newest_first_gram(columns);
        let rebuilt = &self.l * self.l.transpose();
        let denom = gram.norm().max(f64::MIN_POSITIVE);
        (rebuilt - gram).norm() / denom
    }
}

fn newest_first_gram(columns: &DMatrix<f64>) -> DMatrix<f64> {
    let m = columns.ncols();
    let mut gram = DMatrix::zeros(m, m);
    for a in 0..m {
        for b in 0..m {
            let ca = columns.column(m - 1 - a);
            let cb = columns.column(m - 1 - b);
            gram[(a, b)] = ca.dot(&cb);
        }
    }
    gram
}

/// Rebuilds the Gram factor from scratch over the given store columns
/// (oldest-first). Used after any deletion.
pub fn rebuild_factor(columns: &DMatrix<f64>) -> Result<GramCholesky, LinalgError> {
    let m = columns.ncols();
    let gram = newest_first_gram(columns);
    let l = chol_lower(&gram).map_err(LinalgError::RankDeficient)?;
    Ok(GramCholesky {
        l,
        order_map: (0..m).map(|j| m - 1 - j).collect(),
    })
}

/// Tries to extend the factor with a new displacement.
///
/// Computes `mu = ‖s_new‖` and `zeta = Ŝᵀ s_new / mu` over the stored columns
/// newest-first, then runs the rank-one downdate on the bordered factor so a
/// breakdown at column `i+1` directly exposes the leading factor and residual
/// column of the dependent block; the combination coefficients follow from
/// one triangular solve.
pub fn gram_append(
    chol: &GramCholesky,
    store_columns: &DMatrix<f64>,
    s_new: &DVector<f64>,
) -> Result<DependenceReport, LinalgError> {
    let m = chol.len();
    assert_eq!(store_columns.ncols(), m, "factor and store out of sync");
    let mu = s_new.norm();
    if !(mu.is_finite() && mu > MIN_DISPLACEMENT_NORM) {
        return Err(LinalgError::ZeroDisplacement(mu));
    }
    if m == 0 {
        return Ok(DependenceReport::Independent {
            factor: GramCholesky {
                l: DMatrix::from_element(1, 1, mu),
                order_map: vec![0],
            },
        });
    }

    // zeta over stored columns newest-first.
    let mut zeta = DVector::zeros(m);
    for j in 0..m {
        zeta[j] = store_columns.column(m - 1 - j).dot(s_new) / mu;
    }

    // Bordered factor [[mu, 0], [zeta, L]]; downdating it by [0; zeta]
    // produces the Cholesky factor of the augmented newest-first Gram.
    let mut bordered = DMatrix::zeros(m + 1, m + 1);
    bordered[(0, 0)] = mu;
    for i in 0..m {
        bordered[(i + 1, 0)] = zeta[i];
        for j in 0..=i {
            bordered[(i + 1, j + 1)] = chol.l[(i, j)];
        }
    }
    let mut v = DVector::zeros(m + 1);
    for i in 0..m {
        v[i + 1] = zeta[i];
    }

    match rank_one_downdate(&bordered, &v, DEPENDENCE_TOL * mu)? {
        DowndateOutcome::Success(l_new) => {
            let mut order_map = vec![0; m + 1];
            for (j, slot) in order_map.iter_mut().enumerate() {
                *slot = m - j; // new column takes store index m
            }
            Ok(DependenceReport::Independent {
                factor: GramCholesky {
                    l: l_new,
                    order_map,
                },
            })
        }
        DowndateOutcome::Breakdown {
            index,
            leading,
            row,
        } => {
            // Bordered row `index` corresponds to stored newest-first
            // position index-1, i.e. store index m - (index - 1).
            let newer = index - 1; // count of newer vectors incl. s_new
            debug_assert!(newer >= 1, "first bordered pivot cannot break down");
            let store_index = m - newer;
            // sigma solves Xi^T sigma = xi.
            let sigma_mat = solve_lower_transpose(
                &leading,
                &DMatrix::from_column_slice(newer, 1, row.as_slice()),
            );
            let sigma = DVector::from_column_slice(sigma_mat.column(0).as_slice());
            if newer == 1 {
                Ok(DependenceReport::ParallelNewest { sigma: sigma[0] })
            } else {
                Ok(DependenceReport::DependentAt { store_index, sigma })
            }
        }
    }
}
