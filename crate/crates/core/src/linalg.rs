//! Dense symmetric eigendecomposition and orthogonal-factorization least
//! squares. Problem sizes here are small (d ≤ ~800 for the PCA path, feature
//! counts ≤ ~1000 for the degree-4 oracle), so plain cyclic Jacobi and
//! Householder QR are sufficient and keep the numerics fully inspectable.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Relative off-diagonal mass at which the Jacobi iteration stops.
pub(crate) const JACOBI_REL_TOL: f64 = 1e-12;

/// Square root of the sum of squared off-diagonal entries.
fn off_diagonal_mass(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                acc += a[[i, j]] * a[[i, j]];
            }
        }
    }
    acc.sqrt()
}

fn frob(a: &ArrayView2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// The input is symmetrized as `(A + Aᵀ)/2` before iterating. Rotations stop
/// once the off-diagonal mass drops below `1e-12` of the Frobenius norm of the
/// input; the rotation budget is `100·d²`. Returns eigenvalues sorted in
/// descending order together with the matching orthonormal eigenvector
/// columns.
pub(crate) fn jacobi_eig(a: &ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::shape("jacobi_eig", format!("{n}x{n}"), format!("{}x{}", n, a.ncols())));
    }
    if n == 0 {
        return Ok((Array1::zeros(0), Array2::zeros((0, 0))));
    }

    let mut m = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            m[[i, j]] = 0.5 * (a[[i, j]] + a[[j, i]]);
        }
    }
    let scale = frob(&m.view());
    let mut p = Array2::eye(n);
    if scale == 0.0 {
        return Ok((Array1::zeros(n), p));
    }

    let target = JACOBI_REL_TOL * scale;
    let max_rotations = 100 * n * n;
    let mut rotations = 0usize;

    loop {
        let off = off_diagonal_mass(&m);
        if off <= target {
            break;
        }
        if rotations >= max_rotations {
            return Err(Error::EigNonConvergence { rotations, off, target });
        }
        for i in 0..n - 1 {
            for j in i + 1..n {
                let apq = m[[i, j]];
                if apq == 0.0 {
                    continue;
                }
                // Skip rotations that cannot move the off-diagonal mass at
                // this precision; they only burn the budget.
                if apq.abs() < f64::EPSILON * target {
                    m[[i, j]] = 0.0;
                    m[[j, i]] = 0.0;
                    continue;
                }
                let tau = (m[[j, j]] - m[[i, i]]) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                let aii = m[[i, i]];
                let ajj = m[[j, j]];
                m[[i, i]] = aii - t * apq;
                m[[j, j]] = ajj + t * apq;
                m[[i, j]] = 0.0;
                m[[j, i]] = 0.0;
                for r in 0..n {
                    if r != i && r != j {
                        let ari = m[[r, i]];
                        let arj = m[[r, j]];
                        m[[r, i]] = c * ari - s * arj;
                        m[[r, j]] = s * ari + c * arj;
                        m[[i, r]] = m[[r, i]];
                        m[[j, r]] = m[[r, j]];
                    }
                }
                for r in 0..n {
                    let pri = p[[r, i]];
                    let prj = p[[r, j]];
                    p[[r, i]] = c * pri - s * prj;
                    p[[r, j]] = s * pri + c * prj;
                }
                rotations += 1;
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| m[[y, y]].partial_cmp(&m[[x, x]]).unwrap());
    let eigenvalues = Array1::from_iter(order.iter().map(|&k| m[[k, k]]));
    let mut vectors = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..n {
            vectors[[r, dst]] = p[[r, src]];
        }
    }
    Ok((eigenvalues, vectors))
}

/// Singular values of a rectangular matrix, descending.
///
/// Computed from the eigenvalues of the smaller Gram matrix; accurate enough
/// for numerical-rank decisions, which is all it is used for.
pub(crate) fn singular_values(a: &ArrayView2<f64>) -> Result<Array1<f64>> {
    let (r, c) = (a.nrows(), a.ncols());
    let gram = if r <= c { a.dot(&a.t()) } else { a.t().dot(a) };
    let (eig, _) = jacobi_eig(&gram.view())?;
    Ok(eig.mapv(|v| v.max(0.0).sqrt()))
}

/// Count of singular values above `rel_tol` times the largest. Resolution
/// is limited to ~1e-7 by the Gram-matrix route.
pub(crate) fn numerical_rank(a: &ArrayView2<f64>, rel_tol: f64) -> Result<usize> {
    let sv = singular_values(a)?;
    let top = sv.first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return Ok(0);
    }
    Ok(sv.iter().filter(|&&s| s > rel_tol * top).count())
}

/// Orthonormal basis for the numerical null space of `a` (columns of the
/// result, living in the domain of `a`). Because singular values come from
/// the Gram matrix, `rel_tol` below ~1e-7 cannot be resolved.
pub(crate) fn null_space(a: &ArrayView2<f64>, rel_tol: f64) -> Result<Array2<f64>> {
    let c = a.ncols();
    let gram = a.t().dot(a);
    let (eig, vecs) = jacobi_eig(&gram.view())?;
    let top = eig.first().copied().unwrap_or(0.0).max(0.0).sqrt();
    let cutoff = (rel_tol * top).powi(2);
    let keep: Vec<usize> = (0..c).filter(|&j| eig[j].max(0.0) <= cutoff.max(0.0)).collect();
    let mut out = Array2::zeros((c, keep.len()));
    for (dst, &src) in keep.iter().enumerate() {
        for r in 0..c {
            out[[r, dst]] = vecs[[r, src]];
        }
    }
    Ok(out)
}

/// Haar-ish random orthogonal matrix: Gram-Schmidt on a gaussian draw.
pub(crate) fn random_orthogonal(d: usize, rng: &mut impl rand::Rng) -> Array2<f64> {
    use rand_distr::StandardNormal;
    let a = Array2::from_shape_fn((d, d), |_| rng.sample::<f64, _>(StandardNormal));
    let mut q = Array2::<f64>::zeros((d, d));
    for j in 0..d {
        let mut v = a.column(j).to_owned();
        for i in 0..j {
            let proj = q.column(i).dot(&a.column(j));
            v = &v - &(q.column(i).to_owned() * proj);
        }
        let norm = v.dot(&v).sqrt();
        q.column_mut(j).assign(&(v / norm));
    }
    q
}

/// Result of a least-squares solve.
#[derive(Debug, Clone)]
pub(crate) struct Lstsq {
    pub coeffs: Array1<f64>,
    pub rank: usize,
    pub rank_deficient: bool,
    /// Ridge weight used for the minimum-norm fallback; 0 when full rank.
    pub ridge: f64,
}

const RANK_REL_TOL: f64 = 1e-10;

/// Minimize `‖Φc − y‖₂` by Householder QR with column pivoting.
///
/// Full-rank systems are solved directly from the factorization.
/// Rank-deficient systems (including underdetermined ones) are re-solved with
/// a ridge term `1e-12·trace(ΦᵀΦ)/m`, which approximates the minimum-norm
/// solution and is flagged in the result.
pub(crate) fn lstsq(phi: &ArrayView2<f64>, y: &ArrayView1<f64>) -> Result<Lstsq> {
    let (n, m) = (phi.nrows(), phi.ncols());
    if y.len() != n {
        return Err(Error::shape("lstsq", n, y.len()));
    }
    if m == 0 {
        return Ok(Lstsq { coeffs: Array1::zeros(0), rank: 0, rank_deficient: false, ridge: 0.0 });
    }

    let (rank, coeffs_opt) = qr_pivoted_solve(phi, y)?;
    if let Some(coeffs) = coeffs_opt {
        return Ok(Lstsq { coeffs, rank, rank_deficient: false, ridge: 0.0 });
    }

    let gram_trace: f64 = phi.iter().map(|v| v * v).sum();
    let ridge = 1e-12 * gram_trace / m as f64;
    let sqrt_ridge = ridge.sqrt().max(f64::MIN_POSITIVE.sqrt());
    let mut aug = Array2::zeros((n + m, m));
    aug.slice_mut(ndarray::s![..n, ..]).assign(phi);
    for j in 0..m {
        aug[[n + j, j]] = sqrt_ridge;
    }
    let mut rhs = Array1::zeros(n + m);
    rhs.slice_mut(ndarray::s![..n]).assign(y);
    let (_, coeffs_opt) = qr_pivoted_solve(&aug.view(), &rhs.view())?;
    let coeffs = coeffs_opt.expect("ridge-augmented system is full rank");
    Ok(Lstsq { coeffs, rank, rank_deficient: true, ridge })
}

/// One pass of pivoted Householder QR. Returns the detected rank and, when the
/// system has full column rank, the solution.
fn qr_pivoted_solve(
    phi: &ArrayView2<f64>,
    y: &ArrayView1<f64>,
) -> Result<(usize, Option<Array1<f64>>)> {
    let (n, m) = (phi.nrows(), phi.ncols());
    let mut a = phi.to_owned();
    let mut b = y.to_owned();
    let mut perm: Vec<usize> = (0..m).collect();
    let steps = n.min(m);
    let mut r00: f64 = 0.0;
    let mut rank = 0usize;

    for k in 0..steps {
        // Pivot: bring the column with the largest remaining norm to front.
        let mut best = k;
        let mut best_norm = 0.0;
        for j in k..m {
            let nrm: f64 = (k..n).map(|i| a[[i, j]] * a[[i, j]]).sum();
            if nrm > best_norm {
                best_norm = nrm;
                best = j;
            }
        }
        if best != k {
            perm.swap(k, best);
            for i in 0..n {
                let tmp = a[[i, k]];
                a[[i, k]] = a[[i, best]];
                a[[i, best]] = tmp;
            }
        }

        let col_norm = best_norm.sqrt();
        if k == 0 {
            r00 = col_norm;
        }
        if col_norm <= RANK_REL_TOL * r00 || col_norm == 0.0 {
            break;
        }
        rank += 1;

        // Householder reflection zeroing a[k+1.., k].
        let alpha = if a[[k, k]] >= 0.0 { -col_norm } else { col_norm };
        let mut v = Array1::zeros(n - k);
        v[0] = a[[k, k]] - alpha;
        for i in k + 1..n {
            v[i - k] = a[[i, k]];
        }
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            for j in k..m {
                let dot: f64 = (k..n).map(|i| v[i - k] * a[[i, j]]).sum();
                let coef = 2.0 * dot / vnorm2;
                for i in k..n {
                    a[[i, j]] -= coef * v[i - k];
                }
            }
            let dot: f64 = (k..n).map(|i| v[i - k] * b[i]).sum();
            let coef = 2.0 * dot / vnorm2;
            for i in k..n {
                b[i] -= coef * v[i - k];
            }
        }
        a[[k, k]] = alpha;
        for i in k + 1..n {
            a[[i, k]] = 0.0;
        }
    }

    if rank < m {
        return Ok((rank, None));
    }

    // Back substitution, then undo the permutation.
    let mut x = Array1::zeros(m);
    for k in (0..m).rev() {
        let mut acc = b[k];
        for j in k + 1..m {
            acc -= a[[k, j]] * x[j];
        }
        x[k] = acc / a[[k, k]];
    }
    let mut out = Array1::zeros(m);
    for (pos, &orig) in perm.iter().enumerate() {
        out[orig] = x[pos];
    }
    Ok((rank, Some(out)))
}
