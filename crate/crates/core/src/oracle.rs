//! Convex certification: lift inputs to quadratic (or degree-p) monomial
//! features, solve the least-squares problem over the symmetric coefficient
//! matrix/tensor, and turn its eigendecomposition into network weights.
//!
//! The optimum of this convex problem lower-bounds the training loss of every
//! network of the matching degree, so it certifies whether a trained model
//! reached a global minimum.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::QLLayer;

/// Eigendecomposition `A = PΣPᵀ` with orthonormal `P` and eigenvalues sorted
/// descending by value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EigDecomp {
    pub eigenvalues: Array1<f64>,
    pub eigenvectors: Array2<f64>,
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// The input is symmetrized internally. Convergence is declared at relative
/// off-diagonal mass `1e-12` within a budget of `100·d²` rotations;
/// exceeding the budget reports the iteration diagnostics in the error.
pub fn sym_eig(a: &ArrayView2<f64>) -> Result<EigDecomp> {
    let (eigenvalues, eigenvectors) = linalg::jacobi_eig(a)?;
    Ok(EigDecomp { eigenvalues, eigenvectors })
}

/// Index multisets `i_1 ≤ … ≤ i_p` over `{0..d-1}`, in lexicographic order.
/// One multiset per degree-`p` monomial.
pub fn monomial_multisets(d: usize, p: u32) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = vec![0usize; p as usize];
    loop {
        out.push(cur.clone());
        let mut pos = p as usize;
        loop {
            if pos == 0 {
                return out;
            }
            pos -= 1;
            if cur[pos] + 1 < d {
                let v = cur[pos] + 1;
                for slot in cur.iter_mut().skip(pos) {
                    *slot = v;
                }
                break;
            }
        }
    }
}

/// `p! / ∏ mult!` — the number of index tuples collapsing onto a multiset.
fn multinomial_weight(multiset: &[usize]) -> f64 {
    let p = multiset.len();
    let mut fact = vec![1.0f64; p + 1];
    for i in 1..=p {
        fact[i] = fact[i - 1] * i as f64;
    }
    let mut weight = fact[p];
    let mut run = 1usize;
    for i in 1..=p {
        if i < p && multiset[i] == multiset[i - 1] {
            run += 1;
        } else {
            weight /= fact[run];
            run = 1;
        }
    }
    weight
}

/// Number of quadratic features: `d(d+1)/2`.
pub fn quad_feature_count(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Quadratic monomials `x_i x_j` for `i ≤ j` in lexicographic order
/// (`x₁², x₁x₂, …, x₂², …`), optionally followed by the norm feature `‖x‖²`.
///
/// Coefficient convention: the fitted coefficient of `x_i²` is `A_ii` and the
/// fitted coefficient of `x_i x_j` (`i < j`) is `2A_ij`, so
/// `A • xxᵀ = dot(coefficients(A), lift_quadratic(x))`.
pub fn lift_quadratic(x: &ArrayView1<f64>, include_norm: bool) -> Array1<f64> {
    let d = x.len();
    let mut out = Vec::with_capacity(quad_feature_count(d) + include_norm as usize);
    for i in 0..d {
        for j in i..d {
            out.push(x[i] * x[j]);
        }
    }
    if include_norm {
        out.push(x.iter().map(|v| v * v).sum());
    }
    Array1::from_vec(out)
}

fn monomial_value(x: &ArrayView1<f64>, multiset: &[usize]) -> f64 {
    multiset.iter().map(|&i| x[i]).product()
}

/// The coefficient vector of a symmetric matrix under the quadratic-feature
/// convention above.
pub fn quad_coefficients(a: &ArrayView2<f64>) -> Array1<f64> {
    let d = a.nrows();
    let mut out = Vec::with_capacity(quad_feature_count(d));
    for i in 0..d {
        for j in i..d {
            out.push(if i == j { a[[i, i]] } else { a[[i, j]] + a[[j, i]] });
        }
    }
    Array1::from_vec(out)
}

/// Globally optimal solution of the lifted least-squares problem.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleSolution {
    pub degree: u32,
    pub include_norm: bool,
    /// Fitted monomial coefficients (norm coefficient last when present).
    pub coeffs: Array1<f64>,
    /// Reconstructed symmetric coefficient matrix (degree 2 only).
    pub a: Option<Array2<f64>>,
    pub alpha_star: Option<f64>,
    /// Optimal mean-squared error `(1/N)Σ r²`.
    pub loss_star: f64,
    /// `‖Σ r_n X_n‖_Fro` at the optimum (degree-p analogue for p > 2).
    pub residual_norm: f64,
    /// Whether the feature matrix was rank-deficient (minimum-norm solve).
    pub rank_deficient: bool,
    /// Numerical rank detected by the pivoted factorization.
    pub rank: usize,
    pub ridge: f64,
}

impl OracleSolution {
    pub fn predict(&self, x: &ArrayView1<f64>) -> f64 {
        let phi = self.features(x);
        phi.dot(&self.coeffs)
    }

    pub fn predict_batch(&self, x: &ArrayView2<f64>) -> Array1<f64> {
        Array1::from_iter((0..x.nrows()).map(|n| self.predict(&x.row(n))))
    }

    fn features(&self, x: &ArrayView1<f64>) -> Array1<f64> {
        if self.degree == 2 {
            lift_quadratic(x, self.include_norm)
        } else {
            let multisets = monomial_multisets(x.len(), self.degree);
            Array1::from_iter(multisets.iter().map(|mu| monomial_value(x, mu)))
        }
    }

    /// The optimal normalized error `loss_star·N/Σy²` for this dataset.
    pub fn nmse_star(&self, data: &Dataset) -> Result<f64> {
        let sum_y2 = data.sum_y_squared();
        if sum_y2 == 0.0 {
            return Err(Error::ZeroTargets);
        }
        Ok(self.loss_star * (data.len() * data.outputs()) as f64 / sum_y2)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn feature_matrix(data: &Dataset, degree: u32, include_norm: bool) -> Result<Array2<f64>> {
    let n = data.len();
    let d = data.dim();
    if degree == 2 {
        let cols = quad_feature_count(d) + include_norm as usize;
        let mut phi = Array2::zeros((n, cols));
        for row in 0..n {
            phi.row_mut(row).assign(&lift_quadratic(&data.x.row(row), include_norm));
        }
        Ok(phi)
    } else {
        if include_norm {
            return Err(Error::Config(
                "the norm feature is only defined for the quadratic oracle".into(),
            ));
        }
        let multisets = monomial_multisets(d, degree);
        let mut phi = Array2::zeros((n, multisets.len()));
        for row in 0..n {
            let x = data.x.row(row);
            for (c, mu) in multisets.iter().enumerate() {
                phi[[row, c]] = monomial_value(&x, mu);
            }
        }
        Ok(phi)
    }
}

fn solve_channel(
    data: &Dataset,
    phi: &Array2<f64>,
    y: &ArrayView1<f64>,
    degree: u32,
    include_norm: bool,
) -> Result<OracleSolution> {
    let n = data.len();
    let d = data.dim();
    let sol = linalg::lstsq(&phi.view(), y)?;
    let preds = phi.dot(&sol.coeffs);
    let r = y - &preds;
    let loss_star = r.iter().map(|v| v * v).sum::<f64>() / n as f64;

    let (a, alpha_star) = if degree == 2 {
        let mut a = Array2::zeros((d, d));
        let mut idx = 0;
        for i in 0..d {
            for j in i..d {
                let c = sol.coeffs[idx];
                if i == j {
                    a[[i, i]] = c;
                } else {
                    a[[i, j]] = c / 2.0;
                    a[[j, i]] = c / 2.0;
                }
                idx += 1;
            }
        }
        let alpha = include_norm.then(|| sol.coeffs[sol.coeffs.len() - 1]);
        (Some(a), alpha)
    } else {
        (None, None)
    };

    // KKT certificate ‖Σ r_n x_n^{⊗degree}‖_Fro. For degree 2 this is the
    // Frobenius norm of the residual matrix; higher degrees weight each
    // monomial by its tuple multiplicity.
    let residual_norm = if degree == 2 {
        let weighted =
            Array2::from_shape_fn(data.x.raw_dim(), |(row, col)| r[row] * data.x[[row, col]]);
        let s = data.x.t().dot(&weighted);
        s.iter().map(|v| v * v).sum::<f64>().sqrt()
    } else {
        let multisets = monomial_multisets(d, degree);
        let mut acc = 0.0;
        for (c, mu) in multisets.iter().enumerate() {
            let g: f64 = (0..n).map(|row| r[row] * phi[[row, c]]).sum();
            acc += multinomial_weight(mu) * g * g;
        }
        acc.sqrt()
    };

    Ok(OracleSolution {
        degree,
        include_norm,
        coeffs: sol.coeffs,
        a,
        alpha_star,
        loss_star,
        residual_norm,
        rank_deficient: sol.rank_deficient,
        rank: sol.rank,
        ridge: sol.ridge,
    })
}

/// Solve the convex counterpart for a scalar-output dataset.
pub fn solve_oracle(data: &Dataset, degree: u32, include_norm: bool) -> Result<OracleSolution> {
    if degree < 2 {
        return Err(Error::Config(format!("oracle degree must be ≥ 2, got {degree}")));
    }
    let y = data.y_scalar()?;
    let phi = feature_matrix(data, degree, include_norm)?;
    solve_channel(data, &phi, &y, degree, include_norm)
}

/// One oracle solution per output channel of a multivariate dataset; the
/// lifted feature matrix depends only on the inputs and is shared.
pub fn solve_oracle_channels(
    data: &Dataset,
    degree: u32,
    include_norm: bool,
) -> Result<Vec<OracleSolution>> {
    if degree < 2 {
        return Err(Error::Config(format!("oracle degree must be ≥ 2, got {degree}")));
    }
    let phi = feature_matrix(data, degree, include_norm)?;
    (0..data.outputs())
        .map(|ch| solve_channel(data, &phi, &data.y.column(ch), degree, include_norm))
        .collect()
}

/// Combined optimal loss `(1/(MN))ΣΣ r²` from per-channel solutions.
pub fn combined_loss_star(solutions: &[OracleSolution]) -> f64 {
    solutions.iter().map(|s| s.loss_star).sum::<f64>() / solutions.len() as f64
}

/// Globally optimal single layer with `k = d` neurons via the oracle followed
/// by an eigendecomposition: `λ = σ`, `Q = P`, `α = α*`. The returned layer
/// has orthonormal `Q`, so its orthogonality penalty vanishes.
pub fn closed_form_solver(data: &Dataset, include_norm: bool) -> Result<QLLayer> {
    let sol = solve_oracle(data, 2, include_norm)?;
    let a = sol.a.as_ref().expect("degree-2 oracle always reconstructs A");
    let eig = sym_eig(&a.view())?;
    QLLayer::scalar(eig.eigenvectors, eig.eigenvalues, sol.alpha_star.unwrap_or(0.0))
}

/// Convex fit of the output weights only, with the first-layer columns held
/// fixed: least squares over the features `(q_jᵀx_n)²`.
pub fn lambda_only_fit(data: &Dataset, fixed_q: &ArrayView2<f64>) -> Result<Array1<f64>> {
    if fixed_q.nrows() != data.dim() {
        return Err(Error::shape("lambda_only_fit", data.dim(), fixed_q.nrows()));
    }
    let y = data.y_scalar()?;
    let s = data.x.dot(fixed_q);
    let z = &s * &s;
    let sol = linalg::lstsq(&z.view(), &y)?;
    Ok(sol.coeffs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_independent, gen_planted_dense, Dataset, DatasetMeta, Planted};
    use crate::model::Network;
    use crate::objective::{loss_mse, penalty_orth};
    use ndarray::array;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn lift_quadratic_hand_examples() {
        let f = lift_quadratic(&array![1.0, 2.0].view(), false);
        assert_eq!(f.to_vec(), vec![1.0, 2.0, 4.0]);
        let f = lift_quadratic(&array![1.0, 0.0, 0.0].view(), false);
        assert_eq!(f.to_vec(), vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn lift_quadratic_contracts_like_bullet_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let d = 4;
            let raw = randn(d, d, &mut rng);
            let a = (&raw + &raw.t()) * 0.5;
            let x = Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal));
            let direct = x.dot(&a.dot(&x));
            let via_features = quad_coefficients(&a.view()).dot(&lift_quadratic(&x.view(), false));
            assert!((direct - via_features).abs() <= 1e-12 * (1.0 + direct.abs()));
        }
    }

    #[test]
    fn monomials_reduce_to_quadratic_order() {
        let sets = monomial_multisets(3, 2);
        assert_eq!(sets, vec![
            vec![0, 0], vec![0, 1], vec![0, 2],
            vec![1, 1], vec![1, 2], vec![2, 2]
        ]);
        assert_eq!(multinomial_weight(&[0, 0]), 1.0);
        assert_eq!(multinomial_weight(&[0, 1]), 2.0);
        assert_eq!(multinomial_weight(&[0, 1, 2]), 6.0);
        assert_eq!(multinomial_weight(&[0, 0, 1, 1]), 6.0);
    }

    #[test]
    fn oracle_recovers_planted_matrix() {
        let data = gen_planted_dense(4, 60, 5).unwrap();
        let Planted::Matrix(a_true) = &data.meta.planted else { panic!() };
        let sol = solve_oracle(&data, 2, false).unwrap();
        assert!(sol.loss_star <= 1e-12 * data.sum_y_squared());
        let a = sol.a.as_ref().unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert!(
                    (a[[i, j]] - a_true[[i, j]]).abs() <= 1e-6,
                    "A[{i},{j}]: {} vs {}",
                    a[[i, j]],
                    a_true[[i, j]]
                );
            }
        }
    }

    #[test]
    fn oracle_minimum_norm_single_sample() {
        let data = Dataset::from_scalar_targets(
            array![[1.0, 0.0]],
            array![5.0],
            DatasetMeta { generator: "t".into(), seed: 0, planted: Planted::None },
        )
        .unwrap();
        let sol = solve_oracle(&data, 2, false).unwrap();
        assert!(sol.rank_deficient);
        let a = sol.a.as_ref().unwrap();
        assert!((a[[0, 0]] - 5.0).abs() < 1e-5);
        assert!(a[[0, 1]].abs() < 1e-9);
        assert!(a[[1, 1]].abs() < 1e-9);
        assert!(sol.loss_star <= 1e-12 * (1.0 + data.sum_y_squared()));
    }

    #[test]
    fn oracle_matches_independent_normal_equations() {
        let data = gen_independent(4, 80, 9).unwrap();
        let sol = solve_oracle(&data, 2, false).unwrap();
        // Independent oracle: dense normal equations solved by Gaussian
        // elimination on the same features.
        let phi = feature_matrix(&data, 2, false).unwrap();
        let gram = phi.t().dot(&phi);
        let rhs = phi.t().dot(&data.y.column(0));
        let coeffs = gauss_solve(gram, rhs);
        let preds = phi.dot(&coeffs);
        let loss: f64 = data
            .y
            .column(0)
            .iter()
            .zip(preds.iter())
            .map(|(&y, &p)| (y - p) * (y - p))
            .sum::<f64>()
            / 80.0;
        assert!(loss > 0.0);
        assert!(
            (sol.loss_star - loss).abs() <= 1e-9 * loss,
            "{} vs {}",
            sol.loss_star,
            loss
        );
    }

    #[test]
    fn oracle_kkt_certificate() {
        let data = gen_independent(5, 100, 13).unwrap();
        let sol = solve_oracle(&data, 2, false).unwrap();
        // Scale: Σ‖X_n‖·max residual of the zero model.
        let max_y = data.y.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        let sum_xn: f64 = (0..data.len())
            .map(|n| {
                let norm2: f64 = data.x.row(n).iter().map(|v| v * v).sum();
                norm2
            })
            .sum();
        assert!(
            sol.residual_norm <= 1e-7 * sum_xn * max_y,
            "KKT residual {} too large",
            sol.residual_norm
        );
    }

    #[test]
    fn sym_eig_contract() {
        let e = sym_eig(&array![[2.0, 0.0], [0.0, -1.0]].view()).unwrap();
        assert_eq!(e.eigenvalues.to_vec(), vec![2.0, -1.0]);

        let zero = Array2::<f64>::zeros((3, 3));
        let e = sym_eig(&zero.view()).unwrap();
        assert!(e.eigenvalues.iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let raw = randn(8, 8, &mut rng);
        let a = (&raw + &raw.t()) * 0.5;
        let e = sym_eig(&a.view()).unwrap();
        let p = &e.eigenvectors;
        let recon = p.dot(&Array2::from_diag(&e.eigenvalues)).dot(&p.t());
        let err: f64 = (&recon - &a).iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err <= 1e-9 * scale);
        let gram_err: f64 = (&p.t().dot(p) - &Array2::<f64>::eye(8))
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        assert!(gram_err <= 1e-10);
    }

    #[test]
    fn closed_form_solver_reaches_oracle() {
        for (seed, include_norm) in [(3u64, false), (4, true)] {
            let data = gen_independent(5, 90, seed).unwrap();
            let sol = solve_oracle(&data, 2, include_norm).unwrap();
            let layer = closed_form_solver(&data, include_norm).unwrap();
            let loss = loss_mse(&Network::Single(layer.clone()), &data).unwrap();
            assert!(
                (loss - sol.loss_star).abs() <= 1e-9 * (1.0 + sol.loss_star),
                "loss {loss} vs oracle {}",
                sol.loss_star
            );
            assert!(penalty_orth(&layer.q.view()) <= 1e-9);

            // Extra zero-padded neurons change nothing.
            let k = layer.neurons();
            let mut q_pad = Array2::zeros((5, k + 3));
            q_pad.slice_mut(ndarray::s![.., ..k]).assign(&layer.q);
            let mut l_pad = Array1::zeros(k + 3);
            l_pad.slice_mut(ndarray::s![..k]).assign(&layer.lambda.row(0));
            let padded = QLLayer::scalar(q_pad, l_pad, layer.alpha[0]).unwrap();
            let loss_pad = loss_mse(&Network::Single(padded), &data).unwrap();
            assert!((loss_pad - loss).abs() <= 1e-12 * (1.0 + loss));
        }
    }

    #[test]
    fn closed_form_solver_recovers_planted_signs() {
        let data = crate::data::gen_planted_diagonal(6, 80, 21).unwrap();
        let Planted::DiagonalSigns(signs) = &data.meta.planted else { panic!() };
        let layer = closed_form_solver(&data, false).unwrap();
        let loss = loss_mse(&Network::Single(layer.clone()), &data).unwrap();
        let nmse = loss * data.len() as f64 / data.sum_y_squared();
        assert!(nmse <= 1e-10);
        let mut got: Vec<f64> = layer.lambda.row(0).to_vec();
        let mut want = signs.clone();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() <= 1e-6, "{g} vs {w}");
        }
    }

    #[test]
    fn norm_feature_absorbs_into_matrix() {
        let data = gen_independent(4, 70, 31).unwrap();
        let with_norm = solve_oracle(&data, 2, true).unwrap();
        let without = solve_oracle(&data, 2, false).unwrap();
        // Same optimum: α·I is inside the representable set either way.
        assert!(
            (with_norm.loss_star - without.loss_star).abs() <= 1e-9 * (1.0 + without.loss_star)
        );
        // Absorbing α*I into A reproduces identical predictions.
        let a = with_norm.a.as_ref().unwrap();
        let alpha = with_norm.alpha_star.unwrap();
        let mut absorbed = a.clone();
        for i in 0..4 {
            absorbed[[i, i]] += alpha;
        }
        for n in 0..data.len() {
            let x = data.x.row(n);
            let p1 = with_norm.predict(&x);
            let p2 = quad_coefficients(&absorbed.view()).dot(&lift_quadratic(&x, false));
            assert!((p1 - p2).abs() <= 1e-10 * (1.0 + p1.abs()));
        }
    }

    #[test]
    fn degree_four_oracle_matches_brute_force_at_d2() {
        let data = gen_planted_dense(2, 50, 41).unwrap();
        let sol = solve_oracle(&data, 4, false).unwrap();
        assert_eq!(sol.coeffs.len(), 5); // multisets of size 4 over {0,1}
        let phi = feature_matrix(&data, 4, false).unwrap();
        let gram = phi.t().dot(&phi);
        let rhs = phi.t().dot(&data.y.column(0));
        let coeffs = gauss_solve(gram, rhs);
        let preds = phi.dot(&coeffs);
        let loss: f64 = data
            .y
            .column(0)
            .iter()
            .zip(preds.iter())
            .map(|(&y, &p)| (y - p) * (y - p))
            .sum::<f64>()
            / 50.0;
        assert!((sol.loss_star - loss).abs() <= 1e-9 * (1.0 + loss));
    }

    #[test]
    fn lambda_only_fit_scalar_formula() {
        let data = gen_independent(3, 50, 51).unwrap();
        let q = Array2::from_shape_fn((3, 1), |(i, _)| if i == 0 { 1.0 } else { 0.0 });
        let lambda = lambda_only_fit(&data, &q.view()).unwrap();
        let y = data.y_scalar().unwrap();
        let num: f64 = (0..50).map(|n| y[n] * data.x[[n, 0]].powi(2)).sum();
        let den: f64 = (0..50).map(|n| data.x[[n, 0]].powi(4)).sum();
        assert!((lambda[0] - num / den).abs() <= 1e-9 * (1.0 + (num / den).abs()));
    }

    #[test]
    fn lambda_only_fit_basis_reaches_oracle() {
        // E_ij basis: q_ij = e_i + e_j, k = C(d+1, 2) = 6 at d = 3.
        let data = gen_planted_dense(3, 40, 61).unwrap();
        let mut cols = Vec::new();
        for i in 0..3 {
            for j in i..3 {
                let mut c = vec![0.0; 3];
                c[i] += 1.0;
                c[j] += 1.0;
                cols.push(c);
            }
        }
        let q = Array2::from_shape_fn((3, 6), |(r, c)| cols[c][r]);
        let lambda = lambda_only_fit(&data, &q.view()).unwrap();
        let layer = QLLayer::scalar(q, lambda, 0.0).unwrap();
        let loss = loss_mse(&Network::Single(layer), &data).unwrap();
        assert!(loss <= 1e-10 * (1.0 + data.sum_y_squared()));
    }

    #[test]
    fn lambda_only_fit_recovers_closed_form_solution() {
        let data = gen_independent(4, 60, 71).unwrap();
        let layer = closed_form_solver(&data, false).unwrap();
        let lambda = lambda_only_fit(&data, &layer.q.view()).unwrap();
        let refit = QLLayer::scalar(layer.q.clone(), lambda, 0.0).unwrap();
        let l1 = loss_mse(&Network::Single(layer), &data).unwrap();
        let l2 = loss_mse(&Network::Single(refit), &data).unwrap();
        assert!((l1 - l2).abs() <= 1e-9 * (1.0 + l1));
    }

    /// The convex optimum lower-bounds every trained model's loss.
    #[test]
    fn oracle_lower_bounds_trained_models() {
        use crate::objective::ObjectiveConfig;
        use crate::optimize::{initialize, train, InitScheme, NetworkArch, TrainConfig};
        for seed in 0..3u64 {
            let data = gen_independent(4, 50, 80 + seed).unwrap();
            let sol = solve_oracle(&data, 2, false).unwrap();
            let arch = NetworkArch::Single { d: 4, k: 4, outputs: 1 };
            let net = initialize(&arch, &InitScheme::default(), seed).unwrap();
            let cfg = TrainConfig { max_epochs: 400, ..TrainConfig::default() };
            for obj in [ObjectiveConfig::plain(), ObjectiveConfig::added_norm()] {
                let trace = train(&net, &data, &obj, &cfg).unwrap();
                let loss = loss_mse(&trace.final_model, &data).unwrap();
                assert!(
                    loss >= sol.loss_star - 1e-9 * (1.0 + sol.loss_star),
                    "trained loss {loss} beat the certified optimum {}",
                    sol.loss_star
                );
            }
        }
    }

    fn gauss_solve(mut a: Array2<f64>, mut b: Array1<f64>) -> Array1<f64> {
        let n = a.nrows();
        for k in 0..n {
            let mut piv = k;
            for i in k + 1..n {
                if a[[i, k]].abs() > a[[piv, k]].abs() {
                    piv = i;
                }
            }
            if piv != k {
                for j in 0..n {
                    let t = a[[k, j]];
                    a[[k, j]] = a[[piv, j]];
                    a[[piv, j]] = t;
                }
                b.swap(k, piv);
            }
            for i in k + 1..n {
                let f = a[[i, k]] / a[[k, k]];
                for j in k..n {
                    a[[i, j]] -= f * a[[k, j]];
                }
                b[i] -= f * b[k];
            }
        }
        let mut x = Array1::zeros(n);
        for k in (0..n).rev() {
            let mut acc = b[k];
            for j in k + 1..n {
                acc -= a[[k, j]] * x[j];
            }
            x[k] = acc / a[[k, k]];
        }
        x
    }
}
