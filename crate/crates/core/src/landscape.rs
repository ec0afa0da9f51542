//! Stationary-point classification and the constructive spurious-minimum
//! family.
//!
//! A candidate point of a single-layer model is classified against the convex
//! oracle: first-order stationarity, distance to the certified optimum, an
//! explicit negative-curvature search over the first-layer weights, and the
//! semidefiniteness of the residual matrix `S = Σ r_n X_n`. Points with
//! semidefinite `S` and no curvature escape are exactly the problematic ones
//! that the added-norm regressor removes: a trainable α forces
//! `trace(S) = 0` and hence `S = 0` at stationarity.

use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetMeta, Planted};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{Network, QLLayer};
use crate::objective::{self, ObjectiveConfig};
use crate::oracle::OracleSolution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PointTag {
    GlobalMin,
    NegativeCurvature,
    /// Stationary, not global, and no curvature direction found; the
    /// evidence eigenvalues show whether `S` is numerically semidefinite
    /// (only possible when α is pinned).
    SemidefiniteResidualNonGlobal,
    NotStationary,
}

/// Classification verdict with the numerical evidence that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointClass {
    pub tag: PointTag,
    pub grad_norm: f64,
    pub loss: f64,
    pub loss_star: f64,
    pub s_min_eig: f64,
    pub s_max_eig: f64,
    pub q_rank: usize,
    pub curvature_value: Option<f64>,
    pub curvature_direction: Option<Array2<f64>>,
}

/// Scale-aware tolerances for the classifier.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ClassifyTols {
    /// Stationarity: `‖grad‖ ≤ grad`.
    pub grad: f64,
    /// Optimality: `loss ≤ loss_star + loss`.
    pub loss: f64,
    /// Semidefiniteness margin relative to `‖S‖`.
    pub semidefinite_rel: f64,
    /// Curvature acceptance: `h(U) < −curvature·‖U‖²`.
    pub curvature: f64,
    /// Numerical-rank threshold relative to the largest singular value.
    pub rank_rel: f64,
}

impl ClassifyTols {
    pub fn for_instance(data: &Dataset, loss_star: f64) -> Self {
        let y_scale = data.sum_y_squared() / data.len() as f64;
        ClassifyTols {
            grad: 1e-6 * (1.0 + y_scale),
            loss: 1e-6 * (1.0 + loss_star),
            semidefinite_rel: 1e-8,
            curvature: 1e-8 * (1.0 + y_scale),
            rank_rel: 1e-6,
        }
    }
}

/// Search for a first-layer direction of strictly negative curvature.
///
/// Structured candidates `U = uvᵀ` pair the extreme eigenvectors of `S`
/// (and the left null space of `Q`) with the numerical null space of `QΛ`;
/// 200 seeded gaussian probes serve as a fallback. Returns the first
/// direction with `hess_quadform_q(U) < −tol·‖U‖²`.
pub fn negative_curvature_search(
    layer: &QLLayer,
    data: &Dataset,
    cfg: &ObjectiveConfig,
    tol: f64,
) -> Result<Option<(Array2<f64>, f64)>> {
    if layer.outputs() != 1 {
        return Err(Error::shape("negative_curvature_search", 1, layer.outputs()));
    }
    let d = layer.input_dim();
    let k = layer.neurons();

    let s = objective::residual_matrix(layer, data, 0)?;
    let (s_eigs, s_vecs) = linalg::jacobi_eig(&s.view())?;

    let mut u_candidates: Vec<Array1<f64>> = Vec::new();
    u_candidates.push(s_vecs.column(0).to_owned());
    u_candidates.push(s_vecs.column(d - 1).to_owned());
    // Left null space of Q (relevant for the penalized objective).
    let left_null = linalg::null_space(&layer.q.t(), 1e-6)?;
    for c in 0..left_null.ncols() {
        u_candidates.push(left_null.column(c).to_owned());
    }
    let _ = s_eigs;

    // Null space of QΛ in output-weight space.
    let q_lambda = {
        let mut m = layer.q.clone();
        for j in 0..k {
            let lj = layer.lambda[[0, j]];
            m.column_mut(j).mapv_inplace(|v| v * lj);
        }
        m
    };
    let v_null = linalg::null_space(&q_lambda.view(), 1e-6)?;
    let mut v_candidates: Vec<Array1<f64>> = Vec::new();
    for c in 0..v_null.ncols() {
        v_candidates.push(v_null.column(c).to_owned());
    }

    let try_direction = |u: &Array2<f64>| -> Result<Option<(Array2<f64>, f64)>> {
        let norm_sq: f64 = u.iter().map(|v| v * v).sum();
        if norm_sq == 0.0 {
            return Ok(None);
        }
        let value = objective::hess_quadform_q(layer, data, cfg, &u.view())?;
        if value < -tol * norm_sq {
            return Ok(Some((u.clone(), value)));
        }
        Ok(None)
    };

    for u_vec in &u_candidates {
        for v_vec in &v_candidates {
            let u = Array2::from_shape_fn((d, k), |(i, j)| u_vec[i] * v_vec[j]);
            if let Some(hit) = try_direction(&u)? {
                return Ok(Some(hit));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0xD1CE);
    for _ in 0..200 {
        let u = Array2::from_shape_fn((d, k), |_| rng.sample::<f64, _>(StandardNormal));
        if let Some(hit) = try_direction(&u)? {
            return Ok(Some(hit));
        }
    }
    Ok(None)
}

/// Classify a stationary-point candidate of a single-layer model against the
/// convex oracle.
pub fn classify_point(
    layer: &QLLayer,
    data: &Dataset,
    oracle: &OracleSolution,
    cfg: &ObjectiveConfig,
    tols: &ClassifyTols,
) -> Result<PointClass> {
    if layer.outputs() != 1 {
        return Err(Error::shape("classify_point", 1, layer.outputs()));
    }
    let net = Network::Single(layer.clone());
    let grad_norm = objective::grad(&net, data, cfg)?.norm();
    let loss = objective::loss_mse(&net, data)?;

    let s = objective::residual_matrix(layer, data, 0)?;
    let (s_eigs, _) = linalg::jacobi_eig(&s.view())?;
    let s_max_eig = s_eigs[0];
    let s_min_eig = s_eigs[s_eigs.len() - 1];
    let q_rank = linalg::numerical_rank(&layer.q.view(), tols.rank_rel)?;

    let mut class = PointClass {
        tag: PointTag::NotStationary,
        grad_norm,
        loss,
        loss_star: oracle.loss_star,
        s_min_eig,
        s_max_eig,
        q_rank,
        curvature_value: None,
        curvature_direction: None,
    };

    if grad_norm > tols.grad {
        return Ok(class);
    }
    if loss <= oracle.loss_star + tols.loss {
        class.tag = PointTag::GlobalMin;
        return Ok(class);
    }
    if let Some((direction, value)) =
        negative_curvature_search(layer, data, cfg, tols.curvature)?
    {
        class.tag = PointTag::NegativeCurvature;
        class.curvature_value = Some(value);
        class.curvature_direction = Some(direction);
        return Ok(class);
    }
    class.tag = PointTag::SemidefiniteResidualNonGlobal;
    Ok(class)
}

/// Whether the evidence eigenvalues mark `S` as numerically semidefinite.
pub fn residual_is_semidefinite(class: &PointClass, tols: &ClassifyTols) -> bool {
    let scale = class.s_max_eig.abs().max(class.s_min_eig.abs());
    let margin = tols.semidefinite_rel * scale;
    class.s_min_eig >= -margin || class.s_max_eig <= margin
}

/// Construct the spurious-minimum family: realizable data with strictly
/// positive targets (`y_n = x_nᵀAx_n`, `A ≻ 0` normalized to unit Frobenius
/// norm) and the trapped point `(λ = −1, Q = 0, α = 0)` with `k = d` neurons.
///
/// At this point the gradient in `(λ, Q)` vanishes exactly, every
/// perturbation that keeps `λ ≺ 0` cannot decrease the loss, and
/// `S = Σ y_n X_n ≻ 0` for `N ≥ d` generic samples, while the convex optimum
/// is zero — a spurious local minimum.
pub fn make_example1(d: usize, n: usize, seed: u64) -> Result<(Dataset, QLLayer)> {
    if d == 0 || n == 0 {
        return Err(Error::Config("make_example1 needs d ≥ 1, N ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = Array2::from_shape_fn((d, d), |_| rng.sample::<f64, _>(StandardNormal));
    let mut a = b.t().dot(&b);
    for i in 0..d {
        a[[i, i]] += 1.0;
    }
    let norm: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    a.mapv_inplace(|v| v / norm);

    let x = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));
    let y = Array1::from_shape_fn(n, |row| {
        let xr = x.row(row);
        xr.dot(&a.dot(&xr))
    });
    let data = Dataset::from_scalar_targets(
        x,
        y,
        DatasetMeta { generator: "example1".into(), seed, planted: Planted::Matrix(a) },
    )?;
    let layer = QLLayer::scalar(
        Array2::zeros((d, d)),
        Array1::from_elem(d, -1.0),
        0.0,
    )?;
    Ok((data, layer))
}
