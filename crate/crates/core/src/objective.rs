//! Empirical losses, orthogonality penalties, analytic gradients, and the
//! second-order quadratic form used for landscape analysis.
//!
//! The trained objective is `F = loss_mse + γ·penalty`. The mean-squared loss
//! is normalized by `1/N` (scalar output) or `1/(MN)` (multivariate); the
//! penalty is an additive term and is *not* divided by `N`. Inputs are never
//! lifted to `X_n = x_nx_nᵀ` explicitly — every contraction is factorized
//! through `q_jᵀx_n`, so the cost stays `O(Ndk)`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{DeepQLNet, Network, PolyLayer, QLLayer};

/// Which orthogonality penalty is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyMode {
    /// `‖QQᵀ − I‖²` on the raw quadratic weights of every layer (the
    /// default, and the only form that stays affordable at MNIST scale).
    PerLayer,
    /// Deep nets: the Gram penalty `‖Q̃ᵀQ̃ − I‖²` on the matricized
    /// per-unit transformation matrices of the hidden layers (the form used
    /// by the overparameterized-depth guarantee; cost grows with the fourth
    /// power of the layer width, desk-scale only).
    Matricized,
    /// Multivariate nets with `k = M·d` neurons: a separate `‖Q_bQ_bᵀ − I‖²`
    /// per consecutive `d`-column block.
    OutputBlocks,
}

/// Loss/penalty configuration for training and analysis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    /// Orthogonality-penalty weight γ ≥ 0.
    pub gamma: f64,
    /// Whether the norm-regressor coefficients α are trainable; pinned
    /// coefficients keep their value but receive zero gradient.
    pub use_alpha: bool,
    pub penalty_mode: PenaltyMode,
}

impl ObjectiveConfig {
    /// The unmodified objective: no penalty, α pinned.
    pub fn plain() -> Self {
        ObjectiveConfig { gamma: 0.0, use_alpha: false, penalty_mode: PenaltyMode::PerLayer }
    }

    /// Added-norm variant: α trainable, γ = 0.
    pub fn added_norm() -> Self {
        ObjectiveConfig { gamma: 0.0, use_alpha: true, penalty_mode: PenaltyMode::PerLayer }
    }

    /// Orthogonality-penalty variant: α pinned at its current value.
    pub fn orth_penalty(gamma: f64) -> Self {
        ObjectiveConfig { gamma, use_alpha: false, penalty_mode: PenaltyMode::PerLayer }
    }

    pub fn with_penalty_mode(mut self, mode: PenaltyMode) -> Self {
        self.penalty_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 || !self.gamma.is_finite() {
            return Err(Error::Config(format!("gamma must be finite and ≥ 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// The γ just above the threshold that guarantees full-rank trajectories for
/// the penalty variant: `(1/(MN))·Σ y² + ε`.
pub fn default_gamma(data: &Dataset) -> f64 {
    data.sum_y_squared() / (data.len() * data.outputs()) as f64 + 1e-6
}

/// Per-sample residuals `r_{nm} = y_{nm} − prediction_{nm}`, stored `N × M`.
#[derive(Debug, Clone)]
pub struct Residuals {
    pub r: Array2<f64>,
}

pub fn residuals(net: &Network, data: &Dataset) -> Result<Residuals> {
    if net.input_dim() != data.dim() {
        return Err(Error::shape("residuals", net.input_dim(), data.dim()));
    }
    if net.outputs() != data.outputs() {
        return Err(Error::shape("residuals outputs", net.outputs(), data.outputs()));
    }
    let preds = net.predict_batch(&data.x.view())?;
    Ok(Residuals { r: &data.y - &preds })
}

/// Mean-squared error `(1/(MN))·Σ r²`, accumulated per output channel so the
/// multivariate loss decomposes exactly into channel losses.
pub fn loss_mse(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let res = residuals(net, data)?;
    Ok(loss_from_residuals(&res.r.view(), data.len()))
}

pub(crate) fn loss_from_residuals(r: &ArrayView2<f64>, n: usize) -> f64 {
    let m = r.ncols();
    let mut total = 0.0;
    for c in 0..m {
        let acc: f64 = r.column(c).iter().map(|v| v * v).sum();
        total += acc / n as f64;
    }
    total / m as f64
}

/// `‖QQᵀ − I‖²_Fro`.
pub fn penalty_orth(q: &ArrayView2<f64>) -> f64 {
    let d = q.nrows();
    let gram = q.dot(&q.t());
    let mut acc = 0.0;
    for i in 0..d {
        for j in 0..d {
            let v = gram[[i, j]] - if i == j { 1.0 } else { 0.0 };
            acc += v * v;
        }
    }
    acc
}

/// `‖QᵀQ − I‖²_Fro` (Gram form, used by the matricized deep penalty).
fn penalty_gram(q: &ArrayView2<f64>) -> f64 {
    let k = q.ncols();
    let gram = q.t().dot(q);
    let mut acc = 0.0;
    for i in 0..k {
        for j in 0..k {
            let v = gram[[i, j]] - if i == j { 1.0 } else { 0.0 };
            acc += v * v;
        }
    }
    acc
}

/// `‖(QᵀQ)^{⊙p} − I_k‖²_Fro`, the polynomial-layer penalty.
pub fn penalty_poly(q: &ArrayView2<f64>, degree: u32) -> f64 {
    let k = q.ncols();
    let gram = q.t().dot(q);
    let p = degree as i32;
    let mut acc = 0.0;
    for i in 0..k {
        for j in 0..k {
            let v = gram[[i, j]].powi(p) - if i == j { 1.0 } else { 0.0 };
            acc += v * v;
        }
    }
    acc
}

fn matricized_columns(layer: &crate::model::QLPair) -> Array2<f64> {
    let h_prev = layer.input_dim();
    let h = layer.output_dim();
    let mut b = Array2::zeros((h_prev * h_prev, h));
    for i in 0..h {
        let a = layer.unit_matrix(i);
        for (idx, v) in a.iter().enumerate() {
            b[[idx, i]] = *v;
        }
    }
    b
}

/// Raw (un-weighted) penalty value of a network under the given mode.
pub fn penalty_value(net: &Network, cfg: &ObjectiveConfig) -> Result<f64> {
    match net {
        Network::Single(l) => match cfg.penalty_mode {
            PenaltyMode::OutputBlocks => {
                let d = l.input_dim();
                if l.neurons() % d != 0 {
                    return Err(Error::Config(format!(
                        "per-block penalty needs k divisible by d; k={}, d={}",
                        l.neurons(),
                        d
                    )));
                }
                let mut acc = 0.0;
                for b in 0..l.neurons() / d {
                    let block = l.q.slice(ndarray::s![.., b * d..(b + 1) * d]);
                    acc += penalty_orth(&block);
                }
                Ok(acc)
            }
            _ => Ok(penalty_orth(&l.q.view())),
        },
        Network::Deep(n) => match cfg.penalty_mode {
            PenaltyMode::Matricized => {
                let depth = n.depth();
                let mut acc = 0.0;
                for (l, layer) in n.layers.iter().enumerate() {
                    if l + 1 < depth {
                        let b = matricized_columns(layer);
                        acc += penalty_gram(&b.view());
                    } else {
                        acc += penalty_orth(&layer.q.view());
                    }
                }
                Ok(acc)
            }
            _ => Ok(n.layers.iter().map(|layer| penalty_orth(&layer.q.view())).sum()),
        },
        Network::Poly(l) => Ok(penalty_poly(&l.q.view(), l.degree)),
    }
}

/// Full training objective `loss_mse + γ·penalty`.
pub fn objective_value(net: &Network, data: &Dataset, cfg: &ObjectiveConfig) -> Result<f64> {
    let loss = loss_mse(net, data)?;
    if cfg.gamma == 0.0 {
        return Ok(loss);
    }
    Ok(loss + cfg.gamma * penalty_value(net, cfg)?)
}

/// Gradients of the full objective, mirroring the model's parameters.
#[derive(Debug, Clone)]
pub enum GradientSet {
    Single { q: Array2<f64>, lambda: Array2<f64>, alpha: Array1<f64> },
    Deep { layers: Vec<(Array2<f64>, Array2<f64>)> },
    Poly { q: Array2<f64>, lambda: Array1<f64> },
}

impl GradientSet {
    /// Euclidean norm over every coordinate.
    pub fn norm(&self) -> f64 {
        self.flat().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Flattened coordinates in the same order as [`Network::params_flat`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        match self {
            GradientSet::Single { q, lambda, alpha } => {
                out.extend(q.iter());
                out.extend(lambda.iter());
                out.extend(alpha.iter());
            }
            GradientSet::Deep { layers } => {
                for (q, w) in layers {
                    out.extend(q.iter());
                    out.extend(w.iter());
                }
            }
            GradientSet::Poly { q, lambda } => {
                out.extend(q.iter());
                out.extend(lambda.iter());
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.flat().iter().all(|v| v.is_finite())
    }
}

/// Gradient of `γ‖QQᵀ−I‖²` (the γ factor is applied by the caller): `4(QQᵀ−I)Q`.
fn orth_penalty_grad(q: &ArrayView2<f64>) -> Array2<f64> {
    let d = q.nrows();
    let mut gram = q.dot(&q.t());
    for i in 0..d {
        gram[[i, i]] -= 1.0;
    }
    gram.dot(q) * 4.0
}

fn single_penalty_grad(l: &QLLayer, cfg: &ObjectiveConfig) -> Result<Array2<f64>> {
    match cfg.penalty_mode {
        PenaltyMode::OutputBlocks => {
            let d = l.input_dim();
            if l.neurons() % d != 0 {
                return Err(Error::Config(format!(
                    "per-block penalty needs k divisible by d; k={}, d={}",
                    l.neurons(),
                    d
                )));
            }
            let mut grad = Array2::zeros(l.q.raw_dim());
            for b in 0..l.neurons() / d {
                let cols = ndarray::s![.., b * d..(b + 1) * d];
                let block = l.q.slice(cols);
                grad.slice_mut(cols).assign(&orth_penalty_grad(&block));
            }
            Ok(grad)
        }
        _ => Ok(orth_penalty_grad(&l.q.view())),
    }
}

fn grad_single(
    l: &QLLayer,
    data: &Dataset,
    cfg: &ObjectiveConfig,
) -> Result<(GradientSet, f64)> {
    let n = data.len() as f64;
    let m = l.outputs() as f64;
    let x = data.x.view();
    let sq = x.dot(&l.q); // N × k
    let z = &sq * &sq;
    let mut preds = z.dot(&l.lambda.t()); // N × M
    let norms = data.x.map_axis(Axis(1), |row| row.iter().map(|v| v * v).sum::<f64>());
    if l.alpha.iter().any(|&a| a != 0.0) {
        for (mut row, &n2) in preds.axis_iter_mut(Axis(0)).zip(norms.iter()) {
            row.zip_mut_with(&l.alpha, |o, &a| *o += a * n2);
        }
    }
    let r = &data.y - &preds; // N × M
    let loss = loss_from_residuals(&r.view(), data.len());

    let scale_l = -2.0 / (m * n);
    let d_lambda = r.t().dot(&z) * scale_l; // M × k

    let scale_q = -4.0 / (m * n);
    let c = r.dot(&l.lambda); // N × k
    let mut d_q = data.x.t().dot(&(&c * &sq)) * scale_q; // d × k
    if cfg.gamma > 0.0 {
        d_q = d_q + single_penalty_grad(l, cfg)? * cfg.gamma;
    }

    let d_alpha = if cfg.use_alpha {
        let mut da = Array1::zeros(l.outputs());
        for ch in 0..l.outputs() {
            let acc: f64 = r.column(ch).iter().zip(norms.iter()).map(|(&ri, &ni)| ri * ni).sum();
            da[ch] = scale_l * acc;
        }
        da
    } else {
        Array1::zeros(l.outputs())
    };

    Ok((GradientSet::Single { q: d_q, lambda: d_lambda, alpha: d_alpha }, loss))
}

fn grad_deep(
    net: &DeepQLNet,
    data: &Dataset,
    cfg: &ObjectiveConfig,
) -> Result<(GradientSet, f64)> {
    let n = data.len() as f64;
    let depth = net.depth();
    // Forward with caches.
    let mut activations = Vec::with_capacity(depth + 1); // x^{(l)}, N × h_l
    let mut projections = Vec::with_capacity(depth); // s^{(l)}, N × m_l
    let mut squares = Vec::with_capacity(depth); // z^{(l)}
    activations.push(data.x.to_owned());
    for layer in &net.layers {
        let s = activations.last().unwrap().dot(&layer.q);
        let z = &s * &s;
        activations.push(z.dot(&layer.w.t()));
        projections.push(s);
        squares.push(z);
    }
    let out = activations.last().unwrap();
    if out.ncols() != data.outputs() {
        return Err(Error::shape("grad deep", data.outputs(), out.ncols()));
    }
    let r = &data.y - out;
    let loss = loss_from_residuals(&r.view(), data.len());
    // ∂loss/∂x^{(L)} = −(2/N)·r (scalar output; h_L = M).
    let mut upstream = r * (-2.0 / (n * data.outputs() as f64));

    let mut grads: Vec<(Array2<f64>, Array2<f64>)> = vec![Default::default(); depth];
    for l in (0..depth).rev() {
        let layer = &net.layers[l];
        let d_w = upstream.t().dot(&squares[l]); // h_l × m_l
        let d_z = upstream.dot(&layer.w); // N × m_l
        let d_s = &d_z * &projections[l] * 2.0;
        let d_q = activations[l].t().dot(&d_s); // h_{l-1} × m_l
        upstream = d_s.dot(&layer.q.t()); // N × h_{l-1}
        grads[l] = (d_q, d_w);
    }

    if cfg.gamma > 0.0 {
        match cfg.penalty_mode {
            PenaltyMode::Matricized => {
                for l in 0..depth {
                    let layer = &net.layers[l];
                    if l + 1 < depth {
                        let (pq, pw) = matricized_penalty_grad(layer);
                        grads[l].0 = &grads[l].0 + &(pq * cfg.gamma);
                        grads[l].1 = &grads[l].1 + &(pw * cfg.gamma);
                    } else {
                        grads[l].0 =
                            &grads[l].0 + &(orth_penalty_grad(&layer.q.view()) * cfg.gamma);
                    }
                }
            }
            _ => {
                for l in 0..depth {
                    grads[l].0 = &grads[l].0
                        + &(orth_penalty_grad(&net.layers[l].q.view()) * cfg.gamma);
                }
            }
        }
    }

    Ok((GradientSet::Deep { layers: grads }, loss))
}

/// Gradient of the Gram penalty `‖Q̃ᵀQ̃ − I‖²` through both the quadratic and
/// linear weights of one hidden layer, where column `i` of `Q̃` is
/// `vec(Q diag(w_i) Qᵀ)`.
fn matricized_penalty_grad(layer: &crate::model::QLPair) -> (Array2<f64>, Array2<f64>) {
    let h = layer.output_dim();
    let b = matricized_columns(layer); // h_prev² × h
    let mut gram = b.t().dot(&b);
    for i in 0..h {
        gram[[i, i]] -= 1.0;
    }
    let bg = b.dot(&gram); // h_prev² × h; column j = Σ_i G_{ij} vec(A_i)
    let h_prev = layer.input_dim();
    let mut d_q = Array2::zeros(layer.q.raw_dim());
    let mut d_w = Array2::zeros(layer.w.raw_dim());
    for j in 0..h {
        // D_j = 4·unvec(bg_{:,j}), symmetric.
        let mut dj = Array2::zeros((h_prev, h_prev));
        for (idx, v) in bg.column(j).iter().enumerate() {
            dj[[idx / h_prev, idx % h_prev]] = 4.0 * *v;
        }
        // ∂P/∂Q += 2·D_j·Q·diag(w_j); ∂P/∂w_{jt} = q_tᵀ D_j q_t.
        let djq = dj.dot(&layer.q); // h_prev × m
        for t in 0..layer.hidden_units() {
            let w_jt = layer.w[[j, t]];
            for rr in 0..h_prev {
                d_q[[rr, t]] += 2.0 * djq[[rr, t]] * w_jt;
            }
            let qt = layer.q.column(t);
            d_w[[j, t]] += qt.dot(&dj.dot(&qt));
        }
    }
    (d_q, d_w)
}

fn grad_poly(
    l: &PolyLayer,
    data: &Dataset,
    cfg: &ObjectiveConfig,
) -> Result<(GradientSet, f64)> {
    let n = data.len() as f64;
    let p = l.degree as i32;
    let s = data.x.dot(&l.q); // N × k
    let s_pm1 = s.mapv(|v| v.powi(p - 1));
    let s_p = &s_pm1 * &s;
    let y = data.y_scalar()?;
    let preds = s_p.dot(&l.lambda);
    let r = &y.to_owned() - &preds; // N
    let loss = r.iter().map(|v| v * v).sum::<f64>() / n;

    let d_lambda = s_p.t().dot(&r) * (-2.0 / n);

    let weighted = Array2::from_shape_fn(s_pm1.raw_dim(), |(row, col)| {
        r[row] * l.lambda[col] * s_pm1[[row, col]]
    });
    let mut d_q = data.x.t().dot(&weighted) * (-2.0 * p as f64 / n);

    if cfg.gamma > 0.0 {
        // ∇‖(QᵀQ)^{⊙p} − I‖² = 4p·Q·[(G^{⊙p} − I) ⊙ G^{⊙(p−1)}].
        let gram = l.q.t().dot(&l.q);
        let k = gram.nrows();
        let mut h = Array2::zeros((k, k));
        for i in 0..k {
            for j in 0..k {
                let g = gram[[i, j]];
                let gp = g.powi(p) - if i == j { 1.0 } else { 0.0 };
                h[[i, j]] = gp * g.powi(p - 1);
            }
        }
        d_q = d_q + l.q.dot(&h) * (4.0 * p as f64 * cfg.gamma);
    }

    Ok((GradientSet::Poly { q: d_q, lambda: d_lambda }, loss))
}

/// Analytic gradient of the full objective for any network variant.
pub fn grad(net: &Network, data: &Dataset, cfg: &ObjectiveConfig) -> Result<GradientSet> {
    Ok(grad_with_value(net, data, cfg)?.0)
}

/// Gradient together with the loss and raw penalty at the same point, from a
/// single pass over the data.
pub fn grad_with_value(
    net: &Network,
    data: &Dataset,
    cfg: &ObjectiveConfig,
) -> Result<(GradientSet, f64, f64)> {
    cfg.validate()?;
    if net.input_dim() != data.dim() {
        return Err(Error::shape("grad", net.input_dim(), data.dim()));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (g, loss) = match net {
        Network::Single(l) => grad_single(l, data, cfg)?,
        Network::Deep(n) => grad_deep(n, data, cfg)?,
        Network::Poly(l) => grad_poly(l, data, cfg)?,
    };
    let penalty = if cfg.gamma > 0.0 { penalty_value(net, cfg)? } else { 0.0 };
    Ok((g, loss, penalty))
}

/// The residual matrix `S = Σ_n r_{n,channel}·x_nx_nᵀ` of a single-layer
/// model; zero exactly at global minima, semidefinite at the problematic
/// stationary points.
pub fn residual_matrix(layer: &QLLayer, data: &Dataset, channel: usize) -> Result<Array2<f64>> {
    if channel >= layer.outputs() {
        return Err(Error::shape("residual_matrix channel", layer.outputs(), channel));
    }
    let net = Network::Single(layer.clone());
    let res = residuals(&net, data)?;
    let r = res.r.column(channel);
    let weighted = Array2::from_shape_fn(data.x.raw_dim(), |(row, col)| r[row] * data.x[[row, col]]);
    let s = data.x.t().dot(&weighted);
    Ok((&s + &s.t()) * 0.5)
}

/// Exact second directional derivative `d²/dt² F(Q + tU)` of the objective in
/// a first-layer direction `U`, all other parameters held fixed:
///
/// `(8/(MN))·Σ_{m,n}(X_nQΛ_m • U)² − (4/(MN))·Σ_{m,n} r_{mn}·X_n • UΛ_mUᵀ`
/// plus, when γ > 0, `γ·(2‖QUᵀ+UQᵀ‖² + 4(QQᵀ−I) • UUᵀ)` per penalty block.
pub fn hess_quadform_q(
    layer: &QLLayer,
    data: &Dataset,
    cfg: &ObjectiveConfig,
    u: &ArrayView2<f64>,
) -> Result<f64> {
    if u.nrows() != layer.input_dim() || u.ncols() != layer.neurons() {
        return Err(Error::shape(
            "hess_quadform_q",
            format!("{}x{}", layer.input_dim(), layer.neurons()),
            format!("{}x{}", u.nrows(), u.ncols()),
        ));
    }
    let n = data.len() as f64;
    let m = layer.outputs() as f64;
    let net = Network::Single(layer.clone());
    let res = residuals(&net, data)?;

    let sq = data.x.dot(&layer.q); // N × k
    let su = data.x.dot(u); // N × k
    let prod = &sq * &su;
    let su_sq = &su * &su;

    let mut data_term = 0.0;
    for ch in 0..layer.outputs() {
        let lam = layer.lambda.row(ch);
        let t1 = prod.dot(&lam); // N; (X_nQΛ)•U per sample
        let b = su_sq.dot(&lam); // N; X_n•UΛUᵀ per sample
        let r = res.r.column(ch);
        let sum_sq: f64 = t1.iter().map(|v| v * v).sum();
        let sum_rb: f64 = r.iter().zip(b.iter()).map(|(&ri, &bi)| ri * bi).sum();
        data_term += 8.0 * sum_sq - 4.0 * sum_rb;
    }
    let mut value = data_term / (m * n);

    if cfg.gamma > 0.0 {
        let blocks: Vec<(usize, usize)> = match cfg.penalty_mode {
            PenaltyMode::OutputBlocks => {
                let d = layer.input_dim();
                if layer.neurons() % d != 0 {
                    return Err(Error::Config("per-block penalty needs k divisible by d".into()));
                }
                (0..layer.neurons() / d).map(|b| (b * d, (b + 1) * d)).collect()
            }
            _ => vec![(0, layer.neurons())],
        };
        for (lo, hi) in blocks {
            let qb = layer.q.slice(ndarray::s![.., lo..hi]);
            let ub = u.slice(ndarray::s![.., lo..hi]);
            let a = &qb.dot(&ub.t()) + &ub.dot(&qb.t());
            let norm_a: f64 = a.iter().map(|v| v * v).sum();
            let mut gram = qb.dot(&qb.t());
            for i in 0..gram.nrows() {
                gram[[i, i]] -= 1.0;
            }
            let uu = ub.dot(&ub.t());
            let cross: f64 = gram.iter().zip(uu.iter()).map(|(&g, &x)| g * x).sum();
            value += cfg.gamma * (2.0 * norm_a + 4.0 * cross);
        }
    }
    Ok(value)
}

/// Loss of the relaxed parametrization `(α, M, Q)` with a full symmetric
/// middle matrix: `(1/N)·Σ (y_n − x_nᵀQMQᵀx_n − α‖x_n‖²)²`.
pub fn loss_with_matrix_weights(
    alpha: f64,
    m_sym: &ArrayView2<f64>,
    q: &ArrayView2<f64>,
    data: &Dataset,
) -> Result<f64> {
    if m_sym.nrows() != q.ncols() || m_sym.ncols() != q.ncols() {
        return Err(Error::shape("loss_with_matrix_weights", q.ncols(), m_sym.nrows()));
    }
    let y = data.y_scalar()?;
    let sq = data.x.dot(q); // N × k
    let sm = sq.dot(m_sym); // N × k
    let quad = (&sq * &sm).sum_axis(Axis(1));
    let mut acc = 0.0;
    for (row, (&yv, &qv)) in y.iter().zip(quad.iter()).enumerate() {
        let norm2: f64 = data.x.row(row).iter().map(|v| v * v).sum();
        let r = yv - qv - alpha * norm2;
        acc += r * r;
    }
    Ok(acc / data.len() as f64)
}

/// Map the relaxed point `(M, Q)` to the diagonal parametrization
/// `(Λ, QU)` through the eigendecomposition `M = UΛUᵀ`; the loss and the
/// penalty are preserved and `|supp(λ)| = rank(M)`.
pub fn equivalence_map(
    m_sym: &ArrayView2<f64>,
    q: &ArrayView2<f64>,
) -> Result<(Array1<f64>, Array2<f64>)> {
    if m_sym.nrows() != m_sym.ncols() {
        return Err(Error::shape("equivalence_map", m_sym.nrows(), m_sym.ncols()));
    }
    if q.ncols() != m_sym.nrows() {
        return Err(Error::shape("equivalence_map q", m_sym.nrows(), q.ncols()));
    }
    let (eig, u) = linalg::jacobi_eig(m_sym)?;
    Ok((eig, q.dot(&u)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_planted_dense, gen_planted_diagonal, DatasetMeta, Planted};
    use crate::model::{poly_basis_init, QLPair};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.sample::<f64, _>(StandardNormal))
    }

    fn randv(n: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
        Array1::from_shape_fn(n, |_| rng.sample::<f64, _>(StandardNormal))
    }

    fn random_dataset(d: usize, n: usize, m: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Dataset::new(
            randn(n, d, &mut rng),
            randn(n, m, &mut rng),
            DatasetMeta { generator: "test".into(), seed, planted: Planted::None },
        )
        .unwrap()
    }

    fn random_single(d: usize, k: usize, m: usize, seed: u64) -> QLLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        QLLayer::new(randn(d, k, &mut rng), randn(m, k, &mut rng), randv(m, &mut rng) * 0.3)
            .unwrap()
    }

    fn random_deep(widths: &[usize], hidden: &[usize], seed: u64) -> DeepQLNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..hidden.len())
            .map(|l| QLPair {
                q: randn(widths[l], hidden[l], &mut rng) * 0.7,
                w: randn(widths[l + 1], hidden[l], &mut rng) * 0.7,
            })
            .collect();
        DeepQLNet::new(layers).unwrap()
    }

    /// Central finite differences of the full objective over the flat
    /// parameter vector.
    fn fd_grad(net: &Network, data: &Dataset, cfg: &ObjectiveConfig, h: f64) -> Vec<f64> {
        let base = net.params_flat();
        let spans = net.param_spans();
        let mut group_of = Vec::new();
        for (g, len) in &spans {
            group_of.extend(std::iter::repeat_n(*g, *len));
        }
        let mut out = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            if group_of[i] == crate::model::ParamGroup::Alpha && !cfg.use_alpha {
                out.push(0.0);
                continue;
            }
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            let mut net_p = net.clone();
            net_p.set_params_flat(&plus).unwrap();
            let mut net_m = net.clone();
            net_m.set_params_flat(&minus).unwrap();
            let fp = objective_value(&net_p, data, cfg).unwrap();
            let fm = objective_value(&net_m, data, cfg).unwrap();
            out.push((fp - fm) / (2.0 * h));
        }
        out
    }

    fn assert_grad_close(analytic: &[f64], fd: &[f64], rel: f64) {
        let scale = analytic
            .iter()
            .chain(fd.iter())
            .fold(0.0f64, |acc, &v| acc.max(v.abs()))
            .max(1e-12);
        for (i, (&a, &f)) in analytic.iter().zip(fd.iter()).enumerate() {
            let denom = a.abs().max(f.abs()).max(1e-6 * scale);
            assert!(
                (a - f).abs() <= rel * denom,
                "coordinate {i}: analytic {a:.12e} vs fd {f:.12e} (rel {:.3e})",
                (a - f).abs() / denom
            );
        }
    }

    #[test]
    fn loss_zero_predictor_is_mean_square_target() {
        let data = random_dataset(3, 20, 1, 1);
        let layer = QLLayer::scalar(Array2::zeros((3, 4)), Array1::zeros(4), 0.0).unwrap();
        let loss = loss_mse(&Network::Single(layer), &data).unwrap();
        let expect = data.sum_y_squared() / 20.0;
        assert!((loss - expect).abs() <= 1e-12 * (1.0 + expect));
    }

    #[test]
    fn loss_zero_at_interpolation() {
        let layer = random_single(4, 5, 1, 3);
        let mut data = random_dataset(4, 30, 1, 4);
        let preds = Network::Single(layer.clone()).predict_batch(&data.x.view()).unwrap();
        data.y.assign(&preds);
        let loss = loss_mse(&Network::Single(layer), &data).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn loss_matches_assembled_coefficient_matrix() {
        let layer = random_single(4, 6, 2, 8);
        let data = random_dataset(4, 25, 2, 9);
        let loss = loss_mse(&Network::Single(layer.clone()), &data).unwrap();
        let mut acc = 0.0;
        for ch in 0..2 {
            let a = layer.coefficient_matrix(ch);
            let mut channel = 0.0;
            for n in 0..25 {
                let x = data.x.row(n);
                let pred = x.dot(&a.dot(&x));
                let r = data.y[[n, ch]] - pred;
                channel += r * r;
            }
            acc += channel / 25.0;
        }
        acc /= 2.0;
        assert!((loss - acc).abs() <= 1e-12 * (1.0 + acc));
    }

    #[test]
    fn penalty_identity_and_zero() {
        assert_eq!(penalty_orth(&Array2::eye(4).view()), 0.0);
        let zero = Array2::<f64>::zeros((3, 3));
        assert_eq!(penalty_orth(&zero.view()), 3.0);
    }

    #[test]
    fn penalty_rank_bound_rank_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let u = randv(3, &mut rng);
            let v = randv(3, &mut rng);
            let q = Array2::from_shape_fn((3, 3), |(i, j)| u[i] * v[j]);
            assert!(penalty_orth(&q.view()) >= 2.0 - 1e-9);
        }
    }

    /// Lower bound `penalty ≥ d − r` for every rank r < d (d ≤ 6).
    #[test]
    fn penalty_rank_bound_general() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for d in 2..=6usize {
            for r in 1..d {
                for _ in 0..200 {
                    let left = randn(d, r, &mut rng);
                    let right = randn(r, d, &mut rng);
                    let q = left.dot(&right);
                    let p = penalty_orth(&q.view());
                    assert!(
                        p >= (d - r) as f64 - 1e-9,
                        "d={d} r={r}: penalty {p} below bound {}",
                        d - r
                    );
                }
            }
        }
    }

    #[test]
    fn gradient_zero_at_interpolating_point() {
        let layer = random_single(4, 5, 1, 21);
        let mut data = random_dataset(4, 30, 1, 22);
        let net = Network::Single(layer);
        let preds = net.predict_batch(&data.x.view()).unwrap();
        data.y.assign(&preds);
        let g = grad(&net, &data, &ObjectiveConfig::added_norm()).unwrap();
        assert!(g.flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_at_zero_lambda_reduces_to_target_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let q = randn(3, 4, &mut rng);
        let layer = QLLayer::scalar(q.clone(), Array1::zeros(4), 0.0).unwrap();
        let data = random_dataset(3, 40, 1, 31);
        let g = grad(&Network::Single(layer), &data, &ObjectiveConfig::plain()).unwrap();
        let GradientSet::Single { q: gq, lambda: gl, .. } = g else { panic!() };
        assert!(gq.iter().all(|&v| v == 0.0));
        let y = data.y_scalar().unwrap();
        for j in 0..4 {
            let mut expect = 0.0;
            for n in 0..40 {
                let s: f64 = data.x.row(n).dot(&q.column(j));
                expect += y[n] * s * s;
            }
            expect *= -2.0 / 40.0;
            assert!((gl[[0, j]] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn gradient_matches_finite_differences_single() {
        for seed in 0..5u64 {
            let layer = random_single(4, 6, 1, 100 + seed);
            let data = random_dataset(4, 25, 1, 200 + seed);
            let cfg = ObjectiveConfig {
                gamma: 0.37,
                use_alpha: true,
                penalty_mode: PenaltyMode::PerLayer,
            };
            let net = Network::Single(layer);
            let g = grad(&net, &data, &cfg).unwrap().flat();
            let fd = fd_grad(&net, &data, &cfg, 1e-5);
            assert_grad_close(&g, &fd, 1e-5);
        }
    }

    #[test]
    fn gradient_matches_finite_differences_multivariate_blocks() {
        for seed in 0..3u64 {
            let layer = random_single(3, 6, 2, 300 + seed);
            let data = random_dataset(3, 20, 2, 400 + seed);
            let cfg = ObjectiveConfig {
                gamma: 0.8,
                use_alpha: true,
                penalty_mode: PenaltyMode::OutputBlocks,
            };
            let net = Network::Single(layer);
            let g = grad(&net, &data, &cfg).unwrap().flat();
            let fd = fd_grad(&net, &data, &cfg, 1e-5);
            assert_grad_close(&g, &fd, 1e-5);
        }
    }

    #[test]
    fn gradient_matches_finite_differences_deep() {
        for seed in 0..3u64 {
            let net = Network::Deep(random_deep(&[3, 4, 1], &[5, 6], 500 + seed));
            let data = random_dataset(3, 20, 1, 600 + seed);
            for mode in [PenaltyMode::PerLayer, PenaltyMode::Matricized] {
                let cfg = ObjectiveConfig { gamma: 0.45, use_alpha: false, penalty_mode: mode };
                let g = grad(&net, &data, &cfg).unwrap().flat();
                let fd = fd_grad(&net, &data, &cfg, 1e-5);
                assert_grad_close(&g, &fd, 2e-5);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences_poly() {
        for seed in 0..3u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
            let poly = PolyLayer::new(3, randn(3, 4, &mut rng) * 0.8, randv(4, &mut rng)).unwrap();
            let net = Network::Poly(poly);
            let data = random_dataset(3, 20, 1, 800 + seed);
            let cfg = ObjectiveConfig {
                gamma: 0.2,
                use_alpha: false,
                penalty_mode: PenaltyMode::PerLayer,
            };
            let g = grad(&net, &data, &cfg).unwrap().flat();
            let fd = fd_grad(&net, &data, &cfg, 1e-5);
            assert_grad_close(&g, &fd, 2e-5);
        }
    }

    #[test]
    fn poly_basis_penalty_positive_at_init() {
        let q = poly_basis_init(2, 3).unwrap();
        assert!(penalty_poly(&q.view(), 3) > 1.0);
    }

    /// Objective scaling symmetry at γ = 0: F(α, β²λ, Q/β) = F(α, λ, Q).
    #[test]
    fn objective_scaling_symmetry() {
        let layer = random_single(4, 5, 1, 41);
        let data = random_dataset(4, 30, 1, 42);
        let cfg = ObjectiveConfig::added_norm();
        let base = objective_value(&Network::Single(layer.clone()), &data, &cfg).unwrap();
        for beta in [0.5f64, 2.0, 10.0] {
            let scaled = QLLayer::new(
                layer.q.mapv(|v| v / beta),
                layer.lambda.mapv(|v| v * beta * beta),
                layer.alpha.clone(),
            )
            .unwrap();
            let val = objective_value(&Network::Single(scaled), &data, &cfg).unwrap();
            if beta == 0.5 || beta == 2.0 {
                assert_eq!(val, base, "beta={beta}");
            } else {
                assert!((val - base).abs() <= 1e-12 * (1.0 + base), "beta={beta}");
            }
        }
    }

    /// With block-disjoint output supports the multivariate loss equals the
    /// average of the per-channel losses, bit for bit.
    #[test]
    fn multivariate_loss_decomposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let d = 3;
        let k = 6;
        let q = randn(d, k, &mut rng);
        let mut lambda = Array2::zeros((2, k));
        for j in 0..3 {
            lambda[[0, j]] = rng.sample::<f64, _>(StandardNormal);
            lambda[[1, j + 3]] = rng.sample::<f64, _>(StandardNormal);
        }
        let alpha = randv(2, &mut rng);
        let layer = QLLayer::new(q.clone(), lambda.clone(), alpha.clone()).unwrap();
        let data = random_dataset(d, 15, 2, 56);
        let total = loss_mse(&Network::Single(layer), &data).unwrap();

        let mut acc = 0.0;
        for ch in 0..2 {
            let sub = QLLayer::new(
                q.clone(),
                lambda.row(ch).to_owned().insert_axis(Axis(0)),
                Array1::from_elem(1, alpha[ch]),
            )
            .unwrap();
            let sub_data = Dataset::from_scalar_targets(
                data.x.clone(),
                data.y.column(ch).to_owned(),
                data.meta.clone(),
            )
            .unwrap();
            acc += loss_mse(&Network::Single(sub), &sub_data).unwrap();
        }
        assert_eq!(total, acc / 2.0);
    }

    #[test]
    fn residual_matrix_simple_case() {
        // Zero model, y_n = 1, x_n = e1 → S = N·e1e1ᵀ.
        let n = 7;
        let mut x = Array2::zeros((n, 3));
        for row in 0..n {
            x[[row, 0]] = 1.0;
        }
        let data = Dataset::from_scalar_targets(
            x,
            Array1::ones(n),
            DatasetMeta { generator: "t".into(), seed: 0, planted: Planted::None },
        )
        .unwrap();
        let layer = QLLayer::scalar(Array2::zeros((3, 3)), Array1::zeros(3), 0.0).unwrap();
        let s = residual_matrix(&layer, &data, 0).unwrap();
        assert_eq!(s[[0, 0]], n as f64);
        assert!(s.iter().skip(1).all(|&v| v == 0.0 || v == n as f64));
    }

    #[test]
    fn residual_matrix_vanishes_at_closed_form_solution() {
        let data = crate::data::gen_independent(4, 60, 77).unwrap();
        let layer = crate::oracle::closed_form_solver(&data, false).unwrap();
        let s = residual_matrix(&layer, &data, 0).unwrap();
        let s_norm: f64 = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        // Scale: ‖Σ |y_n| X_n‖_Fro.
        let mut scale_mat = Array2::<f64>::zeros((4, 4));
        for n in 0..data.len() {
            let w = data.y[[n, 0]].abs();
            let x = data.x.row(n);
            for i in 0..4 {
                for j in 0..4 {
                    scale_mat[[i, j]] += w * x[i] * x[j];
                }
            }
        }
        let scale: f64 = scale_mat.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(s_norm <= 1e-8 * scale, "KKT residual {s_norm:.3e} vs scale {scale:.3e}");
    }

    #[test]
    fn hess_quadform_matches_second_differences() {
        for seed in 0..5u64 {
            let layer = random_single(4, 5, 1, 900 + seed);
            let data = random_dataset(4, 20, 1, 1000 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(1100 + seed);
            let mut u = randn(4, 5, &mut rng);
            let norm: f64 = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            u.mapv_inplace(|v| v / norm);
            let cfg = ObjectiveConfig {
                gamma: if seed % 2 == 0 { 0.0 } else { 0.6 },
                use_alpha: false,
                penalty_mode: PenaltyMode::PerLayer,
            };
            let analytic = hess_quadform_q(&layer, &data, &cfg, &u.view()).unwrap();
            let h = 1e-3;
            let eval = |t: f64| {
                let shifted = QLLayer::new(
                    &layer.q + &(&u * t),
                    layer.lambda.clone(),
                    layer.alpha.clone(),
                )
                .unwrap();
                objective_value(&Network::Single(shifted), &data, &cfg).unwrap()
            };
            let fd = (eval(h) - 2.0 * eval(0.0) + eval(-h)) / (h * h);
            let denom = analytic.abs().max(fd.abs()).max(1e-8);
            assert!(
                (analytic - fd).abs() <= 1e-4 * denom,
                "seed {seed}: analytic {analytic:.10e} vs fd {fd:.10e}"
            );
        }
    }

    #[test]
    fn hess_quadform_nonnegative_at_interpolation() {
        let layer = random_single(3, 4, 1, 71);
        let mut data = random_dataset(3, 25, 1, 72);
        let net = Network::Single(layer.clone());
        let preds = net.predict_batch(&data.x.view()).unwrap();
        data.y.assign(&preds);
        let cfg = ObjectiveConfig::plain();
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        for _ in 0..50 {
            let u = randn(3, 4, &mut rng);
            let value = hess_quadform_q(&layer, &data, &cfg, &u.view()).unwrap();
            assert!(value >= -1e-12, "negative curvature at interpolation: {value}");
            // r ≡ 0 leaves only the projection term (8/N)·Σ(X_nQΛ•U)².
            let sq = data.x.dot(&layer.q);
            let su = data.x.dot(&u);
            let t1 = (&sq * &su).dot(&layer.lambda.row(0));
            let expect = 8.0 / 25.0 * t1.iter().map(|v| v * v).sum::<f64>();
            assert!((value - expect).abs() <= 1e-10 * (1.0 + expect));
        }
    }

    /// A rank-deficient `QΛ` with indefinite `S` admits a structured negative
    /// direction `U = uvᵀ` with `v` in the null space of `QΛ`.
    #[test]
    fn hess_quadform_negative_direction_construction() {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        // Repeated column makes QΛ rank-deficient while every λ_i ≠ 0.
        let mut q = randn(3, 3, &mut rng);
        let col0 = q.column(0).to_owned();
        q.column_mut(2).assign(&col0);
        let lambda = array![1.0, -1.0, 1.0];
        let layer = QLLayer::scalar(q, lambda, 0.0).unwrap();
        let data = random_dataset(3, 30, 1, 82);

        let s = residual_matrix(&layer, &data, 0).unwrap();
        let (eigs, vecs) = crate::linalg::jacobi_eig(&s.view()).unwrap();
        assert!(eigs[0] > 0.0 && eigs[eigs.len() - 1] < 0.0, "S should be indefinite");

        // v = (1, 0, −1)/√2 is in the null space of QΛ and vᵀΛv = 2 ≠ 0.
        let v = array![1.0, 0.0, -1.0].mapv(|x| x / 2.0f64.sqrt());
        let u_vec = vecs.column(0); // top eigenvector of S
        let u = Array2::from_shape_fn((3, 3), |(i, j)| u_vec[i] * v[j]);
        let cfg = ObjectiveConfig::plain();
        let value = hess_quadform_q(&layer, &data, &cfg, &u.view()).unwrap();
        assert!(value < -1e-8, "expected negative curvature, got {value}");
    }

    #[test]
    fn equivalence_map_diagonal_input() {
        let m = Array2::from_diag(&array![3.0, -1.0, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let q = randn(4, 3, &mut rng);
        let (lambda, qu) = equivalence_map(&m.view(), &q.view()).unwrap();
        let mut sorted = vec![3.0, 0.5, -1.0];
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for (got, want) in lambda.iter().zip(sorted.iter()) {
            assert!((got - want).abs() < 1e-12);
        }
        // U is a signed permutation, so QU only permutes/flips columns.
        let mut base: Vec<f64> = q.iter().map(|v| v.abs()).collect();
        let mut mapped: Vec<f64> = qu.iter().map(|v| v.abs()).collect();
        base.sort_by(|a, b| a.partial_cmp(b).unwrap());
        mapped.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (a, b) in base.iter().zip(mapped.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn equivalence_map_preserves_loss_and_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(95);
        for rank in [1usize, 2, 4] {
            let d = 4;
            let k = 4;
            let left = randn(k, rank, &mut rng);
            let m = left.dot(&left.t()); // symmetric, known rank
            let q = randn(d, k, &mut rng);
            let data = random_dataset(d, 30, 1, 96 + rank as u64);
            let alpha = 0.3;
            let before = loss_with_matrix_weights(alpha, &m.view(), &q.view(), &data).unwrap();
            let (lambda, qu) = equivalence_map(&m.view(), &q.view()).unwrap();
            let layer = QLLayer::scalar(qu.clone(), lambda.clone(), alpha).unwrap();
            let after = loss_mse(&Network::Single(layer), &data).unwrap();
            assert!(
                (before - after).abs() <= 1e-10 * (1.0 + before),
                "rank {rank}: {before} vs {after}"
            );
            let max_abs = lambda.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
            let support = lambda.iter().filter(|&&v| v.abs() > 1e-8 * max_abs).count();
            assert_eq!(support, rank);
            // Penalty preserved: (QU)(QU)ᵀ = QQᵀ.
            let p_before = penalty_orth(&q.view());
            let p_after = penalty_orth(&qu.view());
            assert!((p_before - p_after).abs() <= 1e-9 * (1.0 + p_before));
        }
    }

    #[test]
    fn planted_losses_vanish() {
        let data = gen_planted_diagonal(5, 60, 7).unwrap();
        let Planted::DiagonalSigns(signs) = &data.meta.planted else { panic!() };
        let layer = QLLayer::scalar(
            Array2::eye(5),
            Array1::from_vec(signs.clone()),
            0.0,
        )
        .unwrap();
        let loss = loss_mse(&Network::Single(layer), &data).unwrap();
        assert!(loss <= 1e-20);

        let dense = gen_planted_dense(4, 50, 8).unwrap();
        let Planted::Matrix(a) = &dense.meta.planted else { panic!() };
        let (eigs, p) = crate::linalg::jacobi_eig(&a.view()).unwrap();
        let layer = QLLayer::scalar(p, eigs, 0.0).unwrap();
        let loss = loss_mse(&Network::Single(layer), &dense).unwrap();
        assert!(loss <= 1e-18 * (1.0 + dense.sum_y_squared()));
    }

    proptest! {
        #[test]
        fn grad_finite_on_random_points(seed in 0u64..200) {
            let layer = random_single(3, 4, 1, seed);
            let data = random_dataset(3, 10, 1, seed ^ 0xff);
            let cfg = ObjectiveConfig::orth_penalty(1.0);
            let g = grad(&Network::Single(layer), &data, &cfg).unwrap();
            prop_assert!(g.is_finite());
        }
    }
}
