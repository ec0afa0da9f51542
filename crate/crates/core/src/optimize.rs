//! First-order training loops with convergence and divergence detection.
//!
//! Full-batch gradient descent supports per-parameter-group step sizes and a
//! gradient-norm stop; ADAM and mini-batch SGD run on an epoch budget only,
//! since stochastic gradients do not vanish at optima. Identical seed and
//! configuration produce a bit-identical trace.

use std::io::Write;

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{
    poly_basis_init, DeepQLNet, Network, ParamGroup, PolyLayer, QLLayer, QLPair,
};
use crate::objective::{self, GradientSet, ObjectiveConfig};

/// Loss value beyond which a trial is declared diverged.
const DIVERGENCE_GUARD: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Gd,
    Sgd,
    Adam,
}

/// How the initial model is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "scheme")]
pub enum InitScheme {
    /// Q entries gaussian with scale `1/√fan_in` (overridable), output
    /// weights gaussian with scale 0.01, α = 0.
    RandomGaussian {
        #[serde(default)]
        q_scale: Option<f64>,
        #[serde(default)]
        lambda_scale: Option<f64>,
    },
    /// `(λ₀, Q₀) = (0, [I | 0])`; the penalty-variant initialization.
    ZeroLambdaIdentityQ,
    /// The prescribed polynomial basis columns with λ₀ = 0.
    PolyBasis,
    /// Multivariate `k = M·d` initialization with one orthonormal block per
    /// output (`Q_bQ_bᵀ = I`) and λ₀ = 0. The blocks are independent random
    /// orthogonal matrices: literal identity blocks would make columns j and
    /// j+d identical twins that no batch schedule can separate, collapsing
    /// the shared dictionary.
    MultivariateBlockOrthogonal,
}

impl Default for InitScheme {
    fn default() -> Self {
        InitScheme::RandomGaussian { q_scale: None, lambda_scale: None }
    }
}

/// Architecture descriptor consumed by [`initialize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "arch")]
pub enum NetworkArch {
    Single { d: usize, k: usize, outputs: usize },
    Deep { widths: Vec<usize>, hidden: Vec<usize> },
    Poly { d: usize, k: usize, degree: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Optional per-group step sizes for full-batch GD.
    #[serde(default)]
    pub lr_q: Option<f64>,
    #[serde(default)]
    pub lr_lambda: Option<f64>,
    #[serde(default)]
    pub lr_alpha: Option<f64>,
    pub max_epochs: usize,
    /// Mini-batch size (SGD only).
    pub batch_size: usize,
    /// Gradient-norm stopping tolerance (full-batch GD only, unless
    /// `early_stop_stochastic` is set).
    pub grad_tol: f64,
    /// Apply the gradient-norm stop to ADAM/SGD as well; used by the CI fast
    /// mode, off by default because stochastic gradients do not vanish at
    /// optima.
    #[serde(default)]
    pub early_stop_stochastic: bool,
    pub seed: u64,
    pub init: InitScheme,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            lr_q: None,
            lr_lambda: None,
            lr_alpha: None,
            max_epochs: 30_000,
            batch_size: 64,
            grad_tol: 1e-8,
            early_stop_stochastic: false,
            seed: 0,
            init: InitScheme::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be ≥ 1".into()));
        }
        if !(self.grad_tol > 0.0) {
            return Err(Error::Config(format!("grad_tol must be > 0, got {}", self.grad_tol)));
        }
        if self.optimizer == OptimizerKind::Sgd && self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1 for SGD".into()));
        }
        Ok(())
    }

    fn rate_of(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Q => self.lr_q.unwrap_or(self.learning_rate),
            ParamGroup::Lambda => self.lr_lambda.unwrap_or(self.learning_rate),
            ParamGroup::Alpha => self.lr_alpha.unwrap_or(self.learning_rate),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub penalty: f64,
}

/// Everything a training run produced: per-epoch metrics (entry 0 is the
/// pre-training state) and the final model.
#[derive(Debug, Clone)]
pub struct TrainTrace {
    pub stats: Vec<EpochStat>,
    pub final_model: Network,
    pub epochs_used: usize,
    pub converged: bool,
    pub diverged: bool,
}

impl TrainTrace {
    pub fn final_loss(&self) -> f64 {
        self.stats.last().map(|s| s.loss).unwrap_or(f64::NAN)
    }

    pub fn final_grad_norm(&self) -> f64 {
        self.stats.last().map(|s| s.grad_norm).unwrap_or(f64::NAN)
    }

    /// JSON-lines export `{epoch, loss, grad_norm, penalty}`, subsampled to
    /// every `every`-th epoch plus the final one.
    pub fn write_jsonl<W: Write>(&self, mut w: W, every: usize) -> Result<()> {
        let step = every.max(1);
        let last = self.stats.len().saturating_sub(1);
        for (i, s) in self.stats.iter().enumerate() {
            if i % step == 0 || i == last {
                serde_json::to_writer(&mut w, s)?;
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

/// Draw an initial model for the given architecture.
pub fn initialize(arch: &NetworkArch, init: &InitScheme, seed: u64) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match (arch, init) {
        (NetworkArch::Single { d, k, outputs }, InitScheme::RandomGaussian { q_scale, lambda_scale }) => {
            let qs = q_scale.unwrap_or(1.0 / (*d as f64).sqrt());
            let ls = lambda_scale.unwrap_or(0.01);
            let q = Array2::from_shape_fn((*d, *k), |_| qs * rng.sample::<f64, _>(StandardNormal));
            let lambda =
                Array2::from_shape_fn((*outputs, *k), |_| ls * rng.sample::<f64, _>(StandardNormal));
            Ok(Network::Single(QLLayer::new(q, lambda, ndarray::Array1::zeros(*outputs))?))
        }
        (NetworkArch::Single { d, k, outputs }, InitScheme::ZeroLambdaIdentityQ) => {
            let mut q = Array2::zeros((*d, *k));
            for i in 0..(*d).min(*k) {
                q[[i, i]] = 1.0;
            }
            Ok(Network::Single(QLLayer::new(
                q,
                Array2::zeros((*outputs, *k)),
                ndarray::Array1::zeros(*outputs),
            )?))
        }
        (NetworkArch::Single { d, k, outputs }, InitScheme::MultivariateBlockOrthogonal) => {
            if *k != d * outputs {
                return Err(Error::Config(format!(
                    "block-orthogonal init needs k = M·d; got k={k}, M·d={}",
                    d * outputs
                )));
            }
            let mut q = Array2::zeros((*d, *k));
            for b in 0..*outputs {
                let block = crate::linalg::random_orthogonal(*d, &mut rng);
                q.slice_mut(ndarray::s![.., b * d..(b + 1) * d]).assign(&block);
            }
            Ok(Network::Single(QLLayer::new(
                q,
                Array2::zeros((*outputs, *k)),
                ndarray::Array1::zeros(*outputs),
            )?))
        }
        (NetworkArch::Deep { widths, hidden }, InitScheme::RandomGaussian { q_scale, lambda_scale }) => {
            if widths.len() != hidden.len() + 1 {
                return Err(Error::Config("deep arch needs |widths| = |hidden| + 1".into()));
            }
            let ls = lambda_scale.unwrap_or(0.01);
            let layers = (0..hidden.len())
                .map(|l| {
                    let qs = q_scale.unwrap_or(1.0 / (widths[l] as f64).sqrt());
                    QLPair {
                        q: Array2::from_shape_fn((widths[l], hidden[l]), |_| {
                            qs * rng.sample::<f64, _>(StandardNormal)
                        }),
                        w: Array2::from_shape_fn((widths[l + 1], hidden[l]), |_| {
                            ls * rng.sample::<f64, _>(StandardNormal)
                        }),
                    }
                })
                .collect();
            Ok(Network::Deep(DeepQLNet::new(layers)?))
        }
        (NetworkArch::Poly { d, k, degree }, InitScheme::PolyBasis) => {
            let q = poly_basis_init(*d, *degree)?;
            if q.ncols() != *k {
                return Err(Error::Config(format!(
                    "poly basis init needs k = C(d+p-1, d-1) = {}, got {k}",
                    q.ncols()
                )));
            }
            let lambda = ndarray::Array1::zeros(*k);
            Ok(Network::Poly(PolyLayer::new(*degree, q, lambda)?))
        }
        (NetworkArch::Poly { d, k, degree }, InitScheme::RandomGaussian { q_scale, lambda_scale }) => {
            let qs = q_scale.unwrap_or(1.0 / (*d as f64).sqrt());
            let ls = lambda_scale.unwrap_or(0.01);
            let q = Array2::from_shape_fn((*d, *k), |_| qs * rng.sample::<f64, _>(StandardNormal));
            let lambda =
                ndarray::Array1::from_shape_fn(*k, |_| ls * rng.sample::<f64, _>(StandardNormal));
            Ok(Network::Poly(PolyLayer::new(*degree, q, lambda)?))
        }
        (arch, init) => Err(Error::Config(format!(
            "initialization {init:?} does not apply to architecture {arch:?}"
        ))),
    }
}

/// One explicit gradient-descent step with per-group rates:
/// `θ ← θ − η_group·∂θ`.
pub fn gd_step(net: &Network, grads: &GradientSet, cfg: &TrainConfig) -> Result<Network> {
    let mut flat = net.params_flat();
    let g = grads.flat();
    if g.len() != flat.len() {
        return Err(Error::shape("gd_step", flat.len(), g.len()));
    }
    let mut idx = 0;
    for (group, len) in net.param_spans() {
        let rate = cfg.rate_of(group);
        for _ in 0..len {
            flat[idx] -= rate * g[idx];
            idx += 1;
        }
    }
    let mut out = net.clone();
    out.set_params_flat(&flat)?;
    Ok(out)
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + Self::EPS);
        }
    }
}

/// Train `model` on `data`; the returned trace owns the final model.
///
/// Stopping: gradient norm below `grad_tol` (full-batch GD), the epoch
/// budget, or the divergence guard (total objective above `1e12` or
/// non-finite), which flags the trace instead of crashing.
pub fn train(
    model: &Network,
    data: &Dataset,
    obj: &ObjectiveConfig,
    cfg: &TrainConfig,
) -> Result<TrainTrace> {
    cfg.validate()?;
    obj.validate()?;
    let mut net = model.clone();
    let mut stats = Vec::with_capacity(cfg.max_epochs + 1);

    let mut adam = AdamState::new(net.params_flat().len());
    let mut converged = false;
    let mut diverged = false;
    let mut epochs_used = 0;

    loop {
        // One full-batch pass gives the trace entry for the current state
        // and, for GD/ADAM, the update direction.
        let (g, loss, penalty) = objective::grad_with_value(&net, data, obj)?;
        let grad_norm = g.norm();
        stats.push(EpochStat { epoch: epochs_used, loss, grad_norm, penalty });

        let total = loss + obj.gamma * penalty;
        if !total.is_finite() || total > DIVERGENCE_GUARD || !g.is_finite() {
            diverged = true;
            break;
        }
        let grad_stop = cfg.optimizer == OptimizerKind::Gd || cfg.early_stop_stochastic;
        if grad_stop && grad_norm < cfg.grad_tol {
            converged = true;
            break;
        }
        if epochs_used == cfg.max_epochs {
            break;
        }

        match cfg.optimizer {
            OptimizerKind::Gd => {
                net = gd_step(&net, &g, cfg)?;
            }
            OptimizerKind::Adam => {
                let mut flat = net.params_flat();
                adam.step(&mut flat, &g.flat(), cfg.learning_rate);
                net.set_params_flat(&flat)?;
            }
            OptimizerKind::Sgd => {
                // Fresh shuffle per epoch, derived from the trial seed.
                let mut rng = ChaCha8Rng::seed_from_u64(
                    cfg.seed ^ ((epochs_used + 1) as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                );
                let mut order: Vec<usize> = (0..data.len()).collect();
                order.shuffle(&mut rng);
                for chunk in order.chunks(cfg.batch_size) {
                    let batch = data.subset(chunk);
                    let g = objective::grad(&net, &batch, obj)?;
                    if !g.is_finite() {
                        diverged = true;
                        break;
                    }
                    net = gd_step(&net, &g, cfg)?;
                }
                if diverged {
                    break;
                }
            }
        }
        epochs_used += 1;
    }

    Ok(TrainTrace { stats, final_model: net, epochs_used, converged, diverged })
}

/// Verify the step-size/initialization rescaling equivalence: `T` GD steps
/// from `(λ₀, Q₀)` with rates `(η_Q, η_λ)` match, after the substitution
/// `(β²λ_t, Q_t/β)`, the trajectory started at `(β²λ₀, Q₀/β)` with rates
/// `(η_Q/β², β⁴η_λ)`. Returns the maximum relative deviation over `t ≤ T`.
/// Requires γ = 0 and a frozen α.
pub fn scaled_trajectory_check(
    model: &QLLayer,
    data: &Dataset,
    beta: f64,
    eta_q: f64,
    eta_lambda: f64,
    steps: usize,
) -> Result<f64> {
    if beta == 0.0 || !beta.is_finite() {
        return Err(Error::Config("beta must be nonzero and finite".into()));
    }
    let obj = ObjectiveConfig::plain();
    let base_cfg = TrainConfig {
        optimizer: OptimizerKind::Gd,
        learning_rate: eta_q,
        lr_q: Some(eta_q),
        lr_lambda: Some(eta_lambda),
        lr_alpha: Some(0.0),
        max_epochs: steps.max(1),
        grad_tol: f64::MIN_POSITIVE,
        ..TrainConfig::default()
    };
    let scaled_cfg = TrainConfig {
        lr_q: Some(eta_q / (beta * beta)),
        lr_lambda: Some(beta.powi(4) * eta_lambda),
        ..base_cfg.clone()
    };

    let mut net_a = Network::Single(model.clone());
    let scaled_start = QLLayer::new(
        model.q.mapv(|v| v / beta),
        model.lambda.mapv(|v| v * beta * beta),
        model.alpha.clone(),
    )?;
    let mut net_b = Network::Single(scaled_start);

    let mut max_dev = 0.0f64;
    for _ in 0..steps {
        let ga = objective::grad(&net_a, data, &obj)?;
        net_a = gd_step(&net_a, &ga, &base_cfg)?;
        let gb = objective::grad(&net_b, data, &obj)?;
        net_b = gd_step(&net_b, &gb, &scaled_cfg)?;

        let (Network::Single(a), Network::Single(b)) = (&net_a, &net_b) else { unreachable!() };
        let q_ref = a.q.mapv(|v| v / beta);
        let l_ref = a.lambda.mapv(|v| v * beta * beta);
        let q_num: f64 = (&b.q - &q_ref).iter().map(|v| v * v).sum::<f64>().sqrt();
        let q_den: f64 = q_ref.iter().map(|v| v * v).sum::<f64>().sqrt();
        let l_num: f64 = (&b.lambda - &l_ref).iter().map(|v| v * v).sum::<f64>().sqrt();
        let l_den: f64 = l_ref.iter().map(|v| v * v).sum::<f64>().sqrt();
        max_dev = max_dev.max(q_num / (1.0 + q_den)).max(l_num / (1.0 + l_den));
    }
    Ok(max_dev)
}
