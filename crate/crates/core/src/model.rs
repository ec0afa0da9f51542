//! Parameter containers and forward passes for quadratic-linear networks.
//!
//! A single QL layer maps `x ↦ Σ_j λ_{mj} (q_jᵀx)² + α_m‖x‖²` per output `m`,
//! which equals `(QΛ_mQᵀ + α_m I) • xxᵀ`. Deep nets chain quadratic/linear
//! pairs; the polynomial variant raises projections to an arbitrary power
//! `p ≥ 2`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One quadratic layer with per-output linear weights and norm-regressor
/// coefficients.
///
/// * `q`: `d_in × k`, column `j` is the weight vector of neuron `j`.
/// * `lambda`: `M × k`, row `m` holds the output weights of channel `m`
///   (the diagonal of `Λ_m`).
/// * `alpha`: length `M`, coefficient of the fixed `‖x‖²` regressor per
///   channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QLLayer {
    pub q: Array2<f64>,
    pub lambda: Array2<f64>,
    pub alpha: Array1<f64>,
}

impl QLLayer {
    pub fn new(q: Array2<f64>, lambda: Array2<f64>, alpha: Array1<f64>) -> Result<Self> {
        if lambda.ncols() != q.ncols() {
            return Err(Error::shape("QLLayer::new", q.ncols(), lambda.ncols()));
        }
        if lambda.nrows() == 0 {
            return Err(Error::Config("QLLayer needs at least one output channel".into()));
        }
        if alpha.len() != lambda.nrows() {
            return Err(Error::shape("QLLayer::new alpha", lambda.nrows(), alpha.len()));
        }
        let layer = QLLayer { q, lambda, alpha };
        if !layer.is_finite() {
            return Err(Error::Config("QLLayer weights must be finite".into()));
        }
        Ok(layer)
    }

    /// Scalar-output layer from a weight matrix, an output-weight vector and
    /// a single norm coefficient.
    pub fn scalar(q: Array2<f64>, lambda: Array1<f64>, alpha: f64) -> Result<Self> {
        let k = lambda.len();
        Self::new(q, lambda.into_shape_with_order((1, k)).unwrap(), Array1::from_elem(1, alpha))
    }

    pub fn input_dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn neurons(&self) -> usize {
        self.q.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.lambda.nrows()
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().all(|v| v.is_finite())
            && self.lambda.iter().all(|v| v.is_finite())
            && self.alpha.iter().all(|v| v.is_finite())
    }

    /// The symmetric coefficient matrix `QΛ_mQᵀ + α_m I` of output channel
    /// `m`; the layer's forward pass equals `A • xxᵀ`.
    pub fn coefficient_matrix(&self, channel: usize) -> Array2<f64> {
        let d = self.input_dim();
        let mut a = Array2::zeros((d, d));
        for j in 0..self.neurons() {
            let w = self.lambda[[channel, j]];
            let col = self.q.column(j);
            for r in 0..d {
                for c in 0..d {
                    a[[r, c]] += w * col[r] * col[c];
                }
            }
        }
        for r in 0..d {
            a[[r, r]] += self.alpha[channel];
        }
        a
    }

    /// Forward pass on one input vector; returns the `M` outputs.
    pub fn forward(&self, x: &ArrayView1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::shape("QLLayer::forward", self.input_dim(), x.len()));
        }
        let s = self.q.t().dot(x);
        let z = s.mapv(|v| v * v);
        let norm_sq: f64 = x.iter().map(|v| v * v).sum();
        let mut out = self.lambda.dot(&z);
        out.zip_mut_with(&self.alpha, |o, &a| *o += a * norm_sq);
        Ok(out)
    }

    /// Batched forward: rows of `x` are inputs, rows of the result are the
    /// per-sample outputs (`N × M`).
    pub fn predict_batch(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape("QLLayer::predict_batch", self.input_dim(), x.ncols()));
        }
        let s = x.dot(&self.q); // N × k
        let z = s.mapv(|v| v * v);
        let mut out = z.dot(&self.lambda.t()); // N × M
        if self.alpha.iter().any(|&a| a != 0.0) {
            let norms = x.map_axis(Axis(1), |row| row.iter().map(|v| v * v).sum::<f64>());
            for (mut row, &n2) in out.axis_iter_mut(Axis(0)).zip(norms.iter()) {
                row.zip_mut_with(&self.alpha, |o, &a| *o += a * n2);
            }
        }
        Ok(out)
    }
}

/// One quadratic/linear pair of a deep network: `x ↦ W (Qᵀx)^{⊙2}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QLPair {
    /// `h_{l−1} × m_l` quadratic weights.
    pub q: Array2<f64>,
    /// `h_l × m_l` linear weights; row `i` holds the coefficients of unit `i`.
    pub w: Array2<f64>,
}

impl QLPair {
    pub fn input_dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn hidden_units(&self) -> usize {
        self.q.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.nrows()
    }

    /// The symmetric matrix `A_i = Q diag(w_i) Qᵀ` of output unit `i`.
    pub fn unit_matrix(&self, i: usize) -> Array2<f64> {
        let h = self.input_dim();
        let mut a = Array2::zeros((h, h));
        for j in 0..self.hidden_units() {
            let w = self.w[[i, j]];
            let col = self.q.column(j);
            for r in 0..h {
                for c in 0..h {
                    a[[r, c]] += w * col[r] * col[c];
                }
            }
        }
        a
    }
}

/// A stack of QL pairs with chained widths; the last layer usually has a
/// single output for scalar regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepQLNet {
    pub layers: Vec<QLPair>,
}

impl DeepQLNet {
    pub fn new(layers: Vec<QLPair>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("DeepQLNet needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[1].input_dim() != pair[0].output_dim() {
                return Err(Error::shape(
                    "DeepQLNet::new",
                    pair[0].output_dim(),
                    pair[1].input_dim(),
                ));
            }
        }
        for layer in &layers {
            if layer.w.ncols() != layer.q.ncols() {
                return Err(Error::shape("DeepQLNet::new pair", layer.q.ncols(), layer.w.ncols()));
            }
        }
        Ok(DeepQLNet { layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output_dim()
    }

    /// Output widths `h_0, h_1, …, h_L`.
    pub fn widths(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.output_dim()));
        dims
    }

    pub fn forward(&self, x: &ArrayView1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::shape("DeepQLNet::forward", self.input_dim(), x.len()));
        }
        let mut cur = x.to_owned();
        for layer in &self.layers {
            let s = layer.q.t().dot(&cur);
            let z = s.mapv(|v| v * v);
            cur = layer.w.dot(&z);
        }
        Ok(cur)
    }

    pub fn forward_scalar(&self, x: &ArrayView1<f64>) -> Result<f64> {
        let out = self.forward(x)?;
        if out.len() != 1 {
            return Err(Error::shape("DeepQLNet::forward_scalar", 1, out.len()));
        }
        Ok(out[0])
    }

    /// Batched forward over rows of `x`; result is `N × h_L`.
    pub fn predict_batch(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape("DeepQLNet::predict_batch", self.input_dim(), x.ncols()));
        }
        let mut cur = x.to_owned();
        for layer in &self.layers {
            let s = cur.dot(&layer.q);
            let z = s.mapv(|v| v * v);
            cur = z.dot(&layer.w.t());
        }
        Ok(cur)
    }
}

/// Hidden widths `m_l = h_{l−1}·h_l` for a given output-width schedule
/// `h_0, …, h_L`. This is the overparameterization under which every
/// stationary point of the penalized deep objective is global.
pub fn deep_width_schedule(widths: &[usize]) -> Vec<usize> {
    widths.windows(2).map(|w| w[0] * w[1]).collect()
}

/// Two-layer polynomial-linear layer: `x ↦ Σ_i λ_i (q_iᵀx)^p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyLayer {
    pub degree: u32,
    pub q: Array2<f64>,
    pub lambda: Array1<f64>,
}

impl PolyLayer {
    pub fn new(degree: u32, q: Array2<f64>, lambda: Array1<f64>) -> Result<Self> {
        if degree < 2 {
            return Err(Error::Config(format!("polynomial degree must be ≥ 2, got {degree}")));
        }
        if lambda.len() != q.ncols() {
            return Err(Error::shape("PolyLayer::new", q.ncols(), lambda.len()));
        }
        Ok(PolyLayer { degree, q, lambda })
    }

    pub fn input_dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn neurons(&self) -> usize {
        self.q.ncols()
    }

    pub fn forward(&self, x: &ArrayView1<f64>) -> Result<f64> {
        if x.len() != self.input_dim() {
            return Err(Error::shape("PolyLayer::forward", self.input_dim(), x.len()));
        }
        let s = self.q.t().dot(x);
        Ok(s.iter().zip(self.lambda.iter()).map(|(&si, &li)| li * si.powi(self.degree as i32)).sum())
    }

    pub fn predict_batch(&self, x: &ArrayView2<f64>) -> Result<Array1<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape("PolyLayer::predict_batch", self.input_dim(), x.ncols()));
        }
        let s = x.dot(&self.q); // N × k
        let p = self.degree as i32;
        let sp = s.mapv(|v| v.powi(p));
        Ok(sp.dot(&self.lambda))
    }
}

/// Number of degree-`p` monomials in `d` variables: `C(d+p−1, d−1)`.
pub fn monomial_count(d: usize, p: u32) -> Result<usize> {
    let mut acc: u128 = 1;
    let n = d as u128 + p as u128 - 1;
    let k = (d as u128 - 1).min(p as u128);
    for i in 0..k {
        acc = acc
            .checked_mul(n - i)
            .ok_or_else(|| Error::Config("monomial count overflows".into()))?;
        acc /= i + 1;
    }
    usize::try_from(acc).map_err(|_| Error::Config("monomial count overflows usize".into()))
}

/// The prescribed polynomial-layer initialization: one column per multiset
/// `{i_1 ≤ … ≤ i_p} ⊆ {1..d}` with column `Σ_j e_{i_j}`. Column count is
/// `C(d+p−1, d−1)` and the columns are pairwise distinct.
pub fn poly_basis_init(d: usize, p: u32) -> Result<Array2<f64>> {
    if d == 0 {
        return Err(Error::Config("poly_basis_init needs d ≥ 1".into()));
    }
    if p < 2 {
        return Err(Error::Config("poly_basis_init needs p ≥ 2".into()));
    }
    let k = monomial_count(d, p)?;
    let mut q = Array2::zeros((d, k));
    let mut multiset = vec![0usize; p as usize];
    for col in 0..k {
        for &idx in &multiset {
            q[[idx, col]] += 1.0;
        }
        // Advance to the next non-decreasing index tuple.
        let mut pos = p as usize;
        while pos > 0 {
            pos -= 1;
            if multiset[pos] + 1 < d {
                let v = multiset[pos] + 1;
                for slot in multiset.iter_mut().skip(pos) {
                    *slot = v;
                }
                break;
            }
        }
    }
    Ok(q)
}

/// Any trainable network variant, used by the optimizer and the experiment
/// harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", content = "params")]
pub enum Network {
    Single(QLLayer),
    Deep(DeepQLNet),
    Poly(PolyLayer),
}

impl Network {
    pub fn input_dim(&self) -> usize {
        match self {
            Network::Single(l) => l.input_dim(),
            Network::Deep(n) => n.input_dim(),
            Network::Poly(l) => l.input_dim(),
        }
    }

    pub fn outputs(&self) -> usize {
        match self {
            Network::Single(l) => l.outputs(),
            Network::Deep(n) => n.output_dim(),
            Network::Poly(_) => 1,
        }
    }

    pub fn variant_tag(&self) -> &'static str {
        match self {
            Network::Single(_) => "Single",
            Network::Deep(_) => "Deep",
            Network::Poly(_) => "Poly",
        }
    }

    /// Batched predictions, `N × M`.
    pub fn predict_batch(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        match self {
            Network::Single(l) => l.predict_batch(x),
            Network::Deep(n) => n.predict_batch(x),
            Network::Poly(l) => {
                let out = l.predict_batch(x)?;
                let n = out.len();
                Ok(out.into_shape_with_order((n, 1)).unwrap())
            }
        }
    }

    pub fn predict(&self, x: &ArrayView1<f64>) -> Result<Array1<f64>> {
        match self {
            Network::Single(l) => l.forward(x),
            Network::Deep(n) => n.forward(x),
            Network::Poly(l) => Ok(Array1::from_elem(1, l.forward(x)?)),
        }
    }
}

/// Parameter-group identity of a flattened coordinate, used for per-group
/// learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Quadratic-layer weights (`Q` matrices at any depth).
    Q,
    /// Linear output weights (`λ` vectors / `W` matrices at any depth).
    Lambda,
    /// Norm-regressor coefficients.
    Alpha,
}

impl Network {
    /// Stable flattening order: `Single` = [q, lambda, alpha];
    /// `Deep` = [q₁, w₁, q₂, w₂, …]; `Poly` = [q, lambda].
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        match self {
            Network::Single(l) => {
                out.extend(l.q.iter());
                out.extend(l.lambda.iter());
                out.extend(l.alpha.iter());
            }
            Network::Deep(n) => {
                for layer in &n.layers {
                    out.extend(layer.q.iter());
                    out.extend(layer.w.iter());
                }
            }
            Network::Poly(l) => {
                out.extend(l.q.iter());
                out.extend(l.lambda.iter());
            }
        }
        out
    }

    /// Group spans matching [`Network::params_flat`]: `(group, length)` per
    /// parameter block, in flattening order.
    pub fn param_spans(&self) -> Vec<(ParamGroup, usize)> {
        match self {
            Network::Single(l) => vec![
                (ParamGroup::Q, l.q.len()),
                (ParamGroup::Lambda, l.lambda.len()),
                (ParamGroup::Alpha, l.alpha.len()),
            ],
            Network::Deep(n) => n
                .layers
                .iter()
                .flat_map(|layer| {
                    [(ParamGroup::Q, layer.q.len()), (ParamGroup::Lambda, layer.w.len())]
                })
                .collect(),
            Network::Poly(l) => {
                vec![(ParamGroup::Q, l.q.len()), (ParamGroup::Lambda, l.lambda.len())]
            }
        }
    }

    /// Overwrite all parameters from a flat slice in [`Network::params_flat`]
    /// order.
    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expected: usize = self.param_spans().iter().map(|(_, n)| n).sum();
        if flat.len() != expected {
            return Err(Error::shape("Network::set_params_flat", expected, flat.len()));
        }
        let mut it = flat.iter().copied();
        let mut fill = |arr: &mut [f64]| {
            for v in arr.iter_mut() {
                *v = it.next().unwrap();
            }
        };
        match self {
            Network::Single(l) => {
                fill(l.q.as_slice_mut().unwrap());
                fill(l.lambda.as_slice_mut().unwrap());
                fill(l.alpha.as_slice_mut().unwrap());
            }
            Network::Deep(n) => {
                for layer in &mut n.layers {
                    fill(layer.q.as_slice_mut().unwrap());
                    fill(layer.w.as_slice_mut().unwrap());
                }
            }
            Network::Poly(l) => {
                fill(l.q.as_slice_mut().unwrap());
                fill(l.lambda.as_slice_mut().unwrap());
            }
        }
        Ok(())
    }
}

/// A serialized model together with the seed that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub seed: u64,
    pub network: Network,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
