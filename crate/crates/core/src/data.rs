//! Synthetic dataset generators, the MNIST binary-classification pipeline,
//! and dataset import/export.
//!
//! All generators are pure functions of their seed. Synthetic inputs follow
//! the experimental convention of a first coordinate fixed to 1 (a built-in
//! bias) with the remaining coordinates i.i.d. standard gaussian.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{deep_width_schedule, DeepQLNet, Network, QLPair};

/// Ground-truth parameters recorded by the planted generators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Planted {
    None,
    /// Diagonal ±1 coefficient matrix (the stored vector is the diagonal).
    DiagonalSigns(Vec<f64>),
    /// Dense symmetric coefficient matrix.
    Matrix(Array2<f64>),
    /// Depth-2 teacher network.
    Teacher(DeepQLNet),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: String,
    pub seed: u64,
    pub planted: Planted,
}

/// Training data: inputs `x` (`N × d`, row per sample) and targets `y`
/// (`N × M`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(x: Array2<f64>, y: Array2<f64>, meta: DatasetMeta) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::EmptyDataset);
        }
        if y.nrows() != x.nrows() {
            return Err(Error::shape("Dataset::new", x.nrows(), y.nrows()));
        }
        if !x.iter().all(|v| v.is_finite()) || !y.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("dataset entries must be finite".into()));
        }
        Ok(Dataset { x, y, meta })
    }

    pub fn from_scalar_targets(x: Array2<f64>, y: Array1<f64>, meta: DatasetMeta) -> Result<Self> {
        let n = y.len();
        Dataset::new(x, y.into_shape_with_order((n, 1)).unwrap(), meta)
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.y.ncols()
    }

    /// Scalar target column; errors when the dataset is multivariate.
    pub fn y_scalar(&self) -> Result<ArrayView1<'_, f64>> {
        if self.outputs() != 1 {
            return Err(Error::shape("Dataset::y_scalar", 1, self.outputs()));
        }
        Ok(self.y.column(0))
    }

    pub fn sum_y_squared(&self) -> f64 {
        self.y.iter().map(|v| v * v).sum()
    }

    /// Subset of samples by index, preserving metadata.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let x = self.x.select(Axis(0), indices);
        let y = self.y.select(Axis(0), indices);
        Dataset { x, y, meta: self.meta.clone() }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// CSV with a header row `x0,..,x{d-1},y0,..,y{M-1}` and one row per
    /// sample.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = Vec::new();
        for j in 0..self.dim() {
            header.push(format!("x{j}"));
        }
        for m in 0..self.outputs() {
            header.push(format!("y{m}"));
        }
        w.write_record(&header)?;
        for n in 0..self.len() {
            let mut rec = Vec::with_capacity(self.dim() + self.outputs());
            for j in 0..self.dim() {
                rec.push(format!("{:.17e}", self.x[[n, j]]));
            }
            for m in 0..self.outputs() {
                rec.push(format!("{:.17e}", self.y[[n, m]]));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let d = header.iter().filter(|h| h.starts_with('x')).count();
        let m = header.iter().filter(|h| h.starts_with('y')).count();
        if d == 0 || m == 0 {
            return Err(Error::Config("CSV header must contain x* and y* columns".into()));
        }
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut n = 0usize;
        for record in r.records() {
            let record = record?;
            if record.len() != d + m {
                return Err(Error::shape("Dataset::read_csv", d + m, record.len()));
            }
            for j in 0..d {
                xs.push(record[j].parse::<f64>().map_err(|e| Error::Config(e.to_string()))?);
            }
            for k in 0..m {
                ys.push(record[d + k].parse::<f64>().map_err(|e| Error::Config(e.to_string()))?);
            }
            n += 1;
        }
        Dataset::new(
            Array2::from_shape_vec((n, d), xs).unwrap(),
            Array2::from_shape_vec((n, m), ys).unwrap(),
            DatasetMeta { generator: "csv".into(), seed: 0, planted: Planted::None },
        )
    }
}

fn gaussian_inputs_with_bias(d: usize, n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut x = Array2::zeros((n, d));
    for row in 0..n {
        x[[row, 0]] = 1.0;
        for col in 1..d {
            x[[row, col]] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    x
}

/// Targets from a random diagonal ±1 coefficient matrix:
/// `y_n = Σ_i s_i x_{ni}²`.
pub fn gen_planted_diagonal(d: usize, n: usize, seed: u64) -> Result<Dataset> {
    if d == 0 || n == 0 {
        return Err(Error::Config("gen_planted_diagonal needs d ≥ 1, N ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = gaussian_inputs_with_bias(d, n, &mut rng);
    let signs: Vec<f64> = (0..d).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    let y = Array1::from_shape_fn(n, |row| {
        (0..d).map(|i| signs[i] * x[[row, i]] * x[[row, i]]).sum()
    });
    Dataset::from_scalar_targets(
        x,
        y,
        DatasetMeta {
            generator: "planted-diagonal".into(),
            seed,
            planted: Planted::DiagonalSigns(signs),
        },
    )
}

/// Targets from a dense gaussian coefficient matrix, symmetrized as
/// `(A + Aᵀ)/2` (prediction-equivalent to the raw draw).
pub fn gen_planted_dense(d: usize, n: usize, seed: u64) -> Result<Dataset> {
    if d == 0 || n == 0 {
        return Err(Error::Config("gen_planted_dense needs d ≥ 1, N ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = gaussian_inputs_with_bias(d, n, &mut rng);
    let raw = Array2::from_shape_fn((d, d), |_| rng.sample::<f64, _>(StandardNormal));
    let a = (&raw + &raw.t()) * 0.5;
    let y = Array1::from_shape_fn(n, |row| {
        let xr = x.row(row);
        xr.dot(&a.dot(&xr))
    });
    Dataset::from_scalar_targets(
        x,
        y,
        DatasetMeta { generator: "planted-dense".into(), seed, planted: Planted::Matrix(a) },
    )
}

/// Standard gaussian targets independent of the inputs.
pub fn gen_independent(d: usize, n: usize, seed: u64) -> Result<Dataset> {
    if d == 0 || n == 0 {
        return Err(Error::Config("gen_independent needs d ≥ 1, N ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = gaussian_inputs_with_bias(d, n, &mut rng);
    let y = Array1::from_shape_fn(n, |_| rng.sample::<f64, _>(StandardNormal));
    Dataset::from_scalar_targets(
        x,
        y,
        DatasetMeta { generator: "independent".into(), seed, planted: Planted::None },
    )
}

/// Targets from a random depth-2 teacher network with `h1` intermediate
/// units, so a student of width ≥ `h1` can reach zero error. The teacher's
/// output layer is rescaled so the targets have unit second moment.
pub fn gen_deep_planted(d: usize, h1: usize, n: usize, seed: u64) -> Result<Dataset> {
    if d == 0 || h1 == 0 || n == 0 {
        return Err(Error::Config("gen_deep_planted needs d, h1, N ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = gaussian_inputs_with_bias(d, n, &mut rng);
    let widths = [d, h1, 1];
    let hidden = deep_width_schedule(&widths);
    let mut layers = Vec::new();
    for l in 0..2 {
        let fan_in = widths[l];
        let q_scale = 1.0 / (fan_in as f64).sqrt();
        let w_scale = 1.0 / hidden[l] as f64;
        layers.push(QLPair {
            q: Array2::from_shape_fn((widths[l], hidden[l]), |_| {
                q_scale * rng.sample::<f64, _>(StandardNormal)
            }),
            w: Array2::from_shape_fn((widths[l + 1], hidden[l]), |_| {
                w_scale * rng.sample::<f64, _>(StandardNormal)
            }),
        });
    }
    let mut teacher = DeepQLNet::new(layers)?;
    let y_raw = teacher.predict_batch(&x.view())?.column(0).to_owned();
    let second_moment = y_raw.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let scale = if second_moment > 0.0 { 1.0 / second_moment.sqrt() } else { 1.0 };
    teacher.layers[1].w.mapv_inplace(|v| v * scale);
    let y = teacher.predict_batch(&x.view())?.column(0).to_owned();
    Dataset::from_scalar_targets(
        x,
        y,
        DatasetMeta {
            generator: "deep-planted".into(),
            seed,
            planted: Planted::Teacher(teacher),
        },
    )
}

/// Multivariate planted targets: one dense symmetric coefficient matrix per
/// output channel, `y_{nm} = A_m • x_nx_nᵀ`.
pub fn gen_multivariate_planted(d: usize, m: usize, n: usize, seed: u64) -> Result<Dataset> {
    if d == 0 || m == 0 || n == 0 {
        return Err(Error::Config("gen_multivariate_planted needs d, M, N ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = gaussian_inputs_with_bias(d, n, &mut rng);
    let mut y = Array2::zeros((n, m));
    for ch in 0..m {
        let raw = Array2::from_shape_fn((d, d), |_| rng.sample::<f64, _>(StandardNormal));
        let a = (&raw + &raw.t()) * 0.5;
        for row in 0..n {
            let xr = x.row(row);
            y[[row, ch]] = xr.dot(&a.dot(&xr));
        }
    }
    Dataset::new(
        x,
        y,
        DatasetMeta { generator: "multivariate-planted".into(), seed, planted: Planted::None },
    )
}

/// Multivariate gaussian targets independent of the inputs.
pub fn gen_multivariate_independent(d: usize, m: usize, n: usize, seed: u64) -> Result<Dataset> {
    if d == 0 || m == 0 || n == 0 {
        return Err(Error::Config("gen_multivariate_independent needs d, M, N ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = gaussian_inputs_with_bias(d, n, &mut rng);
    let y = Array2::from_shape_fn((n, m), |_| rng.sample::<f64, _>(StandardNormal));
    Dataset::new(
        x,
        y,
        DatasetMeta { generator: "multivariate-independent".into(), seed, planted: Planted::None },
    )
}

/// Fraction of samples whose predicted sign matches the ±1 label;
/// `sign(0)` counts as `+1`.
pub fn classify_sign(net: &Network, data: &Dataset) -> Result<f64> {
    let preds = net.predict_batch(&data.x.view())?;
    if preds.ncols() != data.outputs() {
        return Err(Error::shape("classify_sign", data.outputs(), preds.ncols()));
    }
    classify_sign_of(&preds.column(0).view(), &data.y.column(0).view())
}

/// Same accuracy computation from precomputed predictions.
pub fn classify_sign_of(preds: &ArrayView1<f64>, labels: &ArrayView1<f64>) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::shape("classify_sign_of", labels.len(), preds.len()));
    }
    if preds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let hits = preds
        .iter()
        .zip(labels.iter())
        .filter(|(&p, &l)| {
            let sp = if p >= 0.0 { 1.0 } else { -1.0 };
            let sl = if l >= 0.0 { 1.0 } else { -1.0 };
            sp == sl
        })
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

// ---------------------------------------------------------------------------
// MNIST pipeline
// ---------------------------------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// The processed binary MNIST regression task.
#[derive(Debug, Clone)]
pub struct MnistTask {
    pub train: Dataset,
    pub test: Dataset,
    /// `10 × 784` principal components fitted on the training rows only.
    pub pca_components: Array2<f64>,
    pub pca_mean: Array1<f64>,
    /// Fingerprint of the raw pixel rows the PCA was fitted on, so
    /// leakage-freedom is checkable after the fact.
    pub pca_input_checksum: u64,
    pub digit_pair: (u8, u8),
    pub seed: u64,
}

/// FNV-1a over the raw bit patterns of a row-major matrix.
pub fn matrix_checksum(rows: &ArrayView2<f64>) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for v in rows.iter() {
        for b in v.to_bits().to_le_bytes() {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
        }
    }
    hash
}

/// The seeded train/test split over a pooled label list: per class, a
/// shuffled `floor(count/7)` prefix becomes training data. Returns sorted
/// (train, test) indices into the pool.
pub fn mnist_split(labels: &[u8], digit_pair: (u8, u8), seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for (class_rank, digit) in [digit_pair.0, digit_pair.1].iter().enumerate() {
        let mut members: Vec<usize> =
            labels.iter().enumerate().filter(|(_, &l)| l == *digit).map(|(i, _)| i).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(class_rank as u64));
        members.shuffle(&mut rng);
        let n_train = members.len() / 7;
        train_idx.extend_from_slice(&members[..n_train]);
        test_idx.extend_from_slice(&members[n_train..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    (train_idx, test_idx)
}

fn read_u32_be(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]])
}

/// Parse an IDX image file into `N × (rows·cols)` pixels scaled to `[0, 1]`.
pub fn read_idx_images(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::DataFormat {
        format: "IDX images",
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    if bytes.len() < 16 {
        return Err(Error::DataFormat {
            format: "IDX images",
            path: path.display().to_string(),
            reason: "file shorter than header".into(),
        });
    }
    let magic = read_u32_be(&bytes, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::DataFormat {
            format: "IDX images",
            path: path.display().to_string(),
            reason: format!("magic number 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"),
        });
    }
    let n = read_u32_be(&bytes, 4) as usize;
    let rows = read_u32_be(&bytes, 8) as usize;
    let cols = read_u32_be(&bytes, 12) as usize;
    let pixels = rows * cols;
    if bytes.len() != 16 + n * pixels {
        return Err(Error::DataFormat {
            format: "IDX images",
            path: path.display().to_string(),
            reason: format!("expected {} payload bytes, found {}", n * pixels, bytes.len() - 16),
        });
    }
    let mut out = Array2::zeros((n, pixels));
    for i in 0..n {
        for p in 0..pixels {
            out[[i, p]] = bytes[16 + i * pixels + p] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Parse an IDX label file.
pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::DataFormat {
        format: "IDX labels",
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    if bytes.len() < 8 {
        return Err(Error::DataFormat {
            format: "IDX labels",
            path: path.display().to_string(),
            reason: "file shorter than header".into(),
        });
    }
    let magic = read_u32_be(&bytes, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::DataFormat {
            format: "IDX labels",
            path: path.display().to_string(),
            reason: format!("magic number 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"),
        });
    }
    let n = read_u32_be(&bytes, 4) as usize;
    if bytes.len() != 8 + n {
        return Err(Error::DataFormat {
            format: "IDX labels",
            path: path.display().to_string(),
            reason: format!("expected {} labels, found {}", n, bytes.len() - 8),
        });
    }
    Ok(bytes[8..].to_vec())
}

/// PCA by eigendecomposition of the mean-centered covariance of `rows`.
/// Returns the top `ncomp` components (rows of the first result) and the mean.
pub fn fit_pca(rows: &ArrayView2<f64>, ncomp: usize) -> Result<(Array2<f64>, Array1<f64>)> {
    let n = rows.nrows();
    let dim = rows.ncols();
    if n == 0 || ncomp == 0 || ncomp > dim {
        return Err(Error::Config(format!("fit_pca: invalid n={n}, ncomp={ncomp}, dim={dim}")));
    }
    let mean = rows.mean_axis(Axis(0)).unwrap();
    let centered = rows - &mean.view().insert_axis(Axis(0));
    let cov = centered.t().dot(&centered) / n as f64;
    let (_, vectors) = linalg::jacobi_eig(&cov.view())?;
    let mut components = Array2::zeros((ncomp, dim));
    for c in 0..ncomp {
        components.row_mut(c).assign(&vectors.column(c));
    }
    Ok((components, mean))
}

fn process_rows(
    raw: &ArrayView2<f64>,
    components: &Array2<f64>,
    mean: &Array1<f64>,
) -> Array2<f64> {
    let n = raw.nrows();
    let k = components.nrows();
    let centered = raw - &mean.view().insert_axis(Axis(0));
    let projected = centered.dot(&components.t()); // N × k
    let mut out = Array2::zeros((n, k + 1));
    for i in 0..n {
        let norm: f64 = projected.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        out[[i, 0]] = 1.0;
        if norm > 0.0 {
            for j in 0..k {
                out[[i, j + 1]] = projected[[i, j]] / norm;
            }
        }
    }
    out
}

/// Build the binary MNIST regression task for one digit pair.
///
/// The four standard IDX files are expected inside `dir`. Both official
/// splits are pooled, the two digits are filtered out, and a fresh split is
/// drawn: per class, a seeded shuffle marks `floor(count/7)` samples as
/// training data. A 10-component PCA is fitted on the training rows only,
/// both sets are projected, every projection is scaled to unit norm, and a
/// constant first coordinate of 1 is prepended (final dimension 11).
/// Labels are `+1` for the first digit and `−1` for the second.
pub fn load_mnist_task(dir: &Path, digit_pair: (u8, u8), seed: u64) -> Result<MnistTask> {
    let train_images = read_idx_images(&dir.join("train-images-idx3-ubyte"))?;
    let train_labels = read_idx_labels(&dir.join("train-labels-idx1-ubyte"))?;
    let test_images = read_idx_images(&dir.join("t10k-images-idx3-ubyte"))?;
    let test_labels = read_idx_labels(&dir.join("t10k-labels-idx1-ubyte"))?;
    if train_images.nrows() != train_labels.len() || test_images.nrows() != test_labels.len() {
        return Err(Error::DataFormat {
            format: "IDX",
            path: dir.display().to_string(),
            reason: "image/label counts disagree".into(),
        });
    }

    let mut pooled_labels: Vec<u8> = Vec::new();
    let total_pixels = train_images.ncols();
    let mut pool = Vec::new();
    for (i, &label) in train_labels.iter().enumerate() {
        if label == digit_pair.0 || label == digit_pair.1 {
            pool.push(train_images.row(i).to_owned());
            pooled_labels.push(label);
        }
    }
    for (i, &label) in test_labels.iter().enumerate() {
        if label == digit_pair.0 || label == digit_pair.1 {
            pool.push(test_images.row(i).to_owned());
            pooled_labels.push(label);
        }
    }
    if pool.is_empty() {
        return Err(Error::Config(format!(
            "no samples found for digits {:?} under {}",
            digit_pair,
            dir.display()
        )));
    }

    let (train_idx, test_idx) = mnist_split(&pooled_labels, digit_pair, seed);

    let gather = |idx: &[usize]| -> Array2<f64> {
        let mut out = Array2::zeros((idx.len(), total_pixels));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&pool[i]);
        }
        out
    };
    let raw_train = gather(&train_idx);
    let raw_test = gather(&test_idx);
    let label_of = |idx: &[usize]| -> Array1<f64> {
        Array1::from_iter(idx.iter().map(|&i| if pooled_labels[i] == digit_pair.0 { 1.0 } else { -1.0 }))
    };

    let (components, mean) = fit_pca(&raw_train.view(), 10)?;
    let pca_input_checksum = matrix_checksum(&raw_train.view());
    let x_train = process_rows(&raw_train.view(), &components, &mean);
    let x_test = process_rows(&raw_test.view(), &components, &mean);

    let meta = |split: &str| DatasetMeta {
        generator: format!("mnist-{}v{}-{split}", digit_pair.0, digit_pair.1),
        seed,
        planted: Planted::None,
    };
    Ok(MnistTask {
        train: Dataset::from_scalar_targets(x_train, label_of(&train_idx), meta("train"))?,
        test: Dataset::from_scalar_targets(x_test, label_of(&test_idx), meta("test"))?,
        pca_components: components,
        pca_mean: mean,
        pca_input_checksum,
        digit_pair,
        seed,
    })
}
