//! Experiment harness: the sweeps, metrics, and reports behind the CLI.
//!
//! Every trial's randomness derives from a per-trial seed mixed from the
//! master seed and the trial's coordinates, so parallel execution order never
//! affects results and identical configs produce byte-identical CSV output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    self, classify_sign, classify_sign_of, Dataset, MnistTask,
};
use crate::error::{Error, Result};
use crate::landscape::{self, ClassifyTols, PointTag};
use crate::model::{deep_width_schedule, Network, QLLayer};
use crate::objective::{self, ObjectiveConfig, PenaltyMode};
use crate::optimize::{self, InitScheme, NetworkArch, TrainConfig};
use crate::oracle::{self, OracleSolution};

/// A trial counts as having reached the global minimizer when its NMSE is
/// within this distance of the oracle NMSE.
pub const GLOBAL_NMSE_TOL: f64 = 0.005;

/// Normalized mean-squared error `Σr² / Σy²`.
pub fn nmse(net: &Network, data: &Dataset) -> Result<f64> {
    let sum_y2 = data.sum_y_squared();
    if sum_y2 == 0.0 {
        return Err(Error::ZeroTargets);
    }
    let res = objective::residuals(net, data)?;
    let sum_r2: f64 = res.r.iter().map(|v| v * v).sum();
    Ok(sum_r2 / sum_y2)
}

/// Deterministic per-trial seed from the master seed and trial coordinates.
fn mix_seed(master: u64, a: u64, b: u64, c: u64) -> u64 {
    let mut z = master
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(c.wrapping_mul(0x94D0_49BB_1331_11EB));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Landscape-modification variant of an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// No modification (γ = 0, α pinned at 0); has spurious local minima.
    Plain,
    /// Trainable norm-regressor weight, γ = 0, random initialization.
    AddedNorm,
    /// Orthogonality penalty with α = 0 and `(λ₀, Q₀) = (0, I)`.
    OrthPenalty,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::AddedNorm => "added-norm",
            Variant::OrthPenalty => "orth-penalty",
        }
    }

    fn objective(&self, data: &Dataset, gamma_override: Option<f64>) -> ObjectiveConfig {
        match self {
            Variant::Plain => ObjectiveConfig::plain(),
            Variant::AddedNorm => ObjectiveConfig::added_norm(),
            Variant::OrthPenalty => ObjectiveConfig::orth_penalty(
                gamma_override.unwrap_or_else(|| objective::default_gamma(data)),
            ),
        }
    }

    fn init(&self) -> InitScheme {
        match self {
            Variant::OrthPenalty => InitScheme::ZeroLambdaIdentityQ,
            _ => InitScheme::default(),
        }
    }
}

/// Synthetic data source for sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataGen {
    PlantedDiagonal,
    PlantedDense,
    Independent,
}

impl DataGen {
    fn generate(&self, d: usize, n: usize, seed: u64) -> Result<Dataset> {
        match self {
            DataGen::PlantedDiagonal => data::gen_planted_diagonal(d, n, seed),
            DataGen::PlantedDense => data::gen_planted_dense(d, n, seed),
            DataGen::Independent => data::gen_independent(d, n, seed),
        }
    }
}

fn default_trace_every() -> usize {
    0
}

fn default_blocks() -> usize {
    5
}

fn default_trials() -> usize {
    20
}

/// Single-layer sweep over the neuron count `k` (threshold marker `k = d`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SingleSweepConfig {
    pub variant: Variant,
    pub d: usize,
    pub n_samples: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub data: DataGen,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub master_seed: u64,
    pub train: TrainConfig,
    /// Trace subsampling stride for `traces/*.jsonl`; 0 disables traces.
    #[serde(default = "default_trace_every")]
    pub trace_every: usize,
}

/// Depth-2 sweep over the intermediate width `h1` (threshold marker `d²`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeepSweepConfig {
    pub d: usize,
    pub n_samples: usize,
    pub h1_min: usize,
    pub h1_max: usize,
    /// Teacher width for the planted data; defaults to `d²` so the data is
    /// realizable exactly at the theoretical threshold.
    #[serde(default)]
    pub teacher_h1: Option<usize>,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub master_seed: u64,
    pub train: TrainConfig,
    #[serde(default = "default_trace_every")]
    pub trace_every: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MnistConfig {
    pub data_dir: PathBuf,
    pub digit_pairs: Vec<(u8, u8)>,
    pub h1_list: Vec<usize>,
    pub realizations: usize,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub master_seed: u64,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Example1Config {
    pub d_list: Vec<usize>,
    pub seeds_per_d: usize,
    #[serde(default)]
    pub n_samples: Option<usize>,
    #[serde(default = "default_perturbations")]
    pub perturbations: usize,
    #[serde(default = "default_radius")]
    pub radius: f64,
    pub escape_train: TrainConfig,
    #[serde(default)]
    pub master_seed: u64,
}

fn default_perturbations() -> usize {
    1000
}

fn default_radius() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingConfig {
    pub d: usize,
    pub n_samples: usize,
    pub betas: Vec<f64>,
    pub steps: usize,
    pub seeds: usize,
    pub eta_q: f64,
    pub eta_lambda: f64,
    #[serde(default)]
    pub master_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolyConfig {
    pub d: usize,
    pub degree: u32,
    pub n_samples: usize,
    pub seeds: usize,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub master_seed: u64,
    pub train: TrainConfig,
}

/// Top-level experiment selector, also the format of `--config` files.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "kebab-case")]
pub enum ExperimentConfig {
    SingleSweepK(SingleSweepConfig),
    DeepSweepH1(DeepSweepConfig),
    Mnist(MnistConfig),
    Example1(Example1Config),
    ScalingCheck(ScalingConfig),
    Poly(PolyConfig),
}

/// Result of one training trial inside a sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialResult {
    pub cell: usize,
    pub block: usize,
    pub trial: usize,
    pub seed: u64,
    pub nmse: f64,
    pub grad_norm: f64,
    pub epochs: usize,
    pub diverged: bool,
    pub achieved_global: bool,
    pub classification: Option<PointTag>,
}

/// One aggregated CSV row: a (cell, block) pair of a sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellRow {
    pub experiment: String,
    pub variant: String,
    pub cell: usize,
    pub block: usize,
    pub trials: usize,
    pub avg_nmse: f64,
    pub frac_global: f64,
    pub nmse_star: f64,
    pub threshold_marker: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub experiment: String,
    pub variant: String,
    pub threshold_marker: usize,
    pub rows: Vec<CellRow>,
    /// Fraction of trials at the global optimum per cell, pooled over blocks.
    pub frac_global_per_cell: Vec<(usize, f64)>,
    /// Smallest cell whose pooled fraction is 1.0, if any; success often
    /// starts below the theoretical marker.
    pub first_full_success_cell: Option<usize>,
    pub diverged_trials: usize,
    pub trials: Vec<TrialResult>,
}

impl SweepReport {
    pub fn frac_at_cell(&self, cell: usize) -> Option<f64> {
        self.frac_global_per_cell.iter().find(|(c, _)| *c == cell).map(|(_, f)| *f)
    }
}

fn aggregate_report(
    experiment: &str,
    variant: &str,
    threshold_marker: usize,
    cells: &[usize],
    blocks: usize,
    trials_per: usize,
    nmse_star_of: impl Fn(usize) -> f64,
    mut results: Vec<TrialResult>,
) -> SweepReport {
    results.sort_by_key(|t| (t.cell, t.block, t.trial));
    let mut rows = Vec::new();
    for &cell in cells {
        for block in 0..blocks {
            let subset: Vec<&TrialResult> = results
                .iter()
                .filter(|t| t.cell == cell && t.block == block)
                .collect();
            let completed: Vec<&&TrialResult> = subset.iter().filter(|t| !t.diverged).collect();
            let avg_nmse = if completed.is_empty() {
                f64::NAN
            } else {
                completed.iter().map(|t| t.nmse).sum::<f64>() / completed.len() as f64
            };
            let frac_global =
                subset.iter().filter(|t| t.achieved_global).count() as f64 / subset.len() as f64;
            rows.push(CellRow {
                experiment: experiment.to_string(),
                variant: variant.to_string(),
                cell,
                block,
                trials: trials_per,
                avg_nmse,
                frac_global,
                nmse_star: nmse_star_of(block),
                threshold_marker,
            });
        }
    }
    let mut frac_global_per_cell = Vec::new();
    for &cell in cells {
        let subset: Vec<&TrialResult> = results.iter().filter(|t| t.cell == cell).collect();
        let frac =
            subset.iter().filter(|t| t.achieved_global).count() as f64 / subset.len() as f64;
        frac_global_per_cell.push((cell, frac));
    }
    let first_full_success_cell =
        frac_global_per_cell.iter().find(|(_, f)| *f >= 1.0).map(|(c, _)| *c);
    let diverged_trials = results.iter().filter(|t| t.diverged).count();
    SweepReport {
        experiment: experiment.to_string(),
        variant: variant.to_string(),
        threshold_marker,
        rows,
        frac_global_per_cell,
        first_full_success_cell,
        diverged_trials,
        trials: results,
    }
}

/// Write the fixed-schema results CSV.
pub fn write_results_csv<W: Write>(rows: &[CellRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "experiment",
        "variant",
        "cell",
        "block",
        "trials",
        "avg_nmse",
        "frac_global",
        "nmse_star",
        "threshold_marker",
    ])?;
    for r in rows {
        w.write_record([
            r.experiment.clone(),
            r.variant.clone(),
            r.cell.to_string(),
            r.block.to_string(),
            r.trials.to_string(),
            format!("{:.12e}", r.avg_nmse),
            format!("{:.6}", r.frac_global),
            format!("{:.12e}", r.nmse_star),
            r.threshold_marker.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_outputs<S: Serialize>(
    out_dir: Option<&Path>,
    rows: &[CellRow],
    summary: &S,
    traces: &[(String, String)],
) -> Result<()> {
    let Some(dir) = out_dir else { return Ok(()) };
    fs::create_dir_all(dir)?;
    let file = fs::File::create(dir.join("results.csv"))?;
    write_results_csv(rows, file)?;
    let summary_text = serde_json::to_string_pretty(summary)?;
    fs::write(dir.join("summary.json"), summary_text)?;
    if !traces.is_empty() {
        let trace_dir = dir.join("traces");
        fs::create_dir_all(&trace_dir)?;
        for (name, content) in traces {
            fs::write(trace_dir.join(name), content)?;
        }
    }
    Ok(())
}

struct TrialOutcome {
    result: TrialResult,
    trace: Option<(String, String)>,
}

/// Run one single-layer trial: build the init, train, certify against the
/// oracle, and classify the final point.
#[allow(clippy::too_many_arguments)]
fn run_single_trial(
    variant: Variant,
    d: usize,
    k: usize,
    data: &Dataset,
    sol: &OracleSolution,
    train_cfg: &TrainConfig,
    gamma_override: Option<f64>,
    coords: (usize, usize, usize),
    seed: u64,
    trace_every: usize,
) -> Result<TrialOutcome> {
    let obj = variant.objective(data, gamma_override);
    let arch = NetworkArch::Single { d, k, outputs: 1 };
    let init = optimize::initialize(&arch, &variant.init(), seed)?;
    let cfg = TrainConfig { seed, ..train_cfg.clone() };
    let trace = optimize::train(&init, data, &obj, &cfg)?;

    let nmse_star = sol.nmse_star(data)?;
    let (cell, block, trial) = coords;
    let mut result = TrialResult {
        cell,
        block,
        trial,
        seed,
        nmse: f64::NAN,
        grad_norm: trace.final_grad_norm(),
        epochs: trace.epochs_used,
        diverged: trace.diverged,
        achieved_global: false,
        classification: None,
    };
    if !trace.diverged {
        let value = nmse(&trace.final_model, data)?;
        result.nmse = value;
        result.achieved_global = (value - nmse_star).abs() <= GLOBAL_NMSE_TOL;
        if let Network::Single(layer) = &trace.final_model {
            let tols = ClassifyTols::for_instance(data, sol.loss_star);
            let class = landscape::classify_point(layer, data, sol, &obj, &tols)?;
            result.classification = Some(class.tag);
        }
    }
    let trace_out = (trace_every > 0).then(|| {
        let mut buf = Vec::new();
        trace.write_jsonl(&mut buf, trace_every).expect("in-memory write");
        (
            format!("trial_c{cell}_b{block}_t{trial}.jsonl"),
            String::from_utf8(buf).expect("json is utf-8"),
        )
    });
    Ok(TrialOutcome { result, trace: trace_out })
}

/// Single-layer sweep over `k` (Table-1 style experiment).
pub fn run_single_sweep(cfg: &SingleSweepConfig, out_dir: Option<&Path>) -> Result<SweepReport> {
    if cfg.k_min > cfg.k_max || cfg.trials == 0 || cfg.blocks == 0 {
        return Err(Error::Config("sweep needs k_min ≤ k_max, trials ≥ 1, blocks ≥ 1".into()));
    }
    cfg.train.validate()?;

    let blocks: Vec<(Dataset, OracleSolution)> = (0..cfg.blocks)
        .map(|b| {
            let seed = mix_seed(cfg.master_seed, 0xDA7A, b as u64, 0);
            let data = cfg.data.generate(cfg.d, cfg.n_samples, seed)?;
            let sol = oracle::solve_oracle(&data, 2, false)?;
            Ok((data, sol))
        })
        .collect::<Result<_>>()?;

    let cells: Vec<usize> = (cfg.k_min..=cfg.k_max).collect();
    let mut jobs = Vec::new();
    for (ci, &k) in cells.iter().enumerate() {
        for b in 0..cfg.blocks {
            for t in 0..cfg.trials {
                jobs.push((ci, k, b, t));
            }
        }
    }
    let outcomes: Vec<TrialOutcome> = jobs
        .par_iter()
        .map(|&(_, k, b, t)| {
            let seed = mix_seed(cfg.master_seed, k as u64 + 1, b as u64, t as u64);
            let (data, sol) = &blocks[b];
            run_single_trial(
                cfg.variant,
                cfg.d,
                k,
                data,
                sol,
                &cfg.train,
                cfg.gamma,
                (k, b, t),
                seed,
                cfg.trace_every,
            )
        })
        .collect::<Result<_>>()?;

    let mut traces = Vec::new();
    let mut results = Vec::new();
    for o in outcomes {
        if let Some(t) = o.trace {
            traces.push(t);
        }
        results.push(o.result);
    }
    let nmse_stars: Vec<f64> = blocks
        .iter()
        .map(|(data, sol)| sol.nmse_star(data).unwrap_or(f64::NAN))
        .collect();
    let report = aggregate_report(
        "single-sweep-k",
        cfg.variant.as_str(),
        cfg.d,
        &cells,
        cfg.blocks,
        cfg.trials,
        |b| nmse_stars[b],
        results,
    );
    write_outputs(out_dir, &report.rows, &report, &traces)?;
    Ok(report)
}

/// Depth-2 sweep over the intermediate width `h1` on teacher-planted data.
pub fn run_deep_sweep(cfg: &DeepSweepConfig, out_dir: Option<&Path>) -> Result<SweepReport> {
    if cfg.h1_min == 0 || cfg.h1_min > cfg.h1_max || cfg.trials == 0 || cfg.blocks == 0 {
        return Err(Error::Config("deep sweep needs 1 ≤ h1_min ≤ h1_max, trials, blocks ≥ 1".into()));
    }
    cfg.train.validate()?;
    let teacher_h1 = cfg.teacher_h1.unwrap_or(cfg.d * cfg.d);

    let blocks: Vec<(Dataset, OracleSolution)> = (0..cfg.blocks)
        .map(|b| {
            let seed = mix_seed(cfg.master_seed, 0xDEE9, b as u64, 0);
            let data = data::gen_deep_planted(cfg.d, teacher_h1, cfg.n_samples, seed)?;
            let sol = oracle::solve_oracle(&data, 4, false)?;
            Ok((data, sol))
        })
        .collect::<Result<_>>()?;

    let cells: Vec<usize> = (cfg.h1_min..=cfg.h1_max).collect();
    let mut jobs = Vec::new();
    for &h1 in &cells {
        for b in 0..cfg.blocks {
            for t in 0..cfg.trials {
                jobs.push((h1, b, t));
            }
        }
    }
    let outcomes: Vec<TrialOutcome> = jobs
        .par_iter()
        .map(|&(h1, b, t)| {
            let seed = mix_seed(cfg.master_seed, h1 as u64 + 0x100, b as u64, t as u64);
            let (data, sol) = &blocks[b];
            let widths = vec![cfg.d, h1, 1];
            let hidden = deep_width_schedule(&widths);
            let arch = NetworkArch::Deep { widths, hidden };
            let init = optimize::initialize(&arch, &InitScheme::default(), seed)?;
            let obj = ObjectiveConfig::orth_penalty(
                cfg.gamma.unwrap_or_else(|| objective::default_gamma(data)),
            );
            let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
            let trace = optimize::train(&init, data, &obj, &train_cfg)?;
            let nmse_star = sol.nmse_star(data)?;
            let mut result = TrialResult {
                cell: h1,
                block: b,
                trial: t,
                seed,
                nmse: f64::NAN,
                grad_norm: trace.final_grad_norm(),
                epochs: trace.epochs_used,
                diverged: trace.diverged,
                achieved_global: false,
                classification: None,
            };
            if !trace.diverged {
                let value = nmse(&trace.final_model, data)?;
                result.nmse = value;
                result.achieved_global = (value - nmse_star).abs() <= GLOBAL_NMSE_TOL;
            }
            let trace_out = (cfg.trace_every > 0).then(|| {
                let mut buf = Vec::new();
                trace.write_jsonl(&mut buf, cfg.trace_every).expect("in-memory write");
                (
                    format!("trial_c{h1}_b{b}_t{t}.jsonl"),
                    String::from_utf8(buf).expect("json is utf-8"),
                )
            });
            Ok(TrialOutcome { result, trace: trace_out })
        })
        .collect::<Result<_>>()?;

    let mut traces = Vec::new();
    let mut results = Vec::new();
    for o in outcomes {
        if let Some(t) = o.trace {
            traces.push(t);
        }
        results.push(o.result);
    }
    let nmse_stars: Vec<f64> = blocks
        .iter()
        .map(|(data, sol)| sol.nmse_star(data).unwrap_or(f64::NAN))
        .collect();
    let report = aggregate_report(
        "deep-sweep-h1",
        "orth-penalty",
        cfg.d * cfg.d,
        &cells,
        cfg.blocks,
        cfg.trials,
        |b| nmse_stars[b],
        results,
    );
    write_outputs(out_dir, &report.rows, &report, &traces)?;
    Ok(report)
}

/// One h1/realization row of the MNIST report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MnistTrialRow {
    pub pair: (u8, u8),
    pub h1: usize,
    pub realization: usize,
    pub train_nmse: f64,
    pub achieved_global: bool,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MnistPairReport {
    pub pair: (u8, u8),
    pub train_size: usize,
    pub test_size: usize,
    pub nmse_star: f64,
    pub oracle_train_accuracy: f64,
    pub oracle_test_accuracy: f64,
    pub threshold_marker: usize,
    pub rows: Vec<MnistTrialRow>,
    /// Pooled fraction at the regression optimum per h1.
    pub frac_global_per_h1: Vec<(usize, f64)>,
}

/// Train depth-2 networks on a processed MNIST task and compare against the
/// degree-4 least-squares optimum over the 11-dimensional features.
pub fn report_mnist(task: &MnistTask, cfg: &MnistConfig) -> Result<MnistPairReport> {
    cfg.train.validate()?;
    let d = task.train.dim();
    let sol = oracle::solve_oracle(&task.train, 4, false)?;
    let nmse_star = sol.nmse_star(&task.train)?;
    let oracle_train_preds = sol.predict_batch(&task.train.x.view());
    let oracle_test_preds = sol.predict_batch(&task.test.x.view());
    let oracle_train_accuracy =
        classify_sign_of(&oracle_train_preds.view(), &task.train.y.column(0).view())?;
    let oracle_test_accuracy =
        classify_sign_of(&oracle_test_preds.view(), &task.test.y.column(0).view())?;

    let mut jobs = Vec::new();
    for &h1 in &cfg.h1_list {
        for r in 0..cfg.realizations {
            jobs.push((h1, r));
        }
    }
    let rows: Vec<MnistTrialRow> = jobs
        .par_iter()
        .map(|&(h1, r)| {
            let seed = mix_seed(cfg.master_seed, h1 as u64, r as u64, 0x3A57);
            let widths = vec![d, h1, 1];
            let hidden = deep_width_schedule(&widths);
            let arch = NetworkArch::Deep { widths, hidden };
            let init = optimize::initialize(&arch, &InitScheme::default(), seed)?;
            let obj = ObjectiveConfig::orth_penalty(
                cfg.gamma.unwrap_or_else(|| objective::default_gamma(&task.train)),
            );
            let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
            let trace = optimize::train(&init, &task.train, &obj, &train_cfg)?;
            let mut row = MnistTrialRow {
                pair: task.digit_pair,
                h1,
                realization: r,
                train_nmse: f64::NAN,
                achieved_global: false,
                train_accuracy: f64::NAN,
                test_accuracy: f64::NAN,
                diverged: trace.diverged,
            };
            if !trace.diverged {
                row.train_nmse = nmse(&trace.final_model, &task.train)?;
                row.achieved_global = (row.train_nmse - nmse_star).abs() <= GLOBAL_NMSE_TOL;
                row.train_accuracy = classify_sign(&trace.final_model, &task.train)?;
                row.test_accuracy = classify_sign(&trace.final_model, &task.test)?;
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;

    let mut sorted = rows;
    sorted.sort_by_key(|r| (r.h1, r.realization));
    let frac_global_per_h1 = cfg
        .h1_list
        .iter()
        .map(|&h1| {
            let subset: Vec<&MnistTrialRow> = sorted.iter().filter(|r| r.h1 == h1).collect();
            let frac =
                subset.iter().filter(|r| r.achieved_global).count() as f64 / subset.len() as f64;
            (h1, frac)
        })
        .collect();
    Ok(MnistPairReport {
        pair: task.digit_pair,
        train_size: task.train.len(),
        test_size: task.test.len(),
        nmse_star,
        oracle_train_accuracy,
        oracle_test_accuracy,
        threshold_marker: d * d,
        rows: sorted,
        frac_global_per_h1,
    })
}

/// Run the full MNIST experiment from config (loads each pair's task).
pub fn run_mnist(cfg: &MnistConfig, out_dir: Option<&Path>) -> Result<Vec<MnistPairReport>> {
    let mut reports = Vec::new();
    for &pair in &cfg.digit_pairs {
        let task = data::load_mnist_task(&cfg.data_dir, pair, cfg.master_seed)?;
        reports.push(report_mnist(&task, cfg)?);
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&reports)?)?;
        let rows: Vec<CellRow> = reports
            .iter()
            .flat_map(|rep| {
                rep.frac_global_per_h1.iter().map(|&(h1, frac)| {
                    let subset: Vec<&MnistTrialRow> =
                        rep.rows.iter().filter(|r| r.h1 == h1 && !r.diverged).collect();
                    let avg = if subset.is_empty() {
                        f64::NAN
                    } else {
                        subset.iter().map(|r| r.train_nmse).sum::<f64>() / subset.len() as f64
                    };
                    CellRow {
                        experiment: "mnist".into(),
                        variant: format!("{}v{}", rep.pair.0, rep.pair.1),
                        cell: h1,
                        block: 0,
                        trials: cfg.realizations,
                        avg_nmse: avg,
                        frac_global: frac,
                        nmse_star: rep.nmse_star,
                        threshold_marker: rep.threshold_marker,
                    }
                })
            })
            .collect();
        let file = fs::File::create(dir.join("results.csv"))?;
        write_results_csv(&rows, file)?;
    }
    Ok(reports)
}

/// Verification record for one constructed spurious minimum.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Example1Record {
    pub d: usize,
    pub seed: u64,
    pub grad_norm: f64,
    pub loss_at_point: f64,
    pub loss_star: f64,
    /// Loss exceeds the optimum by at least 10%.
    pub spurious: bool,
    /// All sampled perturbations kept the loss at or above the point's.
    pub perturbation_stable: bool,
    pub classification: PointTag,
    /// Final loss of the added-norm escape run from a 1e-6 perturbation.
    pub escape_loss: f64,
    pub escaped: bool,
}

/// Build, verify, and escape the spurious-minimum family.
pub fn run_example1(cfg: &Example1Config, out_dir: Option<&Path>) -> Result<Vec<Example1Record>> {
    cfg.escape_train.validate()?;
    let mut jobs = Vec::new();
    for &d in &cfg.d_list {
        for s in 0..cfg.seeds_per_d {
            jobs.push((d, s));
        }
    }
    let records: Vec<Example1Record> = jobs
        .par_iter()
        .map(|&(d, s)| {
            let seed = mix_seed(cfg.master_seed, d as u64, s as u64, 0xE1);
            let n = cfg.n_samples.unwrap_or_else(|| (10 * d).max(40));
            let (data, layer) = landscape::make_example1(d, n, seed)?;
            let sol = oracle::solve_oracle(&data, 2, false)?;
            let net = Network::Single(layer.clone());
            let grad_norm =
                objective::grad(&net, &data, &ObjectiveConfig::plain())?.norm();
            let loss_at_point = objective::loss_mse(&net, &data)?;
            let spurious = loss_at_point > 1.1 * sol.loss_star + 1e-12;

            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
            let mut stable = true;
            for _ in 0..cfg.perturbations {
                let dq = Array2::from_shape_fn((d, d), |_| rng.sample::<f64, _>(StandardNormal));
                let dl = Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal));
                let scale: f64 =
                    dq.iter().chain(dl.iter()).map(|v| v * v).sum::<f64>().sqrt();
                let radius = cfg.radius * rng.random::<f64>();
                let perturbed = QLLayer::scalar(
                    &layer.q + &dq.mapv(|v| v * radius / scale),
                    &layer.lambda.row(0).to_owned() + &dl.mapv(|v| v * radius / scale),
                    0.0,
                )?;
                let loss = objective::loss_mse(&Network::Single(perturbed), &data)?;
                if loss < loss_at_point * (1.0 - 1e-12) {
                    stable = false;
                    break;
                }
            }

            let tols = ClassifyTols::for_instance(&data, sol.loss_star);
            let class =
                landscape::classify_point(&layer, &data, &sol, &ObjectiveConfig::plain(), &tols)?;

            // Escape: added-norm variant from a 1e-6 perturbation.
            let dq = Array2::from_shape_fn((d, d), |_| {
                1e-6 * rng.sample::<f64, _>(StandardNormal)
            });
            let dl =
                Array1::from_shape_fn(d, |_| 1e-6 * rng.sample::<f64, _>(StandardNormal));
            let start = QLLayer::scalar(
                &layer.q + &dq,
                &layer.lambda.row(0).to_owned() + &dl,
                0.0,
            )?;
            let train_cfg = TrainConfig { seed, ..cfg.escape_train.clone() };
            let trace = optimize::train(
                &Network::Single(start),
                &data,
                &ObjectiveConfig::added_norm(),
                &train_cfg,
            )?;
            let escape_loss = objective::loss_mse(&trace.final_model, &data)?;
            let escaped =
                !trace.diverged && escape_loss <= sol.loss_star + 1e-4 * (1.0 + sol.loss_star);

            Ok(Example1Record {
                d,
                seed,
                grad_norm,
                loss_at_point,
                loss_star: sol.loss_star,
                spurious,
                perturbation_stable: stable,
                classification: class.tag,
                escape_loss,
                escaped,
            })
        })
        .collect::<Result<_>>()?;

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&records)?)?;
    }
    Ok(records)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingRecord {
    pub seed: u64,
    pub beta: f64,
    pub max_relative_deviation: f64,
}

/// Step-size/initialization rescaling harness.
pub fn run_scaling_check(cfg: &ScalingConfig, out_dir: Option<&Path>) -> Result<Vec<ScalingRecord>> {
    if cfg.steps == 0 || cfg.seeds == 0 || cfg.betas.is_empty() {
        return Err(Error::Config("scaling check needs steps, seeds, betas ≥ 1".into()));
    }
    let mut records = Vec::new();
    for s in 0..cfg.seeds {
        let seed = mix_seed(cfg.master_seed, s as u64, 0xB2, 0);
        let data = data::gen_planted_dense(cfg.d, cfg.n_samples, seed)?;
        let arch = NetworkArch::Single { d: cfg.d, k: cfg.d, outputs: 1 };
        let net = optimize::initialize(&arch, &InitScheme::default(), seed ^ 0x17)?;
        let Network::Single(layer) = net else { unreachable!() };
        for &beta in &cfg.betas {
            let dev = optimize::scaled_trajectory_check(
                &layer,
                &data,
                beta,
                cfg.eta_q,
                cfg.eta_lambda,
                cfg.steps,
            )?;
            records.push(ScalingRecord { seed, beta, max_relative_deviation: dev });
        }
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&records)?)?;
    }
    Ok(records)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolyRecord {
    pub seed: u64,
    pub final_loss: f64,
    pub loss_star: f64,
    pub achieved: bool,
    pub diverged: bool,
}

/// Polynomial-layer experiment: prescribed basis init, γ above the target
/// norm, trained against the degree-p monomial oracle.
pub fn run_poly(cfg: &PolyConfig, out_dir: Option<&Path>) -> Result<Vec<PolyRecord>> {
    cfg.train.validate()?;
    let k = crate::model::monomial_count(cfg.d, cfg.degree)?;
    let records: Vec<PolyRecord> = (0..cfg.seeds)
        .into_par_iter()
        .map(|s| {
            let seed = mix_seed(cfg.master_seed, s as u64, 0x90, 0);
            let data = data::gen_independent(cfg.d, cfg.n_samples, seed)?;
            let sol = oracle::solve_oracle(&data, cfg.degree, false)?;
            let arch = NetworkArch::Poly { d: cfg.d, k, degree: cfg.degree };
            let init = optimize::initialize(&arch, &InitScheme::PolyBasis, seed)?;
            let obj = ObjectiveConfig::orth_penalty(
                cfg.gamma.unwrap_or_else(|| objective::default_gamma(&data)),
            );
            let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
            let trace = optimize::train(&init, &data, &obj, &train_cfg)?;
            let final_loss = objective::loss_mse(&trace.final_model, &data)?;
            let achieved = !trace.diverged
                && (final_loss - sol.loss_star).abs() <= 1e-4 * (1.0 + sol.loss_star);
            Ok(PolyRecord {
                seed,
                final_loss,
                loss_star: sol.loss_star,
                achieved,
                diverged: trace.diverged,
            })
        })
        .collect::<Result<_>>()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&records)?)?;
    }
    Ok(records)
}

/// Multivariate threshold trial (k = M·d, block-orthogonal init, per-block
/// penalty): returns `(final loss, oracle loss)`.
pub fn run_multivariate_trial(
    d: usize,
    outputs: usize,
    n: usize,
    seed: u64,
    train_cfg: &TrainConfig,
    planted: bool,
) -> Result<(f64, f64)> {
    let data = if planted {
        data::gen_multivariate_planted(d, outputs, n, seed)?
    } else {
        data::gen_multivariate_independent(d, outputs, n, seed)?
    };
    let sols = oracle::solve_oracle_channels(&data, 2, false)?;
    let loss_star = oracle::combined_loss_star(&sols);

    let k = outputs * d;
    let arch = NetworkArch::Single { d, k, outputs };
    let init = optimize::initialize(&arch, &InitScheme::MultivariateBlockOrthogonal, seed)?;
    let gamma = objective::default_gamma(&data);
    let obj = ObjectiveConfig::orth_penalty(gamma).with_penalty_mode(PenaltyMode::OutputBlocks);
    let cfg = TrainConfig { seed, ..train_cfg.clone() };
    let trace = optimize::train(&init, &data, &obj, &cfg)?;
    let final_loss = objective::loss_mse(&trace.final_model, &data)?;
    Ok((final_loss, loss_star))
}

/// Where a standalone oracle run gets its data.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DataSource {
    Generator { generator: DataGen, d: usize, n_samples: usize, seed: u64 },
    CsvFile { path: PathBuf },
    JsonFile { path: PathBuf },
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Generator { generator, d, n_samples, seed } => {
                generator.generate(*d, *n_samples, *seed)
            }
            DataSource::CsvFile { path } => Dataset::read_csv(fs::File::open(path)?),
            DataSource::JsonFile { path } => Dataset::from_json(&fs::read_to_string(path)?),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleRunConfig {
    pub data: DataSource,
    #[serde(default = "default_degree")]
    pub degree: u32,
    #[serde(default)]
    pub include_norm: bool,
}

fn default_degree() -> u32 {
    2
}

/// Solve the convex certificate for a dataset and write `oracle.json`.
pub fn run_oracle(cfg: &OracleRunConfig, out_dir: Option<&Path>) -> Result<OracleSolution> {
    let data = cfg.data.load()?;
    let sol = oracle::solve_oracle(&data, cfg.degree, cfg.include_norm)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("oracle.json"), sol.to_json()?)?;
    }
    Ok(sol)
}

impl ExperimentConfig {
    /// Override the master seed (the CLI `--seed` flag).
    pub fn set_master_seed(&mut self, seed: u64) {
        match self {
            ExperimentConfig::SingleSweepK(c) => c.master_seed = seed,
            ExperimentConfig::DeepSweepH1(c) => c.master_seed = seed,
            ExperimentConfig::Mnist(c) => c.master_seed = seed,
            ExperimentConfig::Example1(c) => c.master_seed = seed,
            ExperimentConfig::ScalingCheck(c) => c.master_seed = seed,
            ExperimentConfig::Poly(c) => c.master_seed = seed,
        }
    }

    /// CI fast mode: cap the epoch budget at 5000 and let ADAM/SGD stop
    /// early once the gradient norm falls below `grad_tol`.
    pub fn set_fast_mode(&mut self) {
        let tweak = |t: &mut TrainConfig| {
            t.max_epochs = t.max_epochs.min(5000);
            t.early_stop_stochastic = true;
        };
        match self {
            ExperimentConfig::SingleSweepK(c) => tweak(&mut c.train),
            ExperimentConfig::DeepSweepH1(c) => tweak(&mut c.train),
            ExperimentConfig::Mnist(c) => tweak(&mut c.train),
            ExperimentConfig::Example1(c) => tweak(&mut c.escape_train),
            ExperimentConfig::ScalingCheck(_) => {}
            ExperimentConfig::Poly(c) => tweak(&mut c.train),
        }
    }
}

/// Dispatch a parsed experiment config. Returns the number of diverged
/// trials (for `--strict` exit handling).
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<usize> {
    match cfg {
        ExperimentConfig::SingleSweepK(c) => Ok(run_single_sweep(c, out_dir)?.diverged_trials),
        ExperimentConfig::DeepSweepH1(c) => Ok(run_deep_sweep(c, out_dir)?.diverged_trials),
        ExperimentConfig::Mnist(c) => {
            let reports = run_mnist(c, out_dir)?;
            Ok(reports
                .iter()
                .flat_map(|r| r.rows.iter())
                .filter(|row| row.diverged)
                .count())
        }
        ExperimentConfig::Example1(c) => {
            let records = run_example1(c, out_dir)?;
            Ok(records.iter().filter(|r| !r.escaped).count())
        }
        ExperimentConfig::ScalingCheck(c) => {
            run_scaling_check(c, out_dir)?;
            Ok(0)
        }
        ExperimentConfig::Poly(c) => {
            let records = run_poly(c, out_dir)?;
            Ok(records.iter().filter(|r| r.diverged).count())
        }
    }
}
