//! Experiment orchestration: Monte Carlo sweeps, error-statistics analysis,
//! closed-form combining checks, invariance checks and model training.
//!
//! Every experiment is a pure function of an [`ExperimentConfig`]; the CLI in
//! [`cli`] only parses arguments, merges overrides and writes files.

pub mod cli;

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detectors::{count_errors, Detector, ErrorCounts, LmmseDetector, MlDetector, QrmDetector};
use crate::mimo_model::{ModulationKind, ModulationSpec, SimConfig};
use crate::neural::{train, NeuralModel, TrainConfig};
use crate::resampler::{
    collect_error_samples, optimal_weights, quadratic_form, resample_detect, variance_curve,
    CombineDomain, ErrorSamples, WeightMode,
};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::stats::{variance, variance_stderr};
use crate::transforms::{instantiate_set, verify_invariance, InvarianceReport, ObservationScaling, TransformTag};
use crate::{Error, Result};

pub use cli::main_cli;

/// Header of `results.csv`. Changing it is a schema change.
pub const RESULTS_HEADER: &str = "snr_db,detector,m,trials,symbol_errors,bit_errors,ser,ber,elapsed_s,seed";
/// Header of `theorem1.csv`.
pub const THEOREM1_HEADER: &str = "rho,m,predicted,empirical,stderr";

/// How the transform channels of a resampled detector are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightChoice {
    #[default]
    Uniform,
    /// Weights from an error covariance estimated on separate calibration problems.
    Optimal,
}

/// Model-training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub n_train: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub hidden: Vec<usize>,
    pub include_noise_var: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            n_train: 100_000,
            batch_size: 128,
            epochs: 20,
            learning_rate: 0.01,
            momentum: 0.9,
            hidden: vec![128, 128],
            include_noise_var: false,
        }
    }
}

/// Settings of the closed-form combining check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Theorem1Section {
    pub m_values: Vec<usize>,
    pub rho_grid: Vec<f64>,
    pub sigma2: f64,
    pub n_draws: usize,
}

impl Default for Theorem1Section {
    fn default() -> Self {
        Self {
            m_values: vec![1, 2, 4, 8, 64],
            rho_grid: vec![0.0, 0.2, 0.5, 0.71, 0.9, 1.0],
            sigma2: 1.0,
            n_draws: 100_000,
        }
    }
}

/// Settings of the generator-invariance check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InvarianceSection {
    pub transforms: Vec<TransformTag>,
    pub n_samples: usize,
    pub alpha: f64,
    /// Scale factor of the negative control `(a·y, a·H)`.
    pub control_scale: f64,
}

impl Default for InvarianceSection {
    fn default() -> Self {
        Self {
            transforms: vec![TransformTag::Neg, TransformTag::ConjRot, TransformTag::Perm],
            n_samples: 10_000,
            alpha: 0.01,
            control_scale: 2.0,
        }
    }
}

/// Everything an experiment needs. Every key has a default, so a config
/// file only lists what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n_rx: usize,
    pub n_tx: usize,
    pub modulation: ModulationKind,
    pub order: usize,
    /// Scale the constellation to unit average energy.
    pub normalized: bool,
    pub seed: u64,
    pub n_trials: usize,
    /// Operating point of `train` and `analyze`.
    pub snr_db: f64,
    /// Operating points of `sweep`, strictly increasing.
    pub snr_grid: Vec<f64>,
    /// `ml`, `ml:maxlog`, `lmmse`, `qrm:<K>`, `neural` or `neural:<path>`.
    pub detectors: Vec<String>,
    /// Each set is one resampling variant; `["identity"]` is plain inference.
    pub transform_sets: Vec<Vec<TransformTag>>,
    pub weight_mode: WeightChoice,
    pub domain: CombineDomain,
    /// Problems used to estimate error covariances.
    pub n_obs: usize,
    pub n_bins: usize,
    pub model: Option<PathBuf>,
    pub out: PathBuf,
    pub threads: Option<usize>,
    pub train: TrainSection,
    pub theorem1: Theorem1Section,
    pub invariance: InvarianceSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_rx: 4,
            n_tx: 4,
            modulation: ModulationKind::Qam,
            order: 16,
            normalized: false,
            seed: 1,
            n_trials: 10_000,
            snr_db: 14.0,
            snr_grid: vec![10.0, 12.0, 14.0, 16.0, 18.0],
            detectors: vec!["lmmse".into(), "qrm:16".into()],
            transform_sets: vec![
                vec![TransformTag::Identity],
                vec![TransformTag::Identity, TransformTag::Neg],
                vec![TransformTag::Identity, TransformTag::Neg, TransformTag::Perm, TransformTag::ConjRot],
            ],
            weight_mode: WeightChoice::Uniform,
            domain: CombineDomain::Marginal,
            n_obs: 2_000,
            n_bins: 41,
            model: None,
            out: PathBuf::from("out"),
            threads: None,
            train: TrainSection::default(),
            theorem1: Theorem1Section::default(),
            invariance: InvarianceSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn modulation_spec(&self) -> ModulationSpec {
        ModulationSpec {
            kind: self.modulation,
            order: self.order,
            normalized: self.normalized,
        }
    }

    pub fn sim(&self, snr_db: f64) -> SimConfig {
        SimConfig {
            n_rx: self.n_rx,
            n_tx: self.n_tx,
            modulation: self.modulation_spec(),
            snr_db,
            master_seed: self.seed,
            n_trials: self.n_trials,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            n_rx: self.n_rx,
            n_tx: self.n_tx,
            modulation: self.modulation_spec(),
            snr_db: self.snr_db,
            n_train: t.n_train,
            batch_size: t.batch_size,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            seed: self.seed,
            hidden: t.hidden.clone(),
            include_noise_var: t.include_noise_var,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sim(self.snr_db).validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.snr_grid.is_empty() || self.snr_grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("snr_grid must be non-empty and strictly increasing".into()));
        }
        if self.snr_grid.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("snr_grid entries must be finite".into()));
        }
        if self.transform_sets.is_empty() || self.transform_sets.iter().any(|s| s.is_empty()) {
            return Err(Error::Config("transform_sets must be non-empty sets".into()));
        }
        if self.detectors.is_empty() {
            return Err(Error::Config("no detectors given".into()));
        }
        for tag in &self.detectors {
            DetectorSpec::from_str(tag).map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.n_obs < 100 {
            return Err(Error::Config("n_obs must be ≥ 100".into()));
        }
        if self.n_bins == 0 {
            return Err(Error::Config("n_bins must be ≥ 1".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be ≥ 1".into()));
        }
        let th = &self.theorem1;
        if th.m_values.is_empty() || th.m_values.contains(&0) || th.rho_grid.is_empty() {
            return Err(Error::Config("theorem1 needs m ≥ 1 and a non-empty rho grid".into()));
        }
        if !(th.sigma2 > 0.0) || th.n_draws < 2 {
            return Err(Error::Config("theorem1 needs sigma2 > 0 and n_draws ≥ 2".into()));
        }
        for &rho in &th.rho_grid {
            variance_curve(rho, th.sigma2, &th.m_values).map_err(|e| Error::Config(e.to_string()))?;
        }
        let inv = &self.invariance;
        if inv.n_samples < 1000 || !(inv.alpha > 0.0 && inv.alpha < 1.0) {
            return Err(Error::Config("invariance needs n_samples ≥ 1000 and alpha in (0, 1)".into()));
        }
        Ok(())
    }
}

/// A detector named in a config.
#[derive(Debug, Clone, PartialEq)]
pub enum DetectorSpec {
    Ml,
    MlMaxLog,
    Lmmse,
    Qrm(usize),
    /// Uses the config's `model` path when none is given.
    Neural(Option<PathBuf>),
}

impl FromStr for DetectorSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.split_once(':') {
            None if s == "ml" => DetectorSpec::Ml,
            None if s == "lmmse" => DetectorSpec::Lmmse,
            None if s == "neural" => DetectorSpec::Neural(None),
            Some(("ml", "maxlog")) => DetectorSpec::MlMaxLog,
            Some(("qrm", k)) => DetectorSpec::Qrm(
                k.parse()
                    .ok()
                    .filter(|&k| k > 0)
                    .ok_or_else(|| Error::UnknownTag(s.into()))?,
            ),
            Some(("neural", p)) if !p.is_empty() => DetectorSpec::Neural(Some(p.into())),
            _ => return Err(Error::UnknownTag(s.into())),
        })
    }
}

pub type BoxedDetector = Box<dyn Detector + Send>;

impl DetectorSpec {
    pub fn build(&self, cfg: &ExperimentConfig) -> Result<BoxedDetector> {
        Ok(match self {
            DetectorSpec::Ml | DetectorSpec::MlMaxLog => {
                let det = if *self == DetectorSpec::Ml {
                    MlDetector::full_posterior()
                } else {
                    MlDetector::max_log()
                };
                let size = (cfg.order as u128).checked_pow(cfg.n_tx as u32).unwrap_or(u128::MAX);
                if size > det.budget {
                    return Err(Error::BudgetExceeded { size, budget: det.budget });
                }
                Box::new(det)
            }
            DetectorSpec::Lmmse => Box::new(LmmseDetector),
            DetectorSpec::Qrm(k) => Box::new(QrmDetector::new(*k)?),
            DetectorSpec::Neural(path) => {
                let path = path
                    .clone()
                    .or_else(|| cfg.model.clone())
                    .ok_or_else(|| Error::Config("neural detector needs a model path".into()))?;
                let model = NeuralModel::load(&path)?;
                let spec = &model.input_spec;
                if spec.n_rx != cfg.n_rx || spec.n_tx != cfg.n_tx || spec.modulation != cfg.modulation_spec() {
                    return Err(Error::SpecMismatch(format!(
                        "model {} was trained for {}×{} {}-{}",
                        path.display(),
                        spec.n_rx,
                        spec.n_tx,
                        spec.modulation.order,
                        spec.modulation.kind
                    )));
                }
                Box::new(model)
            }
        })
    }
}

/// Runs `f` on a pool of `threads` workers, or on the global pool.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

/// One line of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub snr_db: f64,
    pub detector: String,
    pub m: usize,
    pub trials: u64,
    pub symbol_errors: u64,
    pub bit_errors: u64,
    pub ser: f64,
    pub ber: f64,
    pub elapsed_s: f64,
    pub seed: u64,
}

fn to_csv<T: Serialize>(rows: &[T], header: &str) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let body = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(format!("{header}\n{}", String::from_utf8(body).expect("csv output is UTF-8")))
}

fn from_csv<T: for<'de> Deserialize<'de>>(text: &str, header: &str) -> Result<Vec<T>> {
    if text.lines().next() != Some(header) {
        return Err(Error::Config(format!("expected CSV header `{header}`")));
    }
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn results_csv(rows: &[ResultRow]) -> Result<String> {
    to_csv(rows, RESULTS_HEADER)
}

pub fn parse_results_csv(text: &str) -> Result<Vec<ResultRow>> {
    from_csv(text, RESULTS_HEADER)
}

/// Label of a detector/transform-set variant, e.g. `lmmse@identity;neg`.
pub fn variant_label(detector: &str, set: &[TransformTag]) -> String {
    if set == [TransformTag::Identity] {
        detector.to_string()
    } else {
        let tags: Vec<&str> = set.iter().map(|t| t.as_str()).collect();
        format!("{detector}@{}", tags.join(";"))
    }
}

fn calibration_sim(cfg: &ExperimentConfig, snr_db: f64, index: u64) -> SimConfig {
    SimConfig {
        master_seed: derive_seed(cfg.seed, Stream::Calibration, index),
        ..cfg.sim(snr_db)
    }
}

/// Weights of one resampling variant; optimal weights come from `n_obs`
/// calibration problems disjoint from the evaluated ones.
pub fn variant_weights(
    cfg: &ExperimentConfig,
    detector: &dyn Detector,
    set: &[TransformTag],
    snr_db: f64,
) -> Result<WeightMode> {
    if set.len() == 1 || cfg.weight_mode == WeightChoice::Uniform {
        return Ok(WeightMode::Uniform);
    }
    let samples = collect_error_samples(detector, set, &calibration_sim(cfg, snr_db, 0), cfg.n_obs)?;
    WeightMode::optimal(&samples.stats()?)
}

/// Error counts of one variant on trials `0..n_trials` of `sim`.
pub fn evaluate_variant(
    detector: &dyn Detector,
    set: &[TransformTag],
    weights: &WeightMode,
    domain: CombineDomain,
    sim: &SimConfig,
) -> Result<ErrorCounts> {
    let c = sim.modulation.build()?;
    let per_trial: Vec<ErrorCounts> = (0..sim.n_trials as u64)
        .into_par_iter()
        .map(|i| {
            let p = sim.problem(&c, i);
            let out = if set == [TransformTag::Identity] {
                detector.detect(&p)?
            } else {
                let ts = instantiate_set(set, sim.n_rx, sim.n_tx, sim.master_seed, i);
                resample_detect(detector, &p, &ts, weights, domain)?
            };
            count_errors(&out.hard, p.s_true.as_ref().expect("labelled"), &c)
        })
        .collect::<Result<_>>()?;
    let mut total = ErrorCounts::default();
    for e in per_trial {
        total += e;
    }
    Ok(total)
}

/// Monte Carlo sweep: one row per SNR point, detector and transform set, all
/// variants at one SNR seeing the same problems.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let detectors: Vec<(String, BoxedDetector)> = cfg
        .detectors
        .iter()
        .map(|tag| Ok((tag.clone(), DetectorSpec::from_str(tag)?.build(cfg)?)))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for &snr_db in &cfg.snr_grid {
        let sim = cfg.sim(snr_db);
        for (tag, det) in &detectors {
            for set in &cfg.transform_sets {
                let start = Instant::now();
                let weights = variant_weights(cfg, det.as_ref(), set, snr_db)?;
                let e = evaluate_variant(det.as_ref(), set, &weights, cfg.domain, &sim)?;
                rows.push(ResultRow {
                    snr_db,
                    detector: variant_label(tag, set),
                    m: set.len(),
                    trials: sim.n_trials as u64,
                    symbol_errors: e.symbol_errors,
                    bit_errors: e.bit_errors,
                    ser: e.symbol_errors as f64 / e.symbols as f64,
                    ber: e.bit_errors as f64 / e.bits as f64,
                    elapsed_s: start.elapsed().as_secs_f64(),
                    seed: cfg.seed,
                });
            }
        }
    }
    Ok(rows)
}

/// Error variance of a weighted combination, measured on held-out problems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedCheck {
    pub beta: Vec<f64>,
    /// `βᵀ R̂ β` with `R̂` from the estimation problems.
    pub predicted: f64,
    pub measured: f64,
    pub measured_stderr: f64,
}

fn combined_check(r: &DMatrix<f64>, beta: Vec<f64>, holdout: &ErrorSamples) -> CombinedCheck {
    let combined = holdout.combined(&beta);
    let measured = variance(&combined);
    CombinedCheck {
        predicted: quadratic_form(r, &beta),
        measured,
        measured_stderr: variance_stderr(measured, combined.len()),
        beta,
    }
}

/// Error statistics of one detector over one transform set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelAnalysis {
    pub detector: String,
    pub transforms: Vec<TransformTag>,
    pub snr_db: f64,
    pub n_problems: usize,
    pub n_obs: usize,
    /// Histogram range `±1.5·d/2`, `d` the minimum point spacing.
    pub interval: [f64; 2],
    pub bin_edges: Vec<f64>,
    /// One histogram per channel; errors outside the interval are counted in `outside`.
    pub histograms: Vec<Vec<u64>>,
    pub outside: Vec<u64>,
    pub mean_error: Vec<f64>,
    pub sigma2: f64,
    pub r: Vec<Vec<f64>>,
    pub rho: Vec<Vec<f64>>,
    pub degenerate: Vec<(usize, usize)>,
    pub uniform: CombinedCheck,
    pub optimal: CombinedCheck,
    pub regularized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub seed: u64,
    pub n_bins: usize,
    pub entries: Vec<ChannelAnalysis>,
}

fn histogram(values: impl Iterator<Item = f64>, lo: f64, hi: f64, n_bins: usize) -> (Vec<u64>, u64) {
    let mut counts = vec![0u64; n_bins];
    let mut outside = 0;
    let width = (hi - lo) / n_bins as f64;
    for v in values {
        if v < lo || v > hi {
            outside += 1;
        } else {
            counts[(((v - lo) / width) as usize).min(n_bins - 1)] += 1;
        }
    }
    (counts, outside)
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Error statistics of `detector` over `set` at the config's `snr_db`.
/// `R` is estimated on `n_obs` calibration problems; combined variances are
/// measured on `n_obs` further held-out problems.
pub fn analyze_channels(
    cfg: &ExperimentConfig,
    label: &str,
    detector: &dyn Detector,
    set: &[TransformTag],
    n_bins: usize,
) -> Result<ChannelAnalysis> {
    let estimation = collect_error_samples(detector, set, &calibration_sim(cfg, cfg.snr_db, 0), cfg.n_obs)?;
    let holdout = collect_error_samples(detector, set, &calibration_sim(cfg, cfg.snr_db, 1), cfg.n_obs)?;
    let stats = estimation.stats()?;
    let weights = optimal_weights(&stats.r)?;
    let c = cfg.modulation_spec().build()?;
    let half = 1.5 * c.min_distance() / 2.0;
    let mut histograms = Vec::new();
    let mut outside = Vec::new();
    for j in 0..stats.m {
        let (h, o) = histogram(estimation.errors.column(j).iter().copied(), -half, half, n_bins);
        histograms.push(h);
        outside.push(o);
    }
    Ok(ChannelAnalysis {
        detector: label.into(),
        transforms: set.to_vec(),
        snr_db: cfg.snr_db,
        n_problems: cfg.n_obs,
        n_obs: stats.n_obs,
        interval: [-half, half],
        bin_edges: (0..=n_bins).map(|i| -half + 2.0 * half * i as f64 / n_bins as f64).collect(),
        histograms,
        outside,
        mean_error: stats.mean_error.clone(),
        sigma2: stats.sigma2,
        r: matrix_rows(&stats.r),
        rho: matrix_rows(&stats.rho),
        degenerate: stats.degenerate.clone(),
        uniform: combined_check(&stats.r, vec![1.0 / stats.m as f64; stats.m], &holdout),
        optimal: combined_check(&stats.r, weights.beta, &holdout),
        regularized: weights.regularized,
    })
}

/// Error analysis of every configured detector over every transform set with `M ≥ 2`.
pub fn run_error_analysis(cfg: &ExperimentConfig, n_bins: usize) -> Result<AnalysisReport> {
    cfg.validate()?;
    if n_bins == 0 {
        return Err(Error::Config("n_bins must be ≥ 1".into()));
    }
    let mut entries = Vec::new();
    for tag in &cfg.detectors {
        let det = DetectorSpec::from_str(tag)?.build(cfg)?;
        for set in cfg.transform_sets.iter().filter(|s| s.len() >= 2) {
            entries.push(analyze_channels(cfg, tag, det.as_ref(), set, n_bins)?);
        }
    }
    Ok(AnalysisReport {
        seed: cfg.seed,
        n_bins,
        entries,
    })
}

/// One line of `theorem1.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Row {
    pub rho: f64,
    pub m: usize,
    pub predicted: f64,
    pub empirical: f64,
    pub stderr: f64,
}

pub fn theorem1_csv(rows: &[Theorem1Row]) -> Result<String> {
    to_csv(rows, THEOREM1_HEADER)
}

pub fn parse_theorem1_csv(text: &str) -> Result<Vec<Theorem1Row>> {
    from_csv(text, THEOREM1_HEADER)
}

const SYNTH_CHUNK: usize = 10_000;

/// Uniformly weighted mean of `m` equicorrelated Gaussian errors, drawn
/// `n_draws` times. Returns the sample variance of the combination.
pub fn synthetic_combined_variance(rho: f64, sigma2: f64, m: usize, n_draws: usize, seed: u64) -> Result<f64> {
    variance_curve(rho, sigma2, &[m])?;
    let sigma = sigma2.sqrt();
    // ρ ≥ 0 uses a shared factor; negative ρ needs the Cholesky factor of R.
    let chol = if rho < 0.0 {
        let r = DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { rho });
        Some(r.cholesky().ok_or_else(|| Error::Singular("equicorrelated R".into()))?.unpack())
    } else {
        None
    };
    let n_chunks = n_draws.div_ceil(SYNTH_CHUNK);
    let sums: Vec<(f64, f64)> = (0..n_chunks)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream_rng(seed, Stream::Synthetic, k as u64);
            let n = SYNTH_CHUNK.min(n_draws - k * SYNTH_CHUNK);
            let mut e = vec![0.0; m];
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..n {
                let combined = match &chol {
                    None => {
                        let shared: f64 = rng.sample(StandardNormal);
                        let own: f64 = (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)).sum();
                        rho.sqrt() * shared + (1.0 - rho).sqrt() * own / m as f64
                    }
                    Some(l) => {
                        for v in e.iter_mut() {
                            *v = rng.sample(StandardNormal);
                        }
                        (0..m).map(|i| (0..=i).map(|j| l[(i, j)] * e[j]).sum::<f64>()).sum::<f64>() / m as f64
                    }
                };
                let z = sigma * combined;
                s1 += z;
                s2 += z * z;
            }
            (s1, s2)
        })
        .collect();
    let (s1, s2) = sums.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let n = n_draws as f64;
    Ok((s2 - s1 * s1 / n) / (n - 1.0))
}

/// Predicted and empirical combined variance for every `(ρ, M)`.
pub fn run_theorem1_check(
    m_values: &[usize],
    rho_grid: &[f64],
    sigma2: f64,
    n_draws: usize,
    seed: u64,
) -> Result<Vec<Theorem1Row>> {
    let mut rows = Vec::new();
    for (i, &rho) in rho_grid.iter().enumerate() {
        let predicted = variance_curve(rho, sigma2, m_values)?;
        for (j, (&m, &predicted)) in m_values.iter().zip(&predicted).enumerate() {
            let row_seed = derive_seed(seed, Stream::Synthetic, ((i as u64) << 32) | j as u64);
            let empirical = synthetic_combined_variance(rho, sigma2, m, n_draws, row_seed)?;
            rows.push(Theorem1Row {
                rho,
                m,
                predicted,
                empirical,
                stderr: variance_stderr(predicted, n_draws),
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvarianceSummary {
    pub seed: u64,
    pub snr_db: f64,
    pub transforms: Vec<InvarianceReport>,
    /// Observation scaling, which must fail.
    pub control: InvarianceReport,
}

impl InvarianceSummary {
    pub fn passed(&self) -> bool {
        self.transforms.iter().all(|r| r.pass) && !self.control.pass
    }
}

pub fn run_verify_invariance(cfg: &ExperimentConfig) -> Result<InvarianceSummary> {
    cfg.validate()?;
    let inv = &cfg.invariance;
    let sim = cfg.sim(cfg.snr_db);
    let transforms = inv
        .transforms
        .par_iter()
        .map(|t| verify_invariance(t, &sim, inv.n_samples, inv.alpha))
        .collect::<Result<_>>()?;
    let control = verify_invariance(&ObservationScaling(inv.control_scale), &sim, inv.n_samples, inv.alpha)?;
    Ok(InvarianceSummary {
        seed: cfg.seed,
        snr_db: cfg.snr_db,
        transforms,
        control,
    })
}

pub fn run_train(cfg: &ExperimentConfig) -> Result<NeuralModel> {
    cfg.validate()?;
    train(&cfg.train_config())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            n_rx: 2,
            n_tx: 2,
            order: 4,
            n_trials: 300,
            snr_grid: vec![6.0, 10.0],
            snr_db: 8.0,
            detectors: vec!["ml".into(), "lmmse".into()],
            transform_sets: vec![vec![TransformTag::Identity], vec![TransformTag::Identity, TransformTag::Neg]],
            n_obs: 200,
            ..Default::default()
        }
    }

    #[test]
    fn detector_tags() {
        assert_eq!("qrm:16".parse::<DetectorSpec>().unwrap(), DetectorSpec::Qrm(16));
        assert_eq!("ml:maxlog".parse::<DetectorSpec>().unwrap(), DetectorSpec::MlMaxLog);
        assert_eq!(
            "neural:m.json".parse::<DetectorSpec>().unwrap(),
            DetectorSpec::Neural(Some("m.json".into()))
        );
        for bad in ["qrm:0", "qrm:x", "zf", "neural:", "ml:fast"] {
            assert!(bad.parse::<DetectorSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(small().validate().is_ok());
        let bad = [
            ExperimentConfig { snr_grid: vec![4.0, 4.0], ..small() },
            ExperimentConfig { snr_grid: vec![], ..small() },
            ExperimentConfig { transform_sets: vec![vec![]], ..small() },
            ExperimentConfig { detectors: vec!["zf".into()], ..small() },
            ExperimentConfig { n_tx: 3, n_rx: 2, ..small() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
        assert!(ExperimentConfig::from_json(r#"{"n_rx": 2, "n_tx": 2, "bogus": 1}"#).is_err());
        let cfg = ExperimentConfig::from_json(r#"{"n_rx": 2, "n_tx": 2, "order": 4}"#).unwrap();
        assert_eq!(cfg.n_trials, ExperimentConfig::default().n_trials);
    }

    #[test]
    fn ml_budget_is_checked_up_front() {
        let cfg = ExperimentConfig { n_rx: 8, n_tx: 8, order: 16, ..small() };
        assert!(matches!(DetectorSpec::Ml.build(&cfg), Err(Error::BudgetExceeded { .. })));
    }

    #[test]
    fn sweep_rows_are_consistent() {
        let cfg = small();
        let rows = run_sweep(&cfg).unwrap();
        assert_eq!(rows.len(), 2 * 2 * 2);
        for r in &rows {
            let ser = r.symbol_errors as f64 / (r.trials * 2) as f64;
            assert!((r.ser - ser).abs() < 1e-12);
            assert!((r.ber - r.bit_errors as f64 / (r.trials * 4) as f64).abs() < 1e-12);
        }
        for pair in rows.chunks(4) {
            // ML, ML resampled, LMMSE, LMMSE resampled on the same problems
            assert!(pair[0].symbol_errors <= pair[2].symbol_errors);
            assert_eq!(pair[0].symbol_errors, pair[1].symbol_errors);
        }
        let again = run_sweep(&cfg).unwrap();
        let strip = |rs: &[ResultRow]| rs.iter().map(|r| ResultRow { elapsed_s: 0.0, ..r.clone() }).collect::<Vec<_>>();
        assert_eq!(strip(&rows), strip(&again));
        assert_eq!(parse_results_csv(&results_csv(&rows).unwrap()).unwrap(), rows);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let cfg = small();
        let a = with_threads(Some(1), || run_sweep(&cfg)).unwrap().unwrap();
        let b = with_threads(Some(3), || run_sweep(&cfg)).unwrap().unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.symbol_errors, y.symbol_errors);
            assert_eq!(x.bit_errors, y.bit_errors);
        }
    }

    #[test]
    fn exact_ml_analysis() {
        let cfg = ExperimentConfig { detectors: vec!["ml".into()], ..small() };
        let report = run_error_analysis(&cfg, 11).unwrap();
        let e = &report.entries[0];
        assert_eq!(e.histograms[0], e.histograms[1]);
        assert!((e.rho[0][1] - 1.0).abs() < 1e-9);
        assert!((e.uniform.measured - e.uniform.predicted).abs() / e.uniform.predicted < 0.2);
        assert!((e.uniform.predicted - e.sigma2).abs() < 1e-9);
        let total: u64 = e.histograms[0].iter().sum::<u64>() + e.outside[0];
        assert_eq!(total as usize, e.n_obs);
    }

    #[test]
    fn theorem1_rows() {
        let rows = run_theorem1_check(&[1, 4, 64], &[0.0, 0.5], 2.0, 20_000, 3).unwrap();
        assert_eq!(rows.len(), 6);
        assert!((rows[1].predicted - 0.5).abs() < 1e-15);
        assert!((rows[5].predicted - 0.5078125 * 2.0).abs() < 1e-12);
        for r in &rows {
            assert!((r.empirical - r.predicted).abs() < 4.0 * r.stderr, "{r:?}");
        }
        assert!(run_theorem1_check(&[3], &[-0.6], 1.0, 100, 1).is_err());
        let neg = run_theorem1_check(&[3], &[-0.3], 1.0, 50_000, 1).unwrap();
        assert!((neg[0].empirical - neg[0].predicted).abs() < 4.0 * neg[0].stderr);
    }

    #[test]
    fn histogram_edges() {
        let (h, out) = histogram([-1.0, -0.99, 0.0, 0.999, 1.0, 1.5].into_iter(), -1.0, 1.0, 4);
        assert_eq!(h, vec![2, 0, 1, 2]);
        assert_eq!(out, 1);
    }
}
