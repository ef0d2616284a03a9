//! Resampled inference and minimum-variance combining.
//!
//! Given `M` unbiased estimates `s_m = s + z_m` whose errors have covariance
//! `R`, the affine combination `s̄ = Σ β_m s_m` with `Σ β_m = 1` has minimum
//! error variance
//!
//! ```text
//! var(s̄) = 1 / (1ᵀ R⁻¹ 1),   attained at   β = R⁻¹ 1 / (1ᵀ R⁻¹ 1).
//! ```
//!
//! For equicorrelated errors (`var = σ²`, correlation `ρ`) the weights are
//! uniform and the variance is `(ρ + (1 − ρ)/M)·σ²`, which tends to `ρσ²` as
//! `M` grows. The estimates here are a detector's back-mapped outputs on
//! invariant transforms of one problem.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detectors::{Detector, SoftOutput};
use crate::mimo_model::{Constellation, MimoProblem, SimConfig};
use crate::transforms::{instantiate_set, InvariantTransform, TransformTag};
use crate::{Complex64, Error, Result};

/// Relative asymmetry tolerated in a covariance matrix.
const SYMMETRY_TOL: f64 = 1e-10;
/// Pivot ratio below which `R` is treated as numerically singular.
const PIVOT_RATIO: f64 = 1e-14;

/// Combining weights and the error variance they achieve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinerWeights {
    pub beta: Vec<f64>,
    pub predicted_var: f64,
    /// Set when `R` was singular and `R + εI`, `ε = 1e-9·tr(R)/M`, was solved instead.
    pub regularized: bool,
}

impl CombinerWeights {
    pub fn uniform(m: usize) -> Self {
        Self {
            beta: vec![1.0 / m as f64; m],
            predicted_var: f64::NAN,
            regularized: false,
        }
    }
}

/// `βᵀ R β`.
pub fn quadratic_form(r: &DMatrix<f64>, beta: &[f64]) -> f64 {
    let b = DVector::from_column_slice(beta);
    (b.transpose() * r * &b)[(0, 0)]
}

fn check_covariance(r: &DMatrix<f64>) -> Result<()> {
    if r.nrows() != r.ncols() || r.nrows() == 0 {
        return Err(Error::DimensionMismatch(format!(
            "covariance must be square and non-empty, got {}×{}",
            r.nrows(),
            r.ncols()
        )));
    }
    let scale = r.amax().max(f64::MIN_POSITIVE);
    if (r - r.transpose()).amax() > SYMMETRY_TOL * scale {
        return Err(Error::InvalidParameter("covariance is not symmetric".into()));
    }
    Ok(())
}

/// Solves `R x = 1` by Cholesky; `None` if `R` is not numerically positive definite.
fn solve_ones(r: &DMatrix<f64>) -> Option<DVector<f64>> {
    let chol = r.clone().cholesky()?;
    let l = chol.l_dirty();
    let pivots: Vec<f64> = (0..r.nrows()).map(|i| l[(i, i)] * l[(i, i)]).collect();
    let max = pivots.iter().cloned().fold(0.0, f64::max);
    if pivots.iter().any(|&p| p <= PIVOT_RATIO * max) {
        return None;
    }
    Some(chol.solve(&DVector::from_element(r.nrows(), 1.0)))
}

/// Minimum-variance weights `β = R⁻¹1 / (1ᵀR⁻¹1)` via a symmetric solve.
pub fn optimal_weights(r: &DMatrix<f64>) -> Result<CombinerWeights> {
    check_covariance(r)?;
    let m = r.nrows();
    let (x, regularized) = match solve_ones(r) {
        Some(x) => (x, false),
        None => {
            let eps = 1e-9 * r.trace() / m as f64;
            let reg = r + DMatrix::identity(m, m) * eps;
            let x = solve_ones(&reg).ok_or_else(|| {
                Error::Singular("covariance is singular even after regularization".into())
            })?;
            (x, true)
        }
    };
    let denom = x.sum();
    if !(denom > 0.0) {
        return Err(Error::InvalidParameter("1ᵀR⁻¹1 ≤ 0: covariance is not PSD".into()));
    }
    let beta: Vec<f64> = x.iter().map(|v| v / denom).collect();
    let predicted_var = if regularized {
        quadratic_form(r, &beta)
    } else {
        1.0 / denom
    };
    Ok(CombinerWeights {
        beta,
        predicted_var,
        regularized,
    })
}

/// `s̄ = Σ β_m s_m`.
pub fn combine_scalar(estimates: &[f64], beta: &[f64]) -> Result<f64> {
    if estimates.len() != beta.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} estimates for {} weights",
            estimates.len(),
            beta.len()
        )));
    }
    Ok(estimates.iter().zip(beta).map(|(s, b)| s * b).sum())
}

/// Predicted combined variance `(ρ + (1 − ρ)/M)·σ²` of uniformly weighted
/// equicorrelated estimates, for each `M`.
pub fn variance_curve(rho: f64, sigma2: f64, m_values: &[usize]) -> Result<Vec<f64>> {
    m_values
        .iter()
        .map(|&m| {
            if m == 0 {
                return Err(Error::InvalidParameter("M must be ≥ 1".into()));
            }
            let lower = if m > 1 { -1.0 / (m as f64 - 1.0) } else { f64::NEG_INFINITY };
            if !(rho > lower && rho <= 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "ρ = {rho} outside the PSD range (−1/(M−1), 1] for M = {m}"
                )));
            }
            Ok((rho + (1.0 - rho) / m as f64) * sigma2)
        })
        .collect()
}

/// Error covariance across `M` transform channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorStats {
    pub m: usize,
    /// Unbiased sample covariance `R`.
    pub r: DMatrix<f64>,
    /// Mean diagonal of `R`.
    pub sigma2: f64,
    pub rho: DMatrix<f64>,
    pub mean_error: Vec<f64>,
    /// Number of scalar error observations per channel.
    pub n_obs: usize,
    /// Channel pairs with a constant channel, whose correlation is reported as 1.
    pub degenerate: Vec<(usize, usize)>,
}

impl ErrorStats {
    /// Sample statistics of an `N × M` matrix of scalar errors.
    pub fn from_observations(obs: &DMatrix<f64>) -> Result<Self> {
        let (n, m) = (obs.nrows(), obs.ncols());
        if n < 2 || m == 0 {
            return Err(Error::InvalidParameter(format!(
                "need ≥ 2 observations of ≥ 1 channel, got {n}×{m}"
            )));
        }
        let mean_error: Vec<f64> = (0..m).map(|j| obs.column(j).mean()).collect();
        let mut r = DMatrix::<f64>::zeros(m, m);
        for row in obs.row_iter() {
            for a in 0..m {
                let da = row[a] - mean_error[a];
                for b in a..m {
                    r[(a, b)] += da * (row[b] - mean_error[b]);
                }
            }
        }
        for a in 0..m {
            for b in a..m {
                r[(a, b)] /= (n - 1) as f64;
                r[(b, a)] = r[(a, b)];
            }
        }
        let mut degenerate = Vec::new();
        let rho = DMatrix::from_fn(m, m, |a, b| {
            if a == b {
                return 1.0;
            }
            let denom = (r[(a, a)] * r[(b, b)]).sqrt();
            if denom > 0.0 {
                (r[(a, b)] / denom).clamp(-1.0, 1.0)
            } else {
                if a < b {
                    degenerate.push((a, b));
                }
                1.0
            }
        });
        Ok(Self {
            m,
            sigma2: r.trace() / m as f64,
            r,
            rho,
            mean_error,
            n_obs: n,
            degenerate,
        })
    }

    pub fn optimal_weights(&self) -> Result<CombinerWeights> {
        optimal_weights(&self.r)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ErrorStatsFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str::<ErrorStatsFile>(text)?.try_into()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// On-disk form of [`ErrorStats`]: matrices as row-major nested arrays.
#[derive(Debug, Serialize, Deserialize)]
struct ErrorStatsFile {
    m: usize,
    r: Vec<Vec<f64>>,
    sigma2: f64,
    rho: Vec<Vec<f64>>,
    mean_error: Vec<f64>,
    n_obs: usize,
    #[serde(default)]
    degenerate: Vec<(usize, usize)>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], m: usize) -> Result<DMatrix<f64>> {
    if rows.len() != m || rows.iter().any(|r| r.len() != m) {
        return Err(Error::Config(format!("expected a {m}×{m} matrix")));
    }
    Ok(DMatrix::from_fn(m, m, |i, j| rows[i][j]))
}

impl From<&ErrorStats> for ErrorStatsFile {
    fn from(s: &ErrorStats) -> Self {
        Self {
            m: s.m,
            r: rows(&s.r),
            sigma2: s.sigma2,
            rho: rows(&s.rho),
            mean_error: s.mean_error.clone(),
            n_obs: s.n_obs,
            degenerate: s.degenerate.clone(),
        }
    }
}

impl TryFrom<ErrorStatsFile> for ErrorStats {
    type Error = Error;
    fn try_from(f: ErrorStatsFile) -> Result<Self> {
        let r = from_rows(&f.r, f.m)?;
        check_covariance(&r)?;
        if f.mean_error.len() != f.m {
            return Err(Error::Config("mean_error length differs from m".into()));
        }
        Ok(Self {
            m: f.m,
            r,
            sigma2: f.sigma2,
            rho: from_rows(&f.rho, f.m)?,
            mean_error: f.mean_error,
            n_obs: f.n_obs,
            degenerate: f.degenerate,
        })
    }
}

/// Runs `detector` on every transform of `problem` and back-maps each output.
pub fn channel_outputs<D: Detector + ?Sized>(
    detector: &D,
    problem: &MimoProblem,
    transforms: &[InvariantTransform],
) -> Result<Vec<SoftOutput>> {
    transforms
        .iter()
        .map(|t| {
            let tp = t.apply(problem)?;
            t.backmap(&detector.detect(&tp.problem)?, &problem.constellation)
        })
        .collect()
}

/// How channel outputs are weighted.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightMode {
    Uniform,
    /// Explicit weights, typically [`ErrorStats::optimal_weights`].
    Fixed(Vec<f64>),
}

impl WeightMode {
    pub fn optimal(stats: &ErrorStats) -> Result<Self> {
        Ok(WeightMode::Fixed(stats.optimal_weights()?.beta))
    }

    pub fn weights(&self, m: usize) -> Result<Vec<f64>> {
        match self {
            WeightMode::Uniform => Ok(vec![1.0 / m as f64; m]),
            WeightMode::Fixed(beta) => {
                if beta.len() != m {
                    return Err(Error::DimensionMismatch(format!(
                        "{} weights for {m} transforms",
                        beta.len()
                    )));
                }
                let sum: f64 = beta.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidParameter(format!("weights sum to {sum}, not 1")));
                }
                Ok(beta.clone())
            }
        }
    }
}

/// Which representation of the channel outputs is combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineDomain {
    /// Weighted sum of posterior means, then nearest-point decision.
    SoftSymbol,
    /// Weighted sum of LLR matrices.
    Llr,
    /// Weighted mean of marginal matrices, renormalized.
    Marginal,
}

impl std::str::FromStr for CombineDomain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft_symbol" => Ok(CombineDomain::SoftSymbol),
            "llr" => Ok(CombineDomain::Llr),
            "marginal" => Ok(CombineDomain::Marginal),
            other => Err(Error::UnknownTag(other.into())),
        }
    }
}

/// Combines back-mapped channel outputs.
///
/// In the soft-symbol domain the result's marginals are a Gaussian demapping
/// of the combined estimate `s̄` with variance `Σ β_m v_m` (the weighted
/// per-channel posterior variances), so the hard decision is the point
/// nearest to `s̄`. Negative weights in the marginal domain can produce
/// negative mass; it is clipped before renormalizing.
pub fn combine_outputs(
    outputs: &[SoftOutput],
    beta: &[f64],
    domain: CombineDomain,
    c: &Constellation,
    metric_scale: f64,
) -> Result<SoftOutput> {
    if outputs.is_empty() || outputs.len() != beta.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} outputs for {} weights",
            outputs.len(),
            beta.len()
        )));
    }
    let n_tx = outputs[0].n_layers();
    Ok(match domain {
        CombineDomain::Marginal => {
            let mut acc = DMatrix::zeros(n_tx, c.order());
            for (o, &b) in outputs.iter().zip(beta) {
                acc += &o.marginals * b;
            }
            acc.apply(|v| *v = v.max(0.0));
            SoftOutput::from_marginals(acc, c)
        }
        CombineDomain::Llr => {
            let mut acc = DMatrix::zeros(n_tx, c.bits_per_symbol());
            for (o, &b) in outputs.iter().zip(beta) {
                acc += &o.llrs * b;
            }
            SoftOutput::from_llrs(acc, c)
        }
        CombineDomain::SoftSymbol => {
            let floor = 1e-12 * c.avg_energy();
            let log_w = DMatrix::from_fn(n_tx, c.order(), |k, i| {
                let mut mean = Complex64::new(0.0, 0.0);
                let mut var = 0.0;
                for (o, &b) in outputs.iter().zip(beta) {
                    mean += o.soft_symbols[k] * b;
                    var += b * posterior_variance(o, k, c);
                }
                let d = (mean - c.point(i)).norm_sqr();
                if var > floor {
                    -d * metric_scale / var
                } else if i == c.nearest(mean) {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            });
            SoftOutput::from_log_weights(&log_w, c)
        }
    })
}

fn posterior_variance(o: &SoftOutput, layer: usize, c: &Constellation) -> f64 {
    let second: f64 = o
        .marginals
        .row(layer)
        .iter()
        .zip(c.points())
        .map(|(&p, pt)| p * pt.norm_sqr())
        .sum();
    (second - o.soft_symbols[layer].norm_sqr()).max(0.0)
}

/// Resampled detection: infer on each transform, back-map, combine.
pub fn resample_detect<D: Detector + ?Sized>(
    detector: &D,
    problem: &MimoProblem,
    transforms: &[InvariantTransform],
    weights: &WeightMode,
    domain: CombineDomain,
) -> Result<SoftOutput> {
    if transforms.is_empty() {
        return Err(Error::InvalidParameter("transform set is empty".into()));
    }
    let beta = weights.weights(transforms.len())?;
    let outputs = channel_outputs(detector, problem, transforms)?;
    if outputs.len() == 1 {
        return Ok(outputs.into_iter().next().unwrap());
    }
    combine_outputs(
        &outputs,
        &beta,
        domain,
        &problem.constellation,
        problem.field.metric_scale(),
    )
}

/// Per-layer spread of the back-mapped soft symbols across transforms:
/// `(1/M) Σ_m |ŝ_m − mean|²`.
pub fn epistemic_variance<D: Detector + ?Sized>(
    detector: &D,
    problem: &MimoProblem,
    transforms: &[InvariantTransform],
) -> Result<Vec<f64>> {
    if transforms.len() < 2 {
        return Err(Error::InvalidParameter("need at least two transforms".into()));
    }
    let outputs = channel_outputs(detector, problem, transforms)?;
    let m = outputs.len() as f64;
    Ok((0..problem.n_tx())
        .map(|k| {
            let mean: Complex64 = outputs.iter().map(|o| o.soft_symbols[k]).sum::<Complex64>() / m;
            outputs
                .iter()
                .map(|o| (o.soft_symbols[k] - mean).norm_sqr())
                .sum::<f64>()
                / m
        })
        .collect())
}

/// Scalar soft-symbol errors of every channel, pooled over layers (and over
/// real/imaginary parts for complex alphabets), one row per scalar.
#[derive(Debug, Clone)]
pub struct ErrorSamples {
    /// `N × M` errors `ŝ_m − s`.
    pub errors: DMatrix<f64>,
    /// Layer index of each row.
    pub layer: Vec<usize>,
    pub n_problems: usize,
}

impl ErrorSamples {
    pub fn stats(&self) -> Result<ErrorStats> {
        ErrorStats::from_observations(&self.errors)
    }

    /// Statistics restricted to the rows of one layer.
    pub fn layer_stats(&self, layer: usize) -> Result<ErrorStats> {
        let rows: Vec<usize> = (0..self.layer.len()).filter(|&i| self.layer[i] == layer).collect();
        ErrorStats::from_observations(&self.errors.select_rows(&rows))
    }

    /// Errors of the combined estimate `Σ β_m ŝ_m`.
    pub fn combined(&self, beta: &[f64]) -> Vec<f64> {
        self.errors
            .row_iter()
            .map(|r| r.iter().zip(beta).map(|(e, b)| e * b).sum())
            .collect()
    }
}

/// Runs the transform channels on problems `0..n_problems` of `sim` and
/// collects the scalar soft-symbol errors.
pub fn collect_error_samples<D: Detector + ?Sized>(
    detector: &D,
    tags: &[TransformTag],
    sim: &SimConfig,
    n_problems: usize,
) -> Result<ErrorSamples> {
    let c = sim.modulation.build()?;
    let per_problem: Vec<Vec<(usize, Vec<f64>)>> = (0..n_problems as u64)
        .into_par_iter()
        .map(|i| {
            let p = sim.problem(&c, i);
            let ts = instantiate_set(tags, sim.n_rx, sim.n_tx, sim.master_seed, i);
            let outs = channel_outputs(detector, &p, &ts)?;
            let s = p.s_true.as_ref().expect("generated problems are labelled");
            let mut rows = Vec::new();
            for (k, &sk) in s.iter().enumerate() {
                let truth = c.point(sk);
                rows.push((k, outs.iter().map(|o| o.soft_symbols[k].re - truth.re).collect()));
                if !c.is_real() {
                    rows.push((k, outs.iter().map(|o| o.soft_symbols[k].im - truth.im).collect()));
                }
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let rows: Vec<(usize, Vec<f64>)> = per_problem.into_iter().flatten().collect();
    let m = tags.len();
    let errors = DMatrix::from_fn(rows.len(), m, |i, j| rows[i].1[j]);
    Ok(ErrorSamples {
        errors,
        layer: rows.iter().map(|r| r.0).collect(),
        n_problems,
    })
}

/// Error covariance of the transform channels over `n_obs` problems.
pub fn estimate_error_covariance<D: Detector + ?Sized>(
    detector: &D,
    tags: &[TransformTag],
    sim: &SimConfig,
    n_obs: usize,
) -> Result<ErrorStats> {
    if n_obs < 100 {
        return Err(Error::InvalidParameter(format!("n_obs = {n_obs} < 100")));
    }
    collect_error_samples(detector, tags, sim, n_obs)?.stats()
}
