//! Exhaustive maximum-likelihood detection with a flat prior (so MAP = ML).

use nalgebra::DMatrix;

use super::{Detector, SoftOutput};
use crate::mimo_model::MimoProblem;
use crate::{Complex64, Error, Result};

/// Largest candidate count searched by default, `2^20`.
pub const DEFAULT_ML_BUDGET: u128 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MlMode {
    /// Per-symbol metrics are the best candidate metric containing that
    /// symbol; the hard decision is the global minimizer of `‖y − Hs‖²`.
    MaxLog,
    /// Exact marginals of `p(s|y,H) ∝ exp(−‖y − Hs‖²/σ²)`.
    FullPosterior,
}

#[derive(Debug, Clone, Copy)]
pub struct MlDetector {
    pub mode: MlMode,
    pub budget: u128,
}

impl MlDetector {
    pub fn new(mode: MlMode) -> Self {
        Self {
            mode,
            budget: DEFAULT_ML_BUDGET,
        }
    }

    pub fn full_posterior() -> Self {
        Self::new(MlMode::FullPosterior)
    }

    pub fn max_log() -> Self {
        Self::new(MlMode::MaxLog)
    }
}

impl Detector for MlDetector {
    fn detect(&self, problem: &MimoProblem) -> Result<SoftOutput> {
        let c = &*problem.constellation;
        let metrics = enumerate_metrics(problem, self.budget)?;
        let (n_tx, order) = (problem.n_tx(), c.order());
        let scale = problem.field.metric_scale();
        let d_min = metrics.iter().cloned().fold(f64::INFINITY, f64::min);

        let mut log_w = DMatrix::from_element(n_tx, order, f64::NEG_INFINITY);
        if problem.noise_var == 0.0 || self.mode == MlMode::MaxLog {
            let mut best = DMatrix::from_element(n_tx, order, f64::INFINITY);
            for_each_leaf_block(n_tx, order, |prefix, block| {
                let block = &metrics[block * order..(block + 1) * order];
                let block_min = block.iter().cloned().fold(f64::INFINITY, f64::min);
                for (j, &p) in prefix.iter().enumerate() {
                    best[(j, p)] = best[(j, p)].min(block_min);
                }
                for (p, &d) in block.iter().enumerate() {
                    best[(n_tx - 1, p)] = best[(n_tx - 1, p)].min(d);
                }
            });
            for (w, &b) in log_w.iter_mut().zip(best.iter()) {
                *w = if problem.noise_var == 0.0 {
                    if b == d_min { 0.0 } else { f64::NEG_INFINITY }
                } else {
                    -(b - d_min) * scale / problem.noise_var
                };
            }
        } else {
            let mut acc = DMatrix::<f64>::zeros(n_tx, order);
            let k = scale / problem.noise_var;
            for_each_leaf_block(n_tx, order, |prefix, block| {
                let block = &metrics[block * order..(block + 1) * order];
                let mut block_sum = 0.0;
                for (p, &d) in block.iter().enumerate() {
                    let w = (-(d - d_min) * k).exp();
                    acc[(n_tx - 1, p)] += w;
                    block_sum += w;
                }
                for (j, &p) in prefix.iter().enumerate() {
                    acc[(j, p)] += block_sum;
                }
            });
            for (w, &a) in log_w.iter_mut().zip(acc.iter()) {
                *w = a.ln();
            }
        }
        Ok(SoftOutput::from_log_weights(&log_w, c))
    }

    fn label(&self) -> String {
        "ml".into()
    }
}

/// `‖y − Hs‖²` for every candidate, in lexicographic index order with the
/// last layer varying fastest.
pub(crate) fn enumerate_metrics(problem: &MimoProblem, budget: u128) -> Result<Vec<f64>> {
    let c = &*problem.constellation;
    let (n_rx, n_tx, order) = (problem.n_rx(), problem.n_tx(), c.order());
    let size = (order as u128).checked_pow(n_tx as u32).unwrap_or(u128::MAX);
    if size > budget {
        return Err(Error::BudgetExceeded { size, budget });
    }
    // contrib[(j·order + p)·n_rx + r] = H[r, j] · point_p
    let mut contrib = vec![Complex64::new(0.0, 0.0); n_tx * order * n_rx];
    for j in 0..n_tx {
        for p in 0..order {
            for r in 0..n_rx {
                contrib[(j * order + p) * n_rx + r] = problem.h[(r, j)] * c.point(p);
            }
        }
    }
    // residual[d] = y − Σ_{j<d} H_j s_j for the current prefix
    let mut residual = vec![Complex64::new(0.0, 0.0); n_tx * n_rx];
    residual[..n_rx].copy_from_slice(problem.y.as_slice());
    let mut metrics = Vec::with_capacity(size as usize);
    let last = n_tx - 1;
    let mut idx = vec![0usize; n_tx];
    let mut depth_valid = 0; // residual[0..=depth_valid] are current
    loop {
        for d in depth_valid..last {
            let (head, tail) = residual.split_at_mut((d + 1) * n_rx);
            let src = &head[d * n_rx..];
            let col = &contrib[(d * order + idx[d]) * n_rx..][..n_rx];
            for r in 0..n_rx {
                tail[r] = src[r] - col[r];
            }
        }
        let res = &residual[last * n_rx..][..n_rx];
        for p in 0..order {
            let col = &contrib[(last * order + p) * n_rx..][..n_rx];
            let mut m = 0.0;
            for r in 0..n_rx {
                m += (res[r] - col[r]).norm_sqr();
            }
            metrics.push(m);
        }
        // advance the prefix odometer
        let mut d = last;
        loop {
            if d == 0 {
                return Ok(metrics);
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < order {
                break;
            }
            idx[d] = 0;
        }
        depth_valid = d;
    }
}

/// Calls `f(prefix, block_index)` for every assignment of layers
/// `0..n_tx−1`, in the same order as [`enumerate_metrics`].
fn for_each_leaf_block<F: FnMut(&[usize], usize)>(n_tx: usize, order: usize, mut f: F) {
    let mut prefix = vec![0usize; n_tx - 1];
    let mut block = 0;
    loop {
        f(&prefix, block);
        block += 1;
        let mut d = prefix.len();
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            prefix[d] += 1;
            if prefix[d] < order {
                break;
            }
            prefix[d] = 0;
        }
    }
}
