//! Reference detectors and their common soft-output type.
//!
//! Every detector returns a [`SoftOutput`] holding per-layer marginal
//! probabilities over the constellation, per-bit LLRs, hard decisions and
//! posterior-mean soft symbols, all derived from the same marginals.

mod lmmse;
mod ml;
mod qrm;

pub use lmmse::{lmmse_filter, LmmseDetector, LmmseFilter};
pub use ml::{MlDetector, MlMode, DEFAULT_ML_BUDGET};
pub use qrm::QrmDetector;

use nalgebra::DMatrix;

use crate::mimo_model::{Constellation, MimoProblem};
use crate::{Complex64, Error, Result};

/// LLR magnitude limit. Also used as the counter-hypothesis penalty when a
/// bit value has no surviving candidate.
pub const LLR_CLAMP: f64 = 40.0;

/// A detector maps one problem to soft output. Implementations are pure.
pub trait Detector: Sync {
    fn detect(&self, problem: &MimoProblem) -> Result<SoftOutput>;

    /// Short label used in result files.
    fn label(&self) -> String;
}

impl<D: Detector + ?Sized> Detector for &D {
    fn detect(&self, problem: &MimoProblem) -> Result<SoftOutput> {
        (**self).detect(problem)
    }
    fn label(&self) -> String {
        (**self).label()
    }
}

impl<D: Detector + ?Sized + Send> Detector for Box<D> {
    fn detect(&self, problem: &MimoProblem) -> Result<SoftOutput> {
        (**self).detect(problem)
    }
    fn label(&self) -> String {
        (**self).label()
    }
}

/// Per-layer detector output.
///
/// Invariants: marginal rows are non-negative and sum to one, `hard` is the
/// row-wise argmax (lowest index on ties), `soft_symbols` is the row-wise
/// posterior mean, and `llrs` are `log P(b=0)/P(b=1)` of the marginals,
/// clamped to `±LLR_CLAMP`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftOutput {
    /// `n_tx × order`
    pub marginals: DMatrix<f64>,
    /// `n_tx × bits_per_symbol`, bit 0 is the label MSB.
    pub llrs: DMatrix<f64>,
    pub hard: Vec<usize>,
    pub soft_symbols: Vec<Complex64>,
}

impl SoftOutput {
    /// Derives all fields from marginals. Rows are renormalized.
    pub fn from_marginals(mut marginals: DMatrix<f64>, c: &Constellation) -> Self {
        for mut row in marginals.row_iter_mut() {
            let total: f64 = row.iter().sum();
            row /= total;
        }
        let llrs = marginals_to_llrs(&marginals, c);
        let hard = argmax_rows(&marginals);
        let soft_symbols = posterior_means(&marginals, c);
        Self {
            marginals,
            llrs,
            hard,
            soft_symbols,
        }
    }

    /// Normalizes unnormalized log-probabilities row by row with a shifted
    /// log-sum-exp. Each row needs at least one finite entry.
    pub fn from_log_weights(log_w: &DMatrix<f64>, c: &Constellation) -> Self {
        let mut m = log_w.clone();
        for mut row in m.row_iter_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.apply(|v| *v = (*v - max).exp());
        }
        Self::from_marginals(m, c)
    }

    /// Builds output from per-bit LLRs assuming independent bits. The stored
    /// LLRs are the inputs (clamped), which the product-form marginals
    /// reproduce exactly.
    pub fn from_llrs(llrs: DMatrix<f64>, c: &Constellation) -> Self {
        let marginals = llrs_to_marginals(&llrs, c);
        let hard = argmax_rows(&marginals);
        let soft_symbols = posterior_means(&marginals, c);
        Self {
            marginals,
            llrs: llrs.map(|l| l.clamp(-LLR_CLAMP, LLR_CLAMP)),
            hard,
            soft_symbols,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.hard.len()
    }
}

fn argmax_rows(m: &DMatrix<f64>) -> Vec<usize> {
    m.row_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

fn posterior_means(m: &DMatrix<f64>, c: &Constellation) -> Vec<Complex64> {
    m.row_iter()
        .map(|row| {
            row.iter()
                .zip(c.points())
                .map(|(&p, &pt)| pt * p)
                .sum()
        })
        .collect()
}

/// `L_k = ln Σ_{b_k=0} p / Σ_{b_k=1} p`, clamped.
pub fn marginals_to_llrs(marginals: &DMatrix<f64>, c: &Constellation) -> DMatrix<f64> {
    let bits = c.bits_per_symbol();
    DMatrix::from_fn(marginals.nrows(), bits, |n, k| {
        let (mut p0, mut p1) = (0.0, 0.0);
        for i in 0..c.order() {
            if c.label_bit(i, k) == 0 {
                p0 += marginals[(n, i)];
            } else {
                p1 += marginals[(n, i)];
            }
        }
        (p0.ln() - p1.ln()).clamp(-LLR_CLAMP, LLR_CLAMP)
    })
}

/// Product-form marginals from per-bit LLRs:
/// `p(point) ∝ Π_k P(b_k = label_k(point))` with `P(b=0) = 1/(1+e^{−L})`.
pub fn llrs_to_marginals(llrs: &DMatrix<f64>, c: &Constellation) -> DMatrix<f64> {
    let mut log_w = DMatrix::zeros(llrs.nrows(), c.order());
    for n in 0..llrs.nrows() {
        for i in 0..c.order() {
            let mut acc = 0.0;
            for k in 0..c.bits_per_symbol() {
                let l = llrs[(n, k)];
                // ln P(b=0) = −ln(1+e^{−L}),  ln P(b=1) = −ln(1+e^{L})
                acc -= if c.label_bit(i, k) == 0 { softplus(-l) } else { softplus(l) };
            }
            log_w[(n, i)] = acc;
        }
    }
    for mut row in log_w.row_iter_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.apply(|v| *v = (*v - max).exp());
        let total: f64 = row.iter().sum();
        row /= total;
    }
    log_w
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Symbol and bit error counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ErrorCounts {
    pub symbol_errors: u64,
    pub bit_errors: u64,
    pub symbols: u64,
    pub bits: u64,
}

impl std::ops::AddAssign for ErrorCounts {
    fn add_assign(&mut self, o: Self) {
        self.symbol_errors += o.symbol_errors;
        self.bit_errors += o.bit_errors;
        self.symbols += o.symbols;
        self.bits += o.bits;
    }
}

/// Counts symbol mismatches and bit errors (label XOR popcount).
pub fn count_errors(hard: &[usize], s_true: &[usize], c: &Constellation) -> Result<ErrorCounts> {
    if hard.len() != s_true.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} decisions for {} symbols",
            hard.len(),
            s_true.len()
        )));
    }
    let labels = c.bit_labels();
    let mut e = ErrorCounts {
        symbols: hard.len() as u64,
        bits: (hard.len() * c.bits_per_symbol()) as u64,
        ..Default::default()
    };
    for (&a, &b) in hard.iter().zip(s_true) {
        if a != b {
            e.symbol_errors += 1;
            e.bit_errors += (labels[a] ^ labels[b]).count_ones() as u64;
        }
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mimo_model::ModulationKind;
    use proptest::prelude::*;

    fn qam16() -> Constellation {
        Constellation::new(ModulationKind::Qam, 16, false).unwrap()
    }

    #[test]
    fn error_counting() {
        let bpsk = Constellation::new(ModulationKind::Pam, 2, false).unwrap();
        let e = count_errors(&[0, 1, 1], &[0, 1, 1], &bpsk).unwrap();
        assert_eq!((e.symbol_errors, e.bit_errors), (0, 0));
        let e = count_errors(&[0, 0, 1], &[0, 1, 1], &bpsk).unwrap();
        assert_eq!((e.symbol_errors, e.bit_errors), (1, 1));
        assert!(count_errors(&[0], &[0, 1], &bpsk).is_err());
    }

    #[test]
    fn gray_neighbour_costs_one_bit() {
        let c = qam16();
        // index 5 = (i=1, q=1) = −1−j; index 6 = (1, 2) = −1+j
        let e = count_errors(&[6], &[5], &c).unwrap();
        assert_eq!((e.symbol_errors, e.bit_errors), (1, 1));
    }

    #[test]
    fn derived_fields_follow_marginals() {
        let c = qam16();
        let m = DMatrix::from_fn(2, 16, |n, i| ((n * 7 + i * 3) % 11) as f64 + 0.5);
        let out = SoftOutput::from_marginals(m, &c);
        for n in 0..2 {
            let row = out.marginals.row(n);
            assert!((row.sum() - 1.0).abs() < 1e-12);
            let mean: Complex64 = row.iter().zip(c.points()).map(|(&p, &x)| x * p).sum();
            assert!((mean - out.soft_symbols[n]).norm() < 1e-12);
            let best = (0..16).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            assert_eq!(out.hard[n], best);
        }
    }

    #[test]
    fn argmax_ties_pick_lowest_index() {
        let c = Constellation::new(ModulationKind::Qam, 4, false).unwrap();
        let m = DMatrix::from_row_slice(1, 4, &[0.1, 0.4, 0.4, 0.1]);
        assert_eq!(SoftOutput::from_marginals(m, &c).hard, vec![1]);
    }

    proptest! {
        #[test]
        fn llr_marginal_round_trip(llrs in proptest::collection::vec(-20.0f64..20.0, 8)) {
            let c = qam16();
            let l = DMatrix::from_row_slice(2, 4, &llrs);
            let m = llrs_to_marginals(&l, &c);
            // product-form marginals map back onto the same LLRs ...
            let back = marginals_to_llrs(&m, &c);
            prop_assert!((&back - &l).amax() < 1e-6);
            // ... and the marginals are a fixed point of the round trip.
            let again = llrs_to_marginals(&back, &c);
            prop_assert!((&again - &m).amax() < 1e-6);
        }
    }
}
