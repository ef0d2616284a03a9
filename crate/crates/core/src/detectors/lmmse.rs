use nalgebra::DMatrix;

use super::{Detector, SoftOutput};
use crate::mimo_model::MimoProblem;
use crate::{CMatrix, CVector, Error, Result};

/// Linear MMSE equalizer followed by per-layer Gaussian demapping.
#[derive(Debug, Clone, Copy, Default)]
pub struct LmmseDetector;

/// Filter output for one problem.
#[derive(Debug, Clone)]
pub struct LmmseFilter {
    /// `(HᴴH + σ²/E_s·I)⁻¹ Hᴴ y`
    pub estimate: CVector,
    /// Per-layer gain `μ_k = (W H)_kk`; the unbiased estimate is `estimate_k / μ_k`.
    pub gain: Vec<f64>,
    /// Post-equalization error variance of the unbiased estimate, `E_s (1 − μ_k)/μ_k`.
    pub error_var: Vec<f64>,
}

pub fn lmmse_filter(problem: &MimoProblem) -> Result<LmmseFilter> {
    let es = problem.constellation.avg_energy();
    let h = &problem.h;
    let hh = h.adjoint();
    let n_tx = problem.n_tx();
    let gram: CMatrix = &hh * h + CMatrix::identity(n_tx, n_tx) * crate::Complex64::from(problem.noise_var / es);
    let chol = gram.cholesky().ok_or_else(|| {
        Error::Singular("HᴴH + (σ²/E_s)I is not positive definite".into())
    })?;
    if problem.noise_var == 0.0 {
        let diag: Vec<f64> = (0..n_tx).map(|k| chol.l_dirty()[(k, k)].norm_sqr()).collect();
        let max = diag.iter().cloned().fold(0.0, f64::max);
        if diag.iter().any(|&d| d <= 1e-12 * max) {
            return Err(Error::Singular("HᴴH is rank deficient and noise_var = 0".into()));
        }
    }
    let estimate = chol.solve(&(&hh * &problem.y));
    let wh = chol.solve(&(&hh * h));
    let gain: Vec<f64> = (0..n_tx)
        .map(|k| wh[(k, k)].re.clamp(f64::MIN_POSITIVE, 1.0))
        .collect();
    let error_var = gain.iter().map(|&m| es * (1.0 - m) / m).collect();
    Ok(LmmseFilter {
        estimate,
        gain,
        error_var,
    })
}

impl Detector for LmmseDetector {
    fn detect(&self, problem: &MimoProblem) -> Result<SoftOutput> {
        let c = &*problem.constellation;
        let f = lmmse_filter(problem)?;
        let scale = problem.field.metric_scale();
        let log_w = DMatrix::from_fn(problem.n_tx(), c.order(), |k, i| {
            let x = f.estimate[k] / f.gain[k];
            let d = (x - c.point(i)).norm_sqr();
            if f.error_var[k] > 0.0 {
                -d * scale / f.error_var[k]
            } else if i == c.nearest(x) {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        });
        Ok(SoftOutput::from_log_weights(&log_w, c))
    }

    fn label(&self) -> String {
        "lmmse".into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mimo_model::{sample_channel, transmit, Constellation, Field, ModulationKind};
    use crate::Complex64;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    #[test]
    fn scalar_filter_halves_observation() {
        let c = Arc::new(Constellation::new(ModulationKind::Qam, 4, true).unwrap());
        let y = Complex64::new(0.8, -0.4);
        let p = MimoProblem::new(
            CMatrix::identity(1, 1),
            CVector::from_element(1, y),
            None,
            1.0,
            c,
            Field::Complex,
        )
        .unwrap();
        let f = lmmse_filter(&p).unwrap();
        assert!((f.estimate[0] - y / 2.0).norm() < 1e-12);
        assert!((f.gain[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn identity_channel_low_noise_slices_per_component() {
        let c = Arc::new(Constellation::new(ModulationKind::Qam, 16, false).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = CMatrix::identity(3, 3);
        let s = vec![0, 6, 13];
        let p = transmit(&h, &s, &c, 1e-9, &mut rng).unwrap();
        let f = lmmse_filter(&p).unwrap();
        assert!((&f.estimate - &p.y).camax() < 1e-8);
        let out = LmmseDetector.detect(&p).unwrap();
        let sliced: Vec<usize> = p.y.iter().map(|&v| c.nearest(v)).collect();
        assert_eq!(out.hard, sliced);
        assert_eq!(out.hard, s);
    }

    #[test]
    fn noiseless_rank_deficient_is_an_error() {
        let c = Arc::new(Constellation::new(ModulationKind::Qam, 4, false).unwrap());
        let col = sample_channel(2, 1, &mut ChaCha8Rng::seed_from_u64(1));
        let h = CMatrix::from_fn(2, 2, |r, _| col[(r, 0)]);
        let p = transmit(&h, &[0, 1], &c, 0.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(matches!(LmmseDetector.detect(&p), Err(Error::Singular(_))));
    }

    #[test]
    fn noiseless_full_rank_inverts_exactly() {
        let c = Arc::new(Constellation::new(ModulationKind::Qam, 16, false).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = sample_channel(4, 4, &mut rng);
        let s = vec![1, 5, 9, 14];
        let p = transmit(&h, &s, &c, 0.0, &mut rng).unwrap();
        assert_eq!(LmmseDetector.detect(&p).unwrap().hard, s);
    }
}
