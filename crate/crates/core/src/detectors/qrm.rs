use nalgebra::DMatrix;

use super::{Detector, SoftOutput, LLR_CLAMP};
use crate::mimo_model::MimoProblem;
use crate::{CMatrix, Complex64, Error, Result};

/// QR-decomposition-based M-algorithm (K-best breadth-first tree search).
///
/// Columns of `H` are sorted by ascending norm before the QR decomposition,
/// so the tree, which starts from the last row of `R`, visits the strongest
/// column first. At every level each of the `K` survivors is expanded with
/// all constellation points and the `K` lowest accumulated metrics are kept;
/// metric ties go to the earlier expansion (parent rank, then point index).
#[derive(Debug, Clone, Copy)]
pub struct QrmDetector {
    pub k_best: usize,
}

impl QrmDetector {
    pub fn new(k_best: usize) -> Result<Self> {
        if k_best == 0 {
            return Err(Error::InvalidParameter("k_best must be ≥ 1".into()));
        }
        Ok(Self { k_best })
    }
}

struct Node {
    metric: f64,
    // symbols for sorted layers level..n_tx
    symbols: Vec<u16>,
}

/// Column permutation sorting `H` by ascending column norm (stable).
pub(crate) fn ascending_norm_order(h: &CMatrix) -> Vec<usize> {
    let norms: Vec<f64> = h.column_iter().map(|c| c.norm_squared()).collect();
    let mut order: Vec<usize> = (0..h.ncols()).collect();
    order.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]));
    order
}

impl Detector for QrmDetector {
    fn detect(&self, problem: &MimoProblem) -> Result<SoftOutput> {
        let c = &*problem.constellation;
        let (n_tx, order) = (problem.n_tx(), c.order());
        let col_order = ascending_norm_order(&problem.h);
        let h_sorted = CMatrix::from_fn(problem.n_rx(), n_tx, |r, j| problem.h[(r, col_order[j])]);
        let qr = h_sorted.qr();
        let (q, r) = (qr.q(), qr.r());
        let z = q.adjoint() * &problem.y;

        let mut survivors = vec![Node {
            metric: 0.0,
            symbols: Vec::new(),
        }];
        for level in (0..n_tx).rev() {
            let mut children = Vec::with_capacity(survivors.len() * order);
            for node in &survivors {
                // interference from already-detected layers level+1..n_tx
                let mut target = z[level];
                for (off, &s) in node.symbols.iter().enumerate() {
                    target -= r[(level, level + 1 + off)] * c.point(s as usize);
                }
                let diag: Complex64 = r[(level, level)];
                for p in 0..order {
                    let inc = (target - diag * c.point(p)).norm_sqr();
                    let mut symbols = Vec::with_capacity(node.symbols.len() + 1);
                    symbols.push(p as u16);
                    symbols.extend_from_slice(&node.symbols);
                    children.push(Node {
                        metric: node.metric + inc,
                        symbols,
                    });
                }
            }
            // stable: equal metrics keep expansion order
            children.sort_by(|a, b| a.metric.total_cmp(&b.metric));
            children.truncate(self.k_best);
            survivors = children;
        }

        let best = survivors[0].metric;
        let worst = survivors.last().map_or(best, |n| n.metric);
        let scale = problem.field.metric_scale();
        // per original layer, per point: best surviving metric
        let mut point_metric = DMatrix::from_element(n_tx, order, f64::INFINITY);
        for node in &survivors {
            for (sorted_layer, &s) in node.symbols.iter().enumerate() {
                let layer = col_order[sorted_layer];
                let m = &mut point_metric[(layer, s as usize)];
                *m = m.min(node.metric);
            }
        }
        let penalty = if problem.noise_var > 0.0 {
            LLR_CLAMP * problem.noise_var / scale
        } else {
            0.0
        };
        let log_w = point_metric.map(|m| {
            let m = if m.is_finite() { m } else { worst + penalty };
            if problem.noise_var > 0.0 {
                -(m - best) * scale / problem.noise_var
            } else if m == best {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        });
        let mut out = SoftOutput::from_log_weights(&log_w, c);
        // hard decision is the best leaf
        let mut hard = vec![0; n_tx];
        for (sorted_layer, &s) in survivors[0].symbols.iter().enumerate() {
            hard[col_order[sorted_layer]] = s as usize;
        }
        debug_assert_eq!(out.hard, hard);
        out.hard = hard;
        Ok(out)
    }

    fn label(&self) -> String {
        format!("qrm:{}", self.k_best)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detectors::MlDetector;
    use crate::mimo_model::{sample_channel, sample_symbols, transmit, Constellation, ModulationKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    #[test]
    fn rejects_zero_k() {
        assert!(QrmDetector::new(0).is_err());
    }

    #[test]
    fn saturating_k_equals_ml() {
        let c = Arc::new(Constellation::new(ModulationKind::Qam, 4, false).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let qrm = QrmDetector::new(4usize.pow(2)).unwrap();
        for _ in 0..300 {
            let h = sample_channel(4, 3, &mut rng);
            let s = sample_symbols(3, 4, &mut rng);
            let p = transmit(&h, &s, &c, 1.5, &mut rng).unwrap();
            assert_eq!(
                qrm.detect(&p).unwrap().hard,
                MlDetector::max_log().detect(&p).unwrap().hard
            );
        }
    }

    #[test]
    fn k1_is_successive_cancellation() {
        // Oracle: ordered decision feedback on the triangular system, written
        // directly with back substitution.
        let c = Arc::new(Constellation::new(ModulationKind::Qam, 16, false).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let h = sample_channel(4, 4, &mut rng);
            let s = sample_symbols(4, 16, &mut rng);
            let p = transmit(&h, &s, &c, 2.0, &mut rng).unwrap();
            let ord = ascending_norm_order(&p.h);
            let hs = CMatrix::from_fn(4, 4, |r, j| p.h[(r, ord[j])]);
            let qr = hs.qr();
            let z = qr.q().adjoint() * &p.y;
            let r = qr.r();
            let mut dec = [0usize; 4];
            for i in (0..4).rev() {
                let mut t = z[i];
                for j in i + 1..4 {
                    t -= r[(i, j)] * c.point(dec[j]);
                }
                dec[i] = c.nearest(t / r[(i, i)]);
            }
            let mut expect = vec![0; 4];
            for j in 0..4 {
                expect[ord[j]] = dec[j];
            }
            assert_eq!(QrmDetector::new(1).unwrap().detect(&p).unwrap().hard, expect);
        }
    }

    #[test]
    fn marginals_are_normalized() {
        let c = Arc::new(Constellation::new(ModulationKind::Qam, 16, false).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let h = sample_channel(4, 4, &mut rng);
        let p = transmit(&h, &[0, 1, 2, 3], &c, 3.0, &mut rng).unwrap();
        let out = QrmDetector::new(8).unwrap().detect(&p).unwrap();
        for row in out.marginals.row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        assert!(out.llrs.iter().all(|l| l.abs() <= LLR_CLAMP));
    }
}
