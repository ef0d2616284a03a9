//! The linear MIMO system `y = Hs + n`: constellations, i.i.d. Rayleigh
//! channels, circular Gaussian noise and the real-valued embedding.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::{stream_rng, Stream};
use crate::{CMatrix, CVector, Complex64, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModulationKind {
    Pam,
    Qam,
}

impl fmt::Display for ModulationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModulationKind::Pam => f.write_str("pam"),
            ModulationKind::Qam => f.write_str("qam"),
        }
    }
}

/// A finite symbol alphabet with Gray bit labels.
///
/// PAM points are the odd integers `−(M−1), …, −1, +1, …, M−1` in ascending
/// order, so index `i` sits at level `2i − (M−1)` and carries the label
/// `gray(i)`. Square QAM is the Cartesian square of the `√M`-PAM axis:
/// index `i·√M + q` is the point `pam[i] + j·pam[q]` with label
/// `gray(i) ‖ gray(q)` (in-phase bits first). Labels are read MSB first, so
/// bit `k = 0` is the leading in-phase bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    kind: ModulationKind,
    order: usize,
    points: Vec<Complex64>,
    bit_labels: Vec<u32>,
    bits_per_symbol: usize,
    avg_energy: f64,
    scale: f64,
}

fn gray(i: usize) -> u32 {
    (i ^ (i >> 1)) as u32
}

fn pam_levels(order: usize, scale: f64) -> Vec<f64> {
    (0..order)
        .map(|i| (2.0 * i as f64 - (order as f64 - 1.0)) * scale)
        .collect()
}

impl Constellation {
    /// Builds a PAM or square-QAM alphabet. With `normalized` the points are
    /// scaled to unit average energy; otherwise the raw odd-integer grid is kept.
    pub fn new(kind: ModulationKind, order: usize, normalized: bool) -> Result<Self> {
        if order < 2 || !order.is_power_of_two() {
            return Err(Error::InvalidConstellation(format!(
                "order {order} is not a power of two ≥ 2"
            )));
        }
        let bits_per_symbol = order.trailing_zeros() as usize;
        let (points, bit_labels, raw_energy) = match kind {
            ModulationKind::Pam => {
                let levels = pam_levels(order, 1.0);
                let points = levels.iter().map(|&l| Complex64::new(l, 0.0)).collect();
                let labels = (0..order).map(gray).collect();
                let energy = (order * order - 1) as f64 / 3.0;
                (points, labels, energy)
            }
            ModulationKind::Qam => {
                if !bits_per_symbol.is_multiple_of(2) {
                    return Err(Error::InvalidConstellation(format!(
                        "QAM order {order} is not a perfect square"
                    )));
                }
                let side = 1usize << (bits_per_symbol / 2);
                let levels = pam_levels(side, 1.0);
                let mut points = Vec::with_capacity(order);
                let mut labels = Vec::with_capacity(order);
                for (i, &re) in levels.iter().enumerate() {
                    for (q, &im) in levels.iter().enumerate() {
                        points.push(Complex64::new(re, im));
                        labels.push((gray(i) << (bits_per_symbol / 2)) | gray(q));
                    }
                }
                let energy = 2.0 * (side * side - 1) as f64 / 3.0;
                (points, labels, energy)
            }
        };
        let scale = if normalized { raw_energy.sqrt().recip() } else { 1.0 };
        let points: Vec<Complex64> = points.into_iter().map(|p: Complex64| p * scale).collect();
        let avg_energy = points.iter().map(|p| p.norm_sqr()).sum::<f64>() / order as f64;
        Ok(Self {
            kind,
            order,
            points,
            bit_labels,
            bits_per_symbol,
            avg_energy,
            scale,
        })
    }

    pub fn kind(&self) -> ModulationKind {
        self.kind
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn points(&self) -> &[Complex64] {
        &self.points
    }

    pub fn point(&self, index: usize) -> Complex64 {
        self.points[index]
    }

    pub fn bit_labels(&self) -> &[u32] {
        &self.bit_labels
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.bits_per_symbol
    }

    /// Bit `k` (MSB first) of the label of point `index`.
    pub fn label_bit(&self, index: usize, k: usize) -> u32 {
        (self.bit_labels[index] >> (self.bits_per_symbol - 1 - k)) & 1
    }

    pub fn avg_energy(&self) -> f64 {
        self.avg_energy
    }

    /// Factor applied to the odd-integer grid (1 for raw constellations).
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn is_real(&self) -> bool {
        self.kind == ModulationKind::Pam
    }

    /// Smallest distance between two points.
    pub fn min_distance(&self) -> f64 {
        2.0 * self.scale
    }

    /// Index of the closest point (lowest index on ties).
    pub fn nearest(&self, z: Complex64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, p) in self.points.iter().enumerate() {
            let d = (z - p).norm_sqr();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    /// Index of the point equal to `z` up to `tol`, if any.
    pub fn find(&self, z: Complex64, tol: f64) -> Option<usize> {
        let i = self.nearest(z);
        ((self.points[i] - z).norm() <= tol).then_some(i)
    }

    /// The real PAM alphabet of one QAM axis, with the same scaling.
    pub fn axis(&self) -> Result<Constellation> {
        match self.kind {
            ModulationKind::Pam => Ok(self.clone()),
            ModulationKind::Qam => {
                let side = 1usize << (self.bits_per_symbol / 2);
                let mut axis = Constellation::new(ModulationKind::Pam, side, false)?;
                for p in &mut axis.points {
                    *p *= self.scale;
                }
                axis.scale = self.scale;
                axis.avg_energy = axis.points.iter().map(|p| p.norm_sqr()).sum::<f64>() / side as f64;
                Ok(axis)
            }
        }
    }

    /// Splits a QAM index into its (in-phase, quadrature) axis indices.
    pub fn axis_indices(&self, index: usize) -> (usize, usize) {
        let side = 1usize << (self.bits_per_symbol / 2);
        (index / side, index % side)
    }
}

/// Whether a problem lives in complex or real arithmetic. Real problems carry
/// real Gaussian noise with variance `noise_var` per entry; their matrices
/// are stored as complex values with zero imaginary part.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Field {
    Complex,
    Real,
}

impl Field {
    /// Factor `c` such that the Gaussian log-likelihood is `−c·‖y − Hs‖²/noise_var`.
    pub fn metric_scale(self) -> f64 {
        match self {
            Field::Complex => 1.0,
            Field::Real => 0.5,
        }
    }
}

/// One realization of `y = Hs + n`.
#[derive(Debug, Clone)]
pub struct MimoProblem {
    pub h: CMatrix,
    pub y: CVector,
    pub s_true: Option<Vec<usize>>,
    pub noise_var: f64,
    pub constellation: Arc<Constellation>,
    pub field: Field,
}

impl MimoProblem {
    pub fn new(
        h: CMatrix,
        y: CVector,
        s_true: Option<Vec<usize>>,
        noise_var: f64,
        constellation: Arc<Constellation>,
        field: Field,
    ) -> Result<Self> {
        if h.nrows() != y.len() {
            return Err(Error::DimensionMismatch(format!(
                "H has {} rows but y has {} entries",
                h.nrows(),
                y.len()
            )));
        }
        if let Some(s) = &s_true {
            if s.len() != h.ncols() {
                return Err(Error::DimensionMismatch(format!(
                    "H has {} columns but s has {} entries",
                    h.ncols(),
                    s.len()
                )));
            }
            check_indices(s, &constellation)?;
        }
        if !(noise_var >= 0.0) {
            return Err(Error::InvalidParameter(format!("noise_var = {noise_var}")));
        }
        Ok(Self {
            h,
            y,
            s_true,
            noise_var,
            constellation,
            field,
        })
    }

    pub fn n_rx(&self) -> usize {
        self.h.nrows()
    }

    pub fn n_tx(&self) -> usize {
        self.h.ncols()
    }

    /// Symbol vector for a list of point indices.
    pub fn symbol_vector(&self, indices: &[usize]) -> CVector {
        CVector::from_iterator(indices.len(), indices.iter().map(|&i| self.constellation.point(i)))
    }

    /// `‖y − H·s‖²` for the candidate `indices`.
    pub fn residual_norm_sqr(&self, indices: &[usize]) -> f64 {
        (&self.y - &self.h * self.symbol_vector(indices)).norm_squared()
    }

    /// The noise realization `y − H·s_true`, when labels are known.
    pub fn noise(&self) -> Option<CVector> {
        self.s_true
            .as_ref()
            .map(|s| &self.y - &self.h * self.symbol_vector(s))
    }
}

fn check_indices(s: &[usize], c: &Constellation) -> Result<()> {
    match s.iter().find(|&&i| i >= c.order()) {
        Some(&index) => Err(Error::SymbolOutOfRange {
            index,
            order: c.order(),
        }),
        None => Ok(()),
    }
}

/// Circular complex Gaussian sample with variance `var` (each part `var/2`).
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, var: f64) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(s * re, s * im)
}

/// I.i.d. Rayleigh channel: entries `CN(0, 1)`.
pub fn sample_channel<R: Rng + ?Sized>(n_rx: usize, n_tx: usize, rng: &mut R) -> CMatrix {
    // Column-major fill so the draw order is fixed.
    CMatrix::from_fn(n_rx, n_tx, |_, _| complex_gaussian(rng, 1.0))
}

/// Uniform i.i.d. symbol indices.
pub fn sample_symbols<R: Rng + ?Sized>(n_tx: usize, order: usize, rng: &mut R) -> Vec<usize> {
    (0..n_tx).map(|_| rng.random_range(0..order)).collect()
}

/// Forms `y = H·map(s) + n` with circular Gaussian noise of variance
/// `noise_var` per entry.
pub fn transmit<R: Rng + ?Sized>(
    h: &CMatrix,
    s_indices: &[usize],
    constellation: &Arc<Constellation>,
    noise_var: f64,
    rng: &mut R,
) -> Result<MimoProblem> {
    check_indices(s_indices, constellation)?;
    if s_indices.len() != h.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "H has {} columns but s has {} entries",
            h.ncols(),
            s_indices.len()
        )));
    }
    if !(noise_var >= 0.0) {
        return Err(Error::InvalidParameter(format!("noise_var = {noise_var}")));
    }
    let s = CVector::from_iterator(
        s_indices.len(),
        s_indices.iter().map(|&i| constellation.point(i)),
    );
    let mut y = h * s;
    if noise_var > 0.0 {
        for v in y.iter_mut() {
            *v += complex_gaussian(rng, noise_var);
        }
    }
    MimoProblem::new(
        h.clone(),
        y,
        Some(s_indices.to_vec()),
        noise_var,
        Arc::clone(constellation),
        Field::Complex,
    )
}

/// Noise variance per complex receive entry for a given SNR:
/// `n_tx · E_s / 10^(snr_db/10)`, i.e. received signal power per antenna over
/// noise power per antenna for unit-variance channel taps.
pub fn snr_to_noise_var(snr_db: f64, constellation: &Constellation, n_tx: usize) -> f64 {
    n_tx as f64 * constellation.avg_energy() / 10f64.powf(snr_db / 10.0)
}

/// Real embedding of a complex QAM problem:
/// `H' = [[Re H, −Im H], [Im H, Re H]]`, `y' = [Re y; Im y]`,
/// `s' = [Re s; Im s]` over the PAM axis alphabet. Each real noise entry has
/// variance `noise_var / 2`.
pub fn complex_to_real(problem: &MimoProblem) -> Result<MimoProblem> {
    if problem.field != Field::Complex {
        return Err(Error::InvalidParameter("problem is already real-valued".into()));
    }
    if problem.constellation.kind() != ModulationKind::Qam {
        return Err(Error::InvalidConstellation(
            "real embedding needs a QAM constellation".into(),
        ));
    }
    let (nr, nt) = (problem.n_rx(), problem.n_tx());
    let h = &problem.h;
    let h_real = CMatrix::from_fn(2 * nr, 2 * nt, |i, j| {
        let e = h[(i % nr, j % nt)];
        let v = match (i < nr, j < nt) {
            (true, true) | (false, false) => e.re,
            (true, false) => -e.im,
            (false, true) => e.im,
        };
        Complex64::new(v, 0.0)
    });
    let y_real = CVector::from_fn(2 * nr, |i, _| {
        let e = problem.y[i % nr];
        Complex64::new(if i < nr { e.re } else { e.im }, 0.0)
    });
    let s_real = problem.s_true.as_ref().map(|s| {
        let (re, im): (Vec<usize>, Vec<usize>) =
            s.iter().map(|&i| problem.constellation.axis_indices(i)).unzip();
        re.into_iter().chain(im).collect()
    });
    MimoProblem::new(
        h_real,
        y_real,
        s_real,
        problem.noise_var / 2.0,
        Arc::new(problem.constellation.axis()?),
        Field::Real,
    )
}

/// Inverse of the symbol part of [`complex_to_real`]: recombines axis indices
/// `[i_0..i_{n−1}, q_0..q_{n−1}]` into QAM indices.
pub fn real_to_complex_indices(axis_indices: &[usize], qam: &Constellation) -> Vec<usize> {
    let n = axis_indices.len() / 2;
    let side = 1usize << (qam.bits_per_symbol() / 2);
    (0..n)
        .map(|k| axis_indices[k] * side + axis_indices[n + k])
        .collect()
}

/// Modulation part of a simulation config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModulationSpec {
    pub kind: ModulationKind,
    pub order: usize,
    #[serde(default)]
    pub normalized: bool,
}

impl ModulationSpec {
    pub fn build(&self) -> Result<Arc<Constellation>> {
        Constellation::new(self.kind, self.order, self.normalized).map(Arc::new)
    }
}

/// Dimensions, modulation, operating point and seeding of a simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_rx: usize,
    pub n_tx: usize,
    pub modulation: ModulationSpec,
    pub snr_db: f64,
    pub master_seed: u64,
    pub n_trials: usize,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tx < 1 || self.n_rx < self.n_tx {
            return Err(Error::Config(format!(
                "need n_rx ≥ n_tx ≥ 1, got n_rx = {}, n_tx = {}",
                self.n_rx, self.n_tx
            )));
        }
        if self.n_trials < 1 {
            return Err(Error::Config("n_trials must be ≥ 1".into()));
        }
        if !self.snr_db.is_finite() {
            return Err(Error::Config("snr_db must be finite".into()));
        }
        self.modulation.build().map(|_| ())
    }

    pub fn noise_var(&self, constellation: &Constellation) -> f64 {
        snr_to_noise_var(self.snr_db, constellation, self.n_tx)
    }

    /// Trial `index` of this configuration. Channel, symbols and noise come
    /// from separate streams keyed by `(master_seed, index)`.
    pub fn problem(&self, constellation: &Arc<Constellation>, index: u64) -> MimoProblem {
        let noise_var = self.noise_var(constellation);
        generate_problem(
            self.n_rx,
            self.n_tx,
            constellation,
            noise_var,
            self.master_seed,
            index,
        )
    }
}

/// Deterministic trial generator shared by every experiment.
pub fn generate_problem(
    n_rx: usize,
    n_tx: usize,
    constellation: &Arc<Constellation>,
    noise_var: f64,
    master_seed: u64,
    index: u64,
) -> MimoProblem {
    let h = sample_channel(n_rx, n_tx, &mut stream_rng(master_seed, Stream::Channel, index));
    let s = sample_symbols(
        n_tx,
        constellation.order(),
        &mut stream_rng(master_seed, Stream::Symbols, index),
    );
    let mut noise_rng = stream_rng(master_seed, Stream::Noise, index);
    transmit(&h, &s, constellation, noise_var, &mut noise_rng)
        .expect("generated symbols are in range")
}
