//! Invariant transformations of `y = Hs + n`.
//!
//! A transformation rewrites one problem as `T(y) = T_f(q(s)) + g(n)` where the
//! channel, symbol and noise distributions are unchanged. Each variant has a
//! forward map on problems and an exact back-map that brings a detector's
//! output on the transformed problem into the original coordinates:
//!
//! | variant            | observation, channel | symbol map `q`      |
//! |--------------------|----------------------|---------------------|
//! | `Identity`         | `(y, H)`             | `s`                 |
//! | `Negation`         | `(−y, −H)`           | `s`                 |
//! | `Conjugate`        | `(y*, H*)`           | `s*`                |
//! | `ConjugateRotated` | `(y*, φ·H*)`         | `φ̄·s*`              |
//! | `Permutation`      | `(y, H·Pᵀ)`          | `P·s`               |
//! | `Unitary`          | `(Q·y, Q·H)`         | `s`                 |
//!
//! With `φ = j` the conjugate-rotated map `s ↦ −j·s*` sends square QAM onto
//! itself. Induced point maps are computed once per constellation as an index
//! table; marginals and LLRs are back-mapped through that table.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detectors::SoftOutput;
use crate::mimo_model::{sample_channel, Constellation, Field, MimoProblem, SimConfig};
use crate::rng::{stream_rng, Stream, StreamRng};
use crate::stats::{ks_two_sample, KsResult};
use crate::{CMatrix, CVector, Complex64, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum InvariantTransform {
    Identity,
    Negation,
    Conjugate,
    /// `perm[i]` is the original layer placed at position `i`.
    Permutation(Vec<usize>),
    /// Left multiplication by a unitary `n_rx × n_rx` matrix.
    Unitary(CMatrix),
    /// Conjugation with the channel rotated by a unit-modulus `phase`.
    ConjugateRotated(Complex64),
    /// Applied left to right; back-mapped right to left.
    Composite(Vec<InvariantTransform>),
}

/// A problem produced by [`InvariantTransform::apply`], with its source.
#[derive(Debug, Clone)]
pub struct TransformedProblem {
    pub problem: MimoProblem,
    pub source: InvariantTransform,
}

const UNITARY_TOL: f64 = 1e-10;

fn conj_matrix(m: &CMatrix) -> CMatrix {
    m.map(|z| z.conj())
}

fn conj_vector(v: &CVector) -> CVector {
    v.map(|z| z.conj())
}

impl InvariantTransform {
    pub fn j_rotated() -> Self {
        InvariantTransform::ConjugateRotated(Complex64::new(0.0, 1.0))
    }

    /// Checks parameters against problem dimensions.
    pub fn validate(&self, n_rx: usize, n_tx: usize) -> Result<()> {
        match self {
            InvariantTransform::Permutation(perm) => {
                let mut seen = vec![false; n_tx];
                if perm.len() != n_tx {
                    return Err(Error::DimensionMismatch(format!(
                        "permutation of length {} for {n_tx} layers",
                        perm.len()
                    )));
                }
                for &p in perm {
                    if p >= n_tx || seen[p] {
                        return Err(Error::InvalidParameter(format!(
                            "{perm:?} is not a permutation"
                        )));
                    }
                    seen[p] = true;
                }
                Ok(())
            }
            InvariantTransform::Unitary(q) => {
                if q.nrows() != n_rx || q.ncols() != n_rx {
                    return Err(Error::DimensionMismatch(format!(
                        "{}×{} unitary for {n_rx} receive antennas",
                        q.nrows(),
                        q.ncols()
                    )));
                }
                let dev = (q.adjoint() * q - CMatrix::identity(n_rx, n_rx)).camax();
                if dev > UNITARY_TOL {
                    return Err(Error::InvalidParameter(format!(
                        "matrix is not unitary (‖QᴴQ − I‖_max = {dev:e})"
                    )));
                }
                Ok(())
            }
            InvariantTransform::ConjugateRotated(phase) => {
                if (phase.norm() - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidParameter(format!("|phase| = {} ≠ 1", phase.norm())));
                }
                Ok(())
            }
            InvariantTransform::Composite(parts) => {
                parts.iter().try_for_each(|t| t.validate(n_rx, n_tx))
            }
            _ => Ok(()),
        }
    }

    /// Elementwise symbol map `q` (layer reordering excluded).
    pub fn map_symbol(&self, s: Complex64) -> Complex64 {
        match self {
            InvariantTransform::Conjugate => s.conj(),
            InvariantTransform::ConjugateRotated(phase) => phase.conj() * s.conj(),
            InvariantTransform::Composite(parts) => parts.iter().fold(s, |acc, t| t.map_symbol(acc)),
            _ => s,
        }
    }

    /// Inverse of [`map_symbol`](Self::map_symbol).
    pub fn unmap_symbol(&self, w: Complex64) -> Complex64 {
        match self {
            InvariantTransform::Conjugate => w.conj(),
            InvariantTransform::ConjugateRotated(phase) => (phase * w).conj(),
            InvariantTransform::Composite(parts) => {
                parts.iter().rev().fold(w, |acc, t| t.unmap_symbol(acc))
            }
            _ => w,
        }
    }

    /// `source[i]` is the original layer that ends up at position `i`.
    pub fn layer_sources(&self, n_tx: usize) -> Vec<usize> {
        match self {
            InvariantTransform::Permutation(perm) => perm.clone(),
            InvariantTransform::Composite(parts) => {
                let mut src: Vec<usize> = (0..n_tx).collect();
                for t in parts {
                    let inner = t.layer_sources(n_tx);
                    src = inner.iter().map(|&i| src[i]).collect();
                }
                src
            }
            _ => (0..n_tx).collect(),
        }
    }

    /// `table[p]` is the index of `q(point_p)`.
    pub fn point_map(&self, c: &Constellation) -> Result<Vec<usize>> {
        let tol = 1e-9 * c.scale().max(1.0);
        c.points()
            .iter()
            .map(|&p| {
                c.find(self.map_symbol(p), tol).ok_or_else(|| {
                    Error::NotClosed(format!(
                        "{self} maps {p} outside the {}-{}",
                        c.order(),
                        c.kind()
                    ))
                })
            })
            .collect()
    }

    /// Forward map of symbol indices: `s'_i = q(s_{source[i]})`.
    pub fn map_indices(&self, s: &[usize], c: &Constellation) -> Result<Vec<usize>> {
        let table = self.point_map(c)?;
        Ok(self
            .layer_sources(s.len())
            .iter()
            .map(|&src| table[s[src]])
            .collect())
    }

    /// Back-map of symbol indices: inverse of [`map_indices`](Self::map_indices).
    pub fn unmap_indices(&self, s: &[usize], c: &Constellation) -> Result<Vec<usize>> {
        let inverse = invert(&self.point_map(c)?);
        let mut out = vec![0; s.len()];
        for (i, &src) in self.layer_sources(s.len()).iter().enumerate() {
            out[src] = inverse[s[i]];
        }
        Ok(out)
    }

    /// Forms `(T(y), T_f)` and maps the labels, if present.
    pub fn apply(&self, problem: &MimoProblem) -> Result<TransformedProblem> {
        self.validate(problem.n_rx(), problem.n_tx())?;
        let c = &problem.constellation;
        // Fails early when q does not preserve the alphabet.
        let s_true = match &problem.s_true {
            Some(s) => Some(self.map_indices(s, c)?),
            None => {
                self.point_map(c)?;
                None
            }
        };
        let (h, y) = self.map_channel_observation(&problem.h, &problem.y, problem.field)?;
        let out = MimoProblem::new(
            h,
            y,
            s_true,
            problem.noise_var,
            Arc::clone(c),
            problem.field,
        )?;
        Ok(TransformedProblem {
            problem: out,
            source: self.clone(),
        })
    }

    fn map_channel_observation(&self, h: &CMatrix, y: &CVector, field: Field) -> Result<(CMatrix, CVector)> {
        Ok(match self {
            InvariantTransform::Identity => (h.clone(), y.clone()),
            InvariantTransform::Negation => (-h, -y),
            InvariantTransform::Conjugate => (conj_matrix(h), conj_vector(y)),
            InvariantTransform::Permutation(perm) => {
                (CMatrix::from_fn(h.nrows(), h.ncols(), |r, i| h[(r, perm[i])]), y.clone())
            }
            InvariantTransform::Unitary(q) => {
                if field == Field::Real && q.iter().any(|z| z.im != 0.0) {
                    return Err(Error::InvalidParameter(
                        "complex unitary applied to a real-valued problem".into(),
                    ));
                }
                (q * h, q * y)
            }
            InvariantTransform::ConjugateRotated(phase) => {
                (conj_matrix(h) * *phase, conj_vector(y))
            }
            InvariantTransform::Composite(parts) => {
                let mut acc = (h.clone(), y.clone());
                for t in parts {
                    acc = t.map_channel_observation(&acc.0, &acc.1, field)?;
                }
                acc
            }
        })
    }

    /// Brings a detector output on the transformed problem back to the
    /// original layer order and symbol coordinates.
    pub fn backmap(&self, out: &SoftOutput, c: &Constellation) -> Result<SoftOutput> {
        let n_tx = out.n_layers();
        let table = self.point_map(c)?;
        let inverse = invert(&table);
        let bit_map = bit_map(&table, c).ok_or_else(|| {
            Error::NotClosed(format!("{self} has no per-bit label map on this constellation"))
        })?;
        let src = self.layer_sources(n_tx);

        let mut marginals = out.marginals.clone();
        let mut llrs = out.llrs.clone();
        let mut hard = vec![0; n_tx];
        let mut soft = vec![Complex64::new(0.0, 0.0); n_tx];
        for (i, &orig) in src.iter().enumerate() {
            for p in 0..c.order() {
                marginals[(orig, p)] = out.marginals[(i, table[p])];
            }
            for (k, &(k_t, flip)) in bit_map.iter().enumerate() {
                let l = out.llrs[(i, k_t)];
                llrs[(orig, k)] = if flip { -l } else { l };
            }
            hard[orig] = inverse[out.hard[i]];
            soft[orig] = self.unmap_symbol(out.soft_symbols[i]);
        }
        Ok(SoftOutput {
            marginals,
            llrs,
            hard,
            soft_symbols: soft,
        })
    }
}

fn invert(table: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; table.len()];
    for (p, &t) in table.iter().enumerate() {
        inv[t] = p;
    }
    inv
}

/// For each original bit `k`, the transformed bit `k'` and sign flip with
/// `b_k(p) = b_k'(table[p]) ⊕ flip` for every point, if such a map exists.
fn bit_map(table: &[usize], c: &Constellation) -> Option<Vec<(usize, bool)>> {
    let bits = c.bits_per_symbol();
    (0..bits)
        .map(|k| {
            (0..bits).find_map(|k_t| {
                [false, true].into_iter().find_map(|flip| {
                    (0..c.order())
                        .all(|p| (c.label_bit(p, k) == 1) == ((c.label_bit(table[p], k_t) == 1) ^ flip))
                        .then_some((k_t, flip))
                })
            })
        })
        .collect()
}

impl fmt::Display for InvariantTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InvariantTransform::Identity => f.write_str("identity"),
            InvariantTransform::Negation => f.write_str("neg"),
            InvariantTransform::Conjugate => f.write_str("conj"),
            InvariantTransform::Permutation(p) => write!(f, "perm{p:?}"),
            InvariantTransform::Unitary(_) => f.write_str("unitary"),
            InvariantTransform::ConjugateRotated(ph) => write!(f, "conj_rot({ph})"),
            InvariantTransform::Composite(parts) => {
                let names: Vec<String> = parts.iter().map(|t| t.to_string()).collect();
                write!(f, "{}", names.join("∘"))
            }
        }
    }
}

/// Haar-distributed unitary: QR of an i.i.d. `CN(0,1)` matrix with the
/// columns of `Q` rescaled by the phases of `R`'s diagonal.
pub fn random_unitary<R: Rng + ?Sized>(n: usize, rng: &mut R) -> CMatrix {
    let g = sample_channel(n, n, rng);
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..n {
        let d = r[(j, j)];
        let phase = if d.norm() > 0.0 { d / d.norm() } else { Complex64::new(1.0, 0.0) };
        for i in 0..n {
            q[(i, j)] *= phase;
        }
    }
    q
}

pub fn random_permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Config-level transform names. `Perm` and `Unitary` draw their parameter
/// per problem from the trial's transform stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TransformTag {
    Identity,
    Neg,
    Conj,
    ConjRot,
    Perm,
    Unitary,
}

impl TransformTag {
    pub fn instantiate<R: Rng + ?Sized>(self, n_rx: usize, n_tx: usize, rng: &mut R) -> InvariantTransform {
        match self {
            TransformTag::Identity => InvariantTransform::Identity,
            TransformTag::Neg => InvariantTransform::Negation,
            TransformTag::Conj => InvariantTransform::Conjugate,
            TransformTag::ConjRot => InvariantTransform::j_rotated(),
            TransformTag::Perm => InvariantTransform::Permutation(random_permutation(n_tx, rng)),
            TransformTag::Unitary => InvariantTransform::Unitary(random_unitary(n_rx, rng)),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TransformTag::Identity => "identity",
            TransformTag::Neg => "neg",
            TransformTag::Conj => "conj",
            TransformTag::ConjRot => "conj_rot",
            TransformTag::Perm => "perm",
            TransformTag::Unitary => "unitary",
        }
    }
}

impl FromStr for TransformTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "identity" => TransformTag::Identity,
            "neg" => TransformTag::Neg,
            "conj" => TransformTag::Conj,
            "conj_rot" => TransformTag::ConjRot,
            "perm" => TransformTag::Perm,
            "unitary" => TransformTag::Unitary,
            other => return Err(Error::UnknownTag(other.to_string())),
        })
    }
}

impl TryFrom<String> for TransformTag {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TransformTag> for String {
    fn from(t: TransformTag) -> String {
        t.as_str().to_string()
    }
}

impl fmt::Display for TransformTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Draws the concrete transforms for trial `index`.
pub fn instantiate_set(
    tags: &[TransformTag],
    n_rx: usize,
    n_tx: usize,
    master_seed: u64,
    index: u64,
) -> Vec<InvariantTransform> {
    let mut rng = stream_rng(master_seed, Stream::Transform, index);
    tags.iter().map(|t| t.instantiate(n_rx, n_tx, &mut rng)).collect()
}

/// Anything that rewrites a labelled problem; used to test distributional
/// invariance of both genuine transforms and negative controls.
pub trait ProblemMap: Sync {
    fn map_problem(&self, problem: &MimoProblem, rng: &mut StreamRng) -> Result<MimoProblem>;
    fn label(&self) -> String;
}

impl ProblemMap for TransformTag {
    fn map_problem(&self, problem: &MimoProblem, rng: &mut StreamRng) -> Result<MimoProblem> {
        let t = self.instantiate(problem.n_rx(), problem.n_tx(), rng);
        Ok(t.apply(problem)?.problem)
    }
    fn label(&self) -> String {
        self.as_str().into()
    }
}

impl ProblemMap for InvariantTransform {
    fn map_problem(&self, problem: &MimoProblem, _: &mut StreamRng) -> Result<MimoProblem> {
        Ok(self.apply(problem)?.problem)
    }
    fn label(&self) -> String {
        self.to_string()
    }
}

/// `T(y) = a·y` with `T_f = a·H`, so `g(n) = a·n`. Not invariant unless
/// `|a| = 1`; serves as a negative control.
#[derive(Debug, Clone, Copy)]
pub struct ObservationScaling(pub f64);

impl ProblemMap for ObservationScaling {
    fn map_problem(&self, problem: &MimoProblem, _: &mut StreamRng) -> Result<MimoProblem> {
        MimoProblem::new(
            &problem.h * Complex64::from(self.0),
            &problem.y * Complex64::from(self.0),
            problem.s_true.clone(),
            problem.noise_var,
            Arc::clone(&problem.constellation),
            problem.field,
        )
    }
    fn label(&self) -> String {
        format!("scale({})", self.0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantityTest {
    pub quantity: String,
    pub statistic: f64,
    pub p_value: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub transform: String,
    pub alpha: f64,
    pub n_samples: usize,
    pub tests: Vec<QuantityTest>,
    pub pass: bool,
}

#[derive(Default)]
struct Pools {
    h_re: Vec<f64>,
    h_im: Vec<f64>,
    s_re: Vec<f64>,
    s_im: Vec<f64>,
    n_re: Vec<f64>,
    n_im: Vec<f64>,
}

impl Pools {
    fn push(&mut self, p: &MimoProblem) {
        for z in p.h.iter() {
            self.h_re.push(z.re);
            self.h_im.push(z.im);
        }
        let s = p.s_true.as_ref().expect("labelled problem");
        for &i in s {
            let z = p.constellation.point(i);
            self.s_re.push(z.re);
            self.s_im.push(z.im);
        }
        for z in p.noise().expect("labelled problem").iter() {
            self.n_re.push(z.re);
            self.n_im.push(z.im);
        }
    }
}

/// Two-sample KS comparison of transformed channel entries, symbols and
/// noise against fresh draws from the untransformed generator.
pub fn verify_invariance(
    t: &dyn ProblemMap,
    sim: &SimConfig,
    n_samples: usize,
    alpha: f64,
) -> Result<InvarianceReport> {
    if n_samples < 1000 {
        return Err(Error::InvalidParameter(format!(
            "verify_invariance needs ≥ 1000 samples, got {n_samples}"
        )));
    }
    let c = sim.modulation.build()?;
    let noise_var = sim.noise_var(&c);
    let mut transformed = Pools::default();
    let mut reference = Pools::default();
    for i in 0..n_samples as u64 {
        let p = crate::mimo_model::generate_problem(sim.n_rx, sim.n_tx, &c, noise_var, sim.master_seed, i);
        let mut rng = stream_rng(sim.master_seed, Stream::Transform, i);
        transformed.push(&t.map_problem(&p, &mut rng)?);
        // independent draws from a separate seed domain
        let fresh = crate::mimo_model::generate_problem(
            sim.n_rx,
            sim.n_tx,
            &c,
            noise_var,
            crate::rng::derive_seed(sim.master_seed, Stream::Reference, 0),
            i,
        );
        reference.push(&fresh);
    }
    let pairs: [(&str, &Vec<f64>, &Vec<f64>); 6] = [
        ("channel.re", &transformed.h_re, &reference.h_re),
        ("channel.im", &transformed.h_im, &reference.h_im),
        ("symbol.re", &transformed.s_re, &reference.s_re),
        ("symbol.im", &transformed.s_im, &reference.s_im),
        ("noise.re", &transformed.n_re, &reference.n_re),
        ("noise.im", &transformed.n_im, &reference.n_im),
    ];
    let tests: Vec<QuantityTest> = pairs
        .iter()
        .map(|(name, a, b)| {
            let KsResult { statistic, p_value } = ks_two_sample(a, b);
            QuantityTest {
                quantity: name.to_string(),
                statistic,
                p_value,
                pass: p_value >= alpha,
            }
        })
        .collect();
    Ok(InvarianceReport {
        transform: t.label(),
        alpha,
        n_samples,
        pass: tests.iter().all(|q| q.pass),
        tests,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detectors::{Detector, MlDetector};
    use crate::mimo_model::{sample_symbols, transmit, ModulationKind, ModulationSpec};
    use crate::stats::ks_two_sample;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn qam(order: usize) -> Arc<Constellation> {
        Arc::new(Constellation::new(ModulationKind::Qam, order, false).unwrap())
    }

    fn problem(seed: u64, order: usize, nv: f64) -> MimoProblem {
        let c = qam(order);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = sample_channel(4, 4, &mut rng);
        let s = sample_symbols(4, order, &mut rng);
        transmit(&h, &s, &c, nv, &mut rng).unwrap()
    }

    fn all_transforms(rng: &mut ChaCha8Rng) -> Vec<InvariantTransform> {
        vec![
            InvariantTransform::Identity,
            InvariantTransform::Negation,
            InvariantTransform::Conjugate,
            InvariantTransform::j_rotated(),
            InvariantTransform::Permutation(random_permutation(4, rng)),
            InvariantTransform::Unitary(random_unitary(4, rng)),
        ]
    }

    #[test]
    fn identity_is_bit_exact() {
        let p = problem(1, 16, 0.5);
        let t = InvariantTransform::Identity.apply(&p).unwrap().problem;
        assert_eq!(t.h, p.h);
        assert_eq!(t.y, p.y);
        assert_eq!(t.s_true, p.s_true);
    }

    #[test]
    fn negation_keeps_labels() {
        let p = problem(2, 16, 0.5);
        let t = InvariantTransform::Negation.apply(&p).unwrap().problem;
        assert_eq!(t.h, -&p.h);
        assert_eq!(t.y, -&p.y);
        assert_eq!(t.s_true, p.s_true);
    }

    #[test]
    fn conjugate_rotated_noiseless_residual_vanishes() {
        let p = problem(3, 16, 0.0);
        let t = InvariantTransform::j_rotated().apply(&p).unwrap().problem;
        let r = t.residual_norm_sqr(t.s_true.as_ref().unwrap());
        assert!(r.sqrt() < 1e-12);
        // (jH*)(−j s*) = H* s*
        let s = p.symbol_vector(p.s_true.as_ref().unwrap());
        let lhs = (conj_matrix(&p.h) * Complex64::i()) * s.map(|z| -Complex64::i() * z.conj());
        assert!((lhs - conj_matrix(&p.h) * conj_vector(&s)).camax() < 1e-12);
    }

    #[test]
    fn residual_norm_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for seed in 0..50 {
            let p = problem(100 + seed, 16, 1.0);
            let cand = sample_symbols(4, 16, &mut rng);
            for t in all_transforms(&mut rng) {
                let tp = t.apply(&p).unwrap().problem;
                let cand_t = t.map_indices(&cand, &p.constellation).unwrap();
                let a = p.residual_norm_sqr(&cand);
                let b = tp.residual_norm_sqr(&cand_t);
                assert!((a - b).abs() < 1e-10 * a.max(1.0), "{t}");
            }
        }
    }

    #[test]
    fn permutation_backmap_restores_order() {
        let c = qam(16);
        let t = InvariantTransform::Permutation(vec![2, 0, 3, 1]);
        let s = vec![5, 6, 7, 8];
        let fwd = t.map_indices(&s, &c).unwrap();
        assert_eq!(fwd, vec![7, 5, 8, 6]);
        assert_eq!(t.unmap_indices(&fwd, &c).unwrap(), s);
    }

    #[test]
    fn symbol_maps_round_trip_on_every_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for order in [4, 16, 64] {
            let c = qam(order);
            for t in all_transforms(&mut rng) {
                let table = t.point_map(&c).unwrap();
                for p in 0..order {
                    assert_eq!(invert(&table)[table[p]], p);
                    let z = c.point(p);
                    assert_eq!(t.unmap_symbol(t.map_symbol(z)), z);
                }
            }
        }
    }

    #[test]
    fn rotated_conjugate_is_not_closed_on_pam() {
        let c = Constellation::new(ModulationKind::Pam, 4, false).unwrap();
        assert!(matches!(
            InvariantTransform::j_rotated().point_map(&c),
            Err(Error::NotClosed(_))
        ));
        assert!(InvariantTransform::Conjugate.point_map(&c).is_ok());
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let p = problem(6, 4, 0.1);
        assert!(InvariantTransform::Permutation(vec![0, 0, 1, 2]).apply(&p).is_err());
        assert!(InvariantTransform::Permutation(vec![0, 1]).apply(&p).is_err());
        assert!(InvariantTransform::Unitary(CMatrix::identity(3, 3)).apply(&p).is_err());
        let not_unitary = CMatrix::identity(4, 4) * Complex64::from(2.0);
        assert!(InvariantTransform::Unitary(not_unitary).apply(&p).is_err());
        assert!(InvariantTransform::ConjugateRotated(Complex64::new(0.5, 0.0)).apply(&p).is_err());
    }

    #[test]
    fn bit_maps_exist_for_listed_transforms() {
        for order in [4, 16, 64, 256] {
            let c = qam(order);
            for t in [InvariantTransform::Conjugate, InvariantTransform::j_rotated()] {
                let table = t.point_map(&c).unwrap();
                assert!(bit_map(&table, &c).is_some(), "{t} on {order}-QAM");
            }
        }
    }

    #[test]
    fn conjugate_marginals_backmap_matches_direct_ml() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ml = MlDetector::full_posterior();
        for seed in 0..20 {
            let p = problem(200 + seed, 16, 2.0);
            let direct = ml.detect(&p).unwrap();
            for t in all_transforms(&mut rng) {
                let tp = t.apply(&p).unwrap().problem;
                let back = t.backmap(&ml.detect(&tp).unwrap(), &p.constellation).unwrap();
                assert!((&back.marginals - &direct.marginals).amax() < 1e-10, "{t}");
                assert!((&back.llrs - &direct.llrs).amax() < 1e-8, "{t}");
                assert_eq!(back.hard, direct.hard);
                for (a, b) in back.soft_symbols.iter().zip(&direct.soft_symbols) {
                    assert!((a - b).norm() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn composition_stays_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ml = MlDetector::full_posterior();
        for seed in 0..10 {
            let p = problem(300 + seed, 4, 1.0);
            let direct = ml.detect(&p).unwrap();
            let ts = all_transforms(&mut rng);
            for a in &ts {
                for b in &ts {
                    let t = InvariantTransform::Composite(vec![a.clone(), b.clone()]);
                    let tp = t.apply(&p).unwrap().problem;
                    let back = t.backmap(&ml.detect(&tp).unwrap(), &p.constellation).unwrap();
                    assert_eq!(back.hard, direct.hard, "{t}");
                    assert!((&back.marginals - &direct.marginals).amax() < 1e-10, "{t}");
                }
            }
        }
    }

    #[test]
    fn random_unitary_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q1 = random_unitary(1, &mut rng);
        assert!((q1[(0, 0)].norm() - 1.0).abs() < 1e-12);
        let q8 = random_unitary(8, &mut rng);
        assert!((q8.adjoint() * &q8 - CMatrix::identity(8, 8)).camax() < 1e-10);
    }

    #[test]
    fn random_unitary_first_column_is_haar() {
        // Reference: a directly normalized complex Gaussian vector.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 4;
        let mut from_q = Vec::new();
        let mut from_g = Vec::new();
        for _ in 0..10_000 {
            let q = random_unitary(n, &mut rng);
            from_q.push(q[(0, 0)].re);
            let g: Vec<Complex64> = (0..n)
                .map(|_| {
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = rng.sample(StandardNormal);
                    Complex64::new(re, im)
                })
                .collect();
            let norm = g.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            from_g.push(g[0].re / norm);
        }
        let ks = ks_two_sample(&from_q, &from_g);
        assert!(ks.passes(0.01), "{ks:?}");
    }

    #[test]
    fn tags_parse() {
        for tag in ["identity", "neg", "conj", "conj_rot", "perm", "unitary"] {
            assert_eq!(tag.parse::<TransformTag>().unwrap().as_str(), tag);
        }
        assert!(matches!("flip".parse::<TransformTag>(), Err(Error::UnknownTag(_))));
    }

    #[test]
    fn invariance_checks() {
        let sim = SimConfig {
            n_rx: 4,
            n_tx: 4,
            modulation: ModulationSpec { kind: ModulationKind::Qam, order: 16, normalized: false },
            snr_db: 15.0,
            master_seed: 3,
            n_trials: 1,
        };
        for t in [TransformTag::Perm, TransformTag::Neg] {
            let r = verify_invariance(&t, &sim, 2000, 0.01).unwrap();
            assert!(r.pass, "{r:?}");
        }
        let r = verify_invariance(&ObservationScaling(2.0), &sim, 2000, 0.01).unwrap();
        assert!(!r.pass);
        assert!(r.tests.iter().any(|q| q.quantity.starts_with("noise") && !q.pass));
        assert!(verify_invariance(&TransformTag::Neg, &sim, 10, 0.01).is_err());
    }
}
