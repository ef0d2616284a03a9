//! A small feed-forward detector trained from scratch.
//!
//! The network reads the real-valued features of `(y, H)` and outputs, for
//! every transmit layer, a softmax over the constellation points. It is
//! trained with per-layer cross-entropy and mini-batch SGD with momentum on a
//! fixed dataset drawn at a single SNR, so it keeps a measurable learning
//! error that resampling can average out.
//!
//! Feature layout for an `n_rx × n_tx` problem (length `2·n_rx + 2·n_rx·n_tx`):
//!
//! ```text
//! [ Re y_0 .. Re y_{n_rx−1} | Im y_0 .. | Re H (column-major) | Im H (column-major) ] (+ noise_var)
//! ```
//!
//! `y` is divided by `√(E_s · n_tx)` so the observation has roughly unit
//! power; `H` entries already have unit variance and are left as is. The
//! optional trailing feature is `noise_var / (E_s · n_tx)`.

use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detectors::{Detector, SoftOutput};
use crate::mimo_model::{generate_problem, Constellation, Field, MimoProblem, ModulationSpec, SimConfig};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::{Error, Result};

pub const MODEL_FORMAT: &str = "mimo-resample-model";
pub const MODEL_VERSION: u32 = 1;

/// Samples per gradient chunk. Chunks are reduced in index order, so the
/// result does not depend on the number of worker threads.
const GRAD_CHUNK: usize = 64;

/// Problem shape a model was trained for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSpec {
    pub n_rx: usize,
    pub n_tx: usize,
    pub modulation: ModulationSpec,
    #[serde(default)]
    pub include_noise_var: bool,
}

impl InputSpec {
    pub fn feature_len(&self) -> usize {
        2 * self.n_rx + 2 * self.n_rx * self.n_tx + usize::from(self.include_noise_var)
    }

    pub fn output_len(&self) -> usize {
        self.n_tx * self.modulation.order
    }

    /// Writes the feature vector of `problem` into `out`.
    pub fn features_into(&self, problem: &MimoProblem, out: &mut [f64]) {
        let es = problem.constellation.avg_energy();
        let y_scale = (es * self.n_tx as f64).sqrt().recip();
        let (nr, nt) = (self.n_rx, self.n_tx);
        for r in 0..nr {
            out[r] = problem.y[r].re * y_scale;
            out[nr + r] = problem.y[r].im * y_scale;
        }
        let base = 2 * nr;
        for j in 0..nt {
            for r in 0..nr {
                let h = problem.h[(r, j)];
                out[base + j * nr + r] = h.re;
                out[base + nr * nt + j * nr + r] = h.im;
            }
        }
        if self.include_noise_var {
            out[base + 2 * nr * nt] = problem.noise_var / (es * nt as f64);
        }
    }

    pub fn features(&self, problem: &MimoProblem) -> Vec<f64> {
        let mut v = vec![0.0; self.feature_len()];
        self.features_into(problem, &mut v);
        v
    }

    fn check(&self, problem: &MimoProblem) -> Result<()> {
        let c = &problem.constellation;
        if problem.field != Field::Complex
            || problem.n_rx() != self.n_rx
            || problem.n_tx() != self.n_tx
            || c.order() != self.modulation.order
            || c.kind() != self.modulation.kind
        {
            return Err(Error::SpecMismatch(format!(
                "model expects complex {}×{} {}-{}, got {:?} {}×{} {}-{}",
                self.n_rx,
                self.n_tx,
                self.modulation.order,
                self.modulation.kind,
                problem.field,
                problem.n_rx(),
                problem.n_tx(),
                c.order(),
                c.kind()
            )));
        }
        Ok(())
    }
}

/// Labelled training or evaluation data, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub feature_len: usize,
    pub n_tx: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len() / self.n_tx
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> (&[f64], &[usize]) {
        (
            &self.features[i * self.feature_len..(i + 1) * self.feature_len],
            &self.labels[i * self.n_tx..(i + 1) * self.n_tx],
        )
    }
}

/// Draws `n_samples` problems at `sim.snr_db` from a dataset seed domain
/// derived from `seed`, and extracts their features and labels.
pub fn generate_dataset(
    sim: &SimConfig,
    include_noise_var: bool,
    n_samples: usize,
    seed: u64,
) -> Result<Dataset> {
    if n_samples == 0 {
        return Err(Error::InvalidParameter("dataset needs at least one sample".into()));
    }
    let spec = InputSpec {
        n_rx: sim.n_rx,
        n_tx: sim.n_tx,
        modulation: sim.modulation,
        include_noise_var,
    };
    let c = sim.modulation.build()?;
    let noise_var = sim.noise_var(&c);
    let master = derive_seed(seed, Stream::Dataset, 0);
    let f_len = spec.feature_len();
    let rows: Vec<(Vec<f64>, Vec<usize>)> = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let p = generate_problem(sim.n_rx, sim.n_tx, &c, noise_var, master, i);
            (spec.features(&p), p.s_true.expect("generated problems are labelled"))
        })
        .collect();
    let mut features = Vec::with_capacity(n_samples * f_len);
    let mut labels = Vec::with_capacity(n_samples * sim.n_tx);
    for (f, l) in rows {
        features.extend(f);
        labels.extend(l);
    }
    Ok(Dataset {
        features,
        labels,
        feature_len: f_len,
        n_tx: sim.n_tx,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

/// Dense layer, `weights` row-major `n_out × n_in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Feed-forward network with ReLU hidden layers and a grouped softmax head:
/// the output splits into `groups` blocks, each normalized separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub groups: usize,
    pub layers: Vec<Dense>,
}

/// Parameter gradients with the same shapes as [`Mlp::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            layers: mlp
                .layers
                .iter()
                .map(|l| Dense {
                    weights: vec![0.0; l.weights.len()],
                    biases: vec![0.0; l.biases.len()],
                })
                .collect(),
        }
    }

    fn add(&mut self, o: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&o.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.biases.iter_mut().zip(&b.biases).for_each(|(x, y)| *x += y);
        }
    }
}

impl Mlp {
    /// He-initialized network; output layer starts at zero so the initial
    /// prediction is uniform.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], groups: usize, rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidParameter(format!("bad layer widths {widths:?}")));
        }
        let out = *widths.last().unwrap();
        if groups == 0 || !out.is_multiple_of(groups) {
            return Err(Error::InvalidParameter(format!(
                "output width {out} not divisible into {groups} groups"
            )));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (n_in, n_out) = (widths[l], widths[l + 1]);
                let std = if l + 1 == n { 0.0 } else { (2.0 / n_in as f64).sqrt() };
                Dense {
                    weights: (0..n_in * n_out)
                        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                    biases: vec![0.0; n_out],
                }
            })
            .collect();
        Ok(Self {
            widths: widths.to_vec(),
            activation: Activation::Relu,
            groups,
            layers,
        })
    }

    pub fn input_len(&self) -> usize {
        self.widths[0]
    }

    pub fn classes(&self) -> usize {
        self.widths.last().unwrap() / self.groups
    }

    /// Runs the network, leaving every layer's post-activation output in
    /// `acts` (`acts[0]` is the input, the last entry holds the logits).
    fn forward_into(&self, x: &[f64], acts: &mut Vec<Vec<f64>>) {
        acts.resize(self.widths.len(), Vec::new());
        acts[0].clear();
        acts[0].extend_from_slice(x);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let (head, tail) = acts.split_at_mut(l + 1);
            let input = &head[l];
            let out = &mut tail[0];
            out.clear();
            out.resize(n_out, 0.0);
            for o in 0..n_out {
                let row = &layer.weights[o * n_in..(o + 1) * n_in];
                let mut z = layer.biases[o];
                for (w, v) in row.iter().zip(input.iter()) {
                    z += w * v;
                }
                out[o] = if l < last { z.max(0.0) } else { z };
            }
        }
    }

    /// Per-group softmax probabilities.
    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let mut acts = Vec::new();
        self.forward_into(x, &mut acts);
        let mut p = acts.pop().unwrap();
        for g in p.chunks_mut(self.classes()) {
            softmax_in_place(g);
        }
        p
    }

    /// Mean per-group cross-entropy over the given samples.
    pub fn loss(&self, data: &Dataset, indices: &[usize]) -> f64 {
        let total: f64 = indices
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                chunk
                    .iter()
                    .map(|&i| {
                        let (x, y) = data.sample(i);
                        let mut acts = Vec::new();
                        self.forward_into(x, &mut acts);
                        logit_cross_entropy(acts.last().unwrap(), y, self.classes())
                    })
                    .sum::<f64>()
            })
            .collect::<Vec<f64>>()
            .iter()
            .sum();
        total / (indices.len() * self.groups) as f64
    }

    /// Loss and its gradient over `indices`.
    pub fn loss_and_gradients(&self, data: &Dataset, indices: &[usize]) -> (f64, Gradients) {
        let parts: Vec<(f64, Gradients)> = indices
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| self.chunk_gradients(data, chunk))
            .collect();
        let norm = (indices.len() * self.groups) as f64;
        let mut grads = Gradients::zeros_like(self);
        let mut loss = 0.0;
        for (l, g) in &parts {
            loss += l;
            grads.add(g);
        }
        for layer in &mut grads.layers {
            layer.weights.iter_mut().for_each(|w| *w /= norm);
            layer.biases.iter_mut().for_each(|b| *b /= norm);
        }
        (loss / norm, grads)
    }

    fn chunk_gradients(&self, data: &Dataset, chunk: &[usize]) -> (f64, Gradients) {
        let mut grads = Gradients::zeros_like(self);
        let mut acts = Vec::new();
        let mut delta = Vec::new();
        let mut prev = Vec::new();
        let classes = self.classes();
        let mut loss = 0.0;
        for &i in chunk {
            let (x, y) = data.sample(i);
            self.forward_into(x, &mut acts);
            // dL/dlogits = softmax − onehot, per group
            delta.clear();
            delta.extend_from_slice(acts.last().unwrap());
            loss += logit_cross_entropy(&delta, y, classes);
            for (g, block) in delta.chunks_mut(classes).enumerate() {
                softmax_in_place(block);
                block[y[g]] -= 1.0;
            }
            for l in (0..self.layers.len()).rev() {
                let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
                let input = &acts[l];
                let g = &mut grads.layers[l];
                for o in 0..n_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    g.biases[o] += d;
                    let row = &mut g.weights[o * n_in..(o + 1) * n_in];
                    for (w, v) in row.iter_mut().zip(input.iter()) {
                        *w += d * v;
                    }
                }
                if l == 0 {
                    break;
                }
                prev.clear();
                prev.resize(n_in, 0.0);
                let w = &self.layers[l].weights;
                for o in 0..n_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    for (p, wv) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                        *p += d * wv;
                    }
                }
                // ReLU derivative on the hidden activations
                for (p, &a) in prev.iter_mut().zip(input.iter()) {
                    if a <= 0.0 {
                        *p = 0.0;
                    }
                }
                std::mem::swap(&mut delta, &mut prev);
            }
        }
        (loss, grads)
    }

    /// Flattened parameters, layer by layer (weights then biases).
    pub fn parameters(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
            .collect()
    }

    pub fn set_parameters(&mut self, flat: &[f64]) {
        let mut it = flat.iter();
        for l in &mut self.layers {
            for w in l.weights.iter_mut().chain(l.biases.iter_mut()) {
                *w = *it.next().expect("parameter vector too short");
            }
        }
    }
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
            .collect()
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Summed cross-entropy of grouped logits, `logsumexp(z) − z_y` per group.
/// Non-finite logits propagate to a non-finite loss.
fn logit_cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> f64 {
    logits
        .chunks(classes)
        .zip(labels)
        .map(|(z, &y)| {
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - z[y]
        })
        .sum()
}

/// Summed cross-entropy of grouped probabilities against class labels.
pub fn cross_entropy(probs: &[f64], labels: &[usize], classes: usize) -> f64 {
    probs
        .chunks(classes)
        .zip(labels)
        .map(|(p, &y)| -p[y].ln())
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_rx: usize,
    pub n_tx: usize,
    pub modulation: ModulationSpec,
    pub snr_db: f64,
    pub n_train: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub include_noise_var: bool,
}

fn default_momentum() -> f64 {
    0.9
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.n_train > 0
            && self.batch_size > 0
            && self.epochs > 0
            && self.learning_rate > 0.0
            && self.n_tx > 0
            && self.n_rx >= self.n_tx
            && !self.hidden.is_empty()
            && self.hidden.iter().all(|&h| h > 0);
        if !positive {
            return Err(Error::Config(format!("non-positive training parameter in {self:?}")));
        }
        if self.n_train < self.batch_size {
            return Err(Error::Config("n_train must be ≥ batch_size".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        self.modulation.build().map(|_| ())
    }

    pub fn input_spec(&self) -> InputSpec {
        InputSpec {
            n_rx: self.n_rx,
            n_tx: self.n_tx,
            modulation: self.modulation,
            include_noise_var: self.include_noise_var,
        }
    }

    fn sim(&self) -> SimConfig {
        SimConfig {
            n_rx: self.n_rx,
            n_tx: self.n_tx,
            modulation: self.modulation,
            snr_db: self.snr_db,
            master_seed: self.seed,
            n_trials: self.n_train,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub snr_db: f64,
    pub n_train: usize,
    pub epochs: usize,
    pub seed: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Trained detector: the network plus what it was trained for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralModel {
    pub format: String,
    pub version: u32,
    pub input_spec: InputSpec,
    pub network: Mlp,
    pub train_meta: TrainMeta,
    #[serde(skip)]
    constellation: Option<Arc<Constellation>>,
}

impl NeuralModel {
    pub fn infer(&self, problem: &MimoProblem) -> Result<SoftOutput> {
        self.input_spec.check(problem)?;
        let x = self.input_spec.features(problem);
        let p = self.network.predict(&x);
        let order = self.input_spec.modulation.order;
        let marginals = DMatrix::from_row_slice(self.input_spec.n_tx, order, &p);
        Ok(SoftOutput::from_marginals(marginals, &problem.constellation))
    }

    pub fn constellation(&self) -> Result<Arc<Constellation>> {
        match &self.constellation {
            Some(c) => Ok(Arc::clone(c)),
            None => self.input_spec.modulation.build(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: NeuralModel = serde_json::from_str(text)?;
        if m.format != MODEL_FORMAT || m.version != MODEL_VERSION {
            return Err(Error::Config(format!(
                "unsupported model container {} v{}",
                m.format, m.version
            )));
        }
        let spec = &m.input_spec;
        if m.network.input_len() != spec.feature_len()
            || *m.network.widths.last().unwrap() != spec.output_len()
            || m.network.groups != spec.n_tx
            || m.network.layers.len() + 1 != m.network.widths.len()
        {
            return Err(Error::Config("model layer shapes disagree with input_spec".into()));
        }
        for (l, layer) in m.network.layers.iter().enumerate() {
            let (n_in, n_out) = (m.network.widths[l], m.network.widths[l + 1]);
            if layer.weights.len() != n_in * n_out || layer.biases.len() != n_out {
                return Err(Error::Config(format!("layer {l} has wrong parameter count")));
            }
        }
        let constellation = Some(spec.modulation.build()?);
        Ok(Self { constellation, ..m })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl Detector for NeuralModel {
    fn detect(&self, problem: &MimoProblem) -> Result<SoftOutput> {
        self.infer(problem)
    }

    fn label(&self) -> String {
        "neural".into()
    }
}

/// Trains a network; see [`train_with`].
pub fn train(config: &TrainConfig) -> Result<NeuralModel> {
    train_with(config, |_, _| {})
}

/// Trains a network and calls `on_epoch(epoch, &model)` after every epoch
/// (1-based). Deterministic given `config.seed`.
///
/// The learning rate decays linearly from `learning_rate` to a tenth of it
/// over the run.
pub fn train_with<F: FnMut(usize, &NeuralModel)>(config: &TrainConfig, mut on_epoch: F) -> Result<NeuralModel> {
    config.validate()?;
    let spec = config.input_spec();
    let data = generate_dataset(&config.sim(), config.include_noise_var, config.n_train, config.seed)?;
    let mut widths = vec![spec.feature_len()];
    widths.extend(&config.hidden);
    widths.push(spec.output_len());
    let mut net = Mlp::new(&widths, config.n_tx, &mut stream_rng(config.seed, Stream::Init, 0))?;

    let all: Vec<usize> = (0..data.len()).collect();
    let initial_loss = net.loss(&data, &all);
    let mut velocity = vec![0.0; net.parameters().len()];
    let mut order = all.clone();
    let mut model = NeuralModel {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        input_spec: spec.clone(),
        network: net.clone(),
        train_meta: TrainMeta {
            snr_db: config.snr_db,
            n_train: config.n_train,
            epochs: 0,
            seed: config.seed,
            initial_loss,
            final_loss: initial_loss,
        },
        constellation: Some(config.modulation.build()?),
    };
    for epoch in 0..config.epochs {
        order.shuffle(&mut stream_rng(config.seed, Stream::Shuffle, epoch as u64));
        let lr = config.learning_rate * (1.0 - 0.9 * epoch as f64 / config.epochs as f64);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for batch in order.chunks(config.batch_size) {
            if batch.len() < config.batch_size {
                continue;
            }
            let (loss, grads) = net.loss_and_gradients(&data, batch);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch: epoch + 1, loss });
            }
            epoch_loss += loss;
            batches += 1;
            let mut params = net.parameters();
            for ((p, v), g) in params.iter_mut().zip(&mut velocity).zip(grads.flatten()) {
                *v = config.momentum * *v - lr * g;
                *p += *v;
            }
            net.set_parameters(&params);
        }
        let mean_loss = epoch_loss / batches as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Diverged { epoch: epoch + 1, loss: mean_loss });
        }
        model.network = net.clone();
        model.train_meta.epochs = epoch + 1;
        model.train_meta.final_loss = mean_loss;
        on_epoch(epoch + 1, &model);
    }
    model.train_meta.final_loss = net.loss(&data, &all);
    if !model.train_meta.final_loss.is_finite() {
        return Err(Error::Diverged {
            epoch: config.epochs,
            loss: model.train_meta.final_loss,
        });
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mimo_model::ModulationKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn qpsk_sim(snr_db: f64) -> SimConfig {
        SimConfig {
            n_rx: 2,
            n_tx: 2,
            modulation: ModulationSpec { kind: ModulationKind::Qam, order: 4, normalized: false },
            snr_db,
            master_seed: 1,
            n_trials: 1,
        }
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            n_rx: 2,
            n_tx: 2,
            modulation: ModulationSpec { kind: ModulationKind::Qam, order: 4, normalized: false },
            snr_db: 15.0,
            n_train: 512,
            batch_size: 64,
            epochs: 3,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 5,
            hidden: vec![16],
            include_noise_var: false,
        }
    }

    #[test]
    fn feature_length_for_qpsk_2x2() {
        let d = generate_dataset(&qpsk_sim(10.0), false, 3, 0).unwrap();
        assert_eq!(d.feature_len, 12);
        assert_eq!(d.labels.len(), 6);
        let d = generate_dataset(&qpsk_sim(10.0), true, 3, 0).unwrap();
        assert_eq!(d.feature_len, 13);
    }

    #[test]
    fn dataset_is_reproducible() {
        let a = generate_dataset(&qpsk_sim(10.0), false, 50, 9).unwrap();
        let b = generate_dataset(&qpsk_sim(10.0), false, 50, 9).unwrap();
        let c = generate_dataset(&qpsk_sim(10.0), false, 50, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn noiseless_identity_channel_labels_are_recoverable() {
        let c = Arc::new(Constellation::new(ModulationKind::Qam, 4, false).unwrap());
        let spec = InputSpec {
            n_rx: 2,
            n_tx: 2,
            modulation: ModulationSpec { kind: ModulationKind::Qam, order: 4, normalized: false },
            include_noise_var: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let s = crate::mimo_model::sample_symbols(2, 4, &mut rng);
            let p = crate::mimo_model::transmit(&crate::CMatrix::identity(2, 2), &s, &c, 0.0, &mut rng).unwrap();
            let x = spec.features(&p);
            let scale = (c.avg_energy() * 2.0).sqrt();
            for k in 0..2 {
                let y = crate::Complex64::new(x[k], x[2 + k]) * scale;
                assert_eq!(c.nearest(y), s[k]);
            }
        }
    }

    #[test]
    fn uniform_output_has_log_q_loss() {
        let data = generate_dataset(&qpsk_sim(10.0), false, 100, 0).unwrap();
        let net = Mlp::new(&[12, 8, 8], 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let all: Vec<usize> = (0..100).collect();
        assert!((net.loss(&data, &all) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn one_hot_output_has_zero_loss() {
        assert_eq!(cross_entropy(&[0.0, 1.0, 0.0, 1.0, 0.0, 0.0], &[1, 0], 3), 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        // widths [4, 8, 4], two groups of two classes
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut net = Mlp::new(&[4, 8, 4], 2, &mut rng).unwrap();
        // non-zero output layer so every parameter has a gradient
        let out = &mut net.layers[1];
        for w in out.weights.iter_mut().chain(out.biases.iter_mut()) {
            *w = 0.5 * rng.sample::<f64, _>(StandardNormal);
        }
        for b in net.layers[0].biases.iter_mut() {
            *b = 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
        let n = 6;
        let data = Dataset {
            features: (0..n * 4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
            labels: (0..n * 2).map(|_| rng.random_range(0..2)).collect(),
            feature_len: 4,
            n_tx: 2,
        };
        let idx: Vec<usize> = (0..n).collect();
        let (_, grads) = net.loss_and_gradients(&data, &idx);
        let analytic = grads.flatten();
        let base = net.parameters();
        let h = 1e-6;
        for (k, &a) in analytic.iter().enumerate() {
            let mut plus = base.clone();
            plus[k] += h;
            let mut minus = base.clone();
            minus[k] -= h;
            let mut probe = net.clone();
            probe.set_parameters(&plus);
            let lp = probe.loss(&data, &idx);
            probe.set_parameters(&minus);
            let lm = probe.loss(&data, &idx);
            let numeric = (lp - lm) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-5, "param {k}: analytic {a}, numeric {numeric}");
        }
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let a = train(&tiny_config()).unwrap();
        let b = train(&tiny_config()).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert!(a.train_meta.final_loss < a.train_meta.initial_loss);
        assert!((a.train_meta.initial_loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn divergence_is_reported() {
        let mut cfg = tiny_config();
        cfg.learning_rate = 1e6;
        cfg.momentum = 0.99;
        cfg.epochs = 20;
        assert!(matches!(train(&cfg), Err(Error::Diverged { .. })));
    }

    #[test]
    fn serialization_round_trip_is_bit_exact() {
        let m = train(&tiny_config()).unwrap();
        let text = m.to_json().unwrap();
        let back = NeuralModel::from_json(&text).unwrap();
        assert_eq!(back.network, m.network);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn inference_contract() {
        let m = train(&tiny_config()).unwrap();
        let sim = qpsk_sim(15.0);
        let c = sim.modulation.build().unwrap();
        let p = sim.problem(&c, 3);
        let a = m.infer(&p).unwrap();
        let b = m.infer(&p).unwrap();
        assert_eq!(a, b);
        for row in a.marginals.row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
        let other = SimConfig { n_rx: 3, ..sim.clone() };
        let q = other.problem(&c, 0);
        assert!(matches!(m.infer(&q), Err(Error::SpecMismatch(_))));
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config();
        cfg.batch_size = 1024;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.hidden = vec![];
        assert!(cfg.validate().is_err());
    }
}
