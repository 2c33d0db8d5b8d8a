//! Feedforward encoder with an evidence head and a contrastive projection
//! head, trained by exact backpropagation and Adam.
//!
//! Layout: `input -> hidden (ReLU) ... -> embedding (linear)`; the evidence
//! head maps the embedding to `K` outputs followed by the evidence
//! activation; the projection head is `embedding -> embedding (ReLU) ->
//! projection_dim`. All parameters live in one flat vector, layer by layer,
//! weights row-major `(out, in)` followed by biases.

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evidential::{
    annealing_coefficient, opinion_from_alpha, sample_loss, sample_loss_gradient, DirichletOpinion,
    EvidenceVector, LossBreakdown, OneHotLabel,
};
use crate::seed::{self, EngineRng};

/// A labeled training example borrowed from a dataset.
pub type Labeled<'a> = (&'a [f64], OneHotLabel);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvidenceActivation {
    Relu,
    Softplus,
}

impl EvidenceActivation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Self::Relu => z.max(0.0),
            Self::Softplus => z.max(0.0) + (-z.abs()).exp().ln_1p(),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Self::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Softplus => 1.0 / (1.0 + (-z).exp()),
        }
    }
}

impl std::str::FromStr for EvidenceActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Self::Relu),
            "softplus" => Ok(Self::Softplus),
            other => Err(Error::Config(format!("unknown evidence activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    pub projection_dim: usize,
    pub num_classes: usize,
    pub evidence_activation: EvidenceActivation,
    pub seed: u64,
}

impl NetworkConfig {
    /// The default toy architecture: `input -> 64 -> 64 -> 32 -> K`.
    pub fn toy(input_dim: usize, num_classes: usize, seed: u64) -> Self {
        Self {
            input_dim,
            hidden_dims: vec![64, 64],
            embedding_dim: 32,
            projection_dim: 16,
            num_classes,
            evidence_activation: EvidenceActivation::Relu,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims_ok = self.input_dim >= 1
            && self.embedding_dim >= 1
            && self.projection_dim >= 1
            && self.hidden_dims.iter().all(|&d| d >= 1);
        if !dims_ok {
            return Err(Error::Config("all layer dimensions must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need K >= 2 classes, got {}", self.num_classes)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layer {
    offset: usize,
    in_dim: usize,
    out_dim: usize,
}

impl Layer {
    fn weights(self) -> Range<usize> {
        self.offset..self.offset + self.in_dim * self.out_dim
    }

    fn bias(self) -> Range<usize> {
        let w = self.offset + self.in_dim * self.out_dim;
        w..w + self.out_dim
    }

    fn end(self) -> usize {
        self.offset + (self.in_dim + 1) * self.out_dim
    }

    fn forward(self, params: &[f64], x: &[f64], out: &mut Vec<f64>) {
        let w = &params[self.weights()];
        let b = &params[self.bias()];
        out.clear();
        out.extend(w.chunks_exact(self.in_dim).zip(b).map(|(row, bias)| {
            row.iter().zip(x).fold(*bias, |acc, (wi, xi)| acc + wi * xi)
        }));
    }

    /// Accumulates parameter gradients for upstream `dz`; returns `Wᵀ dz`
    /// when `want_input` is set.
    fn backward(self, params: &[f64], x: &[f64], dz: &[f64], grad: &mut [f64], want_input: bool) -> Vec<f64> {
        let (gw, gb) = grad[self.offset..self.end()].split_at_mut(self.in_dim * self.out_dim);
        for ((row, g), d) in gw.chunks_exact_mut(self.in_dim).zip(gb.iter_mut()).zip(dz) {
            *g += d;
            if *d != 0.0 {
                for (gi, xi) in row.iter_mut().zip(x) {
                    *gi += d * xi;
                }
            }
        }
        if !want_input {
            return Vec::new();
        }
        let w = &params[self.weights()];
        let mut dx = vec![0.0; self.in_dim];
        for (row, d) in w.chunks_exact(self.in_dim).zip(dz) {
            if *d != 0.0 {
                for (dxi, wi) in dx.iter_mut().zip(row) {
                    *dxi += d * wi;
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

/// Optimizer and batching hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self { learning_rate: 1e-3, batch_size: 64, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Parameter groups that a training stage may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    EvidenceHead,
    Projection,
}

/// Network parameters plus optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    config: NetworkConfig,
    layers: Vec<Layer>,
    params: Vec<f64>,
    pub optimizer: AdamState,
}

/// Intermediate values of one encoder + evidence-head pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input of each encoder layer followed by the embedding.
    activations: Vec<Vec<f64>>,
    /// Pre-activations of the encoder layers.
    pre: Vec<Vec<f64>>,
    head_pre: Vec<f64>,
    pub evidence: Vec<f64>,
}

impl Trace {
    pub fn embedding(&self) -> &[f64] {
        self.activations.last().expect("trace holds the embedding")
    }
}

/// Intermediate values of the projection head.
#[derive(Debug, Clone)]
pub struct ProjectionTrace {
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    pub output: Vec<f64>,
}

fn layout(config: &NetworkConfig) -> Vec<Layer> {
    let mut dims = vec![config.input_dim];
    dims.extend(&config.hidden_dims);
    dims.push(config.embedding_dim);
    let mut shapes: Vec<(usize, usize)> = dims.windows(2).map(|w| (w[0], w[1])).collect();
    shapes.push((config.embedding_dim, config.num_classes));
    shapes.push((config.embedding_dim, config.embedding_dim));
    shapes.push((config.embedding_dim, config.projection_dim));
    let mut offset = 0;
    shapes
        .into_iter()
        .map(|(in_dim, out_dim)| {
            let l = Layer { offset, in_dim, out_dim };
            offset = l.end();
            l
        })
        .collect()
}

/// Deterministic initialization: zero-mean normal weights scaled by fan-in
/// (`√(2/fan_in)` ahead of a ReLU, `√(1/fan_in)` otherwise), zero biases.
pub fn init_model(config: &NetworkConfig) -> Result<ModelState> {
    config.validate()?;
    let layers = layout(config);
    let total = layers.last().map_or(0, |l| l.end());
    let mut params = vec![0.0; total];
    let mut rng = seed::rng(config.seed, "init", 0);
    let n_enc = config.hidden_dims.len() + 1;
    for (i, layer) in layers.iter().enumerate() {
        let feeds_relu = i + 1 < n_enc || i == n_enc + 1;
        let gain = if feeds_relu { 2.0 } else { 1.0 };
        let normal = Normal::new(0.0, (gain / layer.in_dim as f64).sqrt()).expect("valid std");
        for w in &mut params[layer.weights()] {
            *w = normal.sample(&mut rng);
        }
    }
    Ok(ModelState {
        config: config.clone(),
        layers,
        optimizer: AdamState { m: vec![0.0; total], v: vec![0.0; total], step: 0 },
        params,
    })
}

impl ModelState {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Replaces all parameters; intended for tests and gradient checks.
    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Dimension { expected: self.params.len(), got: params.len() });
        }
        self.params = params;
        Ok(())
    }

    fn n_encoder(&self) -> usize {
        self.config.hidden_dims.len() + 1
    }

    fn head(&self) -> Layer {
        self.layers[self.n_encoder()]
    }

    fn projection(&self) -> (Layer, Layer) {
        let n = self.n_encoder();
        (self.layers[n + 1], self.layers[n + 2])
    }

    pub fn group_range(&self, group: ParamGroup) -> Range<usize> {
        let n = self.n_encoder();
        match group {
            ParamGroup::Encoder => 0..self.layers[n - 1].end(),
            ParamGroup::EvidenceHead => self.head().offset..self.head().end(),
            ParamGroup::Projection => self.layers[n + 1].offset..self.layers[n + 2].end(),
        }
    }

    /// Clears Adam moments and the step counter.
    pub fn reset_optimizer(&mut self) {
        self.optimizer.m.iter_mut().for_each(|v| *v = 0.0);
        self.optimizer.v.iter_mut().for_each(|v| *v = 0.0);
        self.optimizer.step = 0;
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.config.input_dim {
            return Err(Error::Dimension { expected: self.config.input_dim, got: x.len() });
        }
        Ok(())
    }

    /// Encoder and evidence head with all intermediates retained.
    pub fn trace(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        let n = self.n_encoder();
        let mut activations = Vec::with_capacity(n + 1);
        let mut pre = Vec::with_capacity(n);
        activations.push(x.to_vec());
        for (i, layer) in self.layers[..n].iter().enumerate() {
            let mut z = Vec::with_capacity(layer.out_dim);
            layer.forward(&self.params, &activations[i], &mut z);
            let a = if i + 1 < n { z.iter().map(|v| v.max(0.0)).collect() } else { z.clone() };
            pre.push(z);
            activations.push(a);
        }
        let mut head_pre = Vec::with_capacity(self.config.num_classes);
        self.head().forward(&self.params, &activations[n], &mut head_pre);
        let act = self.config.evidence_activation;
        let evidence = head_pre.iter().map(|&z| act.apply(z)).collect();
        Ok(Trace { activations, pre, head_pre, evidence })
    }

    /// Returns the embedding and the evidence for one input.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, EvidenceVector)> {
        let mut t = self.trace(x)?;
        let emb = t.activations.pop().expect("embedding");
        Ok((emb, EvidenceVector::new(t.evidence)?))
    }

    pub fn project(&self, embedding: &[f64]) -> ProjectionTrace {
        let (l1, l2) = self.projection();
        let mut hidden_pre = Vec::with_capacity(l1.out_dim);
        l1.forward(&self.params, embedding, &mut hidden_pre);
        let hidden: Vec<f64> = hidden_pre.iter().map(|v| v.max(0.0)).collect();
        let mut output = Vec::with_capacity(l2.out_dim);
        l2.forward(&self.params, &hidden, &mut output);
        ProjectionTrace { hidden_pre, hidden, output }
    }

    /// Backpropagates `d_embedding` through the encoder into `grad`.
    pub fn backward_encoder(&self, trace: &Trace, d_embedding: Vec<f64>, grad: &mut [f64]) {
        let n = self.n_encoder();
        let mut upstream = d_embedding;
        for i in (0..n).rev() {
            if i + 1 < n {
                for (d, z) in upstream.iter_mut().zip(&trace.pre[i]) {
                    if *z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            upstream = self.layers[i].backward(&self.params, &trace.activations[i], &upstream, grad, i > 0);
        }
    }

    /// Backpropagates a loss gradient with respect to evidence through the
    /// evidence activation, head and encoder, accumulating into `grad`.
    pub fn backward_evidence(&self, trace: &Trace, d_evidence: &[f64], grad: &mut [f64]) {
        let act = self.config.evidence_activation;
        let dz: Vec<f64> = d_evidence.iter().zip(&trace.head_pre).map(|(d, &z)| d * act.derivative(z)).collect();
        let d_emb = self.head().backward(&self.params, trace.embedding(), &dz, grad, true);
        self.backward_encoder(trace, d_emb, grad);
    }

    /// Backpropagates a gradient on the projection output into the
    /// projection head; returns the gradient on the embedding.
    pub fn backward_projection(&self, embedding: &[f64], proj: &ProjectionTrace, d_output: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let (l1, l2) = self.projection();
        let mut d_hidden = l2.backward(&self.params, &proj.hidden, d_output, grad, true);
        for (d, z) in d_hidden.iter_mut().zip(&proj.hidden_pre) {
            if *z <= 0.0 {
                *d = 0.0;
            }
        }
        l1.backward(&self.params, embedding, &d_hidden, grad, true)
    }

    /// One Adam update over the given groups with gradient `grad * scale`.
    pub fn adam_step(&mut self, grad: &[f64], scale: f64, groups: &[ParamGroup], hyper: &TrainHyper) -> Result<()> {
        let ranges: Vec<Range<usize>> = groups.iter().map(|&g| self.group_range(g)).collect();
        self.optimizer.step += 1;
        let step = self.optimizer.step as i32;
        let bc1 = 1.0 - hyper.beta1.powi(step);
        let bc2 = 1.0 - hyper.beta2.powi(step);
        for range in ranges {
            for i in range {
                let g = grad[i] * scale;
                let m = &mut self.optimizer.m[i];
                let v = &mut self.optimizer.v[i];
                *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
                *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
                let update = hyper.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + hyper.epsilon);
                self.params[i] -= update;
                if !self.params[i].is_finite() {
                    return Err(Error::NonFinite(format!("parameter {i} after optimizer step {step}")));
                }
            }
        }
        Ok(())
    }
}

/// Evidential loss of a batch plus its gradient with respect to all
/// parameters (summed over samples in order).
pub fn evidential_loss_and_gradient(model: &ModelState, batch: &[Labeled<'_>], lambda: f64) -> Result<(LossBreakdown, Vec<f64>)> {
    let mut grad = vec![0.0; model.num_params()];
    let (mut mse, mut kl) = (0.0, 0.0);
    let k = model.config.num_classes;
    let mut d_e = vec![0.0; k];
    for (x, y) in batch {
        if y.num_classes() != k {
            return Err(Error::Dimension { expected: k, got: y.num_classes() });
        }
        let trace = model.trace(x)?;
        let alpha: Vec<f64> = trace.evidence.iter().map(|e| e + 1.0).collect();
        let s = sample_loss(&alpha, y, lambda);
        mse += s.mse_term;
        kl += s.kl_term;
        sample_loss_gradient(&alpha, y, lambda, &mut d_e);
        model.backward_evidence(&trace, &d_e, &mut grad);
    }
    Ok((LossBreakdown::new(mse, kl, lambda), grad))
}

fn evidential_loss(model: &ModelState, batch: &[Labeled<'_>], lambda: f64) -> Result<LossBreakdown> {
    let (mut mse, mut kl) = (0.0, 0.0);
    for (x, y) in batch {
        let trace = model.trace(x)?;
        let alpha: Vec<f64> = trace.evidence.iter().map(|e| e + 1.0).collect();
        let s = sample_loss(&alpha, y, lambda);
        mse += s.mse_term;
        kl += s.kl_term;
    }
    Ok(LossBreakdown::new(mse, kl, lambda))
}

/// One pass over shuffled mini-batches at epoch `t`; returns the per-sample
/// mean loss terms observed before each update.
///
/// The optimizer sees the batch-summed gradient divided by the batch size.
/// A learning rate of zero evaluates the loss without touching the model.
pub fn train_epoch(
    model: &mut ModelState,
    data: &[Labeled<'_>],
    t: u32,
    hyper: &TrainHyper,
    rng: &mut EngineRng,
) -> Result<LossBreakdown> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if hyper.batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let lambda = annealing_coefficient(t)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);

    let (mut mse, mut kl) = (0.0, 0.0);
    let mut batch = Vec::with_capacity(hyper.batch_size);
    for chunk in order.chunks(hyper.batch_size) {
        batch.clear();
        batch.extend(chunk.iter().map(|&i| data[i]));
        let loss = if hyper.learning_rate == 0.0 {
            evidential_loss(model, &batch, lambda)?
        } else {
            let (loss, grad) = evidential_loss_and_gradient(model, &batch, lambda)?;
            if loss.is_finite() {
                model.adam_step(&grad, 1.0 / batch.len() as f64, &[ParamGroup::Encoder, ParamGroup::EvidenceHead], hyper)?;
            }
            loss
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("evidential loss at epoch {t}: {loss:?}")));
        }
        mse += loss.mse_term;
        kl += loss.kl_term;
    }
    let n = data.len() as f64;
    Ok(LossBreakdown::new(mse / n, kl / n, lambda))
}

/// Model output for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: usize,
    pub opinion: DirichletOpinion,
    pub predicted_class: usize,
    pub true_label: Option<usize>,
    pub correct: Option<bool>,
}

impl Prediction {
    pub fn uncertainty(&self) -> f64 {
        self.opinion.uncertainty
    }
}

fn predict_one(model: &ModelState, id: usize, x: &[f64], truth: Option<usize>) -> Result<Prediction> {
    let trace = model.trace(x)?;
    let opinion = opinion_from_alpha(trace.evidence.iter().map(|e| e + 1.0).collect());
    let predicted_class = opinion.argmax();
    Ok(Prediction {
        sample_id: id,
        opinion,
        predicted_class,
        true_label: truth,
        correct: truth.map(|t| t == predicted_class),
    })
}

/// Predictions for `xs`; sample ids are positions in the input.
pub fn predict_batch(model: &ModelState, xs: &[&[f64]]) -> Result<Vec<Prediction>> {
    xs.par_iter().enumerate().map(|(i, x)| predict_one(model, i, x, None)).collect()
}

/// Predictions for `(id, features, ground truth)` triples.
pub fn predict_samples(model: &ModelState, samples: &[(usize, &[f64], Option<usize>)]) -> Result<Vec<Prediction>> {
    samples.par_iter().map(|&(id, x, truth)| predict_one(model, id, x, truth)).collect()
}

/// ReLU on/off pattern of every hidden unit (and of the evidence head under
/// ReLU evidence) over a batch.
fn relu_pattern(model: &ModelState, batch: &[Labeled<'_>]) -> Result<Vec<bool>> {
    let mut mask = Vec::new();
    let relu_head = model.config.evidence_activation == EvidenceActivation::Relu;
    for (x, _) in batch {
        let t = model.trace(x)?;
        let n = t.pre.len();
        for z in &t.pre[..n - 1] {
            mask.extend(z.iter().map(|&v| v > 0.0));
        }
        if relu_head {
            mask.extend(t.head_pre.iter().map(|&v| v > 0.0));
        }
    }
    Ok(mask)
}

/// Central-difference step used by [`gradient_check_model`].
pub const GRADIENT_CHECK_STEP: f64 = 1e-5;

/// Worst relative error between the backpropagated gradient of the batch
/// evidential loss and central finite differences over the encoder and
/// evidence-head parameters.
///
/// Coordinates where both gradients are below `1e-8` are skipped, as are
/// coordinates whose `±h` perturbation flips any ReLU unit (the loss is not
/// differentiable across a kink).
pub fn gradient_check_model(model: &ModelState, batch: &[Labeled<'_>], t: u32) -> Result<f64> {
    let lambda = annealing_coefficient(t)?;
    let (_, analytic) = evidential_loss_and_gradient(model, batch, lambda)?;
    let base_pattern = relu_pattern(model, batch)?;
    let mut probe = model.clone();
    let h = GRADIENT_CHECK_STEP;
    let mut worst = 0.0f64;
    let end = model.group_range(ParamGroup::EvidenceHead).end;
    for i in 0..end {
        let orig = model.params[i];
        probe.params[i] = orig + h;
        let plus = evidential_loss(&probe, batch, lambda)?.total;
        let kink_plus = relu_pattern(&probe, batch)? != base_pattern;
        probe.params[i] = orig - h;
        let minus = evidential_loss(&probe, batch, lambda)?.total;
        let kink_minus = relu_pattern(&probe, batch)? != base_pattern;
        probe.params[i] = orig;
        if kink_plus || kink_minus {
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i];
        if a.abs() < 1e-8 && numeric.abs() < 1e-8 {
            continue;
        }
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()));
    }
    Ok(worst)
}

/// Which pipeline stage produced a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Initialized,
    Pretrained,
    Finetuned,
    Distilled,
}

pub const CHECKPOINT_FORMAT: &str = "evidal-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    stage: Stage,
    seed: u64,
    config: NetworkConfig,
    params: Vec<f64>,
    optimizer: AdamState,
}

/// Writes a JSON checkpoint; floats are written in shortest round-trip form
/// so loading reproduces every parameter bit for bit.
pub fn save_checkpoint(model: &ModelState, stage: Stage, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        stage,
        seed: model.config.seed,
        config: model.config.clone(),
        params: model.params.clone(),
        optimizer: model.optimizer.clone(),
    };
    fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelState, Stage)> {
    let text = fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!("unsupported checkpoint {} v{}", file.format, file.version)));
    }
    let mut model = init_model(&file.config)?;
    let n = model.num_params();
    if file.params.len() != n || file.optimizer.m.len() != n || file.optimizer.v.len() != n {
        return Err(Error::Data("checkpoint parameter count does not match its config".into()));
    }
    if file.params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Data("checkpoint holds non-finite parameters".into()));
    }
    model.params = file.params;
    model.optimizer = file.optimizer;
    Ok((model, file.stage))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn small_config(act: EvidenceActivation, seed: u64) -> NetworkConfig {
        NetworkConfig {
            input_dim: 4,
            hidden_dims: vec![8, 8],
            embedding_dim: 6,
            projection_dim: 4,
            num_classes: 3,
            evidence_activation: act,
            seed,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_model(&small_config(EvidenceActivation::Relu, 3)).unwrap();
        let b = init_model(&small_config(EvidenceActivation::Relu, 3)).unwrap();
        let c = init_model(&small_config(EvidenceActivation::Relu, 4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params(), c.params());
        let head = a.group_range(ParamGroup::EvidenceHead);
        // biases start at zero
        assert!(a.params()[head.end - 3..head.end].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn degenerate_depth_has_single_encoder_layer() {
        let mut cfg = small_config(EvidenceActivation::Relu, 1);
        cfg.hidden_dims.clear();
        let m = init_model(&cfg).unwrap();
        assert_eq!(m.group_range(ParamGroup::Encoder), 0..(4 + 1) * 6);
        let (emb, ev) = m.forward(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(emb.len(), 6);
        assert_eq!(ev.num_classes(), 3);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = small_config(EvidenceActivation::Relu, 1);
        cfg.num_classes = 1;
        assert!(init_model(&cfg).is_err());
        let mut cfg = small_config(EvidenceActivation::Relu, 1);
        cfg.hidden_dims = vec![0];
        assert!(init_model(&cfg).is_err());
    }

    #[test]
    fn zero_weights_give_full_uncertainty() {
        let mut m = init_model(&small_config(EvidenceActivation::Relu, 1)).unwrap();
        let n = m.num_params();
        m.set_params(vec![0.0; n]).unwrap();
        let (_, ev) = m.forward(&[0.3, -1.0, 2.0, 0.5]).unwrap();
        assert!(ev.as_slice().iter().all(|&e| e == 0.0));
        let p = predict_batch(&m, &[&[0.3, -1.0, 2.0, 0.5]]).unwrap();
        assert_eq!(p[0].uncertainty(), 1.0);
        assert_eq!(p[0].predicted_class, 0);
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        let m = init_model(&small_config(EvidenceActivation::Relu, 1)).unwrap();
        assert!(matches!(m.forward(&[1.0; 3]), Err(Error::Dimension { expected: 4, got: 3 })));
        assert!(predict_batch(&m, &[&[1.0; 5]]).is_err());
        assert!(predict_batch(&m, &[]).unwrap().is_empty());
    }

    #[test]
    fn evidence_is_non_negative() {
        for act in [EvidenceActivation::Relu, EvidenceActivation::Softplus] {
            let m = init_model(&small_config(act, 9)).unwrap();
            let mut rng = seed::rng(0, "test", 0);
            for _ in 0..200 {
                let x: Vec<f64> = (0..4).map(|_| rng.random_range(-10.0..10.0)).collect();
                let (_, ev) = m.forward(&x).unwrap();
                assert!(ev.as_slice().iter().all(|&e| e >= 0.0));
            }
        }
    }

    #[test]
    fn prediction_from_known_evidence() {
        // A network whose head bias alone produces evidence (3, 1).
        let mut cfg = small_config(EvidenceActivation::Relu, 1);
        cfg.num_classes = 2;
        let mut m = init_model(&cfg).unwrap();
        let mut p = vec![0.0; m.num_params()];
        let head = m.group_range(ParamGroup::EvidenceHead);
        p[head.end - 2] = 3.0;
        p[head.end - 1] = 1.0;
        m.set_params(p.clone()).unwrap();
        let pred = &predict_batch(&m, &[&[1.0, 1.0, 1.0, 1.0]]).unwrap()[0];
        assert_eq!(pred.predicted_class, 0);
        assert!((pred.uncertainty() - 1.0 / 3.0).abs() < 1e-15);

        p[head.end - 1] = 3.0;
        m.set_params(p).unwrap();
        assert_eq!(predict_batch(&m, &[&[0.0; 4]]).unwrap()[0].predicted_class, 0);
    }

    fn random_batch(n: usize, dim: usize, k: usize, seed_: u64) -> (Vec<Vec<f64>>, Vec<OneHotLabel>) {
        let mut rng = EngineRng::seed_from_u64(seed_);
        let xs = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let ys = (0..n).map(|_| OneHotLabel::new(rng.random_range(0..k), k).unwrap()).collect();
        (xs, ys)
    }

    #[test]
    fn backprop_matches_finite_differences() {
        for act in [EvidenceActivation::Softplus, EvidenceActivation::Relu] {
            let m = init_model(&small_config(act, 5)).unwrap();
            let (xs, ys) = random_batch(6, 4, 3, 11);
            let batch: Vec<Labeled> = xs.iter().map(|x| x.as_slice()).zip(ys).collect();
            for t in [1, 5, 10, 50] {
                let err = gradient_check_model(&m, &batch, t).unwrap();
                assert!(err <= 1e-4, "{act:?} t={t}: {err}");
            }
        }
    }

    #[test]
    fn zero_learning_rate_leaves_model_unchanged() {
        let mut m = init_model(&small_config(EvidenceActivation::Softplus, 2)).unwrap();
        let before = m.clone();
        let (xs, ys) = random_batch(20, 4, 3, 1);
        let batch: Vec<Labeled> = xs.iter().map(|x| x.as_slice()).zip(ys).collect();
        let hyper = TrainHyper { learning_rate: 0.0, ..TrainHyper::default() };
        let loss = train_epoch(&mut m, &batch, 1, &hyper, &mut seed::rng(0, "shuffle", 0)).unwrap();
        assert_eq!(m, before);
        assert!(loss.total > 0.0);
        assert!(train_epoch(&mut m, &[], 1, &hyper, &mut seed::rng(0, "s", 0)).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let (xs, ys) = random_batch(50, 4, 3, 8);
        let batch: Vec<Labeled> = xs.iter().map(|x| x.as_slice()).zip(ys).collect();
        let run = || {
            let mut m = init_model(&small_config(EvidenceActivation::Relu, 2)).unwrap();
            let mut rng = seed::rng(1, "shuffle", 0);
            for t in 1..=5 {
                train_epoch(&mut m, &batch, t, &TrainHyper { batch_size: 16, ..TrainHyper::default() }, &mut rng).unwrap();
            }
            m
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let mut m = init_model(&small_config(EvidenceActivation::Softplus, 77)).unwrap();
        let (xs, ys) = random_batch(30, 4, 3, 2);
        let batch: Vec<Labeled> = xs.iter().map(|x| x.as_slice()).zip(ys).collect();
        train_epoch(&mut m, &batch, 1, &TrainHyper::default(), &mut seed::rng(0, "s", 0)).unwrap();
        save_checkpoint(&m, Stage::Finetuned, &path).unwrap();
        let (loaded, stage) = load_checkpoint(&path).unwrap();
        assert_eq!(stage, Stage::Finetuned);
        assert_eq!(loaded, m);
        for (a, b) in loaded.params().iter().zip(m.params()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
