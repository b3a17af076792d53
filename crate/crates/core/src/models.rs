//! Small dense classifiers with hand-written backward passes.
//!
//! A [`Classifier`] is a stack of affine layers with rectifiers in between.
//! Gradients of the attack losses with respect to the *input* are exact
//! reverse-mode derivatives; parameter gradients are only used for
//! training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities below this are clamped before taking logs.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_dim: usize,
    /// Widths of the hidden rectifier layers; empty for a linear model.
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl ArchSpec {
    pub fn linear(input_dim: usize, classes: usize) -> Self {
        Self {
            input_dim,
            hidden: Vec::new(),
            classes,
        }
    }

    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize) -> Self {
        Self {
            input_dim,
            hidden: hidden.to_vec(),
            classes,
        }
    }

    /// Layer sizes from input to output.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.hidden.len() + 2);
        sizes.push(self.input_dim);
        sizes.extend(&self.hidden);
        sizes.push(self.classes);
        sizes
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("input_dim", "must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::invalid("classes", "need at least two classes"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden", "layer widths must be positive"));
        }
        Ok(())
    }
}

/// Affine map `y = W x + b` with `W` stored row-major (`outputs x inputs`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    /// `W^T g`.
    fn transpose_apply(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.inputs];
        for (row, &gi) in self.weights.chunks(self.inputs).zip(g) {
            if gi == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * gi;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    layers: Vec<Layer>,
    /// Training-set accuracy recorded by the trainer, if any.
    pub train_accuracy: Option<f64>,
}

/// Output of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Prediction {
    pub fn class(&self) -> usize {
        argmax(&self.logits)
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Cached activations of one forward pass, for backprop.
struct Trace {
    /// Input to each layer (post-rectifier outputs of the previous one).
    inputs: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

impl Classifier {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("layer list"));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(Error::DimensionMismatch {
                    what: "layer chain",
                    expected: pair[0].outputs,
                    actual: pair[1].inputs,
                });
            }
        }
        for layer in &layers {
            if layer.weights.len() != layer.inputs * layer.outputs || layer.bias.len() != layer.outputs {
                return Err(Error::DimensionMismatch {
                    what: "layer parameters",
                    expected: layer.inputs * layer.outputs,
                    actual: layer.weights.len(),
                });
            }
        }
        Ok(Self {
            layers,
            train_accuracy: None,
        })
    }

    /// Model with every parameter zero.
    pub fn zeros(arch: &ArchSpec) -> Result<Self> {
        arch.validate()?;
        let sizes = arch.sizes();
        Self::new(sizes.windows(2).map(|p| Layer::zeros(p[0], p[1])).collect())
    }

    /// He-style Gaussian initialization from a seeded stream.
    pub fn init(arch: &ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes = arch.sizes();
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(k, p)| {
                let gain = if k == last { 1.0 } else { 2.0 };
                let std = (gain / p[0] as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                Layer {
                    inputs: p[0],
                    outputs: p[1],
                    weights: (0..p[0] * p[1]).map(|_| normal.sample(&mut rng)).collect(),
                    bias: vec![0.0; p[1]],
                }
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn classes(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    pub fn arch(&self) -> ArchSpec {
        ArchSpec {
            input_dim: self.input_dim(),
            hidden: self.layers[..self.layers.len() - 1].iter().map(|l| l.outputs).collect(),
            classes: self.classes(),
        }
    }

    /// Multiplies the last layer (and so every logit) by `factor`. The
    /// predicted class is unchanged for positive factors.
    pub fn scale_logits(&mut self, factor: f64) {
        let last = self.layers.last_mut().unwrap();
        last.weights.iter_mut().for_each(|w| *w *= factor);
        last.bias.iter_mut().for_each(|b| *b *= factor);
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "model input",
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = layer.apply(&h);
            inputs.push(h);
            if k < last {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = z;
        }
        Trace { inputs, logits: h }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Prediction> {
        self.check_input(x)?;
        let logits = self.trace(x).logits;
        let probs = softmax(&logits);
        Ok(Prediction { logits, probs })
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(self.forward(x)?.class())
    }

    /// Pulls a logit-space gradient back to the input.
    fn input_vjp(&self, trace: &Trace, dlogits: &[f64]) -> Vec<f64> {
        let mut g = dlogits.to_vec();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let mut up = layer.transpose_apply(&g);
            if k > 0 {
                // Rectifier mask: the layer input is the previous output.
                for (u, &a) in up.iter_mut().zip(&trace.inputs[k]) {
                    if a <= 0.0 {
                        *u = 0.0;
                    }
                }
            }
            g = up;
        }
        g
    }

    /// Accumulates parameter gradients for a logit-space upstream gradient.
    fn param_vjp(&self, trace: &Trace, dlogits: &[f64], grads: &mut [Layer]) {
        let mut g = dlogits.to_vec();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.inputs[k];
            let acc = &mut grads[k];
            for (o, &gi) in g.iter().enumerate() {
                acc.bias[o] += gi;
                if gi != 0.0 {
                    let row = &mut acc.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (r, &a) in row.iter_mut().zip(input) {
                        *r += gi * a;
                    }
                }
            }
            if k > 0 {
                let mut up = layer.transpose_apply(&g);
                for (u, &a) in up.iter_mut().zip(input) {
                    if a <= 0.0 {
                        *u = 0.0;
                    }
                }
                g = up;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LossKind {
    /// Cross-entropy against the label.
    Ce,
    /// `KL(reference || prediction)` with the benign prediction as reference.
    Kl,
    /// Margin of the best wrong logit over the true one, plus `kappa`.
    Cw { kappa: f64 },
}

impl LossKind {
    pub fn cw() -> Self {
        LossKind::Cw { kappa: 0.0 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Kl => "kl",
            LossKind::Cw { .. } => "cw",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ce" => Ok(LossKind::Ce),
            "kl" => Ok(LossKind::Kl),
            "cw" => Ok(LossKind::cw()),
            other => Err(Error::invalid("loss", format!("unknown loss kind `{other}`"))),
        }
    }
}

/// What a loss is measured against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTarget {
    pub label: usize,
    /// Benign prediction, required by [`LossKind::Kl`].
    pub reference: Option<Vec<f64>>,
}

impl LossTarget {
    pub fn label(label: usize) -> Self {
        Self { label, reference: None }
    }

    pub fn with_reference(label: usize, reference: Vec<f64>) -> Self {
        Self {
            label,
            reference: Some(reference),
        }
    }
}

fn check_target(target: &LossTarget, kind: LossKind, classes: usize) -> Result<()> {
    if target.label >= classes {
        return Err(Error::invalid(
            "label",
            format!("{} out of range for {classes} classes", target.label),
        ));
    }
    if matches!(kind, LossKind::Kl) {
        match &target.reference {
            None => {
                return Err(Error::invalid(
                    "reference",
                    "KL loss needs benign reference probabilities",
                ))
            }
            Some(r) if r.len() != classes => {
                return Err(Error::DimensionMismatch {
                    what: "reference probabilities",
                    expected: classes,
                    actual: r.len(),
                })
            }
            _ => {}
        }
    }
    Ok(())
}

/// Loss value and its gradient with respect to the logits.
pub(crate) fn logit_loss(logits: &[f64], probs: &[f64], target: &LossTarget, kind: LossKind) -> (f64, Vec<f64>) {
    let y = target.label;
    let m = logits.len();
    match kind {
        LossKind::Ce => {
            let p = probs[y];
            if p < LOG_CLAMP {
                (-LOG_CLAMP.ln(), vec![0.0; m])
            } else {
                let mut g = probs.to_vec();
                g[y] -= 1.0;
                (-p.ln(), g)
            }
        }
        LossKind::Kl => {
            let reference = target.reference.as_deref().expect("checked reference");
            let mut value = 0.0;
            let mut free_mass = 0.0;
            let mut g = vec![0.0; m];
            for k in 0..m {
                let r = reference[k];
                if r <= 0.0 {
                    continue;
                }
                let p = probs[k].max(LOG_CLAMP);
                value += r * (r.max(LOG_CLAMP).ln() - p.ln());
                if probs[k] >= LOG_CLAMP {
                    free_mass += r;
                    g[k] -= r;
                }
            }
            for (gk, &pk) in g.iter_mut().zip(probs) {
                *gk += pk * free_mass;
            }
            (value, g)
        }
        LossKind::Cw { kappa } => {
            let runner_up = (0..m)
                .filter(|&k| k != y)
                .fold(None, |best: Option<usize>, k| match best {
                    Some(b) if logits[b] >= logits[k] => Some(b),
                    _ => Some(k),
                })
                .expect("at least two classes");
            let mut g = vec![0.0; m];
            g[runner_up] = 1.0;
            g[y] = -1.0;
            (logits[runner_up] - logits[y] + kappa, g)
        }
    }
}

pub fn loss(model: &Classifier, x: &[f64], target: &LossTarget, kind: LossKind) -> Result<f64> {
    Ok(loss_and_grad(model, x, target, kind)?.0)
}

pub fn grad_input(model: &Classifier, x: &[f64], target: &LossTarget, kind: LossKind) -> Result<Vec<f64>> {
    Ok(loss_and_grad(model, x, target, kind)?.1)
}

/// Loss and its exact gradient with respect to the input.
pub fn loss_and_grad(model: &Classifier, x: &[f64], target: &LossTarget, kind: LossKind) -> Result<(f64, Vec<f64>)> {
    model.check_input(x)?;
    check_target(target, kind, model.classes())?;
    let trace = model.trace(x);
    let probs = softmax(&trace.logits);
    let (value, dlogits) = logit_loss(&trace.logits, &probs, target, kind);
    Ok((value, model.input_vjp(&trace, &dlogits)))
}

/// Mean-probability ensemble: prediction of the averaged softmax outputs.
pub fn ensemble_probs(members: &[Classifier], x: &[f64]) -> Result<Vec<f64>> {
    let first = members.first().ok_or(Error::Empty("ensemble"))?;
    let mut avg = vec![0.0; first.classes()];
    for model in members {
        for (a, p) in avg.iter_mut().zip(model.forward(x)?.probs) {
            *a += p;
        }
    }
    let n = members.len() as f64;
    avg.iter_mut().for_each(|a| *a /= n);
    Ok(avg)
}

pub fn ensemble_predict(members: &[Classifier], x: &[f64]) -> Result<usize> {
    Ok(argmax(&ensemble_probs(members, x)?))
}

/// Cross-entropy of the mean-probability ensemble and its input gradient.
pub fn ensemble_ce_loss_and_grad(members: &[Classifier], x: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    let first = members.first().ok_or(Error::Empty("ensemble"))?;
    if label >= first.classes() {
        return Err(Error::invalid("label", "out of range"));
    }
    let n = members.len() as f64;
    let mut traces = Vec::with_capacity(members.len());
    let mut avg_y = 0.0;
    for model in members {
        model.check_input(x)?;
        let trace = model.trace(x);
        let probs = softmax(&trace.logits);
        avg_y += probs[label] / n;
        traces.push((trace, probs));
    }
    if avg_y < LOG_CLAMP {
        return Ok((-LOG_CLAMP.ln(), vec![0.0; x.len()]));
    }
    let mut grad = vec![0.0; x.len()];
    for (model, (trace, probs)) in members.iter().zip(&traces) {
        // d(-log avg_y)/dz_i = -(1 / (n avg_y)) p_y (e_y - p)
        let scale = -probs[label] / (n * avg_y);
        let dlogits: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(k, &p)| scale * (if k == label { 1.0 } else { 0.0 } - p))
            .collect();
        for (g, v) in grad.iter_mut().zip(model.input_vjp(trace, &dlogits)) {
            *g += v;
        }
    }
    Ok((-avg_y.ln(), grad))
}

/// A labeled set of feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub dim: usize,
    pub classes: usize,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(dim: usize, classes: usize, inputs: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                what: "labels",
                expected: inputs.len(),
                actual: labels.len(),
            });
        }
        if let Some(bad) = inputs.iter().find(|x| x.len() != dim) {
            return Err(Error::DimensionMismatch {
                what: "sample",
                expected: dim,
                actual: bad.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::invalid("labels", format!("label {bad} out of range")));
        }
        Ok(Self {
            dim,
            classes,
            inputs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Samples `range` as a new dataset.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            dim: self.dim,
            classes: self.classes,
            inputs: self.inputs[range.clone()].to_vec(),
            labels: self.labels[range].to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.05,
            batch_size: 32,
            seed: 0,
        }
    }
}

pub fn accuracy(model: &Classifier, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut correct = 0usize;
    for (x, &y) in data.inputs.iter().zip(&data.labels) {
        if model.predict(x)? == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// One averaged cross-entropy SGD step on a batch of `(input, label)` pairs.
pub(crate) fn sgd_step(model: &mut Classifier, batch: &[(&[f64], usize)], lr: f64) {
    let mut grads: Vec<Layer> = model.layers.iter().map(|l| Layer::zeros(l.inputs, l.outputs)).collect();
    for &(x, y) in batch {
        let trace = model.trace(x);
        let probs = softmax(&trace.logits);
        let (_, dlogits) = logit_loss(&trace.logits, &probs, &LossTarget::label(y), LossKind::Ce);
        model.param_vjp(&trace, &dlogits, &mut grads);
    }
    let scale = lr / batch.len() as f64;
    for (layer, g) in model.layers.iter_mut().zip(&grads) {
        for (w, gw) in layer.weights.iter_mut().zip(&g.weights) {
            *w -= scale * gw;
        }
        for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
            *b -= scale * gb;
        }
    }
}

/// Batch order for one epoch, drawn from the trainer's stream.
pub(crate) fn epoch_order(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Minibatch SGD on cross-entropy. Deterministic given `cfg.seed`.
pub fn train_classifier(data: &Dataset, arch: &ArchSpec, cfg: &TrainConfig) -> Result<Classifier> {
    if data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    if arch.input_dim != data.dim || arch.classes != data.classes {
        return Err(Error::DimensionMismatch {
            what: "architecture vs data",
            expected: data.dim,
            actual: arch.input_dim,
        });
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size", "must be positive"));
    }
    let mut model = Classifier::init(arch, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    for _ in 0..cfg.epochs {
        let order = epoch_order(data.len(), &mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&[f64], usize)> = chunk
                .iter()
                .map(|&i| (data.inputs[i].as_slice(), data.labels[i]))
                .collect();
            sgd_step(&mut model, &batch, cfg.lr);
        }
    }
    model.train_accuracy = Some(accuracy(&model, data)?);
    Ok(model)
}

/// Keeps the shuffling stream apart from the initialization stream.
pub(crate) const SHUFFLE_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;
