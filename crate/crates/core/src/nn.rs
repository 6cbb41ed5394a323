//! Dense feedforward networks over a flat parameter vector.
//!
//! Layout is layer-major: for each layer the `out x in` weight matrix
//! (row-major, one row per output unit) followed by its `out` biases.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::detrng::{derive_key, RngStream};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(format!("unknown activation `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl DenseLayer {
    fn weight_count(&self) -> usize {
        self.inputs * self.outputs
    }

    fn param_count(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }
}

/// Layer stack of a dense network; the loss is always softmax cross-entropy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    layers: Vec<DenseLayer>,
}

impl ArchSpec {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("layers", "at least one layer is required"));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.inputs == 0 || layer.outputs == 0 {
                return Err(Error::invalid("layers", format!("layer {i} has a zero dimension")));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs != pair[1].inputs {
                return Err(Error::invalid(
                    "layers",
                    format!(
                        "layer {i} outputs {} but layer {} takes {}",
                        pair[0].outputs,
                        i + 1,
                        pair[1].inputs
                    ),
                ));
            }
        }
        if layers.last().map(|l| l.outputs) < Some(2) {
            return Err(Error::invalid("layers", "need at least two output classes"));
        }
        Ok(Self { layers })
    }

    /// Hidden layers share `activation`; the output layer is linear.
    pub fn mlp(input: usize, hidden: &[usize], classes: usize, activation: Activation) -> Result<Self> {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input;
        for &width in hidden {
            layers.push(DenseLayer {
                inputs: prev,
                outputs: width,
                activation,
            });
            prev = width;
        }
        layers.push(DenseLayer {
            inputs: prev,
            outputs: classes,
            activation: Activation::Identity,
        });
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn classes(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    /// `[start, end)` of each layer's block within the flat vector.
    pub fn layer_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.layers
            .iter()
            .map(|l| {
                let r = start..start + l.param_count();
                start = r.end;
                r
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: Arc<ArchSpec>,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn new(arch: Arc<ArchSpec>, values: Vec<f64>) -> Result<Self> {
        if values.len() != arch.param_count() {
            return Err(Error::DimensionMismatch {
                context: "model parameters",
                expected: arch.param_count(),
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("values", "parameters must be finite"));
        }
        Ok(Self { arch, values })
    }

    pub fn zeros(arch: Arc<ArchSpec>) -> Self {
        let n = arch.param_count();
        Self {
            arch,
            values: vec![0.0; n],
        }
    }

    /// Same architecture, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.arch.clone(), values)
    }

    pub fn arch(&self) -> &Arc<ArchSpec> {
        &self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// FNV-1a over the IEEE bit patterns. Equal fingerprints are how nodes
    /// confirm they hold bit-identical models.
    pub fn fingerprint(&self) -> u64 {
        fingerprint_slice(&self.values)
    }
}

pub fn fingerprint_slice(values: &[f64]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for v in values {
        for byte in v.to_bits().to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
    }
    h
}

/// Weights ~ N(0, 1/in), biases zero.
pub fn init_model(arch: &Arc<ArchSpec>, seed: u64) -> ModelParams {
    let mut values = vec![0.0; arch.param_count()];
    let mut rng = RngStream::new(derive_key(seed, 0x1417));
    for (layer, range) in arch.layers().iter().zip(arch.layer_ranges()) {
        let scale = 1.0 / (layer.inputs as f64).sqrt();
        for w in &mut values[range.start..range.start + layer.weight_count()] {
            *w = rng.gaussian() * scale;
        }
    }
    ModelParams {
        arch: arch.clone(),
        values,
    }
}

/// A minibatch: row-major inputs plus integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, labels: Vec<usize>, dim: usize) -> Result<Self> {
        if dim == 0 || inputs.len() != labels.len() * dim {
            return Err(Error::DimensionMismatch {
                context: "batch inputs",
                expected: labels.len() * dim,
                actual: inputs.len(),
            });
        }
        Ok(Self { inputs, labels, dim })
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn check_rows(arch: &ArchSpec, inputs: &[f64], labels: &[usize], dim: usize) -> Result<()> {
    if dim != arch.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "input width",
            expected: arch.input_dim(),
            actual: dim,
        });
    }
    if labels.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= arch.classes()) {
        return Err(Error::invalid(
            "labels",
            format!("label {bad} outside [0, {})", arch.classes()),
        ));
    }
    debug_assert_eq!(inputs.len(), labels.len() * dim);
    Ok(())
}

/// Runs the network, keeping every layer's output for backprop.
/// `acts[0]` is the input; `acts[l + 1]` is layer `l`'s output.
fn forward(arch: &ArchSpec, params: &[f64], inputs: &[f64], rows: usize) -> Vec<Vec<f64>> {
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(arch.layers().len() + 1);
    acts.push(inputs.to_vec());
    for (layer, range) in arch.layers().iter().zip(arch.layer_ranges()) {
        let block = &params[range];
        let (weights, biases) = block.split_at(layer.weight_count());
        let prev = acts.last().unwrap();
        let mut out = vec![0.0; rows * layer.outputs];
        for r in 0..rows {
            let x = &prev[r * layer.inputs..(r + 1) * layer.inputs];
            let y = &mut out[r * layer.outputs..(r + 1) * layer.outputs];
            for (o, yo) in y.iter_mut().enumerate() {
                let w = &weights[o * layer.inputs..(o + 1) * layer.inputs];
                let z = biases[o] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                *yo = layer.activation.apply(z);
            }
        }
        acts.push(out);
    }
    acts
}

/// Numerically stable `logsumexp(z) - z[label]`, plus softmax into `probs`.
fn cross_entropy_row(logits: &[f64], label: usize, probs: Option<&mut [f64]>) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    if let Some(p) = probs {
        for (pi, z) in p.iter_mut().zip(logits) {
            *pi = (z - lse).exp();
        }
    }
    lse - logits[label]
}

fn mean_loss(arch: &ArchSpec, params: &[f64], inputs: &[f64], labels: &[usize]) -> f64 {
    let acts = forward(arch, params, inputs, labels.len());
    let logits = acts.last().unwrap();
    let c = arch.classes();
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(r, &y)| cross_entropy_row(&logits[r * c..(r + 1) * c], y, None))
        .sum();
    total / labels.len() as f64
}

/// Mean cross-entropy of an arbitrary parameter vector on `batch`.
pub fn loss(model: &ModelParams, batch: &Batch) -> Result<f64> {
    check_rows(&model.arch, &batch.inputs, &batch.labels, batch.dim)?;
    Ok(mean_loss(&model.arch, &model.values, &batch.inputs, &batch.labels))
}

/// Mean cross-entropy over the batch and its exact gradient.
pub fn loss_and_grad(model: &ModelParams, batch: &Batch) -> Result<(f64, Vec<f64>)> {
    let arch = &*model.arch;
    check_rows(arch, &batch.inputs, &batch.labels, batch.dim)?;
    let rows = batch.len();
    let acts = forward(arch, &model.values, &batch.inputs, rows);
    let c = arch.classes();
    let inv_rows = 1.0 / rows as f64;

    // dL/d(output of last layer)
    let logits = acts.last().unwrap();
    let mut upstream = vec![0.0; rows * c];
    let mut total = 0.0;
    for (r, &y) in batch.labels.iter().enumerate() {
        let probs = &mut upstream[r * c..(r + 1) * c];
        total += cross_entropy_row(&logits[r * c..(r + 1) * c], y, Some(probs));
        probs[y] -= 1.0;
        probs.iter_mut().for_each(|p| *p *= inv_rows);
    }

    let mut grad = vec![0.0; model.values.len()];
    let ranges = arch.layer_ranges();
    for (l, layer) in arch.layers().iter().enumerate().rev() {
        let out = &acts[l + 1];
        let prev = &acts[l];
        let delta: Vec<f64> = upstream
            .iter()
            .zip(out)
            .map(|(g, a)| g * layer.activation.derivative_from_output(*a))
            .collect();

        let block = &mut grad[ranges[l].clone()];
        let (gw, gb) = block.split_at_mut(layer.weight_count());
        for r in 0..rows {
            let d = &delta[r * layer.outputs..(r + 1) * layer.outputs];
            let x = &prev[r * layer.inputs..(r + 1) * layer.inputs];
            for (o, &dv) in d.iter().enumerate() {
                gb[o] += dv;
                let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                for (g, xi) in row.iter_mut().zip(x) {
                    *g += dv * xi;
                }
            }
        }

        if l > 0 {
            let weights = &model.values[ranges[l].start..ranges[l].start + layer.weight_count()];
            let mut next = vec![0.0; rows * layer.inputs];
            for r in 0..rows {
                let d = &delta[r * layer.outputs..(r + 1) * layer.outputs];
                let dst = &mut next[r * layer.inputs..(r + 1) * layer.inputs];
                for (o, &dv) in d.iter().enumerate() {
                    let w = &weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (t, wi) in dst.iter_mut().zip(w) {
                        *t += dv * wi;
                    }
                }
            }
            upstream = next;
        }
    }
    Ok((total * inv_rows, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

/// Accuracy (argmax, ties to the lowest class) and mean loss over a dataset.
pub fn evaluate(model: &ModelParams, testset: &Dataset) -> Result<Evaluation> {
    if testset.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let arch = &*model.arch;
    check_rows(arch, testset.inputs(), testset.labels(), testset.dim())?;
    let c = arch.classes();
    let mut correct = 0usize;
    let mut total = 0.0;
    const CHUNK: usize = 1024;
    for start in (0..testset.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(testset.len());
        let inputs = &testset.inputs()[start * testset.dim()..end * testset.dim()];
        let acts = forward(arch, &model.values, inputs, end - start);
        let logits = acts.last().unwrap();
        for (r, &y) in testset.labels()[start..end].iter().enumerate() {
            let row = &logits[r * c..(r + 1) * c];
            let mut best = 0;
            for k in 1..c {
                if row[k] > row[best] {
                    best = k;
                }
            }
            if best == y {
                correct += 1;
            }
            total += cross_entropy_row(row, y, None);
        }
    }
    let n = testset.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        loss: total / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerCfg {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Number of gradient steps per round.
    pub local_steps: usize,
    pub batch_size: usize,
}

impl OptimizerCfg {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::invalid("learning_rate", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum", "must be in [0, 1)"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay", "must be >= 0"));
        }
        if self.local_steps == 0 {
            return Err(Error::invalid("local_steps", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be >= 1"));
        }
        Ok(())
    }

    /// Samples consumed by one round of local training on a shard of `shard_len`.
    pub fn samples_consumed(&self, shard_len: usize) -> usize {
        (self.local_steps * self.batch_size.min(shard_len)).min(shard_len)
    }
}

/// Seeded minibatch order: one permutation per epoch, successive slices of
/// `batch_size`; a short tail is dropped and the next epoch reshuffles.
#[derive(Debug, Clone)]
pub struct BatchSchedule {
    key: u64,
    shard_len: usize,
    batch_size: usize,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSchedule {
    pub fn new(seed: u64, shard_len: usize, batch_size: usize) -> Result<Self> {
        if shard_len == 0 {
            return Err(Error::Empty("shard"));
        }
        if batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be >= 1"));
        }
        let key = derive_key(seed, 0xBA7C);
        Ok(Self {
            key,
            shard_len,
            batch_size: batch_size.min(shard_len),
            epoch: 0,
            order: RngStream::new(derive_key(key, 0)).permutation(shard_len),
            cursor: 0,
        })
    }

    pub fn next_indices(&mut self) -> &[usize] {
        if self.cursor + self.batch_size > self.shard_len {
            self.epoch += 1;
            self.order = RngStream::new(derive_key(self.key, self.epoch)).permutation(self.shard_len);
            self.cursor = 0;
        }
        let start = self.cursor;
        self.cursor += self.batch_size;
        &self.order[start..self.cursor]
    }

    pub fn next_batch(&mut self, shard: &Dataset) -> Batch {
        let indices = self.next_indices().to_vec();
        shard.gather(&indices)
    }
}

/// Heavy-ball SGD: `v <- m*v - lr*(g + wd*theta); theta <- theta + v`.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    cfg: OptimizerCfg,
    velocity: Vec<f64>,
}

impl SgdMomentum {
    pub fn new(cfg: OptimizerCfg, len: usize) -> Self {
        Self {
            cfg,
            velocity: vec![0.0; len],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        let OptimizerCfg {
            learning_rate: lr,
            momentum: m,
            weight_decay: wd,
            ..
        } = self.cfg;
        for ((p, g), v) in params.iter_mut().zip(grad).zip(&mut self.velocity) {
            let g = if wd > 0.0 { g + wd * *p } else { *g };
            *v = m * *v - lr * g;
            *p += *v;
        }
    }
}

/// Runs `cfg.local_steps` momentum-SGD steps from `model` and returns the result.
pub fn local_train(model: &ModelParams, shard: &Dataset, cfg: &OptimizerCfg, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut schedule = BatchSchedule::new(seed, shard.len(), cfg.batch_size)?;
    let mut opt = SgdMomentum::new(*cfg, model.len());
    let mut current = model.clone();
    for _ in 0..cfg.local_steps {
        let batch = schedule.next_batch(shard);
        let (_, grad) = loss_and_grad(&current, &batch)?;
        opt.step(&mut current.values, &grad);
    }
    Ok(current)
}
