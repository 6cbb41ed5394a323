//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use evofed::datasets::{noniid_split, synth_blobs, Dataset};
use evofed::detrng::{PerturbationSet, RngStream};
use evofed::federation::{FederatedData, FederationConfig, Method, StepDecay};
use evofed::fitness_codec::CodecScheme;
use evofed::nn::{self, Activation, ArchSpec, Batch, ModelParams, OptimizerCfg};
use evofed::pbge::PartitionLayout;

/// `-2 alpha C_k (theta - target)[k]` with `C_k` built as a dense matrix
/// from materialized perturbations.
pub fn dense_step_oracle(
    theta: &[f64],
    target: &[f64],
    set: &PerturbationSet,
    layout: &PartitionLayout,
    alpha: f64,
) -> Vec<f64> {
    let eps = set.materialize();
    let n = eps.len() as f64;
    let mut out = vec![0.0; theta.len()];
    for k in 0..layout.partitions() {
        let r = layout.range(k);
        let d = r.len();
        let mut c = vec![0.0; d * d];
        for e in &eps {
            let seg = &e[r.clone()];
            for a in 0..d {
                for b in 0..d {
                    c[a * d + b] += seg[a] * seg[b] / n;
                }
            }
        }
        for a in 0..d {
            let mut acc = 0.0;
            for b in 0..d {
                acc += c[a * d + b] * (theta[r.start + b] - target[r.start + b]);
            }
            out[r.start + a] = -2.0 * alpha * acc;
        }
    }
    out
}

/// Central finite differences of the batch loss.
pub fn fd_gradient(model: &ModelParams, batch: &Batch, h: f64) -> Vec<f64> {
    let mut values = model.values().to_vec();
    (0..values.len())
        .map(|j| {
            let orig = values[j];
            values[j] = orig + h;
            let up = nn::loss(&model.with_values(values.clone()).unwrap(), batch).unwrap();
            values[j] = orig - h;
            let down = nn::loss(&model.with_values(values.clone()).unwrap(), batch).unwrap();
            values[j] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn gaussian_vec(rng: &mut RngStream, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| scale * rng.gaussian()).collect()
}

pub fn random_params(arch: &Arc<ArchSpec>, rng: &mut RngStream, scale: f64) -> ModelParams {
    ModelParams::new(arch.clone(), gaussian_vec(rng, arch.param_count(), scale)).unwrap()
}

/// Small blob problem split across `clients` label-skewed shards.
pub fn blob_federation(seed: u64, clients: usize, hidden: &[usize]) -> FederatedData {
    let all = synth_blobs(seed, 400, 2, 4, 0.08).unwrap();
    let (train, test) = all.split_holdout(0.2, seed ^ 1).unwrap();
    let plan = noniid_split(&train, clients, 2, seed ^ 2).unwrap();
    let shards: Vec<Arc<Dataset>> = plan.materialize(&train).unwrap().into_iter().map(Arc::new).collect();
    FederatedData {
        arch: Arc::new(ArchSpec::mlp(2, hidden, 4, Activation::Relu).unwrap()),
        shards,
        train: Arc::new(train),
        test: Arc::new(test),
    }
}

pub fn fed_config(method: Method, clients: usize, rounds: u32) -> FederationConfig {
    FederationConfig {
        method,
        clients,
        rounds,
        participation: 1.0,
        population: 32,
        sigma: 0.27,
        alpha: 0.5,
        alpha_decay: StepDecay::NONE,
        es_momentum: 0.0,
        partitions: 1,
        codec: CodecScheme::Raw32,
        optimizer: OptimizerCfg {
            learning_rate: 0.08,
            momentum: 0.9,
            weight_decay: 0.0,
            local_steps: 5,
            batch_size: 32,
        },
        lr_decay: StepDecay::NONE,
        seed: 11,
        eval_interval: 5,
        history_depth: 4,
        sparse_rate: 0.9,
        quant_bits: 8,
    }
}
