//! Comparison methods: FedAvg and its sparsified / quantized variants, which
//! exchange model updates, and plain ES, which exchanges task-loss fitness
//! through the same pipeline as the fitness-encoding protocol.
//!
//! FedAvg-family clients upload `theta' - theta` as f32; the server adds the
//! sample-weighted mean of the received updates to its model.

use rayon::prelude::*;

use crate::detrng::PerturbationSet;
use crate::error::{Error, Result};
use crate::federation::{aggregate, apply_broadcast, ClientBytes, ClientState, NodeModel, ProtocolParams};
use crate::fitness_codec::{encode_fitness, f32_ceil, f32_floor, read_bits, BitWriter, EncodedFitness};
use crate::nn::{self, ModelParams};
use crate::pbge::FitnessMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineRound {
    pub model: ModelParams,
    pub uplink: Vec<ClientBytes>,
}

/// Sparse update as transmitted: `(index, value)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseUpdate {
    pub len: usize,
    pub entries: Vec<(u32, f32)>,
}

impl SparseUpdate {
    pub fn byte_size(&self) -> usize {
        self.entries.len() * 8
    }
}

fn local_updates(clients: &[ClientState], theta: &ModelParams, round: u32) -> Result<Vec<Vec<f64>>> {
    clients
        .par_iter()
        .map(|c| {
            let trained = nn::local_train(theta, &c.shard, &c.optimizer, c.train_seed(round))?;
            Ok(trained
                .values()
                .iter()
                .zip(theta.values())
                .map(|(a, b)| a - b)
                .collect())
        })
        .collect()
}

/// `theta + sum_j (w_j / W) * update_j`, summed in client order.
fn apply_weighted(theta: &ModelParams, clients: &[ClientState], updates: &[Vec<f64>]) -> Result<ModelParams> {
    if clients.is_empty() {
        return Err(Error::Empty("client list"));
    }
    let total: u64 = clients.iter().map(|c| c.weight() as u64).sum();
    let mut mean = vec![0.0; theta.len()];
    for (c, u) in clients.iter().zip(updates) {
        let share = c.weight() as f64 / total as f64;
        for (acc, v) in mean.iter_mut().zip(u) {
            *acc += share * v;
        }
    }
    theta.with_values(theta.values().iter().zip(&mean).map(|(t, m)| t + m).collect())
}

fn bytes_per_client(clients: &[ClientState], bytes: impl Fn(usize) -> u64) -> Vec<ClientBytes> {
    clients
        .iter()
        .enumerate()
        .map(|(j, c)| ClientBytes {
            client: c.id,
            bytes: bytes(j),
        })
        .collect()
}

pub fn fedavg_round(clients: &[ClientState], server: &ModelParams, round: u32) -> Result<BaselineRound> {
    let updates: Vec<Vec<f64>> = local_updates(clients, server, round)?
        .into_iter()
        .map(|u| u.into_iter().map(|v| v as f32 as f64).collect())
        .collect();
    Ok(BaselineRound {
        model: apply_weighted(server, clients, &updates)?,
        uplink: bytes_per_client(clients, |_| 4 * server.len() as u64),
    })
}

/// Components kept at drop rate `rate`: `ceil((1 - rate) * len)`, at least one.
pub fn sparse_keep_count(len: usize, rate: f64) -> usize {
    let exact = (1.0 - rate) * len as f64;
    ((exact - 1e-9).ceil() as usize).clamp(1, len)
}

/// Largest-magnitude components of `update` (ties to the lower index).
pub fn sparsify(update: &[f64], keep: usize) -> SparseUpdate {
    let mut order: Vec<usize> = (0..update.len()).collect();
    order.sort_by(|&a, &b| update[b].abs().total_cmp(&update[a].abs()).then(a.cmp(&b)));
    let mut kept = order[..keep.min(update.len())].to_vec();
    kept.sort_unstable();
    SparseUpdate {
        len: update.len(),
        entries: kept.into_iter().map(|i| (i as u32, update[i] as f32)).collect(),
    }
}

pub fn densify(sparse: &SparseUpdate) -> Vec<f64> {
    let mut out = vec![0.0; sparse.len];
    for &(i, v) in &sparse.entries {
        out[i as usize] = v as f64;
    }
    out
}

pub fn sparse_fedavg_round(
    clients: &[ClientState],
    server: &ModelParams,
    round: u32,
    rate: f64,
) -> Result<BaselineRound> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid("sparse_rate", "must be in [0, 1)"));
    }
    let keep = sparse_keep_count(server.len(), rate);
    let sparse: Vec<SparseUpdate> = local_updates(clients, server, round)?
        .iter()
        .map(|u| sparsify(u, keep))
        .collect();
    let dense: Vec<Vec<f64>> = sparse.iter().map(densify).collect();
    Ok(BaselineRound {
        model: apply_weighted(server, clients, &dense)?,
        uplink: bytes_per_client(clients, |j| sparse[j].byte_size() as u64),
    })
}

/// Update quantized per layer: f32 (min, max) per layer plus one packed
/// code stream of `bits` per component.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedUpdate {
    pub bits: u8,
    pub bounds: Vec<(f32, f32)>,
    pub codes: Vec<u8>,
}

impl QuantizedUpdate {
    pub fn byte_size(&self) -> usize {
        self.codes.len() + 8 * self.bounds.len()
    }
}

pub fn quantize_update(update: &[f64], layers: &[std::ops::Range<usize>], bits: u8) -> QuantizedUpdate {
    let levels = ((1u32 << bits) - 1) as f64;
    let mut writer = BitWriter::new();
    let mut bounds = Vec::with_capacity(layers.len());
    for range in layers {
        let seg = &update[range.clone()];
        let lo = f32_floor(seg.iter().copied().fold(f64::INFINITY, f64::min));
        let hi = f32_ceil(seg.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        let span = hi as f64 - lo as f64;
        for &v in seg {
            let code = if span > 0.0 {
                ((v - lo as f64) / span * levels).round().clamp(0.0, levels) as u32
            } else {
                0
            };
            writer.push(code, bits as u32);
        }
        bounds.push((lo, hi));
    }
    QuantizedUpdate {
        bits,
        bounds,
        codes: writer.finish(),
    }
}

pub fn dequantize_update(q: &QuantizedUpdate, layers: &[std::ops::Range<usize>]) -> Vec<f64> {
    let levels = ((1u32 << q.bits) - 1) as f64;
    let len = layers.last().map_or(0, |r| r.end);
    let mut out = vec![0.0; len];
    for (range, &(lo, hi)) in layers.iter().zip(&q.bounds) {
        let (lo, hi) = (lo as f64, hi as f64);
        for j in range.clone() {
            let code = read_bits(&q.codes, j * q.bits as usize, q.bits as u32) as f64;
            out[j] = if hi > lo { lo + code * (hi - lo) / levels } else { lo };
        }
    }
    out
}

pub fn quant_fedavg_round(
    clients: &[ClientState],
    server: &ModelParams,
    round: u32,
    bits: u8,
) -> Result<BaselineRound> {
    if !(1..=16).contains(&bits) {
        return Err(Error::invalid("quant_bits", "must be in 1..=16"));
    }
    let layers = server.arch().layer_ranges();
    let quantized: Vec<QuantizedUpdate> = local_updates(clients, server, round)?
        .iter()
        .map(|u| quantize_update(u, &layers, bits))
        .collect();
    let dense: Vec<Vec<f64>> = quantized.iter().map(|q| dequantize_update(q, &layers)).collect();
    Ok(BaselineRound {
        model: apply_weighted(server, clients, &dense)?,
        uplink: bytes_per_client(clients, |j| quantized[j].byte_size() as u64),
    })
}

/// Mean-centered `-objective(theta + sigma * eps_i)` for every member.
pub fn es_fitness(
    theta: &[f64],
    set: &PerturbationSet,
    objective: impl Fn(&[f64]) -> Result<f64> + Sync,
    round: u32,
    weight: u32,
) -> Result<FitnessMatrix> {
    if set.dim() != theta.len() {
        return Err(Error::DimensionMismatch {
            context: "perturbation dimension",
            expected: theta.len(),
            actual: set.dim(),
        });
    }
    let sigma = set.sigma();
    let raw: Vec<f64> = (0..set.population())
        .into_par_iter()
        .map(|i| {
            let eps = set.perturbation(i)?;
            let probe: Vec<f64> = theta.iter().zip(&eps).map(|(t, e)| t + sigma * e).collect();
            objective(&probe).map(|l| -l)
        })
        .collect::<Result<_>>()?;
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    FitnessMatrix::new(
        round,
        set.population(),
        1,
        raw.into_iter().map(|v| v - mean).collect(),
        weight,
    )
}

/// Plain-ES client message: task-loss fitness on one seeded minibatch.
pub fn plain_es_client(
    client: &ClientState,
    round: u32,
    expected_fingerprint: u64,
    params: &ProtocolParams,
) -> Result<EncodedFitness> {
    client.check_sync(round, expected_fingerprint)?;
    let theta = &client.node.params;
    let mut schedule = nn::BatchSchedule::new(
        client.train_seed(round),
        client.shard.len(),
        client.optimizer.batch_size,
    )?;
    let batch = schedule.next_batch(&client.shard);
    let set = params.perturbations(round)?;
    let fitness = es_fitness(
        theta.values(),
        &set,
        |probe| nn::loss(&theta.with_values(probe.to_vec())?, &batch),
        round,
        batch.len() as u32,
    )?;
    encode_fitness(&fitness, params.codec)
}

/// One plain-ES round over `clients`, all synchronized to `server`.
pub fn plain_es_round(clients: &[ClientState], server: &NodeModel, params: &ProtocolParams) -> Result<NodeModel> {
    let expected = server.fingerprint();
    let messages = clients
        .iter()
        .map(|c| plain_es_client(c, server.round, expected, params))
        .collect::<Result<Vec<_>>>()?;
    apply_broadcast(server, &aggregate(&messages)?.as_transmitted(), params)
}
