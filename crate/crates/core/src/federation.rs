//! The fitness-exchange round protocol and a deterministic multi-client
//! simulator.
//!
//! Every round: participating clients train locally, score the shared
//! population against their trained model, and upload the (optionally
//! compressed) scores. The server takes the sample-weighted mean and
//! broadcasts it; every node regenerates the same population from the round
//! seed and applies the identical decoded step, so models stay bit-identical
//! without ever being transmitted.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::datasets::Dataset;
use crate::detrng::{derive_key, PerturbationSet, RngStream, SeedSchedule};
use crate::error::{Error, Result};
use crate::fitness_codec::{byte_size, decode_fitness, encode_fitness, CodecScheme, EncodedFitness};
use crate::nn::{self, fingerprint_slice, ArchSpec, ModelParams, OptimizerCfg};
use crate::pbge::{self, FitnessMatrix, FitnessTable, PartitionLayout};

/// Multiplicative step decay: `base * factor^(t / every)`; `every = 0` disables it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub every: u32,
    pub factor: f64,
}

impl StepDecay {
    pub const NONE: StepDecay = StepDecay { every: 0, factor: 1.0 };

    pub fn at(&self, base: f64, t: u32) -> f64 {
        match t.checked_div(self.every) {
            Some(steps) => base * self.factor.powi(steps as i32),
            None => base,
        }
    }
}

impl Default for StepDecay {
    fn default() -> Self {
        Self::NONE
    }
}

/// Everything every node must agree on to regenerate populations and
/// apply identical updates.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolParams {
    pub population: usize,
    pub sigma: f64,
    pub alpha: f64,
    pub alpha_decay: StepDecay,
    /// Momentum on the decoded step; 0 disables it.
    pub es_momentum: f64,
    pub layout: PartitionLayout,
    pub codec: CodecScheme,
    pub schedule: SeedSchedule,
}

impl ProtocolParams {
    pub fn perturbations(&self, round: u32) -> Result<PerturbationSet> {
        PerturbationSet::new(
            self.schedule.round_seed(round as u64),
            self.population,
            self.layout.total(),
            self.sigma,
        )
    }

    pub fn alpha_at(&self, round: u32) -> f64 {
        self.alpha_decay.at(self.alpha, round)
    }

    pub fn partitions(&self) -> usize {
        self.layout.partitions()
    }

    /// Uplink payload of one client message.
    pub fn message_bytes(&self) -> usize {
        byte_size(self.codec, self.population, self.partitions())
    }

    /// One global-fitness broadcast (always raw f32).
    pub fn broadcast_bytes(&self) -> usize {
        byte_size(CodecScheme::Raw32, self.population, self.partitions())
    }
}

/// A node's replica of the global model: parameters, optional momentum
/// buffer for the decoded step, and the round it is ready to run.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeModel {
    pub params: ModelParams,
    pub velocity: Option<Vec<f64>>,
    pub round: u32,
}

impl NodeModel {
    pub fn new(params: ModelParams, with_momentum: bool) -> Self {
        let velocity = with_momentum.then(|| vec![0.0; params.len()]);
        Self {
            params,
            velocity,
            round: 0,
        }
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = self.params.fingerprint();
        if let Some(v) = &self.velocity {
            h ^= fingerprint_slice(v).rotate_left(1);
        }
        h ^ (self.round as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }

    /// Bytes needed to ship this state in full.
    pub fn full_bytes(&self) -> u64 {
        let per = 4 * self.params.len() as u64;
        if self.velocity.is_some() {
            2 * per
        } else {
            per
        }
    }
}

/// Sample-weighted mean of client fitness for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalFitness {
    pub round: u32,
    pub population: usize,
    pub partitions: usize,
    pub values: Vec<f64>,
    pub total_weight: u64,
}

impl FitnessTable for GlobalFitness {
    fn population(&self) -> usize {
        self.population
    }
    fn partitions(&self) -> usize {
        self.partitions
    }
    fn values(&self) -> &[f64] {
        &self.values
    }
}

impl GlobalFitness {
    /// Broadcast payload: values as little-endian f32.
    pub fn to_broadcast(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect()
    }

    /// What every node sees after the broadcast: values rounded to f32.
    pub fn as_transmitted(&self) -> GlobalFitness {
        GlobalFitness {
            values: self.values.iter().map(|v| *v as f32 as f64).collect(),
            ..self.clone()
        }
    }
}

/// The last `depth` broadcasts, contiguous in round index.
#[derive(Debug, Clone)]
pub struct FitnessHistory {
    depth: usize,
    entries: VecDeque<GlobalFitness>,
}

impl FitnessHistory {
    pub fn new(depth: usize) -> Self {
        Self {
            depth,
            entries: VecDeque::with_capacity(depth),
        }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn push(&mut self, f: GlobalFitness) -> Result<()> {
        if let Some(last) = self.entries.back() {
            if f.round != last.round + 1 {
                return Err(Error::invalid(
                    "history",
                    format!("round {} does not follow {}", f.round, last.round),
                ));
            }
        }
        if self.depth == 0 {
            return Ok(());
        }
        if self.entries.len() == self.depth {
            self.entries.pop_front();
        }
        self.entries.push_back(f);
        Ok(())
    }

    pub fn get(&self, round: u32) -> Option<&GlobalFitness> {
        let first = self.entries.front()?.round;
        let offset = round.checked_sub(first)? as usize;
        self.entries.get(offset)
    }

    /// First round in `[from, to)` that is missing, if any.
    pub fn first_gap(&self, from: u32, to: u32) -> Option<u32> {
        (from..to).find(|&t| self.get(t).is_none())
    }
}

/// Header + codec payload as sent over the (simulated) uplink.
///
/// Header, little-endian: round u32, client u32, scheme tag u8,
/// population u16, partitions u16, weight u32. The scheme parameter
/// (k, Q or R) is session configuration and is not repeated per message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub client: u32,
    pub fitness: EncodedFitness,
}

pub const HEADER_BYTES: usize = 17;

impl Message {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let f = &self.fitness;
        let population = u16::try_from(f.population).map_err(|_| Error::Wire("population exceeds u16".into()))?;
        let partitions = u16::try_from(f.partitions).map_err(|_| Error::Wire("partitions exceed u16".into()))?;
        let mut out = Vec::with_capacity(HEADER_BYTES + f.payload.len());
        out.extend_from_slice(&f.round.to_le_bytes());
        out.extend_from_slice(&self.client.to_le_bytes());
        out.push(f.scheme.tag());
        out.extend_from_slice(&population.to_le_bytes());
        out.extend_from_slice(&partitions.to_le_bytes());
        out.extend_from_slice(&f.weight.to_le_bytes());
        out.extend_from_slice(&f.payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], scheme: CodecScheme) -> Result<Self> {
        if bytes.len() < HEADER_BYTES {
            return Err(Error::Wire(format!("{} bytes is shorter than the header", bytes.len())));
        }
        let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let u16_at = |at: usize| u16::from_le_bytes(bytes[at..at + 2].try_into().unwrap());
        if bytes[8] != scheme.tag() {
            return Err(Error::Wire(format!(
                "scheme tag {} does not match session codec {scheme}",
                bytes[8]
            )));
        }
        let fitness = EncodedFitness {
            scheme,
            round: u32_at(0),
            population: u16_at(9) as usize,
            partitions: u16_at(11) as usize,
            weight: u32_at(13),
            payload: bytes[HEADER_BYTES..].to_vec(),
        };
        let expected = byte_size(scheme, fitness.population, fitness.partitions);
        if fitness.payload.len() != expected {
            return Err(Error::Wire(format!(
                "payload is {} bytes, expected {expected}",
                fitness.payload.len()
            )));
        }
        Ok(Self {
            client: u32_at(4),
            fitness,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: u32,
    pub node: NodeModel,
    pub shard: Arc<Dataset>,
    pub optimizer: OptimizerCfg,
    /// Base of the client's minibatch schedule.
    pub seed: u64,
}

impl ClientState {
    pub fn train_seed(&self, round: u32) -> u64 {
        SeedSchedule::new(self.seed).round_seed(round as u64)
    }

    /// Aggregation weight: samples consumed by one round of local training.
    pub fn weight(&self) -> u32 {
        self.optimizer.samples_consumed(self.shard.len()) as u32
    }

    pub fn check_sync(&self, round: u32, expected: u64) -> Result<()> {
        let actual = self.node.fingerprint();
        if self.node.round != round || actual != expected {
            return Err(Error::Desync {
                client: self.id,
                round,
                expected,
                actual,
            });
        }
        Ok(())
    }
}

/// Local training followed by fitness encoding. The client's model is left
/// untouched; it advances only when the broadcast arrives.
pub fn client_round(
    client: &ClientState,
    round: u32,
    expected_fingerprint: u64,
    params: &ProtocolParams,
) -> Result<EncodedFitness> {
    client.check_sync(round, expected_fingerprint)?;
    let theta = &client.node.params;
    let target = nn::local_train(theta, &client.shard, &client.optimizer, client.train_seed(round))?;
    let set = params.perturbations(round)?;
    let fitness = pbge::encode(theta, &target, &set, &params.layout, client.weight(), round)?;
    encode_fitness(&fitness, params.codec)
}

/// Sample-weighted mean of decoded client fitness, summed in message order.
pub fn aggregate(messages: &[EncodedFitness]) -> Result<GlobalFitness> {
    let decoded = messages.iter().map(decode_fitness).collect::<Result<Vec<_>>>()?;
    aggregate_matrices(&decoded)
}

pub fn aggregate_matrices(matrices: &[FitnessMatrix]) -> Result<GlobalFitness> {
    let first = matrices.first().ok_or(Error::Empty("message list"))?;
    for m in &matrices[1..] {
        if m.round != first.round {
            return Err(Error::RoundMismatch {
                node: first.round,
                fitness: m.round,
            });
        }
        if m.population != first.population || m.partitions != first.partitions {
            return Err(Error::DimensionMismatch {
                context: "aggregated fitness",
                expected: first.population * first.partitions,
                actual: m.population * m.partitions,
            });
        }
    }
    let total_weight: u64 = matrices.iter().map(|m| m.weight as u64).sum();
    if total_weight == 0 {
        return Err(Error::invalid("weight", "total aggregation weight is zero"));
    }
    let mut values = vec![0.0; first.values.len()];
    for m in matrices {
        let share = m.weight as f64 / total_weight as f64;
        for (acc, v) in values.iter_mut().zip(&m.values) {
            *acc += share * v;
        }
    }
    Ok(GlobalFitness {
        round: first.round,
        population: first.population,
        partitions: first.partitions,
        values,
        total_weight,
    })
}

/// Applies round `f.round`'s global fitness. Bit-identical on every node.
pub fn apply_broadcast(node: &NodeModel, f: &GlobalFitness, params: &ProtocolParams) -> Result<NodeModel> {
    if f.round != node.round {
        return Err(Error::RoundMismatch {
            node: node.round,
            fitness: f.round,
        });
    }
    let set = params.perturbations(f.round)?;
    let step = pbge::decode_step(f, &set, &params.layout, params.alpha_at(f.round))?;
    let mut values = node.params.values().to_vec();
    let velocity = match &node.velocity {
        Some(v) => {
            let m = params.es_momentum;
            let v: Vec<f64> = v.iter().zip(&step).map(|(v, s)| m * v + s).collect();
            values.iter_mut().zip(&v).for_each(|(p, d)| *p += d);
            Some(v)
        }
        None => {
            values.iter_mut().zip(&step).for_each(|(p, d)| *p += d);
            None
        }
    };
    Ok(NodeModel {
        params: node.params.with_values(values)?,
        velocity,
        round: node.round + 1,
    })
}

/// Replays the broadcasts for rounds `[stale.round, to)` from history.
pub fn catch_up(stale: &NodeModel, to: u32, history: &FitnessHistory, params: &ProtocolParams) -> Result<NodeModel> {
    if let Some(gap) = history.first_gap(stale.round, to) {
        return Err(Error::HistoryGap(gap));
    }
    let mut node = stale.clone();
    for t in stale.round..to {
        node = apply_broadcast(&node, history.get(t).unwrap(), params)?;
    }
    Ok(node)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Equivalence {
    pub max_abs_deviation: f64,
    /// Deviation relative to the largest component of the aggregated step.
    pub relative_deviation: f64,
}

/// Compares decode-of-the-mean against the weighted mean of per-client
/// decodes. `None` when any message is lossy-compressed.
pub fn fedavg_equivalence_check(
    theta: &ModelParams,
    messages: &[EncodedFitness],
    set: &PerturbationSet,
    layout: &PartitionLayout,
    alpha: f64,
) -> Result<Option<Equivalence>> {
    if messages.iter().any(|m| m.scheme != CodecScheme::Raw32) {
        return Ok(None);
    }
    let decoded = messages.iter().map(decode_fitness).collect::<Result<Vec<_>>>()?;
    let global = aggregate_matrices(&decoded)?;
    let via_aggregate = pbge::decode(theta, &global, set, layout, alpha)?;

    let total: u64 = decoded.iter().map(|m| m.weight as u64).sum();
    let mut via_models = vec![0.0; theta.len()];
    for m in &decoded {
        let share = m.weight as f64 / total as f64;
        let local = pbge::decode(theta, m, set, layout, alpha)?;
        for (acc, v) in via_models.iter_mut().zip(local.values()) {
            *acc += share * v;
        }
    }
    let max_abs = via_aggregate
        .values()
        .iter()
        .zip(&via_models)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = via_aggregate
        .values()
        .iter()
        .zip(theta.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(Some(Equivalence {
        max_abs_deviation: max_abs,
        relative_deviation: if scale > 0.0 { max_abs / scale } else { max_abs },
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Evofed,
    Fedavg,
    FedSparse,
    FedQuant,
    PlainEs,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Evofed => "evofed",
            Method::Fedavg => "fedavg",
            Method::FedSparse => "fed-sparse",
            Method::FedQuant => "fed-quant",
            Method::PlainEs => "plain-es",
        }
    }

    pub fn exchanges_fitness(&self) -> bool {
        matches!(self, Method::Evofed | Method::PlainEs)
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "evofed" => Ok(Method::Evofed),
            "fedavg" => Ok(Method::Fedavg),
            "fed-sparse" => Ok(Method::FedSparse),
            "fed-quant" => Ok(Method::FedQuant),
            "plain-es" => Ok(Method::PlainEs),
            other => Err(format!(
                "unknown method `{other}` (expected evofed, fedavg, fed-sparse, fed-quant or plain-es)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub method: Method,
    pub clients: usize,
    pub rounds: u32,
    pub participation: f64,
    pub population: usize,
    pub sigma: f64,
    pub alpha: f64,
    pub alpha_decay: StepDecay,
    pub es_momentum: f64,
    pub partitions: usize,
    pub codec: CodecScheme,
    pub optimizer: OptimizerCfg,
    pub lr_decay: StepDecay,
    pub seed: u64,
    pub eval_interval: u32,
    pub history_depth: usize,
    /// Fraction of update components dropped by fed-sparse.
    pub sparse_rate: f64,
    pub quant_bits: u8,
}

/// Training shards, the pooled training set for loss reporting, and a test set.
#[derive(Debug, Clone)]
pub struct FederatedData {
    pub arch: Arc<ArchSpec>,
    pub shards: Vec<Arc<Dataset>>,
    pub train: Arc<Dataset>,
    pub test: Arc<Dataset>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientBytes {
    pub client: u32,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub uplink: Vec<ClientBytes>,
    pub downlink_bytes: u64,
    pub accuracy: Option<f64>,
    pub loss: Option<f64>,
    pub wall_ms: f64,
}

impl RoundRecord {
    pub fn uplink_total(&self) -> u64 {
        self.uplink.iter().map(|c| c.bytes).sum()
    }
}

/// Derived seeds for independent parts of a run.
fn seed_for(seed: u64, tag: u64) -> u64 {
    derive_key(seed, tag)
}

const TAG_INIT: u64 = 1;
const TAG_POPULATION: u64 = 2;
const TAG_CLIENT: u64 = 3;
const TAG_PARTICIPATION: u64 = 4;

pub struct Simulation {
    cfg: FederationConfig,
    data: FederatedData,
    params: ProtocolParams,
    server: NodeModel,
    clients: Vec<ClientState>,
    history: FitnessHistory,
    next_round: u32,
}

impl Simulation {
    pub fn new(cfg: FederationConfig, data: FederatedData) -> Result<Self> {
        validate(&cfg, &data)?;
        let theta0 = nn::init_model(&data.arch, seed_for(cfg.seed, TAG_INIT));
        let partitions = if cfg.method == Method::PlainEs {
            1
        } else {
            cfg.partitions
        };
        let params = ProtocolParams {
            population: cfg.population,
            sigma: cfg.sigma,
            alpha: cfg.alpha,
            alpha_decay: cfg.alpha_decay,
            es_momentum: cfg.es_momentum,
            layout: PartitionLayout::balanced(theta0.len(), partitions)?,
            codec: cfg.codec,
            schedule: SeedSchedule::new(seed_for(cfg.seed, TAG_POPULATION)),
        };
        let with_momentum = cfg.method.exchanges_fitness() && cfg.es_momentum > 0.0;
        let server = NodeModel::new(theta0, with_momentum);
        let clients = data
            .shards
            .iter()
            .enumerate()
            .map(|(j, shard)| ClientState {
                id: j as u32,
                node: server.clone(),
                shard: shard.clone(),
                optimizer: cfg.optimizer,
                seed: derive_key(seed_for(cfg.seed, TAG_CLIENT), j as u64),
            })
            .collect();
        Ok(Self {
            history: FitnessHistory::new(cfg.history_depth),
            cfg,
            data,
            params,
            server,
            clients,
            next_round: 0,
        })
    }

    pub fn params(&self) -> &ProtocolParams {
        &self.params
    }

    pub fn server(&self) -> &NodeModel {
        &self.server
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn history(&self) -> &FitnessHistory {
        &self.history
    }

    /// Seeded choice of `max(1, round(p * M))` clients, in id order.
    pub fn participants(&self, round: u32) -> Vec<usize> {
        let m = self.clients.len();
        let count = ((self.cfg.participation * m as f64).round() as usize).clamp(1, m);
        if count == m {
            return (0..m).collect();
        }
        let mut rng = RngStream::new(derive_key(seed_for(self.cfg.seed, TAG_PARTICIPATION), round as u64));
        let mut chosen = rng.permutation(m)[..count].to_vec();
        chosen.sort_unstable();
        chosen
    }

    /// Brings a stale client to the server's round: replay from history when
    /// it covers the gap, otherwise ship the full state. Returns bytes sent.
    fn resync(&mut self, j: usize) -> Result<u64> {
        let target = self.server.round;
        let client = &mut self.clients[j];
        if client.node.round == target {
            return Ok(0);
        }
        if self.cfg.method.exchanges_fitness() && self.history.first_gap(client.node.round, target).is_none() {
            let missed = (target - client.node.round) as u64;
            client.node = catch_up(&client.node, target, &self.history, &self.params)?;
            Ok(missed * self.params.broadcast_bytes() as u64)
        } else {
            client.node = self.server.clone();
            Ok(self.server.full_bytes())
        }
    }

    /// Runs one round and returns its record.
    pub fn step(&mut self) -> Result<RoundRecord> {
        let started = Instant::now();
        let t = self.next_round;
        let chosen = self.participants(t);
        let mut downlink = 0u64;
        for &j in &chosen {
            downlink += self.resync(j)?;
        }

        let uplink = if self.cfg.method.exchanges_fitness() {
            self.fitness_round(t, &chosen, &mut downlink)?
        } else {
            self.model_round(t, &chosen, &mut downlink)?
        };
        self.next_round += 1;

        let last = self.next_round == self.cfg.rounds;
        if last {
            for j in 0..self.clients.len() {
                downlink += self.resync(j)?;
            }
        }
        let (accuracy, loss) = if last || self.next_round.is_multiple_of(self.cfg.eval_interval) {
            let test = nn::evaluate(&self.server.params, &self.data.test)?;
            let train = nn::evaluate(&self.server.params, &self.data.train)?;
            (Some(test.accuracy), Some(train.loss))
        } else {
            (None, None)
        };
        Ok(RoundRecord {
            round: t,
            uplink,
            downlink_bytes: downlink,
            accuracy,
            loss,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }

    fn fitness_round(&mut self, t: u32, chosen: &[usize], downlink: &mut u64) -> Result<Vec<ClientBytes>> {
        let expected = self.server.fingerprint();
        let lr = self.cfg.lr_decay.at(self.cfg.optimizer.learning_rate, t);
        let params = &self.params;
        let method = self.cfg.method;
        let clients = &self.clients;
        let wires: Vec<Vec<u8>> = chosen
            .par_iter()
            .map(|&j| {
                let mut client = clients[j].clone();
                client.optimizer.learning_rate = lr;
                let fitness = match method {
                    Method::PlainEs => baselines::plain_es_client(&client, t, expected, params)?,
                    _ => client_round(&client, t, expected, params)?,
                };
                Message {
                    client: client.id,
                    fitness,
                }
                .to_bytes()
            })
            .collect::<Result<_>>()?;

        let mut received = Vec::with_capacity(wires.len());
        let mut uplink = Vec::with_capacity(wires.len());
        for bytes in &wires {
            let msg = Message::from_bytes(bytes, self.params.codec)?;
            uplink.push(ClientBytes {
                client: msg.client,
                bytes: msg.fitness.byte_size() as u64,
            });
            received.push(msg.fitness);
        }

        let global = aggregate(&received)?.as_transmitted();
        self.server = apply_broadcast(&self.server, &global, &self.params)?;
        let params = &self.params;
        let updated: Vec<NodeModel> = chosen
            .par_iter()
            .map(|&j| apply_broadcast(&self.clients[j].node, &global, params))
            .collect::<Result<_>>()?;
        let fingerprint = self.server.fingerprint();
        for (&j, node) in chosen.iter().zip(updated) {
            self.clients[j].node = node;
            self.clients[j].check_sync(t + 1, fingerprint)?;
            *downlink += self.params.broadcast_bytes() as u64;
        }
        self.history.push(global)?;
        Ok(uplink)
    }

    fn model_round(&mut self, t: u32, chosen: &[usize], downlink: &mut u64) -> Result<Vec<ClientBytes>> {
        let lr = self.cfg.lr_decay.at(self.cfg.optimizer.learning_rate, t);
        let participants: Vec<ClientState> = chosen
            .iter()
            .map(|&j| {
                let mut c = self.clients[j].clone();
                c.optimizer.learning_rate = lr;
                c
            })
            .collect();
        let theta = &self.server.params;
        let outcome = match self.cfg.method {
            Method::Fedavg => baselines::fedavg_round(&participants, theta, t)?,
            Method::FedSparse => baselines::sparse_fedavg_round(&participants, theta, t, self.cfg.sparse_rate)?,
            Method::FedQuant => baselines::quant_fedavg_round(&participants, theta, t, self.cfg.quant_bits)?,
            Method::Evofed | Method::PlainEs => unreachable!("fitness methods use fitness_round"),
        };
        self.server = NodeModel {
            params: outcome.model,
            velocity: None,
            round: t + 1,
        };
        for &j in chosen {
            self.clients[j].node = self.server.clone();
            *downlink += self.server.full_bytes();
        }
        Ok(outcome.uplink)
    }

    pub fn run(mut self) -> Result<(Vec<RoundRecord>, Simulation)> {
        let mut records = Vec::with_capacity(self.cfg.rounds as usize);
        for _ in 0..self.cfg.rounds {
            records.push(self.step()?);
        }
        Ok((records, self))
    }
}

fn validate(cfg: &FederationConfig, data: &FederatedData) -> Result<()> {
    if cfg.clients == 0 || cfg.clients != data.shards.len() {
        return Err(Error::invalid(
            "clients",
            format!("{} clients but {} shards", cfg.clients, data.shards.len()),
        ));
    }
    if cfg.rounds == 0 {
        return Err(Error::invalid("rounds", "must be >= 1"));
    }
    if !(cfg.participation > 0.0 && cfg.participation <= 1.0) {
        return Err(Error::invalid("participation", "must be in (0, 1]"));
    }
    if cfg.eval_interval == 0 {
        return Err(Error::invalid("eval_interval", "must be >= 1"));
    }
    cfg.optimizer.validate()?;
    if data.shards.iter().any(|s| s.is_empty()) {
        return Err(Error::Empty("client shard"));
    }
    if cfg.method.exchanges_fitness() {
        if cfg.population < 2 || !cfg.population.is_multiple_of(2) || cfg.population > u16::MAX as usize {
            return Err(Error::invalid("population", "must be even, >= 2 and fit in u16"));
        }
        if !(cfg.sigma.is_finite() && cfg.sigma > 0.0) {
            return Err(Error::invalid("sigma", format!("must be > 0, got {}", cfg.sigma)));
        }
        if !(cfg.alpha.is_finite() && cfg.alpha >= 0.0) {
            return Err(Error::invalid("alpha", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&cfg.es_momentum) {
            return Err(Error::invalid("es_momentum", "must be in [0, 1)"));
        }
        if cfg.partitions == 0 || cfg.partitions > data.arch.param_count() || cfg.partitions > u16::MAX as usize {
            return Err(Error::invalid("partitions", "must be in [1, |theta|] and fit in u16"));
        }
        if cfg.method == Method::PlainEs && cfg.partitions != 1 {
            return Err(Error::invalid("partitions", "plain-es scores whole models; use 1"));
        }
        cfg.codec.validate(cfg.population)?;
    }
    if cfg.method == Method::FedSparse && !(0.0..1.0).contains(&cfg.sparse_rate) {
        return Err(Error::invalid("sparse_rate", "must be in [0, 1)"));
    }
    if cfg.method == Method::FedQuant && !(1..=16).contains(&cfg.quant_bits) {
        return Err(Error::invalid("quant_bits", "must be in 1..=16"));
    }
    Ok(())
}

/// Runs every round; all clients end synchronized with the server.
pub fn run_rounds(cfg: &FederationConfig, data: &FederatedData) -> Result<Vec<RoundRecord>> {
    Ok(Simulation::new(cfg.clone(), data.clone())?.run()?.0)
}
