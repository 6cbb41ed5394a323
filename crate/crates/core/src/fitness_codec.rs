//! Lossy fitness compression and exact payload accounting.
//!
//! Payloads are little-endian, laid out column by column (partition order),
//! members in index order within a column:
//!
//! | scheme    | per column                                              |
//! |-----------|---------------------------------------------------------|
//! | `raw32`   | N x f32                                                 |
//! | `topk(k)` | k x (index: ceil(ceil(log2 N)/8) bytes, value: f32)     |
//! | `quant(Q)`| min f32, max f32, N codes of Q bits packed LSB-first    |
//! | `rank(R)` | N group indices of ceil(log2 R) bits packed LSB-first   |

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::pbge::{FitnessMatrix, FitnessTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CodecScheme {
    Raw32,
    TopK(usize),
    Quant(u8),
    Rank(usize),
}

impl CodecScheme {
    /// Tag byte used in the message header.
    pub fn tag(&self) -> u8 {
        match self {
            CodecScheme::Raw32 => 0,
            CodecScheme::TopK(_) => 1,
            CodecScheme::Quant(_) => 2,
            CodecScheme::Rank(_) => 3,
        }
    }

    pub fn validate(&self, population: usize) -> Result<()> {
        match *self {
            CodecScheme::Raw32 => Ok(()),
            CodecScheme::TopK(k) if k == 0 || k > population => Err(Error::invalid(
                "codec",
                format!("top-k needs 1 <= k <= {population}, got {k}"),
            )),
            CodecScheme::Quant(q) if !(1..=16).contains(&q) => Err(Error::invalid(
                "codec",
                format!("quantization needs 1..=16 bits, got {q}"),
            )),
            CodecScheme::Rank(r) if r == 0 || r > population => Err(Error::invalid(
                "codec",
                format!("rank needs 1 <= groups <= {population}, got {r}"),
            )),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for CodecScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CodecScheme::Raw32 => write!(f, "raw32"),
            CodecScheme::TopK(k) => write!(f, "topk:{k}"),
            CodecScheme::Quant(q) => write!(f, "quant:{q}"),
            CodecScheme::Rank(r) => write!(f, "rank:{r}"),
        }
    }
}

impl FromStr for CodecScheme {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (s.trim(), None),
        };
        let number = |what: &str| -> std::result::Result<usize, String> {
            arg.ok_or_else(|| format!("`{name}` needs a parameter, e.g. `{name}:8`"))?
                .parse::<usize>()
                .map_err(|_| format!("invalid {what} in `{s}`"))
        };
        match name {
            "raw32" | "raw" if arg.is_none() => Ok(CodecScheme::Raw32),
            "topk" => Ok(CodecScheme::TopK(number("k")?)),
            "quant" => {
                let q = number("bit count")?;
                u8::try_from(q)
                    .ok()
                    .filter(|q| (1..=16).contains(q))
                    .map(CodecScheme::Quant)
                    .ok_or_else(|| format!("quantization bits must be in 1..=16, got {q}"))
            }
            "rank" => Ok(CodecScheme::Rank(number("group count")?)),
            _ => Err(format!(
                "unknown codec `{s}` (expected raw32, topk:K, quant:Q or rank:R)"
            )),
        }
    }
}

/// `ceil(log2 n)`, with `ceil(log2 1) = 0`.
pub fn ceil_log2(n: usize) -> u32 {
    if n <= 1 {
        0
    } else {
        usize::BITS - (n - 1).leading_zeros()
    }
}

fn index_bytes(population: usize) -> usize {
    (ceil_log2(population) as usize).div_ceil(8)
}

/// Exact payload size in bytes for one `N x K` fitness message.
pub fn byte_size(scheme: CodecScheme, population: usize, partitions: usize) -> usize {
    match scheme {
        CodecScheme::Raw32 => 4 * population * partitions,
        CodecScheme::Quant(q) => (population * q as usize).div_ceil(8) * partitions + 8 * partitions,
        CodecScheme::TopK(k) => partitions * k * (4 + index_bytes(population)),
        CodecScheme::Rank(r) => partitions * (population * ceil_log2(r) as usize).div_ceil(8),
    }
}

/// A fitness matrix in transmission form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedFitness {
    pub scheme: CodecScheme,
    pub round: u32,
    pub population: usize,
    pub partitions: usize,
    pub weight: u32,
    pub payload: Vec<u8>,
}

impl EncodedFitness {
    pub fn byte_size(&self) -> usize {
        self.payload.len()
    }
}

pub(crate) struct BitWriter {
    bytes: Vec<u8>,
    bit: usize,
}

impl BitWriter {
    pub(crate) fn new() -> Self {
        Self {
            bytes: Vec::new(),
            bit: 0,
        }
    }

    pub(crate) fn push(&mut self, value: u32, width: u32) {
        for b in 0..width {
            if self.bit.is_multiple_of(8) {
                self.bytes.push(0);
            }
            if (value >> b) & 1 == 1 {
                *self.bytes.last_mut().unwrap() |= 1 << (self.bit % 8);
            }
            self.bit += 1;
        }
    }

    pub(crate) fn finish(self) -> Vec<u8> {
        self.bytes
    }
}

pub(crate) fn read_bits(bytes: &[u8], start_bit: usize, width: u32) -> u32 {
    let mut value = 0u32;
    for b in 0..width as usize {
        let pos = start_bit + b;
        if (bytes[pos / 8] >> (pos % 8)) & 1 == 1 {
            value |= 1 << b;
        }
    }
    value
}

/// Largest f32 not above `v`.
pub(crate) fn f32_floor(v: f64) -> f32 {
    let r = v as f32;
    if (r as f64) > v {
        r.next_down()
    } else {
        r
    }
}

/// Smallest f32 not below `v`.
pub(crate) fn f32_ceil(v: f64) -> f32 {
    let r = v as f32;
    if (r as f64) < v {
        r.next_up()
    } else {
        r
    }
}

fn centered_column(f: &FitnessMatrix, k: usize) -> Vec<f64> {
    let col = f.column(k);
    let mean = col.iter().sum::<f64>() / col.len() as f64;
    col.into_iter().map(|v| v - mean).collect()
}

/// Mean-centers each column and keeps the `k` entries of largest magnitude
/// (ties to the lower index), emitted in index order.
pub fn topk_sparsify(f: &FitnessMatrix, k: usize) -> Result<EncodedFitness> {
    encode_fitness(f, CodecScheme::TopK(k))
}

/// Per-column min-max affine quantization to `bits` bits.
pub fn quantize(f: &FitnessMatrix, bits: u8) -> Result<EncodedFitness> {
    encode_fitness(f, CodecScheme::Quant(bits))
}

pub fn dequantize(e: &EncodedFitness) -> Result<FitnessMatrix> {
    decode_fitness(e)
}

/// Replaces each column by equal-size rank groups over `groups` levels.
pub fn rank_transform(f: &FitnessMatrix, groups: usize) -> Result<EncodedFitness> {
    encode_fitness(f, CodecScheme::Rank(groups))
}

pub fn encode_fitness(f: &FitnessMatrix, scheme: CodecScheme) -> Result<EncodedFitness> {
    scheme.validate(f.population)?;
    let n = f.population;
    let mut payload = Vec::with_capacity(byte_size(scheme, n, f.partitions));
    for k in 0..f.partitions {
        match scheme {
            CodecScheme::Raw32 => {
                for i in 0..n {
                    payload.extend_from_slice(&(f.value(i, k) as f32).to_le_bytes());
                }
            }
            CodecScheme::TopK(keep) => {
                let centered = centered_column(f, k);
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| centered[b].abs().total_cmp(&centered[a].abs()).then(a.cmp(&b)));
                let mut kept = order[..keep].to_vec();
                kept.sort_unstable();
                let width = index_bytes(n);
                for i in kept {
                    payload.extend_from_slice(&(i as u64).to_le_bytes()[..width]);
                    payload.extend_from_slice(&(centered[i] as f32).to_le_bytes());
                }
            }
            CodecScheme::Quant(bits) => {
                let col = f.column(k);
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let (lo, hi) = (f32_floor(lo), f32_ceil(hi));
                payload.extend_from_slice(&lo.to_le_bytes());
                payload.extend_from_slice(&hi.to_le_bytes());
                let levels = ((1u32 << bits) - 1) as f64;
                let span = hi as f64 - lo as f64;
                let mut w = BitWriter::new();
                for v in col {
                    let code = if span > 0.0 {
                        ((v - lo as f64) / span * levels).round().clamp(0.0, levels) as u32
                    } else {
                        0
                    };
                    w.push(code, bits as u32);
                }
                payload.extend(w.finish());
            }
            CodecScheme::Rank(groups) => {
                let col = f.column(k);
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));
                let mut group = vec![0u32; n];
                for (pos, &i) in order.iter().enumerate() {
                    group[i] = (pos * groups / n) as u32;
                }
                let width = ceil_log2(groups);
                let mut w = BitWriter::new();
                for g in group {
                    w.push(g, width);
                }
                payload.extend(w.finish());
            }
        }
    }
    debug_assert_eq!(payload.len(), byte_size(scheme, n, f.partitions));
    Ok(EncodedFitness {
        scheme,
        round: f.round,
        population: n,
        partitions: f.partitions,
        weight: f.weight,
        payload,
    })
}

pub fn decode_fitness(e: &EncodedFitness) -> Result<FitnessMatrix> {
    e.scheme.validate(e.population)?;
    let n = e.population;
    let k_count = e.partitions;
    let expected = byte_size(e.scheme, n, k_count);
    if e.payload.len() != expected {
        return Err(Error::Wire(format!(
            "{} payload has {} bytes, expected {expected}",
            e.scheme,
            e.payload.len()
        )));
    }
    let column_bytes = expected / k_count.max(1);
    let mut values = vec![0.0; n * k_count];
    let f32_at = |bytes: &[u8], at: usize| f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as f64;
    for k in 0..k_count {
        let col = &e.payload[k * column_bytes..(k + 1) * column_bytes];
        let mut set = |i: usize, v: f64| values[i * k_count + k] = v;
        match e.scheme {
            CodecScheme::Raw32 => {
                for i in 0..n {
                    set(i, f32_at(col, 4 * i));
                }
            }
            CodecScheme::TopK(keep) => {
                let width = index_bytes(n);
                let stride = width + 4;
                for entry in 0..keep {
                    let at = entry * stride;
                    let mut idx = [0u8; 8];
                    idx[..width].copy_from_slice(&col[at..at + width]);
                    let i = u64::from_le_bytes(idx) as usize;
                    if i >= n {
                        return Err(Error::Wire(format!("top-k index {i} out of range")));
                    }
                    set(i, f32_at(col, at + width));
                }
            }
            CodecScheme::Quant(bits) => {
                let lo = f32_at(col, 0);
                let hi = f32_at(col, 4);
                let levels = ((1u32 << bits) - 1) as f64;
                let codes = &col[8..];
                for i in 0..n {
                    let code = read_bits(codes, i * bits as usize, bits as u32) as f64;
                    let v = if hi > lo { lo + code * (hi - lo) / levels } else { lo };
                    set(i, v);
                }
            }
            CodecScheme::Rank(groups) => {
                let width = ceil_log2(groups);
                let mid = (groups as f64 - 1.0) / 2.0;
                for i in 0..n {
                    let g = read_bits(col, i * width as usize, width) as usize;
                    if g >= groups {
                        return Err(Error::Wire(format!("rank group {g} out of range")));
                    }
                    set(i, g as f64 - mid);
                }
            }
        }
    }
    FitnessMatrix::new(e.round, n, k_count, values, e.weight)
}
