//! Counter-addressable pseudorandom generation.
//!
//! Every value is a pure function of a 64-bit key and a counter, so any node
//! holding the same seed can regenerate any perturbation vector (or any
//! coordinate of one) without replaying the stream that precedes it. The
//! mixing function is the SplitMix64 finalizer and the Gaussian transform is
//! Box-Muller over `libm`, which keeps outputs bit-stable across platforms.

use std::f64::consts::TAU;
use std::ops::Range;

use crate::error::{Error, Result};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const LANE_A: u64 = 0xD1B5_4A32_D192_ED03;
const LANE_B: u64 = 0xAEF1_7502_108E_F2D9;

/// SplitMix64 output function. A bijection on `u64`.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes a key with two counters.
#[inline]
pub fn hash3(key: u64, a: u64, b: u64) -> u64 {
    let h = mix64(key.wrapping_add(GOLDEN));
    let h = mix64(h ^ a.wrapping_mul(LANE_A));
    mix64(h ^ b.wrapping_mul(LANE_B).wrapping_add(GOLDEN))
}

/// Derives an independent child key from a parent key and a tag.
pub fn derive_key(parent: u64, tag: u64) -> u64 {
    hash3(parent, tag, 0x5EED)
}

/// Maps 64 random bits to a uniform double in `(0, 1]`.
#[inline]
fn unit_open(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64)
}

/// Two independent standard normals from two uniform words.
#[inline]
fn box_muller(w1: u64, w2: u64) -> (f64, f64) {
    let radius = (-2.0 * libm::log(unit_open(w1))).sqrt();
    let angle = TAU * unit_open(w2);
    (radius * libm::cos(angle), radius * libm::sin(angle))
}

/// Base seed plus a stateless round -> seed derivation rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedSchedule {
    pub base: u64,
}

impl SeedSchedule {
    pub fn new(base: u64) -> Self {
        Self { base }
    }

    /// For a fixed base this is a bijection of `t`, so round seeds never collide.
    pub fn round_seed(&self, t: u64) -> u64 {
        mix64(mix64(self.base ^ LANE_B).wrapping_add(t.wrapping_mul(GOLDEN)))
    }
}

pub fn derive_round_seed(schedule: &SeedSchedule, t: u64) -> u64 {
    schedule.round_seed(t)
}

/// A sequential stream over the counter hash, for shuffles and initialization.
#[derive(Debug, Clone)]
pub struct RngStream {
    key: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(key: u64) -> Self {
        Self { key, counter: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        let out = hash3(self.key, self.counter, 0);
        self.counter += 1;
        out
    }

    /// Uniform in `(0, 1]`.
    pub fn uniform(&mut self) -> f64 {
        unit_open(self.next_u64())
    }

    pub fn gaussian(&mut self) -> f64 {
        let (a, _) = box_muller(self.next_u64(), self.next_u64());
        a
    }

    /// Unbiased integer in `[0, n)` (Lemire's multiply-and-reject).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let wide = (self.next_u64() as u128) * (n as u128);
            if (wide as u64) >= threshold {
                return (wide >> 64) as u64;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// Seeded permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        self.shuffle(&mut order);
        order
    }
}

/// Generative description of a mirrored Gaussian population.
///
/// Member `2m` and `2m + 1` form an antithetic pair: the odd member is the
/// exact negation of the even one. Coordinates are unit-variance; callers
/// apply `sigma` themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSet {
    round_seed: u64,
    population: usize,
    dim: usize,
    sigma: f64,
}

impl PerturbationSet {
    pub fn new(round_seed: u64, population: usize, dim: usize, sigma: f64) -> Result<Self> {
        if population < 2 || !population.is_multiple_of(2) {
            return Err(Error::invalid(
                "population",
                format!("must be even and at least 2, got {population}"),
            ));
        }
        if dim == 0 {
            return Err(Error::invalid("dim", "must be positive"));
        }
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::invalid("sigma", format!("must be > 0, got {sigma}")));
        }
        Ok(Self {
            round_seed,
            population,
            dim,
            sigma,
        })
    }

    pub fn round_seed(&self) -> u64 {
        self.round_seed
    }

    pub fn population(&self) -> usize {
        self.population
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn pairs(&self) -> usize {
        self.population / 2
    }

    /// Writes coordinates `range` of the positive member of pair `pair`.
    pub(crate) fn fill_pair(&self, pair: usize, range: Range<usize>, out: &mut [f64]) {
        debug_assert_eq!(range.len(), out.len());
        debug_assert!(range.end <= self.dim);
        let mut j = range.start;
        let mut slot = 0;
        while j < range.end {
            let block = (j / 2) as u64;
            let w1 = hash3(self.round_seed, pair as u64, 2 * block);
            let w2 = hash3(self.round_seed, pair as u64, 2 * block + 1);
            let (z0, z1) = box_muller(w1, w2);
            if j.is_multiple_of(2) {
                out[slot] = z0;
                slot += 1;
                j += 1;
                if j < range.end {
                    out[slot] = z1;
                    slot += 1;
                    j += 1;
                }
            } else {
                out[slot] = z1;
                slot += 1;
                j += 1;
            }
        }
    }

    /// Writes coordinates `range` of member `index` into `out`.
    pub fn fill(&self, index: usize, range: Range<usize>, out: &mut [f64]) -> Result<()> {
        if index >= self.population {
            return Err(Error::IndexOutOfRange {
                index,
                len: self.population,
            });
        }
        if range.end > self.dim || range.start > range.end {
            return Err(Error::IndexOutOfRange {
                index: range.end,
                len: self.dim,
            });
        }
        if out.len() != range.len() {
            return Err(Error::DimensionMismatch {
                context: "perturbation buffer",
                expected: range.len(),
                actual: out.len(),
            });
        }
        self.fill_pair(index / 2, range, out);
        if index % 2 == 1 {
            out.iter_mut().for_each(|v| *v = -*v);
        }
        Ok(())
    }

    /// Member `index` as a full vector. Random access: O(d) regardless of `index`.
    pub fn perturbation(&self, index: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.fill(index, 0..self.dim, &mut out)?;
        Ok(out)
    }

    /// Streams the population one member at a time.
    pub fn iter(&self) -> Members<'_> {
        Members {
            set: self,
            next: 0,
            positive: Vec::new(),
        }
    }

    /// All N vectors at once. Memory is N * d values.
    pub fn materialize(&self) -> Vec<Vec<f64>> {
        self.iter().collect()
    }

    /// Empirical moments over the population, per coordinate.
    pub fn moment_check(&self) -> Moments {
        let mut s1 = vec![0.0; self.dim];
        let mut s2 = vec![0.0; self.dim];
        let mut s3 = vec![0.0; self.dim];
        for eps in self.iter() {
            for (j, &e) in eps.iter().enumerate() {
                s1[j] += e;
                s2[j] += e * e;
                s3[j] += e * e * e;
            }
        }
        let n = self.population as f64;
        let m2max = s2.iter().map(|s| s / n).fold(0.0, f64::max);
        Moments {
            m1: s1.into_iter().map(|s| s / n).collect(),
            m2max,
            m3: s3.into_iter().map(|s| s / n).collect(),
        }
    }
}

/// Streaming iterator over population members. Holds one vector at a time;
/// the negative member of a pair reuses the positive one.
pub struct Members<'a> {
    set: &'a PerturbationSet,
    next: usize,
    positive: Vec<f64>,
}

impl Iterator for Members<'_> {
    type Item = Vec<f64>;

    fn next(&mut self) -> Option<Vec<f64>> {
        if self.next >= self.set.population {
            return None;
        }
        let index = self.next;
        self.next += 1;
        if index.is_multiple_of(2) {
            self.positive.resize(self.set.dim, 0.0);
            self.set.fill_pair(index / 2, 0..self.set.dim, &mut self.positive);
            Some(self.positive.clone())
        } else {
            Some(self.positive.iter().map(|v| -v).collect())
        }
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.set.population - self.next;
        (left, Some(left))
    }
}

impl ExactSizeIterator for Members<'_> {}

/// First three empirical moments. `m2max` is the largest per-coordinate
/// second moment, i.e. the empirical bound G^2.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m1: Vec<f64>,
    pub m2max: f64,
    pub m3: Vec<f64>,
}
