//! Population-based gradient encoding.
//!
//! A client holding the current model `theta` and its locally trained target
//! `theta'` scores every member of the shared population by its negated
//! squared distance to `theta'`, separately on each of `K` contiguous
//! partitions of the parameter vector. Any node that can regenerate the
//! population turns those scores back into a model step:
//!
//! ```text
//! step[k] = alpha / (N * sigma) * sum_i F[i][k] * eps_i[k]
//! ```
//!
//! With mirrored pairs the step equals `2 * alpha * C_k * (theta' - theta)[k]`
//! where `C_k` is the empirical second-moment matrix of the partition's
//! perturbations, so it tracks the local update as `C_k` approaches identity.

use std::ops::Range;

use rayon::prelude::*;

use crate::detrng::PerturbationSet;
use crate::error::{Error, Result};
use crate::nn::ModelParams;

/// `K` balanced contiguous ranges tiling `[0, total)`. The first
/// `total % K` partitions carry one extra element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionLayout {
    bounds: Vec<usize>,
}

pub fn make_layout(total: usize, partitions: usize) -> Result<PartitionLayout> {
    PartitionLayout::balanced(total, partitions)
}

impl PartitionLayout {
    pub fn balanced(total: usize, partitions: usize) -> Result<Self> {
        if partitions == 0 || partitions > total {
            return Err(Error::invalid(
                "partitions",
                format!("must be in [1, {total}], got {partitions}"),
            ));
        }
        let base = total / partitions;
        let extra = total % partitions;
        let mut bounds = Vec::with_capacity(partitions + 1);
        bounds.push(0);
        for k in 0..partitions {
            let size = base + usize::from(k < extra);
            bounds.push(bounds[k] + size);
        }
        Ok(Self { bounds })
    }

    pub fn partitions(&self) -> usize {
        self.bounds.len() - 1
    }

    pub fn total(&self) -> usize {
        *self.bounds.last().unwrap()
    }

    pub fn bounds(&self) -> &[usize] {
        &self.bounds
    }

    pub fn range(&self, k: usize) -> Range<usize> {
        self.bounds[k]..self.bounds[k + 1]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.bounds.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Partition holding coordinate `j`.
    pub fn partition_of(&self, j: usize) -> usize {
        self.bounds.partition_point(|&b| b <= j) - 1
    }
}

/// Anything shaped like an `N x K` fitness table (member-major storage).
pub trait FitnessTable {
    fn population(&self) -> usize;
    fn partitions(&self) -> usize;
    fn values(&self) -> &[f64];

    fn value(&self, member: usize, partition: usize) -> f64 {
        self.values()[member * self.partitions() + partition]
    }
}

/// One client's fitness scores for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct FitnessMatrix {
    pub round: u32,
    pub population: usize,
    pub partitions: usize,
    /// `values[i * partitions + k]`
    pub values: Vec<f64>,
    /// Local sample count used as the aggregation weight.
    pub weight: u32,
}

impl FitnessMatrix {
    pub fn new(round: u32, population: usize, partitions: usize, values: Vec<f64>, weight: u32) -> Result<Self> {
        if values.len() != population * partitions {
            return Err(Error::DimensionMismatch {
                context: "fitness values",
                expected: population * partitions,
                actual: values.len(),
            });
        }
        Ok(Self {
            round,
            population,
            partitions,
            values,
            weight,
        })
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.population).map(|i| self.value(i, k)).collect()
    }
}

impl FitnessTable for FitnessMatrix {
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

fn check_population(set: &PerturbationSet, layout: &PartitionLayout, len: usize) -> Result<()> {
    if set.dim() != len {
        return Err(Error::DimensionMismatch {
            context: "perturbation dimension",
            expected: len,
            actual: set.dim(),
        });
    }
    if layout.total() != len {
        return Err(Error::DimensionMismatch {
            context: "partition layout",
            expected: len,
            actual: layout.total(),
        });
    }
    Ok(())
}

/// Scores every population member against the target on each partition:
/// `values[i][k] = -|| (theta' - theta)[k] - sigma * eps_i[k] ||^2`.
pub fn encode(
    theta: &ModelParams,
    target: &ModelParams,
    set: &PerturbationSet,
    layout: &PartitionLayout,
    weight: u32,
    round: u32,
) -> Result<FitnessMatrix> {
    if theta.arch() != target.arch() {
        return Err(Error::invalid("target", "architecture differs from the model"));
    }
    check_population(set, layout, theta.len())?;
    let progress: Vec<f64> = target.values().iter().zip(theta.values()).map(|(t, b)| t - b).collect();
    encode_progress(&progress, set, layout, weight, round)
}

/// `encode` in terms of the local progress `theta' - theta`.
pub fn encode_progress(
    progress: &[f64],
    set: &PerturbationSet,
    layout: &PartitionLayout,
    weight: u32,
    round: u32,
) -> Result<FitnessMatrix> {
    check_population(set, layout, progress.len())?;
    let sigma = set.sigma();
    let k_count = layout.partitions();
    // Each pair shares one generated vector; distances for +eps and -eps are
    // accumulated together.
    let per_pair: Vec<Vec<(f64, f64)>> = (0..set.pairs())
        .into_par_iter()
        .map(|m| {
            let mut eps = vec![0.0; progress.len()];
            set.fill_pair(m, 0..progress.len(), &mut eps);
            (0..k_count)
                .map(|k| {
                    let r = layout.range(k);
                    let mut plus = 0.0;
                    let mut minus = 0.0;
                    for (p, e) in progress[r.clone()].iter().zip(&eps[r]) {
                        let step = sigma * e;
                        let a = p - step;
                        let b = p + step;
                        plus += a * a;
                        minus += b * b;
                    }
                    (-plus, -minus)
                })
                .collect()
        })
        .collect();
    let mut values = vec![0.0; set.population() * k_count];
    for (m, cols) in per_pair.iter().enumerate() {
        for (k, &(plus, minus)) in cols.iter().enumerate() {
            values[(2 * m) * k_count + k] = plus;
            values[(2 * m + 1) * k_count + k] = minus;
        }
    }
    FitnessMatrix::new(round, set.population(), k_count, values, weight)
}

const CHUNK: usize = 256;

/// The model step encoded by `fitness`:
/// `step[k] = alpha / (N sigma) * sum_i F[i][k] eps_i[k]`.
///
/// Mirrored members are folded as `(F[2m] - F[2m+1]) * eps_2m`, summed over
/// pairs in ascending order for every coordinate, so the result does not
/// depend on how coordinates are split across threads.
pub fn decode_step(
    fitness: &impl FitnessTable,
    set: &PerturbationSet,
    layout: &PartitionLayout,
    alpha: f64,
) -> Result<Vec<f64>> {
    let dim = layout.total();
    check_population(set, layout, dim)?;
    if fitness.population() != set.population() {
        return Err(Error::DimensionMismatch {
            context: "fitness population",
            expected: set.population(),
            actual: fitness.population(),
        });
    }
    if fitness.partitions() != layout.partitions() {
        return Err(Error::DimensionMismatch {
            context: "fitness partitions",
            expected: layout.partitions(),
            actual: fitness.partitions(),
        });
    }
    let k_count = layout.partitions();
    let diffs: Vec<f64> = (0..set.pairs())
        .flat_map(|m| (0..k_count).map(move |k| (m, k)))
        .map(|(m, k)| fitness.value(2 * m, k) - fitness.value(2 * m + 1, k))
        .collect();
    let scale = alpha / (set.population() as f64 * set.sigma());

    let mut step = vec![0.0; dim];
    step.par_chunks_mut(CHUNK).enumerate().for_each(|(c, out)| {
        let start = c * CHUNK;
        let range = start..start + out.len();
        let owner: Vec<usize> = range.clone().map(|j| layout.partition_of(j)).collect();
        let mut eps = vec![0.0; out.len()];
        for m in 0..set.pairs() {
            set.fill_pair(m, range.clone(), &mut eps);
            let row = &diffs[m * k_count..(m + 1) * k_count];
            for ((acc, e), &k) in out.iter_mut().zip(&eps).zip(&owner) {
                *acc += row[k] * e;
            }
        }
        out.iter_mut().for_each(|v| *v *= scale);
    });
    Ok(step)
}

/// `theta + decode_step(...)`.
pub fn decode(
    theta: &ModelParams,
    fitness: &impl FitnessTable,
    set: &PerturbationSet,
    layout: &PartitionLayout,
    alpha: f64,
) -> Result<ModelParams> {
    if layout.total() != theta.len() {
        return Err(Error::DimensionMismatch {
            context: "partition layout",
            expected: theta.len(),
            actual: layout.total(),
        });
    }
    let step = decode_step(fitness, set, layout, alpha)?;
    let next = theta.values().iter().zip(&step).map(|(t, s)| t + s).collect();
    theta.with_values(next)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reconstruction {
    /// Cosine between the decoded step and `theta' - theta`.
    pub cosine: f64,
    /// `||step|| / ||2 alpha (theta - theta')||`.
    pub gain: f64,
}

/// How well one encode/decode round trip reproduces the local update.
pub fn reconstruction_quality(
    theta: &ModelParams,
    target: &ModelParams,
    set: &PerturbationSet,
    layout: &PartitionLayout,
    alpha: f64,
) -> Result<Reconstruction> {
    let progress: Vec<f64> = target.values().iter().zip(theta.values()).map(|(t, b)| t - b).collect();
    let progress_norm = norm(&progress);
    if progress_norm == 0.0 {
        return Err(Error::Degenerate("target equals model"));
    }
    if alpha.is_nan() || alpha <= 0.0 {
        return Err(Error::Degenerate("alpha must be positive"));
    }
    let fitness = encode(theta, target, set, layout, 1, 0)?;
    let step = decode_step(&fitness, set, layout, alpha)?;
    let step_norm = norm(&step);
    if step_norm == 0.0 {
        return Err(Error::Degenerate("decoded step is zero"));
    }
    let dot: f64 = step.iter().zip(&progress).map(|(a, b)| a * b).sum();
    Ok(Reconstruction {
        cosine: (dot / (step_norm * progress_norm)).clamp(-1.0, 1.0),
        gain: step_norm / (2.0 * alpha * progress_norm),
    })
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detrng::RngStream;
    use crate::nn::{Activation, ArchSpec};
    use std::sync::Arc;

    fn model_pair(seed: u64, hidden: usize, scale: f64) -> (ModelParams, ModelParams) {
        let arch = Arc::new(ArchSpec::mlp(3, &[hidden], 2, Activation::Relu).unwrap());
        let mut rng = RngStream::new(seed);
        let theta: Vec<f64> = (0..arch.param_count()).map(|_| rng.gaussian()).collect();
        let target: Vec<f64> = theta.iter().map(|t| t + scale * rng.gaussian()).collect();
        (
            ModelParams::new(arch.clone(), theta).unwrap(),
            ModelParams::new(arch, target).unwrap(),
        )
    }

    #[test]
    fn layouts_are_balanced() {
        assert_eq!(make_layout(10, 1).unwrap().sizes(), vec![10]);
        assert_eq!(make_layout(10, 3).unwrap().sizes(), vec![4, 3, 3]);
        assert_eq!(make_layout(10, 10).unwrap().sizes(), vec![1; 10]);
        assert!(make_layout(10, 0).is_err());
        assert!(make_layout(10, 11).is_err());
        let l = make_layout(10, 3).unwrap();
        assert_eq!(
            (0..10).map(|j| l.partition_of(j)).collect::<Vec<_>>(),
            vec![0, 0, 0, 0, 1, 1, 1, 2, 2, 2]
        );
    }

    #[test]
    fn zero_progress_scores_are_scaled_norms() {
        let (theta, _) = model_pair(1, 4, 0.1);
        let set = PerturbationSet::new(5, 8, theta.len(), 0.3).unwrap();
        let layout = make_layout(theta.len(), 2).unwrap();
        let f = encode(&theta, &theta, &set, &layout, 1, 0).unwrap();
        for i in 0..8 {
            let eps = set.perturbation(i).unwrap();
            for k in 0..2 {
                let expected: f64 = -eps[layout.range(k)].iter().map(|e| 0.09 * e * e).sum::<f64>();
                assert!((f.value(i, k) - expected).abs() <= 1e-12 * expected.abs());
            }
        }
        // decode of a pure-norm table leaves the model untouched
        assert_eq!(decode(&theta, &f, &set, &layout, 0.7).unwrap(), theta);
    }

    #[test]
    fn mirrored_difference_is_the_cross_term() {
        let (theta, target) = model_pair(2, 5, 0.2);
        let set = PerturbationSet::new(6, 6, theta.len(), 0.27).unwrap();
        let layout = make_layout(theta.len(), 3).unwrap();
        let f = encode(&theta, &target, &set, &layout, 1, 0).unwrap();
        let delta: Vec<f64> = theta.values().iter().zip(target.values()).map(|(a, b)| a - b).collect();
        for m in 0..3 {
            let eps = set.perturbation(2 * m).unwrap();
            for k in 0..3 {
                let r = layout.range(k);
                let dot: f64 = delta[r.clone()].iter().zip(&eps[r]).map(|(d, e)| d * e).sum();
                let diff = f.value(2 * m, k) - f.value(2 * m + 1, k);
                assert!((diff - (-4.0 * 0.27 * dot)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn partitioned_scores_sum_to_unpartitioned() {
        let (theta, target) = model_pair(3, 6, 0.3);
        let set = PerturbationSet::new(7, 10, theta.len(), 0.5).unwrap();
        let one = encode(&theta, &target, &set, &make_layout(theta.len(), 1).unwrap(), 1, 0).unwrap();
        let two = encode(&theta, &target, &set, &make_layout(theta.len(), 2).unwrap(), 1, 0).unwrap();
        for i in 0..10 {
            let sum = two.value(i, 0) + two.value(i, 1);
            assert!((sum - one.value(i, 0)).abs() < 1e-12 * one.value(i, 0).abs());
        }
    }

    #[test]
    fn constant_and_zero_alpha_decode_to_identity() {
        let (theta, target) = model_pair(4, 4, 0.1);
        let set = PerturbationSet::new(8, 12, theta.len(), 0.2).unwrap();
        let layout = make_layout(theta.len(), 2).unwrap();
        let flat = FitnessMatrix::new(0, 12, 2, vec![-3.25; 24], 1).unwrap();
        assert_eq!(decode(&theta, &flat, &set, &layout, 0.5).unwrap(), theta);
        let f = encode(&theta, &target, &set, &layout, 1, 0).unwrap();
        assert_eq!(decode(&theta, &f, &set, &layout, 0.0).unwrap(), theta);
    }

    #[test]
    fn decode_rejects_mismatched_fitness() {
        let (theta, _) = model_pair(4, 4, 0.1);
        let set = PerturbationSet::new(8, 12, theta.len(), 0.2).unwrap();
        let layout = make_layout(theta.len(), 2).unwrap();
        let wrong = FitnessMatrix::new(0, 12, 3, vec![0.0; 36], 1).unwrap();
        assert!(decode(&theta, &wrong, &set, &layout, 0.5).is_err());
    }

    #[test]
    fn single_pair_projects_onto_its_direction() {
        let (theta, target) = model_pair(5, 3, 0.4);
        let set = PerturbationSet::new(9, 2, theta.len(), 0.1).unwrap();
        let layout = make_layout(theta.len(), 1).unwrap();
        let q = reconstruction_quality(&theta, &target, &set, &layout, 0.5).unwrap();
        let eps = set.perturbation(0).unwrap();
        let progress: Vec<f64> = target.values().iter().zip(theta.values()).map(|(t, b)| t - b).collect();
        let cos = progress.iter().zip(&eps).map(|(a, b)| a * b).sum::<f64>() / (norm(&progress) * norm(&eps));
        assert!((q.cosine - cos.abs()).abs() < 1e-12);
    }

    #[test]
    fn many_members_recover_the_direction() {
        let (theta, target) = model_pair(6, 4, 0.1);
        let d = theta.len();
        let set = PerturbationSet::new(10, 256 * d, d, 0.27).unwrap();
        let layout = make_layout(d, 1).unwrap();
        let q = reconstruction_quality(&theta, &target, &set, &layout, 0.5).unwrap();
        assert!(q.cosine > 0.99, "{q:?}");
    }

    #[test]
    fn zero_progress_diagnostic_is_an_error() {
        let (theta, _) = model_pair(7, 4, 0.1);
        let set = PerturbationSet::new(1, 4, theta.len(), 0.2).unwrap();
        let layout = make_layout(theta.len(), 1).unwrap();
        assert!(matches!(
            reconstruction_quality(&theta, &theta, &set, &layout, 0.5),
            Err(Error::Degenerate(_))
        ));
    }
}
