//! Classification datasets: synthetic Gaussian blobs, IDX (MNIST-family)
//! files, and label-skewed client sharding.

use std::path::Path;

use crate::detrng::{derive_key, RngStream};
use crate::error::{Error, Result};
use crate::nn::Batch;

/// Row-major `n x dim` features with labels in `[0, classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    classes: usize,
}

impl Dataset {
    pub fn new(inputs: Vec<f64>, labels: Vec<usize>, dim: usize, classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        if dim == 0 || inputs.len() != labels.len() * dim {
            return Err(Error::DimensionMismatch {
                context: "dataset inputs",
                expected: labels.len() * dim,
                actual: inputs.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid("labels", format!("label {bad} outside [0, {classes})")));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("inputs", "features must be finite"));
        }
        Ok(Self {
            inputs,
            labels,
            dim,
            classes,
        })
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

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn gather(&self, indices: &[usize]) -> Batch {
        let mut inputs = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Batch::new(inputs, labels, self.dim).expect("gathered rows are consistent")
    }

    /// Rows at `indices`, in that order, as a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: self.len(),
            });
        }
        let b = self.gather(indices);
        Dataset::new(b.inputs().to_vec(), b.labels().to_vec(), self.dim, self.classes)
    }

    /// Deterministic train/holdout split; every class keeps roughly the same share.
    pub fn split_holdout(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::invalid("test_fraction", "must be in (0, 1)"));
        }
        let mut rng = RngStream::new(derive_key(seed, 0x7E57));
        let mut train = Vec::new();
        let mut test = Vec::new();
        for class in 0..self.classes {
            let mut members: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
            rng.shuffle(&mut members);
            let held = ((members.len() as f64) * fraction).round() as usize;
            test.extend_from_slice(&members[..held]);
            train.extend_from_slice(&members[held..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train)?, self.subset(&test)?))
    }

    /// Subtracts `means` (typically the training set's per-feature means).
    pub fn centered(&self, means: &[f64]) -> Result<Dataset> {
        if means.len() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "feature means",
                expected: self.dim,
                actual: means.len(),
            });
        }
        let inputs = self
            .inputs
            .chunks(self.dim)
            .flat_map(|row| row.iter().zip(means).map(|(x, m)| x - m))
            .collect();
        Dataset::new(inputs, self.labels.clone(), self.dim, self.classes)
    }

    pub fn feature_means(&self) -> Vec<f64> {
        let mut means = vec![0.0; self.dim];
        for row in self.inputs.chunks(self.dim) {
            for (m, x) in means.iter_mut().zip(row) {
                *m += x;
            }
        }
        let n = self.len() as f64;
        means.iter_mut().for_each(|m| *m /= n);
        means
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// `classes` isotropic Gaussian clusters in `[0,1]^dim`.
///
/// Centers are drawn in `[0.15, 0.85]^dim` with a minimum pairwise separation
/// when one can be found; features are clamped to `[0, 1]`. Sample `i` has
/// label `i mod classes`, so class counts differ by at most one.
pub fn synth_blobs(seed: u64, n: usize, dim: usize, classes: usize, spread: f64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::invalid("classes", "need at least 2"));
    }
    if n < classes {
        return Err(Error::invalid("samples", format!("need at least {classes}")));
    }
    if dim == 0 {
        return Err(Error::invalid("dim", "must be positive"));
    }
    if !(spread.is_finite() && spread >= 0.0) {
        return Err(Error::invalid("spread", "must be >= 0"));
    }
    let mut rng = RngStream::new(derive_key(seed, 0xB10B));
    let min_sep = 0.7 / (classes as f64).powf(1.0 / dim as f64);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut attempts = 0;
    while centers.len() < classes {
        let candidate: Vec<f64> = (0..dim).map(|_| 0.15 + 0.7 * rng.uniform()).collect();
        attempts += 1;
        let far_enough = centers.iter().all(|c| {
            c.iter()
                .zip(&candidate)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
                >= min_sep
        });
        if far_enough || attempts > 1000 {
            centers.push(candidate);
        }
    }
    let mut inputs = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        for &c in &centers[label] {
            inputs.push((c + spread * rng.gaussian()).clamp(0.0, 1.0));
        }
        labels.push(label);
    }
    Dataset::new(inputs, labels, dim, classes)
}

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_all(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let slice = bytes.get(offset..offset + 4).ok_or_else(|| Error::Truncated {
        path: path.to_path_buf(),
        needed: offset + 4,
        actual: bytes.len(),
    })?;
    Ok(u32::from_be_bytes(slice.try_into().unwrap()))
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

/// Parses an IDX3 image file. Returns `(count, rows*cols, pixels in [0,1])`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    check_magic(bytes, IMAGE_MAGIC, path)?;
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let pixels = rows * cols;
    let needed = 16 + count * pixels;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            needed,
            actual: bytes.len(),
        });
    }
    let data = bytes[16..needed].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((count, pixels, data))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    check_magic(bytes, LABEL_MAGIC, path)?;
    let count = be_u32(bytes, 4, path)? as usize;
    let needed = 8 + count;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            needed,
            actual: bytes.len(),
        });
    }
    Ok(bytes[8..needed].iter().map(|&b| b as usize).collect())
}

/// Loads an image/label IDX pair. The class count is `max(label) + 1`, at least 10
/// for MNIST-family files.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (images, labels) = (images.as_ref(), labels.as_ref());
    let (count, dim, pixels) = parse_idx_images(&read_all(images)?, images)?;
    let label_values = parse_idx_labels(&read_all(labels)?, labels)?;
    if count != label_values.len() {
        return Err(Error::CountMismatch {
            images: count,
            labels: label_values.len(),
        });
    }
    let classes = label_values.iter().copied().max().map_or(0, |m| m + 1).max(10);
    Dataset::new(pixels, label_values, dim, classes)
}

/// Assignment of sample indices to client shards.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardPlan {
    /// `assignment[i]` is the shard owning sample `i`.
    pub assignment: Vec<usize>,
    /// Classes dealt to each shard.
    pub classes: Vec<Vec<usize>>,
}

impl ShardPlan {
    pub fn shards(&self) -> usize {
        self.classes.len()
    }

    pub fn indices(&self, shard: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == shard)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn materialize(&self, ds: &Dataset) -> Result<Vec<Dataset>> {
        (0..self.shards()).map(|s| ds.subset(&self.indices(s))).collect()
    }
}

/// Label-skewed split: a seeded class order is dealt cyclically, `per_client`
/// classes to each client, and each class's samples are divided evenly among
/// the clients holding it. When `clients * per_client < classes`, the leftover
/// classes keep being dealt round-robin so every sample has an owner.
pub fn noniid_split(ds: &Dataset, clients: usize, per_client: usize, seed: u64) -> Result<ShardPlan> {
    if clients == 0 {
        return Err(Error::invalid("clients", "must be >= 1"));
    }
    let total = ds.classes();
    if per_client == 0 || per_client > total {
        return Err(Error::invalid(
            "classes_per_client",
            format!("must be in [1, {total}], got {per_client}"),
        ));
    }
    let mut rng = RngStream::new(derive_key(seed, 0x5A4D));
    let order = rng.permutation(total);
    let mut owned: Vec<Vec<usize>> = (0..clients)
        .map(|j| (0..per_client).map(|r| order[(j * per_client + r) % total]).collect())
        .collect();
    for extra in clients * per_client..total {
        owned[extra % clients].push(order[extra]);
    }

    let mut assignment = vec![usize::MAX; ds.len()];
    for class in 0..total {
        let owners: Vec<usize> = (0..clients).filter(|&j| owned[j].contains(&class)).collect();
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels()[i] == class).collect();
        rng.shuffle(&mut members);
        let share = members.len() / owners.len();
        let extra = members.len() % owners.len();
        let mut cursor = 0;
        for (slot, &owner) in owners.iter().enumerate() {
            let take = share + usize::from(slot < extra);
            for &i in &members[cursor..cursor + take] {
                assignment[i] = owner;
            }
            cursor += take;
        }
    }
    debug_assert!(assignment.iter().all(|&s| s != usize::MAX));
    Ok(ShardPlan {
        assignment,
        classes: owned,
    })
}
