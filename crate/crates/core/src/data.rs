//! Dataset ingestion, synthetic generation, and disjoint partitioning
//! across agents.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// One labelled example. Features are normalized to `[0, 1]` per coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: usize,
}

/// An ordered, non-empty collection of examples sharing a feature dimension.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub num_classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        examples: Vec<Example>,
        num_classes: usize,
    ) -> Result<Self> {
        let name = name.into();
        if examples.is_empty() {
            return Err(Error::Dataset(format!("dataset '{name}' is empty")));
        }
        if num_classes == 0 {
            return Err(Error::Dataset(format!("dataset '{name}' has zero classes")));
        }
        let dim = examples[0].features.len();
        for (i, ex) in examples.iter().enumerate() {
            if ex.features.len() != dim {
                return Err(Error::Dataset(format!(
                    "example {i} has dimension {}, expected {dim}",
                    ex.features.len()
                )));
            }
            if ex.label >= num_classes {
                return Err(Error::Dataset(format!(
                    "example {i} has label {} but only {num_classes} classes exist",
                    ex.label
                )));
            }
            if ex.features.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Dataset(format!(
                    "example {i} has a feature outside [0, 1]"
                )));
            }
        }
        Ok(Self {
            examples,
            num_classes,
            name,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.examples[0].features.len()
    }

    /// Concatenate two datasets with identical dimensions and class counts.
    pub fn concat(mut self, other: Dataset) -> Result<Dataset> {
        if self.feature_dim() != other.feature_dim() {
            return Err(Error::Dataset("concat: feature dimensions differ".into()));
        }
        if self.num_classes != other.num_classes {
            return Err(Error::Dataset("concat: class counts differ".into()));
        }
        self.examples.extend(other.examples);
        Ok(self)
    }
}

/// How a dataset is split into per-agent train/test shards.
#[derive(Debug, Clone)]
pub struct PartitionPlan {
    pub num_agents: usize,
    /// Fraction of each train shard carrying the agent's majority label.
    pub bias_rate: f64,
    /// Majority label per agent; defaults to `agent_id % num_classes`.
    pub majority_label_per_agent: Option<Vec<usize>>,
    pub train_fraction: f64,
    pub seed: u64,
}

impl PartitionPlan {
    fn validate(&self, dataset: &Dataset) -> Result<()> {
        if self.num_agents == 0 {
            return Err(Error::Partition("num_agents must be >= 1".into()));
        }
        if dataset.len() < self.num_agents {
            return Err(Error::Partition(format!(
                "dataset of {} examples cannot be split across {} agents",
                dataset.len(),
                self.num_agents
            )));
        }
        if !(0.0..=1.0).contains(&self.bias_rate) {
            return Err(Error::Partition("bias_rate must lie in [0, 1]".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Partition("train_fraction must lie in (0, 1)".into()));
        }
        if let Some(labels) = &self.majority_label_per_agent {
            if labels.len() != self.num_agents {
                return Err(Error::Partition(
                    "majority_label_per_agent length must equal num_agents".into(),
                ));
            }
            if let Some(bad) = labels.iter().find(|&&l| l >= dataset.num_classes) {
                return Err(Error::Partition(format!(
                    "majority label {bad} out of range (num_classes = {})",
                    dataset.num_classes
                )));
            }
        }
        Ok(())
    }
}

fn read_be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::IdxFormat(format!("truncated file while reading {what}")))
}

/// Load an IDX image/label file pair (big-endian magics 0x00000803 / 0x00000801,
/// unsigned byte payload). Pixels are scaled to `[0, 1]` by `v / 255`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;

    let magic = read_be_u32(&images, 0, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::IdxFormat(format!(
            "image file magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"
        )));
    }
    let n_images = read_be_u32(&images, 4, "image count")? as usize;
    let rows = read_be_u32(&images, 8, "row count")? as usize;
    let cols = read_be_u32(&images, 12, "column count")? as usize;
    let pixels = rows * cols;
    let image_payload = &images[16.min(images.len())..];
    if image_payload.len() != n_images * pixels {
        return Err(Error::IdxFormat(format!(
            "image payload holds {} bytes, header promises {}",
            image_payload.len(),
            n_images * pixels
        )));
    }

    let magic = read_be_u32(&labels, 0, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::IdxFormat(format!(
            "label file magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"
        )));
    }
    let n_labels = read_be_u32(&labels, 4, "label count")? as usize;
    let label_payload = &labels[8.min(labels.len())..];
    if label_payload.len() != n_labels {
        return Err(Error::IdxFormat(format!(
            "label payload holds {} bytes, header promises {n_labels}",
            label_payload.len()
        )));
    }
    if n_images != n_labels {
        return Err(Error::IdxFormat(format!(
            "image count {n_images} does not match label count {n_labels}"
        )));
    }

    let num_classes = label_payload.iter().copied().max().unwrap_or(0) as usize + 1;
    let examples = (0..n_images)
        .map(|i| Example {
            features: image_payload[i * pixels..(i + 1) * pixels]
                .iter()
                .map(|&b| f64::from(b) / 255.0)
                .collect(),
            label: label_payload[i] as usize,
        })
        .collect();

    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    Dataset::new(name, examples, num_classes)
}

/// Generate class-conditional Gaussian blobs, then min-max normalize each
/// coordinate into `[0, 1]`. Labels are assigned round-robin so every class
/// is populated; the example order is shuffled deterministically.
pub fn synth_blobs(
    num_examples: usize,
    num_classes: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || dim == 0 {
        return Err(Error::Dataset("num_classes and dim must be >= 1".into()));
    }
    if num_examples < num_classes {
        return Err(Error::Dataset(format!(
            "need at least one example per class ({num_examples} < {num_classes})"
        )));
    }
    if separation <= 0.0 {
        return Err(Error::Dataset("separation must be positive".into()));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    // Class c is centered on axis (c % dim) at radius separation * (1 + c/dim),
    // which keeps all pairwise mean distances >= separation.
    let mean_of = |class: usize| -> (usize, f64) {
        let axis = class % dim;
        let ring = (class / dim) as f64;
        (axis, separation * (ring + 1.0))
    };

    let mut raw: Vec<(Vec<f64>, usize)> = (0..num_examples)
        .map(|i| {
            let label = i % num_classes;
            let (axis, radius) = mean_of(label);
            let features: Vec<f64> = (0..dim)
                .map(|d| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    if d == axis {
                        radius + noise
                    } else {
                        noise
                    }
                })
                .collect();
            (features, label)
        })
        .collect();
    raw.shuffle(&mut rng);

    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for (features, _) in &raw {
        for d in 0..dim {
            lo[d] = lo[d].min(features[d]);
            hi[d] = hi[d].max(features[d]);
        }
    }
    let examples = raw
        .into_iter()
        .map(|(features, label)| Example {
            features: features
                .iter()
                .enumerate()
                .map(|(d, &v)| {
                    let span = hi[d] - lo[d];
                    if span <= f64::EPSILON {
                        0.5
                    } else {
                        (v - lo[d]) / span
                    }
                })
                .collect(),
            label,
        })
        .collect();

    Dataset::new(
        format!("blobs-{num_examples}x{num_classes}"),
        examples,
        num_classes,
    )
}

/// Per-label index pools, each in a uniformly shuffled order.
struct LabelPools {
    pools: Vec<Vec<usize>>,
    remaining: usize,
}

impl LabelPools {
    fn new(dataset: &Dataset, rng: &mut ChaCha20Rng) -> Self {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(rng);
        let mut pools = vec![Vec::new(); dataset.num_classes];
        for idx in order {
            pools[dataset.examples[idx].label].push(idx);
        }
        let remaining = dataset.len();
        Self { pools, remaining }
    }

    fn take_label(&mut self, label: usize) -> Option<usize> {
        let idx = self.pools[label].pop()?;
        self.remaining -= 1;
        Some(idx)
    }

    /// Draw uniformly from all remaining examples, optionally excluding one label.
    fn take_uniform(&mut self, rng: &mut ChaCha20Rng, exclude: Option<usize>) -> Option<usize> {
        let total: usize = self
            .pools
            .iter()
            .enumerate()
            .filter(|(l, _)| Some(*l) != exclude)
            .map(|(_, p)| p.len())
            .sum();
        if total == 0 {
            return None;
        }
        let mut pick = rng.random_range(0..total);
        for (label, pool) in self.pools.iter().enumerate() {
            if Some(label) == exclude {
                continue;
            }
            if pick < pool.len() {
                let slot = pool.len() - 1 - pick;
                let idx = self.pools[label].remove(slot);
                self.remaining -= 1;
                return Some(idx);
            }
            pick -= pool.len();
        }
        unreachable!("pick bounded by total pool size")
    }
}

/// Split `dataset` into `num_agents` disjoint `(train, test)` shards.
///
/// Each shard holds `floor(n / K)` examples (the remainder is dropped),
/// split by `train_fraction`. Test shards are always drawn uniformly; with
/// `bias_rate` > 0 each train shard carries exactly
/// `floor(bias_rate * train_len)` examples of the agent's majority label and
/// the rest is drawn uniformly from the other labels.
pub fn partition(dataset: &Dataset, plan: &PartitionPlan) -> Result<Vec<(Dataset, Dataset)>> {
    plan.validate(dataset)?;
    let shard_len = dataset.len() / plan.num_agents;
    let train_len = ((plan.train_fraction * shard_len as f64).round() as usize)
        .clamp(1, shard_len.saturating_sub(1).max(1));
    let test_len = shard_len - train_len;
    if test_len == 0 {
        return Err(Error::Partition(format!(
            "shard of {shard_len} leaves no test examples at train_fraction {}",
            plan.train_fraction
        )));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(plan.seed);
    let mut pools = LabelPools::new(dataset, &mut rng);

    let majority_of = |agent: usize| {
        plan.majority_label_per_agent
            .as_ref()
            .map(|v| v[agent])
            .unwrap_or(agent % dataset.num_classes)
    };

    // Three phases over shared label pools. Reserving all majority quotas
    // first, then filling non-majority train draws, then drawing tests from
    // the remainder keeps exact-fit demands (K * shard_len = n) feasible;
    // interleaving lets uniform draws starve a later agent's quota.
    let majority_count = if plan.bias_rate > 0.0 {
        (plan.bias_rate * train_len as f64).floor() as usize
    } else {
        0
    };
    let mut train_idx: Vec<Vec<usize>> = Vec::with_capacity(plan.num_agents);
    for agent in 0..plan.num_agents {
        let majority = majority_of(agent);
        let mut reserved = Vec::with_capacity(train_len);
        for _ in 0..majority_count {
            let idx = pools.take_label(majority).ok_or_else(|| {
                Error::Partition(format!(
                    "insufficient examples of majority label {majority} for agent {agent}"
                ))
            })?;
            reserved.push(idx);
        }
        train_idx.push(reserved);
    }

    for (agent, reserved) in train_idx.iter_mut().enumerate() {
        let exclude = (plan.bias_rate > 0.0).then_some(majority_of(agent));
        for _ in reserved.len()..train_len {
            let idx = pools.take_uniform(&mut rng, exclude).ok_or_else(|| {
                Error::Partition(format!(
                    "insufficient non-majority examples for agent {agent}"
                ))
            })?;
            reserved.push(idx);
        }
        // Keep minibatches label-mixed.
        reserved.shuffle(&mut rng);
    }

    let mut shards = Vec::with_capacity(plan.num_agents);
    for (agent, train_idx) in train_idx.into_iter().enumerate() {
        let mut test_idx = Vec::with_capacity(test_len);
        for _ in 0..test_len {
            test_idx.push(
                pools
                    .take_uniform(&mut rng, None)
                    .expect("shard sizes bounded by dataset size"),
            );
        }
        let collect = |idx: &[usize]| -> Vec<Example> {
            idx.iter().map(|&i| dataset.examples[i].clone()).collect()
        };
        let train = Dataset::new(
            format!("{}-a{agent}-train", dataset.name),
            collect(&train_idx),
            dataset.num_classes,
        )?;
        let test = Dataset::new(
            format!("{}-a{agent}-test", dataset.name),
            collect(&test_idx),
            dataset.num_classes,
        )?;
        shards.push((train, test));
    }
    Ok(shards)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use std::io::Write;

    fn write_idx_pair(
        dir: &Path,
        n: usize,
        rows: usize,
        cols: usize,
    ) -> (std::path::PathBuf, std::path::PathBuf) {
        let images_path = dir.join("images-idx3-ubyte");
        let labels_path = dir.join("labels-idx1-ubyte");
        let mut images = Vec::new();
        images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        images.extend_from_slice(&(n as u32).to_be_bytes());
        images.extend_from_slice(&(rows as u32).to_be_bytes());
        images.extend_from_slice(&(cols as u32).to_be_bytes());
        for i in 0..n * rows * cols {
            images.push((i % 251) as u8);
        }
        let mut labels = Vec::new();
        labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        labels.extend_from_slice(&(n as u32).to_be_bytes());
        for i in 0..n {
            labels.push((i % 10) as u8);
        }
        std::fs::File::create(&images_path)
            .unwrap()
            .write_all(&images)
            .unwrap();
        std::fs::File::create(&labels_path)
            .unwrap()
            .write_all(&labels)
            .unwrap();
        (images_path, labels_path)
    }

    #[test]
    fn load_idx_parses_synthetic_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = write_idx_pair(dir.path(), 100, 28, 28);
        let ds = load_idx(&images, &labels).unwrap();
        assert_eq!(ds.len(), 100);
        assert_eq!(ds.feature_dim(), 784);
        assert_eq!(ds.num_classes, 10);
        assert!(ds
            .examples
            .iter()
            .all(|e| e.features.iter().all(|&v| (0.0..=1.0).contains(&v))));
    }

    #[test]
    fn load_idx_rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = write_idx_pair(dir.path(), 5, 2, 2);
        // Hand the label file in as the image file: magic 0x00000801.
        let err = load_idx(&labels, &images).unwrap_err();
        assert!(matches!(err, Error::IdxFormat(_)), "got {err:?}");
    }

    #[test]
    fn load_idx_rejects_truncation_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = write_idx_pair(dir.path(), 10, 2, 2);
        let mut bytes = std::fs::read(&images).unwrap();
        bytes.truncate(bytes.len() - 3);
        let cut = dir.path().join("cut");
        std::fs::write(&cut, &bytes).unwrap();
        assert!(matches!(load_idx(&cut, &labels), Err(Error::IdxFormat(_))));

        let (_, other_labels) = write_idx_pair(&dir.path().join("."), 10, 2, 2);
        let mut short = std::fs::read(&other_labels).unwrap();
        short[7] = 9; // claim 9 labels, payload still has 10
        let bad = dir.path().join("bad-labels");
        std::fs::write(&bad, &short).unwrap();
        assert!(matches!(load_idx(&images, &bad), Err(Error::IdxFormat(_))));
    }

    /// Independent linear probe: nearest class mean. Verifies blob separability
    /// without involving the model module.
    fn nearest_mean_accuracy(ds: &Dataset) -> f64 {
        let dim = ds.feature_dim();
        let mut means = vec![vec![0.0; dim]; ds.num_classes];
        let mut counts = vec![0usize; ds.num_classes];
        for ex in &ds.examples {
            counts[ex.label] += 1;
            for (m, f) in means[ex.label].iter_mut().zip(&ex.features) {
                *m += f;
            }
        }
        for (mean, &count) in means.iter_mut().zip(&counts) {
            for v in mean.iter_mut() {
                *v /= count as f64;
            }
        }
        let correct = ds
            .examples
            .iter()
            .filter(|ex| {
                let best = (0..ds.num_classes)
                    .min_by(|&a, &b| {
                        let da: f64 = (0..dim)
                            .map(|d| (ex.features[d] - means[a][d]).powi(2))
                            .sum();
                        let db: f64 = (0..dim)
                            .map(|d| (ex.features[d] - means[b][d]).powi(2))
                            .sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                best == ex.label
            })
            .count();
        correct as f64 / ds.len() as f64
    }

    #[test]
    fn blobs_are_linearly_separable() {
        let ds = synth_blobs(1000, 2, 16, 4.0, 7).unwrap();
        assert!(nearest_mean_accuracy(&ds) > 0.99);
    }

    #[test]
    fn blobs_cover_every_class_at_minimum_size() {
        let ds = synth_blobs(10, 10, 2, 1.0, 0).unwrap();
        let seen: HashSet<usize> = ds.examples.iter().map(|e| e.label).collect();
        assert_eq!(seen.len(), 10);
    }

    #[test]
    fn blobs_are_deterministic_under_seed() {
        let a = synth_blobs(200, 3, 4, 2.0, 42).unwrap();
        let b = synth_blobs(200, 3, 4, 2.0, 42).unwrap();
        assert_eq!(a.examples, b.examples);
        let c = synth_blobs(200, 3, 4, 2.0, 43).unwrap();
        assert_ne!(a.examples, c.examples);
    }

    /// Dataset whose first feature encodes the example identity.
    fn tagged_dataset(n: usize, num_classes: usize) -> Dataset {
        let examples = (0..n)
            .map(|i| Example {
                features: vec![i as f64 / n as f64, 0.0],
                label: i % num_classes,
            })
            .collect();
        Dataset::new("tagged", examples, num_classes).unwrap()
    }

    fn identity(ex: &Example) -> u64 {
        (ex.features[0] * 1e12).round() as u64
    }

    #[test]
    fn partition_produces_disjoint_covering_shards() {
        let ds = tagged_dataset(70_000, 10);
        let plan = PartitionPlan {
            num_agents: 100,
            bias_rate: 0.0,
            majority_label_per_agent: None,
            train_fraction: 6.0 / 7.0,
            seed: 11,
        };
        let shards = partition(&ds, &plan).unwrap();
        assert_eq!(shards.len(), 100);
        let mut seen = HashSet::new();
        for (train, test) in &shards {
            assert_eq!(train.len(), 600);
            assert_eq!(test.len(), 100);
            for ex in train.examples.iter().chain(&test.examples) {
                assert!(seen.insert(identity(ex)), "shards overlap");
            }
        }
        assert_eq!(seen.len(), 70_000);
    }

    #[test]
    fn partition_is_deterministic() {
        let ds = tagged_dataset(1000, 4);
        let plan = PartitionPlan {
            num_agents: 8,
            bias_rate: 0.25,
            majority_label_per_agent: None,
            train_fraction: 0.8,
            seed: 5,
        };
        let a = partition(&ds, &plan).unwrap();
        let b = partition(&ds, &plan).unwrap();
        for ((ta, sa), (tb, sb)) in a.iter().zip(&b) {
            assert_eq!(ta.examples, tb.examples);
            assert_eq!(sa.examples, sb.examples);
        }
    }

    #[test]
    fn single_agent_partition_covers_whole_dataset() {
        let ds = tagged_dataset(100, 2);
        let plan = PartitionPlan {
            num_agents: 1,
            bias_rate: 0.0,
            majority_label_per_agent: None,
            train_fraction: 0.8,
            seed: 1,
        };
        let shards = partition(&ds, &plan).unwrap();
        assert_eq!(shards.len(), 1);
        let (train, test) = &shards[0];
        assert_eq!(train.len() + test.len(), 100);
        let ids: HashSet<u64> = train
            .examples
            .iter()
            .chain(&test.examples)
            .map(identity)
            .collect();
        assert_eq!(ids.len(), 100);
    }

    #[test]
    fn biased_partition_hits_requested_majority_mass() {
        let ds = synth_blobs(4000, 10, 4, 2.0, 3).unwrap();
        let plan = PartitionPlan {
            num_agents: 10,
            bias_rate: 0.3,
            majority_label_per_agent: None,
            train_fraction: 0.8,
            seed: 9,
        };
        let shards = partition(&ds, &plan).unwrap();
        for (agent, (train, _)) in shards.iter().enumerate() {
            let majority = agent % 10;
            let count = train
                .examples
                .iter()
                .filter(|e| e.label == majority)
                .count();
            let expected = (0.3 * train.len() as f64).floor() as usize;
            assert!(
                count.abs_diff(expected) <= 1,
                "agent {agent}: {count} majority examples, expected ~{expected}"
            );
        }
    }

    #[test]
    fn biased_partition_fails_when_label_pool_is_exhausted() {
        // Only ~100 examples of each of 2 classes; demand 90% of 450-train shards.
        let ds = tagged_dataset(1000, 2);
        let plan = PartitionPlan {
            num_agents: 2,
            bias_rate: 0.9,
            majority_label_per_agent: Some(vec![0, 0]),
            train_fraction: 0.9,
            seed: 2,
        };
        let err = partition(&ds, &plan).unwrap_err();
        assert!(matches!(err, Error::Partition(_)), "got {err:?}");
    }

    #[test]
    fn unbiased_shards_are_roughly_class_balanced() {
        let num_classes = 5;
        let ds = tagged_dataset(5000, num_classes);
        let plan = PartitionPlan {
            num_agents: 10,
            bias_rate: 0.0,
            majority_label_per_agent: None,
            train_fraction: 0.8,
            seed: 17,
        };
        for (train, test) in partition(&ds, &plan).unwrap() {
            for shard in [&train, &test] {
                for class in 0..num_classes {
                    let freq = shard.examples.iter().filter(|e| e.label == class).count() as f64
                        / shard.len() as f64;
                    assert!(
                        (freq - 1.0 / num_classes as f64).abs() < 0.15,
                        "class {class} frequency {freq} too far from uniform"
                    );
                }
            }
        }
    }

    #[test]
    fn mnist_files_load_when_present() {
        let images = Path::new("data/mnist/train-images-idx3-ubyte");
        let labels = Path::new("data/mnist/train-labels-idx1-ubyte");
        if !images.exists() || !labels.exists() {
            return;
        }
        let ds = load_idx(images, labels).unwrap();
        assert_eq!(ds.len(), 60_000);
        assert_eq!(ds.num_classes, 10);
    }
}
