//! Experiment configuration: a TOML file describing the dataset, partition,
//! model, topology, training schedule, verification thresholds, and any
//! adversary or dropout population.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::{AgentProfile, Behavior, SamplingMode};
use crate::coordinator::{MedianRule, SccConfig};
use crate::dp::DpConfig;
use crate::error::{Error, Result};
use crate::topology::TopologyKind;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Class-conditional Gaussian blobs.
    Synthetic {
        num_examples: usize,
        num_classes: usize,
        dim: usize,
        separation: f64,
    },
    /// An IDX image/label pair, optionally concatenated with a second pair
    /// (e.g. train plus test files of the same corpus).
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        extra_images: Option<PathBuf>,
        #[serde(default)]
        extra_labels: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    #[serde(default)]
    pub bias_rate: f64,
    pub train_fraction: f64,
    #[serde(default)]
    pub majority_labels: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden layer widths; input and output sizes come from the dataset.
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    pub kind: TopologyKind,
    pub agents: usize,
    #[serde(default)]
    pub edge_file: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    #[serde(default = "default_inner_epochs")]
    pub inner_epochs: usize,
    /// Defaults to independent sampling when DP is enabled and sequential
    /// passes otherwise.
    #[serde(default)]
    pub sampling: Option<SamplingMode>,
}

fn default_inner_epochs() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpSection {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub delta: f64,
    /// Defaults to `batch_size / train_shard_len`.
    #[serde(default)]
    pub sampling_rate: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerificationConfig {
    pub kappa1: f64,
    pub kappa2: f64,
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    #[serde(default = "default_median_rule")]
    pub median_rule: MedianRule,
}

fn default_eval_fraction() -> f64 {
    1.0
}

fn default_median_rule() -> MedianRule {
    MedianRule::Proof
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversaryKind {
    LabelFlip,
    RandomUpdate,
    FalseReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversaryConfig {
    /// Fraction of agents acting adversarially, spread evenly over ids.
    pub fraction: f64,
    pub kind: AdversaryKind,
    #[serde(default = "default_inflation")]
    pub inflation: f64,
    /// Wire false-report adversaries as mutual accomplices in peer
    /// evaluation.
    #[serde(default)]
    pub collude: bool,
}

fn default_inflation() -> f64 {
    0.3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutConfig {
    /// Fraction of agents subject to dropout (taken from the high ids).
    #[serde(default = "default_dropout_fraction")]
    pub fraction: f64,
    pub prob: f64,
}

fn default_dropout_fraction() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub rounds: u64,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub model: ModelConfig,
    pub topology: TopologyConfig,
    pub training: TrainingConfig,
    pub verification: VerificationConfig,
    #[serde(default)]
    pub dp: Option<DpSection>,
    #[serde(default)]
    pub adversaries: Option<AdversaryConfig>,
    #[serde(default)]
    pub dropout: Option<DropoutConfig>,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        if self.topology.agents == 0 {
            return Err(Error::Config("topology.agents must be >= 1".into()));
        }
        if self.topology.kind == TopologyKind::Custom && self.topology.edge_file.is_none() {
            return Err(Error::Config(
                "custom topologies need topology.edge_file".into(),
            ));
        }
        if !(self.partition.train_fraction > 0.0 && self.partition.train_fraction < 1.0) {
            return Err(Error::Config(
                "partition.train_fraction must lie in (0, 1)".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.partition.bias_rate) {
            return Err(Error::Config(
                "partition.bias_rate must lie in [0, 1]".into(),
            ));
        }
        if self.training.batch_size == 0 || self.training.inner_epochs == 0 {
            return Err(Error::Config("training sizes must be >= 1".into()));
        }
        if self.training.learning_rate <= 0.0 || self.training.learning_rate.is_nan() {
            return Err(Error::Config(
                "training.learning_rate must be positive".into(),
            ));
        }
        let scc = self.scc_config();
        scc.validate()?;
        if let Some(adv) = &self.adversaries {
            if !(0.0..=0.5).contains(&adv.fraction) {
                return Err(Error::Config(
                    "adversaries.fraction must lie in [0, 0.5]".into(),
                ));
            }
            if adv.kind == AdversaryKind::FalseReport
                && !(adv.inflation > 0.0 && adv.inflation <= 1.0)
            {
                return Err(Error::Config(
                    "adversaries.inflation must lie in (0, 1]".into(),
                ));
            }
        }
        if let Some(drop) = &self.dropout {
            if !(0.0..=1.0).contains(&drop.fraction) || !(0.0..=1.0).contains(&drop.prob) {
                return Err(Error::Config("dropout fractions must lie in [0, 1]".into()));
            }
        }
        let adversary_count = self.adversary_ids().len();
        let dropout_count = self
            .dropout
            .as_ref()
            .map(|d| (d.fraction * self.topology.agents as f64).floor() as usize)
            .unwrap_or(0);
        if adversary_count + dropout_count > self.topology.agents {
            return Err(Error::Config(
                "adversary and dropout populations exceed the agent count".into(),
            ));
        }
        Ok(())
    }

    pub fn scc_config(&self) -> SccConfig {
        SccConfig {
            kappa1: self.verification.kappa1,
            kappa2: self.verification.kappa2,
            eval_subsample_fraction: self.verification.eval_fraction,
            rounds: self.rounds,
            median_rule: self.verification.median_rule,
        }
    }

    /// Adversarial agent ids, spread evenly across `0..K`.
    pub fn adversary_ids(&self) -> BTreeSet<usize> {
        let k = self.topology.agents;
        let count = self
            .adversaries
            .as_ref()
            .map(|a| (a.fraction * k as f64).floor() as usize)
            .unwrap_or(0);
        spread_ids(k, count)
    }

    /// Dropout-prone agent ids: the highest ids not already adversarial.
    pub fn dropout_ids(&self) -> BTreeSet<usize> {
        let k = self.topology.agents;
        let count = self
            .dropout
            .as_ref()
            .map(|d| (d.fraction * k as f64).floor() as usize)
            .unwrap_or(0);
        let adversaries = self.adversary_ids();
        (0..k)
            .rev()
            .filter(|a| !adversaries.contains(a))
            .take(count)
            .collect()
    }

    /// Build the per-agent profile, given the agent's train shard length.
    pub fn agent_profile(&self, id: usize, train_len: usize) -> Result<AgentProfile> {
        let dp = match &self.dp {
            Some(section) => {
                let q = section
                    .sampling_rate
                    .unwrap_or((self.training.batch_size as f64 / train_len as f64).min(1.0));
                Some(DpConfig::new(
                    section.clip_norm,
                    section.noise_multiplier,
                    q,
                    section.delta,
                )?)
            }
            None => None,
        };
        let sampling = self.training.sampling.unwrap_or(if dp.is_some() {
            SamplingMode::Independent
        } else {
            SamplingMode::Sequential
        });

        let adversaries = self.adversary_ids();
        let behavior = if adversaries.contains(&id) {
            let adv = self
                .adversaries
                .as_ref()
                .expect("id set non-empty implies config");
            match adv.kind {
                AdversaryKind::LabelFlip => Behavior::LabelFlip,
                AdversaryKind::RandomUpdate => Behavior::RandomUpdate,
                AdversaryKind::FalseReport => Behavior::FalseReport {
                    inflation: adv.inflation,
                },
            }
        } else if self.dropout_ids().contains(&id) {
            Behavior::Dropout {
                prob: self.dropout.as_ref().expect("dropout config").prob,
            }
        } else {
            Behavior::Benign
        };

        let accomplices = match (&self.adversaries, &behavior) {
            (Some(adv), Behavior::FalseReport { .. }) if adv.collude => {
                adversaries.iter().copied().filter(|&a| a != id).collect()
            }
            _ => BTreeSet::new(),
        };

        let profile = AgentProfile {
            id,
            behavior,
            dp,
            learning_rate: self.training.learning_rate,
            batch_size: self.training.batch_size,
            inner_epochs: self.training.inner_epochs,
            sampling,
            accomplices,
        };
        profile.validate()?;
        Ok(profile)
    }
}

/// `count` ids spread evenly across `0..k`.
fn spread_ids(k: usize, count: usize) -> BTreeSet<usize> {
    let count = count.min(k);
    (0..k)
        .filter(|&a| (a + 1) * count / k > a * count / k)
        .collect()
}
