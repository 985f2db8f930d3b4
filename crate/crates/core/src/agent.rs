//! Per-agent training routine plus the adversarial and dropout behavior
//! models used by the attack experiments.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Example};
use crate::dp::{dp_sgd_step, plain_sgd_step, DpConfig};
use crate::error::{Error, Result};
use crate::ledger::{commit, Commitment, Hash};
use crate::model::{evaluate, ModelSpec, ParameterVector};
use crate::seed::rng_from;

/// What an agent does when invoked. Exactly one behavior per agent;
/// dropout agents act benignly in the rounds they attend.
#[derive(Debug, Clone, PartialEq)]
pub enum Behavior {
    Benign,
    /// Trains on labels mapped `y -> C - 1 - y`.
    LabelFlip,
    /// Ignores its shard and returns the incoming parameters plus uniform
    /// noise in [-1, 1] per coordinate.
    RandomUpdate,
    /// Trains honestly but reports `min(1, phi + inflation)`; when wired as
    /// a colluder it also inflates peer evaluations for its accomplices.
    FalseReport {
        inflation: f64,
    },
    /// Skips a round with the given probability.
    Dropout {
        prob: f64,
    },
}

/// How minibatches are formed during local training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// In-order passes over the shard in fixed-size chunks.
    Sequential,
    /// Each example joins each step independently with probability `q`;
    /// the privacy accountant is exact only for this mode.
    Independent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentProfile {
    pub id: usize,
    pub behavior: Behavior,
    pub dp: Option<DpConfig>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub inner_epochs: usize,
    pub sampling: SamplingMode,
    /// Agents whose updates this agent endorses dishonestly when it is a
    /// false-report colluder. Wired by the harness.
    pub accomplices: BTreeSet<usize>,
}

impl AgentProfile {
    pub fn new(id: usize, behavior: Behavior, dp: Option<DpConfig>) -> Result<Self> {
        let profile = Self {
            id,
            behavior,
            dp,
            learning_rate: 0.1,
            batch_size: 16,
            inner_epochs: 1,
            sampling: SamplingMode::Sequential,
            accomplices: BTreeSet::new(),
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<()> {
        match self.behavior {
            Behavior::FalseReport { inflation }
                if !(0.0..=1.0).contains(&inflation) || inflation == 0.0 =>
            {
                return Err(Error::Config("inflation must lie in (0, 1]".into()));
            }
            Behavior::Dropout { prob } if !(0.0..=1.0).contains(&prob) => {
                return Err(Error::Config(
                    "dropout probability must lie in [0, 1]".into(),
                ));
            }
            _ => {}
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.inner_epochs == 0 {
            return Err(Error::Config("inner_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// The `(theta_a, phi_a, Z_a)` reply an invoked agent returns.
#[derive(Debug, Clone)]
pub struct UpdateTriple {
    pub params: ParameterVector,
    pub score: f64,
    pub proof: Commitment,
}

/// Opening of an update proof, delivered alongside the triple.
#[derive(Debug, Clone, PartialEq)]
pub struct CommitmentOpening {
    pub reveal: Vec<u8>,
    pub salt: Vec<u8>,
}

/// Reveal layout: params digest (32) || score LE (8) || agent id LE (8) || nonce (16).
pub fn encode_reveal(params_digest: &Hash, score: f64, agent_id: u64, nonce: &[u8; 16]) -> Vec<u8> {
    let mut reveal = Vec::with_capacity(64);
    reveal.extend_from_slice(params_digest);
    reveal.extend_from_slice(&score.to_le_bytes());
    reveal.extend_from_slice(&agent_id.to_le_bytes());
    reveal.extend_from_slice(nonce);
    reveal
}

/// Check that an opened reveal binds the given digest, score, and author.
pub fn reveal_binds(reveal: &[u8], params_digest: &Hash, score: f64, agent_id: u64) -> bool {
    reveal.len() == 64
        && &reveal[..32] == params_digest
        && reveal[32..40] == score.to_le_bytes()
        && reveal[40..48] == agent_id.to_le_bytes()
}

fn flipped_labels(train: &Dataset) -> Dataset {
    let examples = train
        .examples
        .iter()
        .map(|ex| Example {
            features: ex.features.clone(),
            label: train.num_classes - 1 - ex.label,
        })
        .collect();
    Dataset {
        examples,
        num_classes: train.num_classes,
        name: format!("{}-flipped", train.name),
    }
}

fn run_step(
    profile: &AgentProfile,
    spec: &ModelSpec,
    params: &ParameterVector,
    minibatch: &[Example],
    rng: &mut ChaCha20Rng,
) -> Result<ParameterVector> {
    match &profile.dp {
        Some(cfg) => dp_sgd_step(spec, params, minibatch, profile.learning_rate, cfg, rng),
        None => plain_sgd_step(spec, params, minibatch, profile.learning_rate),
    }
}

/// Local training from the incoming parameters, per the agent's behavior.
pub fn train_local(
    profile: &AgentProfile,
    spec: &ModelSpec,
    theta_in: &ParameterVector,
    train: &Dataset,
    rng: &mut ChaCha20Rng,
) -> Result<ParameterVector> {
    if !theta_in.matches_spec(spec) {
        return Err(Error::LayoutMismatch);
    }

    if matches!(profile.behavior, Behavior::RandomUpdate) {
        let values = theta_in
            .values()
            .iter()
            .map(|v| v + rng.random_range(-1.0..=1.0))
            .collect();
        return ParameterVector::from_values(theta_in.layout().to_vec(), values);
    }

    let flipped;
    let data = if matches!(profile.behavior, Behavior::LabelFlip) {
        flipped = flipped_labels(train);
        &flipped
    } else {
        train
    };

    let n = data.len();
    let mut params = theta_in.clone();
    for _ in 0..profile.inner_epochs {
        match profile.sampling {
            SamplingMode::Sequential => {
                // Fresh pass order every epoch, drawn from the agent's own
                // stream; repeated invocations on identical parameters still
                // produce fresh minibatches.
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(rng);
                for chunk in order.chunks(profile.batch_size) {
                    let minibatch: Vec<Example> =
                        chunk.iter().map(|&i| data.examples[i].clone()).collect();
                    params = run_step(profile, spec, &params, &minibatch, rng)?;
                }
            }
            SamplingMode::Independent => {
                let q = profile
                    .dp
                    .as_ref()
                    .map(|cfg| cfg.sampling_rate)
                    .unwrap_or_else(|| (profile.batch_size as f64 / n as f64).min(1.0));
                let steps = n.div_ceil(profile.batch_size);
                for _ in 0..steps {
                    let minibatch: Vec<Example> = data
                        .examples
                        .iter()
                        .filter(|_| rng.random::<f64>() < q)
                        .cloned()
                        .collect();
                    if minibatch.is_empty() {
                        continue;
                    }
                    params = run_step(profile, spec, &params, &minibatch, rng)?;
                }
            }
        }
    }
    Ok(params)
}

/// Train, self-evaluate, and wrap the result in a commitment proof.
pub fn produce_update(
    profile: &AgentProfile,
    spec: &ModelSpec,
    theta_in: &ParameterVector,
    train: &Dataset,
    test: &Dataset,
    rng: &mut ChaCha20Rng,
) -> Result<(UpdateTriple, CommitmentOpening)> {
    let params = train_local(profile, spec, theta_in, train, rng)?;
    let honest_score = evaluate(spec, &params, test)?;
    let score = match profile.behavior {
        Behavior::FalseReport { inflation } => (honest_score + inflation).min(1.0),
        _ => honest_score,
    };

    let mut nonce = [0u8; 16];
    rng.fill(&mut nonce);
    let mut salt = [0u8; 16];
    rng.fill(&mut salt);

    let reveal = encode_reveal(&params.digest(), score, profile.id as u64, &nonce);
    let proof = commit(profile.id as u64, &reveal, &salt)?;
    Ok((
        UpdateTriple {
            params,
            score,
            proof,
        },
        CommitmentOpening {
            reveal,
            salt: salt.to_vec(),
        },
    ))
}

/// Decide whether the agent skips this round.
pub fn should_drop(profile: &AgentProfile, rng: &mut ChaCha20Rng) -> bool {
    match profile.behavior {
        Behavior::Dropout { prob } => rng.random::<f64>() < prob,
        _ => false,
    }
}

/// Score another agent's parameters on this agent's own test shard.
/// False-report colluders endorse their accomplices' updates.
pub fn eval_for_peer(
    profile: &AgentProfile,
    spec: &ModelSpec,
    theta_other: &ParameterVector,
    test: &Dataset,
    author: usize,
) -> Result<f64> {
    let honest = evaluate(spec, theta_other, test)?;
    match profile.behavior {
        Behavior::FalseReport { inflation } if profile.accomplices.contains(&author) => {
            Ok((honest + inflation).clamp(0.9, 1.0))
        }
        _ => Ok(honest),
    }
}

/// Runtime agent state: profile, shards, and an exclusively owned
/// random stream.
#[derive(Debug, Clone)]
pub struct SimAgent {
    pub profile: AgentProfile,
    pub train: Dataset,
    pub test: Dataset,
    pub rng: ChaCha20Rng,
}

impl SimAgent {
    pub fn new(profile: AgentProfile, train: Dataset, test: Dataset, master_seed: u64) -> SimAgent {
        let rng = rng_from(master_seed, "agent", profile.id as u64);
        SimAgent {
            profile,
            train,
            test,
            rng,
        }
    }

    pub fn id(&self) -> usize {
        self.profile.id
    }

    pub fn next_drop(&mut self) -> bool {
        should_drop(&self.profile, &mut self.rng)
    }

    pub fn produce_update(
        &mut self,
        spec: &ModelSpec,
        theta_in: &ParameterVector,
    ) -> Result<(UpdateTriple, CommitmentOpening)> {
        produce_update(
            &self.profile,
            spec,
            theta_in,
            &self.train,
            &self.test,
            &mut self.rng,
        )
    }

    /// Truthful evaluation of the shared parameters on the own test shard.
    pub fn eval_global(&self, spec: &ModelSpec, theta: &ParameterVector) -> Result<f64> {
        evaluate(spec, theta, &self.test)
    }

    pub fn eval_peer(
        &self,
        spec: &ModelSpec,
        theta: &ParameterVector,
        author: usize,
    ) -> Result<f64> {
        eval_for_peer(&self.profile, spec, theta, &self.test, author)
    }
}
