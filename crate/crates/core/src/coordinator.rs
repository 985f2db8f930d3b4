//! The round coordinator: orchestrates level-by-level training along the
//! agent ordering, verifies every submitted update against the median of
//! peer evaluations, aggregates accepted leaf models, and logs each event
//! to the ledger. Also home to the median trust bound and its Monte-Carlo
//! validation harness.

use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};

use crate::agent::{reveal_binds, SimAgent};
use crate::error::{Error, Result};
use crate::ledger::{verify_commitment, EventPayload, Hash, Ledger};
use crate::model::{ModelSpec, ParameterVector};
use crate::topology::Topology;

/// Which exponent the trust bound uses; the two published variants of the
/// median deviation bound disagree, so both are implemented and the
/// Monte-Carlo suite reports which one the data supports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MedianRule {
    /// Exponent `(Phi(t) - beta/2)^2`.
    Statement,
    /// Exponent `(Phi(t) - 1/2 - beta)^2`.
    Proof,
}

/// Round-verification thresholds and schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SccConfig {
    /// Maximum tolerated drop of the median peer score below the current
    /// global score.
    pub kappa1: f64,
    /// Maximum tolerated gap between the median peer score and the score
    /// the author reported.
    pub kappa2: f64,
    /// Fraction of eligible evaluators sampled per update.
    pub eval_subsample_fraction: f64,
    pub rounds: u64,
    pub median_rule: MedianRule,
}

impl SccConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.kappa1) || !(0.0..=1.0).contains(&self.kappa2) {
            return Err(Error::Config("kappa thresholds must lie in [0, 1]".into()));
        }
        if !(self.eval_subsample_fraction > 0.0 && self.eval_subsample_fraction <= 1.0) {
            return Err(Error::Config(
                "eval_subsample_fraction must lie in (0, 1]".into(),
            ));
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for SccConfig {
    fn default() -> Self {
        Self {
            kappa1: 0.05,
            kappa2: 0.05,
            eval_subsample_fraction: 1.0,
            rounds: 10,
            median_rule: MedianRule::Proof,
        }
    }
}

/// Median with the even-count convention: mean of the two central values.
pub fn median(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Coordination("median of an empty score list".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        Ok(sorted[n / 2])
    } else {
        Ok(0.5 * (sorted[n / 2 - 1] + sorted[n / 2]))
    }
}

/// The line-9 acceptance test: the median peer score must not fall more than
/// `kappa1` below the global score, and must sit within `kappa2` of the
/// author's self-report.
pub fn verify_update(
    global_score: f64,
    evaluator_scores: &[f64],
    reported_score: f64,
    cfg: &SccConfig,
) -> Result<bool> {
    let med = median(evaluator_scores)?;
    Ok(global_score - med <= cfg.kappa1 && (med - reported_score).abs() <= cfg.kappa2)
}

/// Uniform sample without replacement of `ceil(fraction * |active \ {exclude}|)`
/// evaluators; the update's author never evaluates itself.
pub fn subsample_evaluators(
    active: &[usize],
    fraction: f64,
    exclude: usize,
    rng: &mut ChaCha20Rng,
) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Coordination(
            "evaluator fraction must lie in (0, 1]".into(),
        ));
    }
    let eligible: Vec<usize> = active.iter().copied().filter(|&a| a != exclude).collect();
    if eligible.is_empty() {
        return Err(Error::Coordination("no eligible evaluators".into()));
    }
    let count = ((fraction * eligible.len() as f64).ceil() as usize).clamp(1, eligible.len());
    let mut picked = rand::seq::index::sample(rng, eligible.len(), count)
        .into_iter()
        .map(|i| eligible[i])
        .collect::<Vec<_>>();
    picked.sort_unstable();
    Ok(picked)
}

/// Coordinate-wise unweighted mean of identically laid out parameters.
pub fn aggregate(params: &[ParameterVector]) -> Result<ParameterVector> {
    let first = params
        .first()
        .ok_or_else(|| Error::Coordination("aggregate of an empty parameter list".into()))?;
    let mut acc = vec![0.0; first.len()];
    for p in params {
        if !p.same_layout(first) {
            return Err(Error::LayoutMismatch);
        }
        for (a, v) in acc.iter_mut().zip(p.values()) {
            *a += v;
        }
    }
    let k = params.len() as f64;
    for a in acc.iter_mut() {
        *a /= k;
    }
    ParameterVector::from_values(first.layout().to_vec(), acc)
}

/// Outcome of one agent's invocation within a round.
#[derive(Debug, Clone)]
pub struct AgentOutcome {
    pub agent_id: usize,
    pub dropped: bool,
    pub accepted: bool,
    pub reported_score: Option<f64>,
    pub median_score: Option<f64>,
}

/// Immutable log of one coordinator round.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: u64,
    pub global_score_before: f64,
    pub outcomes: Vec<AgentOutcome>,
    pub aggregate_digest: Hash,
    pub acrs_consumed: usize,
}

impl RoundRecord {
    pub fn accepted_count(&self) -> usize {
        self.outcomes.iter().filter(|o| o.accepted).count()
    }

    pub fn rejected_count(&self) -> usize {
        self.outcomes
            .iter()
            .filter(|o| !o.accepted && !o.dropped)
            .count()
    }

    pub fn dropped_count(&self) -> usize {
        self.outcomes.iter().filter(|o| o.dropped).count()
    }
}

/// Parameters pending delivery to an agent, with merge priority:
/// a forward from an accepted predecessor beats one from a rejected
/// predecessor, ties go to the lowest predecessor id.
struct Pending {
    params: ParameterVector,
    from_accepted: bool,
}

fn merge_pending(slot: &mut Option<Pending>, candidate: ParameterVector, from_accepted: bool) {
    match slot {
        None => {
            *slot = Some(Pending {
                params: candidate,
                from_accepted,
            })
        }
        Some(existing) if from_accepted && !existing.from_accepted => {
            *slot = Some(Pending {
                params: candidate,
                from_accepted,
            });
        }
        _ => {} // earlier (lower-id) predecessor wins ties
    }
}

/// Execute one full round: level-ordered training, median verification,
/// forwarding, and leaf aggregation. Returns the next global parameters and
/// the round record; every event lands on the ledger in causal order.
#[allow(clippy::too_many_arguments)]
pub fn run_round(
    topology: &Topology,
    agents: &mut [SimAgent],
    spec: &ModelSpec,
    theta: &ParameterVector,
    cfg: &SccConfig,
    round: u64,
    ledger: &mut Ledger,
    rng: &mut ChaCha20Rng,
) -> Result<(ParameterVector, RoundRecord)> {
    cfg.validate()?;
    if agents.is_empty() {
        return Err(Error::Coordination("no agents registered".into()));
    }
    if agents.len() != topology.num_agents() {
        return Err(Error::Coordination(format!(
            "{} agents registered but the topology orders {}",
            agents.len(),
            topology.num_agents()
        )));
    }
    for (i, agent) in agents.iter().enumerate() {
        if agent.id() != i {
            return Err(Error::Coordination(
                "agent ids must match their positions".into(),
            ));
        }
    }
    if !theta.matches_spec(spec) {
        return Err(Error::LayoutMismatch);
    }

    // Dropout decisions for the whole round, in ascending agent order.
    let active: Vec<bool> = agents
        .iter_mut()
        .map(SimAgent::next_drop)
        .map(|d| !d)
        .collect();
    let active_ids: Vec<usize> = (0..agents.len()).filter(|&a| active[a]).collect();

    // Refresh the global score: median of the active agents' evaluations of
    // the round-start parameters.
    let global_score = if active_ids.is_empty() {
        0.0
    } else {
        let scores: Vec<f64> = active_ids
            .iter()
            .map(|&a| agents[a].eval_global(spec, theta))
            .collect::<Result<Vec<_>>>()?;
        median(&scores)?
    };

    let mut pending: Vec<Option<Pending>> = (0..agents.len()).map(|_| None).collect();
    for &root in &topology.roots() {
        merge_pending(&mut pending[root], theta.clone(), true);
    }

    let mut outcomes = Vec::with_capacity(agents.len());
    let mut accepted_leaf_params: Vec<ParameterVector> = Vec::new();

    for level in 0..topology.num_levels() {
        for &author in topology.level_agents(level) {
            let incoming = match pending[author].take() {
                Some(p) => p.params,
                None => theta.clone(), // unreachable agent in a custom DAG
            };

            if !active[author] {
                // Dropped agents forward their incoming parameters unchanged.
                for &succ in topology.successors(author) {
                    merge_pending(&mut pending[succ], incoming.clone(), false);
                }
                outcomes.push(AgentOutcome {
                    agent_id: author,
                    dropped: true,
                    accepted: false,
                    reported_score: None,
                    median_score: None,
                });
                continue;
            }

            let (triple, opening) = agents[author].produce_update(spec, &incoming)?;
            let proof_ok = verify_commitment(&triple.proof, &opening.reveal, &opening.salt)
                && reveal_binds(
                    &opening.reveal,
                    &triple.params.digest(),
                    triple.score,
                    author as u64,
                );

            // Peer evaluations over a subsample of the active agents.
            let (med, verdict) =
                match subsample_evaluators(&active_ids, cfg.eval_subsample_fraction, author, rng) {
                    Ok(evaluators) => {
                        let scores: Vec<f64> = evaluators
                            .iter()
                            .map(|&e| agents[e].eval_peer(spec, &triple.params, author))
                            .collect::<Result<Vec<_>>>()?;
                        let verdict = verify_update(global_score, &scores, triple.score, cfg)?;
                        (Some(median(&scores)?), verdict)
                    }
                    // A lone agent has no peers; verification is vacuous.
                    Err(_) => (None, true),
                };
            let accepted = proof_ok && verdict;

            ledger.append(EventPayload::UpdateSubmitted {
                round,
                agent_id: author as u64,
                params_digest: triple.params.digest(),
                reported_score: triple.score,
                commit_hash: triple.proof.commit_hash,
            });
            ledger.append(EventPayload::Verdict {
                round,
                agent_id: author as u64,
                accepted,
                median_score: med.unwrap_or(f64::NAN),
                global_score,
            });
            if accepted {
                ledger.append(EventPayload::Commitment {
                    owner: author as u64,
                    commit_hash: triple.proof.commit_hash,
                });
            }

            let forward = if accepted { &triple.params } else { &incoming };
            for &succ in topology.successors(author) {
                merge_pending(&mut pending[succ], forward.clone(), accepted);
            }
            if topology.successors(author).is_empty() && accepted {
                accepted_leaf_params.push(triple.params.clone());
            }

            outcomes.push(AgentOutcome {
                agent_id: author,
                dropped: false,
                accepted,
                reported_score: Some(triple.score),
                median_score: med,
            });
        }
    }

    let next_theta = if accepted_leaf_params.is_empty() {
        theta.clone()
    } else {
        aggregate(&accepted_leaf_params)?
    };
    ledger.append(EventPayload::Aggregate {
        round,
        params_digest: next_theta.digest(),
        accepted_leaves: accepted_leaf_params.len() as u64,
    });

    let record = RoundRecord {
        round,
        global_score_before: global_score,
        outcomes,
        aggregate_digest: next_theta.digest(),
        acrs_consumed: topology.acrs_per_round(),
    };
    Ok((next_theta, record))
}

/// Inputs of the median deviation bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrustBoundQuery {
    /// Number of evaluators reporting a score.
    pub evaluators: usize,
    /// Deviation threshold in units of the score std.
    pub t: f64,
    /// Fraction of colluding evaluators, below 1/2.
    pub collusion_fraction: f64,
    /// Std of honest evaluator scores (the bound itself is scale-free).
    pub eval_std: f64,
}

fn std_normal() -> StdNormal {
    StdNormal::new(0.0, 1.0).expect("unit normal parameters are valid")
}

/// Admissibility threshold `Phi^{-1}(1/2 + beta)` for the deviation level.
pub fn min_admissible_t(collusion_fraction: f64) -> Result<f64> {
    if !(0.0..0.5).contains(&collusion_fraction) {
        return Err(Error::Coordination(
            "collusion fraction must lie in [0, 1/2)".into(),
        ));
    }
    Ok(std_normal().inverse_cdf(0.5 + collusion_fraction))
}

/// Probability bound on the median of `m` evaluator scores deviating more
/// than `t` std units from the honest mean:
/// `min(1, 2 exp(-2m (Phi(t) - beta/2)^2))` under the statement rule, with
/// exponent `(Phi(t) - 1/2 - beta)^2` under the proof rule.
pub fn trust_bound(query: &TrustBoundQuery, rule: MedianRule) -> Result<f64> {
    if query.evaluators == 0 {
        return Err(Error::Coordination(
            "the bound needs at least one evaluator".into(),
        ));
    }
    if query.eval_std <= 0.0 || query.eval_std.is_nan() {
        return Err(Error::Coordination("eval_std must be positive".into()));
    }
    let t_min = min_admissible_t(query.collusion_fraction)?;
    if query.t < t_min - 1e-12 {
        return Err(Error::Coordination(format!(
            "t = {} below the admissible threshold {t_min:.6}",
            query.t
        )));
    }
    let phi_t = std_normal().cdf(query.t);
    let margin = match rule {
        MedianRule::Statement => phi_t - query.collusion_fraction / 2.0,
        MedianRule::Proof => phi_t - 0.5 - query.collusion_fraction,
    };
    let bound = 2.0 * (-2.0 * query.evaluators as f64 * margin * margin).exp();
    Ok(bound.min(1.0))
}

/// Result of a Monte-Carlo collusion experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollusionTrialOutcome {
    pub failure_rate: f64,
    pub trials: u64,
    /// True when no trials ran, so the rate carries no information.
    pub vacuous: bool,
}

/// Empirical failure rate of the median under worst-case collusion: per
/// trial, `m - floor(beta m)` honest scores are drawn from
/// `N(mu, eval_std^2)` and `floor(beta m)` adversarial scores sit at
/// `mu + 10 eval_std`; a failure is `|median - mu| > t * eval_std`.
pub fn collusion_trial(
    m: usize,
    beta: f64,
    mu: f64,
    eval_std: f64,
    t: f64,
    trials: u64,
    rng: &mut ChaCha20Rng,
) -> Result<CollusionTrialOutcome> {
    if m == 0 {
        return Err(Error::Coordination(
            "at least one evaluator is required".into(),
        ));
    }
    if !(0.0..0.5).contains(&beta) {
        return Err(Error::Coordination(
            "collusion fraction must lie in [0, 1/2)".into(),
        ));
    }
    if eval_std <= 0.0 || eval_std.is_nan() {
        return Err(Error::Coordination("eval_std must be positive".into()));
    }
    let adversaries = (beta * m as f64).floor() as usize;
    if 2 * adversaries >= m {
        return Err(Error::Coordination(
            "adversaries must stay below half the sample".into(),
        ));
    }
    if trials == 0 {
        return Ok(CollusionTrialOutcome {
            failure_rate: 0.0,
            trials: 0,
            vacuous: true,
        });
    }

    let honest = m - adversaries;
    let noise = Normal::new(mu, eval_std).map_err(|e| Error::Coordination(e.to_string()))?;
    let outlier = mu + 10.0 * eval_std;
    let mut scores = vec![0.0f64; m];
    let mut failures = 0u64;
    for _ in 0..trials {
        for slot in scores.iter_mut().take(honest) {
            *slot = noise.sample(rng);
        }
        for slot in scores.iter_mut().skip(honest) {
            *slot = outlier;
        }
        let (below, upper, _) = scores.select_nth_unstable_by(m / 2, f64::total_cmp);
        let med = if m % 2 == 1 {
            *upper
        } else {
            // Even count: the lower central value is the max below the pivot.
            let lower = below.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            0.5 * (lower + *upper)
        };
        if (med - mu).abs() > t * eval_std {
            failures += 1;
        }
    }
    Ok(CollusionTrialOutcome {
        failure_rate: failures as f64 / trials as f64,
        trials,
        vacuous: false,
    })
}
