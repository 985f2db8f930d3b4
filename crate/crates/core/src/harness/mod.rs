//! End-to-end experiment driver: builds data, agents, and topology from a
//! config, runs verified rounds, tracks the privacy budget, and emits
//! deterministic CSV/ledger/summary reports.

pub mod config;

pub use config::{AdversaryKind, DatasetConfig, DropoutConfig, ExperimentConfig};

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::agent::SimAgent;
use crate::coordinator::{run_round, RoundRecord};
use crate::data::{load_idx, partition, synth_blobs, Dataset, PartitionPlan};
use crate::dp::{default_alpha_grid, framework_per_round_loss, topology_budget, RdpLedger};
use crate::error::{Error, Result};
use crate::ledger::{EventPayload, Ledger};
use crate::model::{evaluate, init_params, ModelSpec, ParameterVector};
use crate::seed::{derive_seed, rng_from};
use crate::topology::{BandwidthModel, Topology, TopologyKind};

/// One CSV row of run metrics. ACR, bandwidth, and epsilon are cumulative.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: u64,
    pub acr: u64,
    pub accuracy: f64,
    pub bandwidth_bytes: u64,
    pub accepted: u32,
    pub rejected: u32,
    pub epsilon: f64,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str =
        "round,acr,accuracy,bandwidth_bytes,accepted,rejected,epsilon";

    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{:.6},{},{},{},{:.6}",
            self.round,
            self.acr,
            self.accuracy,
            self.bandwidth_bytes,
            self.accepted,
            self.rejected,
            self.epsilon
        )
    }
}

/// Everything a finished run produces.
#[derive(Debug)]
pub struct ExperimentResult {
    pub name: String,
    pub kind: TopologyKind,
    pub num_agents: usize,
    pub rounds: u64,
    pub rows: Vec<MetricsRow>,
    pub round_records: Vec<RoundRecord>,
    pub ledger: Ledger,
    pub final_params: ParameterVector,
    /// Per-round framework privacy loss (0 when DP is disabled).
    pub per_round_epsilon: f64,
    /// Tight conversion of the fully composed RDP ledger (0 when disabled).
    pub epsilon_rdp_composed: f64,
    pub adversary_ids: BTreeSet<usize>,
}

impl ExperimentResult {
    pub fn final_accuracy(&self) -> f64 {
        self.rows.last().map(|r| r.accuracy).unwrap_or(0.0)
    }

    pub fn accepted_total(&self) -> usize {
        self.round_records
            .iter()
            .map(RoundRecord::accepted_count)
            .sum()
    }

    pub fn rejected_total(&self) -> usize {
        self.round_records
            .iter()
            .map(RoundRecord::rejected_count)
            .sum()
    }

    pub fn dropped_total(&self) -> usize {
        self.round_records
            .iter()
            .map(RoundRecord::dropped_count)
            .sum()
    }

    /// Fraction of adversarial submissions that were rejected.
    pub fn adversary_rejection_rate(&self) -> Option<f64> {
        let mut submitted = 0usize;
        let mut rejected = 0usize;
        for record in &self.round_records {
            for outcome in &record.outcomes {
                if self.adversary_ids.contains(&outcome.agent_id) && !outcome.dropped {
                    submitted += 1;
                    if !outcome.accepted {
                        rejected += 1;
                    }
                }
            }
        }
        (submitted > 0).then(|| rejected as f64 / submitted as f64)
    }
}

fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.dataset {
        DatasetConfig::Synthetic {
            num_examples,
            num_classes,
            dim,
            separation,
        } => synth_blobs(
            *num_examples,
            *num_classes,
            *dim,
            *separation,
            derive_seed(cfg.seed, "data", 0),
        ),
        DatasetConfig::Idx {
            images,
            labels,
            extra_images,
            extra_labels,
        } => {
            let base = load_idx(images, labels)?;
            match (extra_images, extra_labels) {
                (Some(img), Some(lab)) => base.concat(load_idx(img, lab)?),
                (None, None) => Ok(base),
                _ => Err(Error::Config(
                    "extra_images and extra_labels must be given together".into(),
                )),
            }
        }
    }
}

fn build_topology(cfg: &ExperimentConfig) -> Result<Topology> {
    match cfg.topology.kind {
        TopologyKind::Custom => {
            let path =
                cfg.topology.edge_file.as_ref().ok_or_else(|| {
                    Error::Config("custom topologies need topology.edge_file".into())
                })?;
            let topo = Topology::from_edge_file(path)?;
            if topo.num_agents() != cfg.topology.agents {
                return Err(Error::Config(format!(
                    "edge file orders {} agents, config says {}",
                    topo.num_agents(),
                    cfg.topology.agents
                )));
            }
            Ok(topo)
        }
        kind => Topology::build(kind, cfg.topology.agents),
    }
}

/// Transfers per round for shapes without a closed-form count: one download
/// per root, one per edge, one upload per leaf.
fn custom_transfers(topology: &Topology) -> u64 {
    let edges: usize = (0..topology.num_agents())
        .map(|a| topology.successors(a).len())
        .sum();
    (topology.roots().len() + edges + topology.leaves().len()) as u64
}

/// Run one experiment to completion. Fully deterministic under `cfg.seed`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let dataset = build_dataset(cfg)?;
    let topology = build_topology(cfg)?;
    let k = cfg.topology.agents;

    let plan = PartitionPlan {
        num_agents: k,
        bias_rate: cfg.partition.bias_rate,
        majority_label_per_agent: cfg.partition.majority_labels.clone(),
        train_fraction: cfg.partition.train_fraction,
        seed: derive_seed(cfg.seed, "partition", 0),
    };
    let shards = partition(&dataset, &plan)?;

    let spec = ModelSpec::new(
        dataset.feature_dim(),
        cfg.model.hidden.clone(),
        dataset.num_classes,
    )?;
    let scc = cfg.scc_config();

    let mut pooled_test = Vec::new();
    for (_, test) in &shards {
        pooled_test.extend(test.examples.iter().cloned());
    }
    let pooled_test = Dataset::new("pooled-test", pooled_test, dataset.num_classes)?;

    let mut agents = Vec::with_capacity(k);
    let mut ledger = Ledger::new();
    for (id, (train, test)) in shards.into_iter().enumerate() {
        let profile = cfg.agent_profile(id, train.len())?;
        ledger.append(EventPayload::Registration {
            agent_id: id as u64,
        });
        agents.push(SimAgent::new(profile, train, test, cfg.seed));
    }

    // Privacy accounting: per-round framework loss is the max over agents of
    // the converted per-round spend; the emitted column follows the
    // ACR-budget composition, and the tight fully composed conversion is
    // reported alongside in the summary.
    let (per_round_epsilon, epsilon_rdp_composed) = if cfg.dp.is_some() {
        let grid = default_alpha_grid();
        let mut per_agent_round_eps = Vec::with_capacity(k);
        let mut per_agent_total_eps = Vec::with_capacity(k);
        for agent in &agents {
            let dp = agent
                .profile
                .dp
                .as_ref()
                .expect("dp section implies config");
            let steps_per_round = (cfg.training.inner_epochs as u64)
                * (agent.train.len() as u64).div_ceil(cfg.training.batch_size as u64);
            let one_step = RdpLedger::sgm_step(dp.sampling_rate, dp.noise_multiplier, &grid)?;
            per_agent_round_eps.push(one_step.compose(steps_per_round).to_dp(dp.delta)?.epsilon);
            per_agent_total_eps.push(
                one_step
                    .compose(steps_per_round * cfg.rounds)
                    .to_dp(dp.delta)?
                    .epsilon,
            );
        }
        (
            framework_per_round_loss(&per_agent_round_eps)?,
            framework_per_round_loss(&per_agent_total_eps)?,
        )
    } else {
        (0.0, 0.0)
    };

    let mut theta = init_params(&spec, derive_seed(cfg.seed, "theta0", 0));
    let mut coordinator_rng = rng_from(cfg.seed, "coordinator", 0);
    let bandwidth = BandwidthModel {
        transfer_bytes: theta.to_bytes().len() as u64,
    };
    let bandwidth_per_round = match topology.kind() {
        TopologyKind::Custom => custom_transfers(&topology) * bandwidth.transfer_bytes,
        kind => bandwidth.bandwidth_per_round(kind, k)?,
    };
    let acrs_per_round = topology.acrs_per_round() as u64;

    let mut rows = Vec::with_capacity(cfg.rounds as usize);
    let mut round_records = Vec::with_capacity(cfg.rounds as usize);
    for round in 1..=cfg.rounds {
        let (next, record) = run_round(
            &topology,
            &mut agents,
            &spec,
            &theta,
            &scc,
            round,
            &mut ledger,
            &mut coordinator_rng,
        )?;
        theta = next;
        let acr = round * acrs_per_round;
        let epsilon = match topology.kind() {
            TopologyKind::Custom => round as f64 * per_round_epsilon,
            kind => topology_budget(acr, per_round_epsilon, kind, k)?,
        };
        rows.push(MetricsRow {
            round,
            acr,
            accuracy: evaluate(&spec, &theta, &pooled_test)?,
            bandwidth_bytes: round * bandwidth_per_round,
            accepted: record.accepted_count() as u32,
            rejected: record.rejected_count() as u32,
            epsilon,
        });
        round_records.push(record);
    }

    Ok(ExperimentResult {
        name: cfg.name.clone(),
        kind: topology.kind(),
        num_agents: k,
        rounds: cfg.rounds,
        rows,
        round_records,
        ledger,
        final_params: theta,
        per_round_epsilon,
        epsilon_rdp_composed,
        adversary_ids: cfg.adversary_ids(),
    })
}

/// Run the same configuration (same seed, hence same data) across several
/// topology kinds.
pub fn compare_topologies(
    cfg: &ExperimentConfig,
    kinds: &[TopologyKind],
) -> Result<Vec<ExperimentResult>> {
    if kinds.is_empty() {
        return Err(Error::Config("no topologies to compare".into()));
    }
    kinds
        .iter()
        .map(|&kind| {
            let mut variant = cfg.clone();
            variant.topology.kind = kind;
            variant.name = format!("{}-{kind}", cfg.name);
            run_experiment(&variant)
        })
        .collect()
}

/// One row of an adversary-fraction sweep.
#[derive(Debug, Clone)]
pub struct AttackSweepRow {
    pub fraction: f64,
    pub defended_accuracy: f64,
    pub undefended_accuracy: f64,
    /// Rejection rate of adversarial submissions in the defended run.
    pub rejection_rate: Option<f64>,
}

/// For each adversary fraction, run the configured verification and an
/// undefended control with vacuous thresholds.
pub fn attack_sweep(cfg: &ExperimentConfig, fractions: &[f64]) -> Result<Vec<AttackSweepRow>> {
    let mut rows = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        if !(0.0..=0.5).contains(&fraction) {
            return Err(Error::Config(
                "adversary fractions must lie in [0, 0.5]".into(),
            ));
        }
        let mut defended = cfg.clone();
        if fraction == 0.0 {
            defended.adversaries = None;
        } else {
            let mut adv = cfg.adversaries.clone().ok_or_else(|| {
                Error::Config("attack sweep needs an [adversaries] section".into())
            })?;
            adv.fraction = fraction;
            defended.adversaries = Some(adv);
        }
        let mut undefended = defended.clone();
        undefended.verification.kappa1 = 1.0;
        undefended.verification.kappa2 = 1.0;

        let defended_run = run_experiment(&defended)?;
        let undefended_run = run_experiment(&undefended)?;
        rows.push(AttackSweepRow {
            fraction,
            defended_accuracy: defended_run.final_accuracy(),
            undefended_accuracy: undefended_run.final_accuracy(),
            rejection_rate: defended_run.adversary_rejection_rate(),
        });
    }
    Ok(rows)
}

/// Files written by [`emit_report`].
#[derive(Debug, Clone)]
pub struct ReportPaths {
    pub metrics_csv: PathBuf,
    pub ledger_txt: PathBuf,
    pub summary_txt: PathBuf,
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Config("no metrics rows to write".into()));
    }
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "{}", MetricsRow::CSV_HEADER)?;
    for row in rows {
        writeln!(file, "{}", row.to_csv_line())?;
    }
    Ok(())
}

pub fn render_summary(result: &ExperimentResult) -> String {
    let last = result.rows.last();
    format!(
        "experiment: {}\ntopology: {}\nagents: {}\nrounds: {}\nfinal_accuracy: {:.6}\n\
         total_acrs: {}\ntotal_bandwidth_bytes: {}\ntotal_epsilon: {:.6}\n\
         total_epsilon_rdp_composed: {:.6}\naccepted_total: {}\nrejected_total: {}\ndropped_total: {}\n",
        result.name,
        result.kind,
        result.num_agents,
        result.rounds,
        result.final_accuracy(),
        last.map(|r| r.acr).unwrap_or(0),
        last.map(|r| r.bandwidth_bytes).unwrap_or(0),
        last.map(|r| r.epsilon).unwrap_or(0.0),
        result.epsilon_rdp_composed,
        result.accepted_total(),
        result.rejected_total(),
        result.dropped_total(),
    )
}

/// Write `metrics.csv`, `ledger.txt`, and `summary.txt` under `out_dir`.
pub fn emit_report(result: &ExperimentResult, out_dir: &Path) -> Result<ReportPaths> {
    if result.rows.is_empty() {
        return Err(Error::Config("experiment produced no metrics rows".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let paths = ReportPaths {
        metrics_csv: out_dir.join("metrics.csv"),
        ledger_txt: out_dir.join("ledger.txt"),
        summary_txt: out_dir.join("summary.txt"),
    };
    write_metrics_csv(&result.rows, &paths.metrics_csv)?;
    let ledger_file = std::fs::File::create(&paths.ledger_txt)?;
    result.ledger.export(ledger_file)?;
    std::fs::write(&paths.summary_txt, render_summary(result))?;
    Ok(paths)
}

/// Mean and sample std of final accuracy across seed replicas.
pub fn seed_replicas(cfg: &ExperimentConfig, seeds: u64) -> Result<Vec<ExperimentResult>> {
    if seeds == 0 {
        return Err(Error::Config("at least one seed is required".into()));
    }
    (0..seeds)
        .map(|offset| {
            let mut variant = cfg.clone();
            variant.seed = cfg.seed + offset;
            run_experiment(&variant)
        })
        .collect()
}

pub fn replica_summary(results: &[ExperimentResult]) -> String {
    let n = results.len() as f64;
    let mean = results
        .iter()
        .map(ExperimentResult::final_accuracy)
        .sum::<f64>()
        / n;
    let var = if results.len() > 1 {
        results
            .iter()
            .map(|r| (r.final_accuracy() - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0)
    } else {
        0.0
    };
    format!(
        "seeds: {}\nfinal_accuracy_mean: {:.6}\nfinal_accuracy_std: {:.6}\n",
        results.len(),
        mean,
        var.sqrt()
    )
}
