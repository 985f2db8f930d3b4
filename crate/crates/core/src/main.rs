use std::io::BufReader;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedtrust::coordinator::{trust_bound, MedianRule, TrustBoundQuery};
use fedtrust::dp::{default_alpha_grid, RdpLedger};
use fedtrust::harness::{
    compare_topologies, emit_report, replica_summary, run_experiment, seed_replicas,
    ExperimentConfig, MetricsRow,
};
use fedtrust::ledger::Ledger;
use fedtrust::topology::TopologyKind;

#[derive(Parser)]
#[command(
    name = "fedtrust",
    about = "Deterministic simulator for trust-verified, differentially private decentralized training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a config file and write its reports.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Run this many seed replicas (seed, seed+1, ...) and report
        /// mean/std of the final accuracy.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Print the RDP curve and (epsilon, delta) spend of a sampled
    /// Gaussian mechanism.
    Accountant {
        #[arg(long)]
        q: f64,
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        steps: u64,
        #[arg(long)]
        delta: f64,
        /// Also write the per-order curve as CSV to this path.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Evaluate the median trust bound.
    TrustBound {
        #[arg(long)]
        m: usize,
        #[arg(long)]
        t: f64,
        #[arg(long)]
        beta: f64,
        #[arg(long, value_enum, default_value = "proof")]
        rule: RuleArg,
    },
    /// Re-verify an exported ledger file.
    Verify {
        #[arg(long)]
        ledger: PathBuf,
    },
    /// Run the same experiment across several topologies and write an
    /// aligned comparison CSV.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated list, e.g. chain,tree,star.
        #[arg(long, value_delimiter = ',')]
        topologies: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum RuleArg {
    Statement,
    Proof,
}

impl From<RuleArg> for MedianRule {
    fn from(rule: RuleArg) -> Self {
        match rule {
            RuleArg::Statement => MedianRule::Statement,
            RuleArg::Proof => MedianRule::Proof,
        }
    }
}

fn parse_kind(name: &str) -> Result<TopologyKind, String> {
    match name.trim() {
        "chain" => Ok(TopologyKind::Chain),
        "tree" | "binary_tree" => Ok(TopologyKind::BinaryTree),
        "star" => Ok(TopologyKind::Star),
        other => Err(format!(
            "unknown topology '{other}' (expected chain, tree, or star)"
        )),
    }
}

fn execute(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Run {
            config,
            seed,
            out,
            seeds,
        } => {
            let mut cfg = ExperimentConfig::from_path(&config).map_err(|e| e.to_string())?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if seeds <= 1 {
                let result = run_experiment(&cfg).map_err(|e| e.to_string())?;
                let paths = emit_report(&result, &out).map_err(|e| e.to_string())?;
                print!("{}", fedtrust::harness::render_summary(&result));
                println!("reports: {}", paths.metrics_csv.parent().unwrap().display());
            } else {
                let results = seed_replicas(&cfg, seeds).map_err(|e| e.to_string())?;
                for (offset, result) in results.iter().enumerate() {
                    let sub = out.join(format!("seed-{}", cfg.seed + offset as u64));
                    emit_report(result, &sub).map_err(|e| e.to_string())?;
                }
                let summary = replica_summary(&results);
                std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
                std::fs::write(out.join("summary.txt"), &summary).map_err(|e| e.to_string())?;
                print!("{summary}");
            }
            Ok(())
        }
        Command::Accountant {
            q,
            sigma,
            steps,
            delta,
            csv,
        } => {
            let grid = default_alpha_grid();
            let ledger = RdpLedger::sgm_step(q, sigma, &grid).map_err(|e| e.to_string())?;
            let spend = ledger
                .compose(steps)
                .to_dp(delta)
                .map_err(|e| e.to_string())?;
            println!("epsilon: {:.6}", spend.epsilon);
            println!("delta: {:e}", spend.delta);
            println!("optimal_alpha: {}", spend.optimal_alpha);
            let mut curve = String::from("alpha,eps_rdp\n");
            for (alpha, eps) in grid.iter().zip(ledger.eps_per_step()) {
                curve.push_str(&format!("{alpha},{eps:.12}\n"));
            }
            match csv {
                Some(path) => std::fs::write(path, curve).map_err(|e| e.to_string())?,
                None => print!("{curve}"),
            }
            Ok(())
        }
        Command::TrustBound { m, t, beta, rule } => {
            let query = TrustBoundQuery {
                evaluators: m,
                t,
                collusion_fraction: beta,
                eval_std: 1.0,
            };
            let bound = trust_bound(&query, rule.into()).map_err(|e| e.to_string())?;
            println!("bound: {bound:e}");
            Ok(())
        }
        Command::Verify { ledger } => {
            let file = std::fs::File::open(&ledger).map_err(|e| e.to_string())?;
            let imported = Ledger::import(BufReader::new(file)).map_err(|e| e.to_string())?;
            if imported.verify_chain() {
                println!(
                    "VALID: {} records, tip {}",
                    imported.len(),
                    hex::encode(imported.tip_hash())
                );
                Ok(())
            } else {
                Err("INVALID: chain verification failed".into())
            }
        }
        Command::Compare {
            config,
            topologies,
            seed,
            out,
        } => {
            let mut cfg = ExperimentConfig::from_path(&config).map_err(|e| e.to_string())?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let kinds = topologies
                .iter()
                .map(|t| parse_kind(t))
                .collect::<Result<Vec<_>, _>>()?;
            let runs = compare_topologies(&cfg, &kinds).map_err(|e| e.to_string())?;
            std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
            let mut csv = format!("kind,{}\n", MetricsRow::CSV_HEADER);
            for run in &runs {
                for row in &run.rows {
                    csv.push_str(&format!("{},{}\n", run.kind, row.to_csv_line()));
                }
            }
            let path = out.join("comparison.csv");
            std::fs::write(&path, &csv).map_err(|e| e.to_string())?;
            for run in &runs {
                println!(
                    "{}: final_accuracy {:.4}, total_acrs {}, bandwidth {} bytes",
                    run.kind,
                    run.final_accuracy(),
                    run.rows.last().map(|r| r.acr).unwrap_or(0),
                    run.rows.last().map(|r| r.bandwidth_bytes).unwrap_or(0),
                );
            }
            println!("comparison: {}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}
