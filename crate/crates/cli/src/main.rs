//! `flic`: runs federated-clustering experiments from TOML configs.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flic_core::harness::{self, run_repeated, write_outputs};
use log::error;

#[derive(Parser)]
#[command(name = "flic", version, about = "Federated learning with incremental clustering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment (or several seeds with --repeat).
    Run {
        config: PathBuf,
        /// Overrides federation.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides output.dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of consecutive seeds to run.
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
        repeat: u64,
        /// Run Louvain after every phase-1 round and log purity and cluster count.
        #[arg(long)]
        diagnostic_clustering: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let Command::Run { config, seed, out, repeat, diagnostic_clustering } = Cli::parse().command;

    let result = (|| {
        let mut cfg = harness::load_config(&config)?;
        if let Some(s) = seed {
            cfg.federation.seed = s;
        }
        if let Some(dir) = out {
            cfg.output.dir = dir;
        }
        if diagnostic_clustering {
            cfg.clustering.diagnostic_per_round = true;
        }
        let dir = cfg.output.dir.clone();
        if repeat > 1 {
            let rows = run_repeated(&cfg, repeat as usize, &dir)?;
            for r in rows {
                println!(
                    "seed {}: pre {:.4} final {:.4} clusters {} purity {}",
                    r.seed,
                    r.pre_accuracy,
                    r.final_accuracy,
                    r.n_clusters.map_or("-".into(), |n| n.to_string()),
                    r.purity.map_or("-".into(), |p| format!("{p:.3}")),
                );
            }
        } else {
            let outcome = harness::run_experiment(&cfg)?;
            write_outputs(&outcome, &dir)?;
            print!(
                "pre-clustering accuracy {:.4}, final accuracy {:.4}",
                outcome.pre_clustering_accuracy(),
                outcome.final_mean_accuracy()
            );
            if let (Some(p), Some(purity)) = (&outcome.louvain, outcome.purity()) {
                print!(", {} clusters, purity {purity:.3}", p.num_clusters());
            }
            println!();
        }
        println!("outputs in {}", dir.display());
        Ok::<_, flic_core::FlicError>(())
    })();

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
