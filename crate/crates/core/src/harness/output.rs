//! CSV and manifest writers for experiment outcomes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use super::{ExperimentConfig, ExperimentOutcome};
use crate::clustering::ClusterPartition;
use crate::error::{FlicError, Result};
use crate::federation::mean_std;

pub const METRICS_HEADER: &str =
    "round,phase,cluster,mean_accuracy,std_accuracy,mean_train_loss,n_clusters,purity,attacker_cluster";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pre,
    Post,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Pre => "pre",
            Phase::Post => "post",
        }
    }
}

/// One metrics line; `cluster` is `None` for the global model.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub phase: Phase,
    pub cluster: Option<usize>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_train_loss: f64,
    pub n_clusters: Option<usize>,
    pub purity: Option<f64>,
    pub attacker_cluster: Option<bool>,
}

fn fixed(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.6}")
    } else {
        String::new()
    }
}

pub(crate) fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.round,
            r.phase.as_str(),
            r.cluster.map_or("global".to_string(), |c| c.to_string()),
            fixed(r.mean_accuracy),
            fixed(r.std_accuracy),
            fixed(r.mean_train_loss),
            r.n_clusters.map(|n| n.to_string()).unwrap_or_default(),
            r.purity.map(fixed).unwrap_or_default(),
            r.attacker_cluster.map(|b| b.to_string()).unwrap_or_default(),
        );
    }
    out
}

pub(crate) fn partition_csv(partition: &ClusterPartition, groups: &[usize]) -> String {
    let mut out = String::from("client_id,cluster_id,ground_truth_group,assigned_via\n");
    for (k, group) in groups.iter().enumerate() {
        let (cluster, via) = match (partition.cluster_of(k), partition.assigned_via(k)) {
            (Some(c), Some(v)) => (c.to_string(), v.as_str()),
            _ => (String::new(), ""),
        };
        let _ = writeln!(out, "{k},{cluster},{group},{via}");
    }
    out
}

#[derive(Serialize)]
struct Manifest<'a> {
    run: RunInfo,
    config: &'a ExperimentConfig,
}

#[derive(Serialize)]
struct RunInfo {
    created_unix: u64,
    similarity_snapshots: Vec<usize>,
    metrics_rows: usize,
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| FlicError::io(path, e))
}

/// Writes `metrics.csv`, `partition.csv` (clustered runs),
/// `similarity_round_<t>.csv` per snapshot and `manifest.toml` into `dir`.
pub fn write_outputs(outcome: &ExperimentOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| FlicError::io(dir, e))?;
    write(&dir.join("metrics.csv"), &outcome.metrics_csv())?;
    if let Some(csv) = outcome.partition_csv() {
        write(&dir.join("partition.csv"), &csv)?;
    }
    for (t, s) in &outcome.snapshots {
        write(&dir.join(format!("similarity_round_{t}.csv")), &s.to_csv())?;
    }
    let manifest = Manifest {
        run: RunInfo {
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            similarity_snapshots: outcome.snapshots.iter().map(|s| s.0).collect(),
            metrics_rows: outcome.metrics.len(),
        },
        config: &outcome.config,
    };
    let text = toml::to_string(&manifest).map_err(|e| FlicError::config(format!("cannot serialize manifest: {e}")))?;
    write(&dir.join("manifest.toml"), &text)
}

/// Headline numbers of one seeded run.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub seed: u64,
    pub pre_accuracy: f64,
    pub final_accuracy: f64,
    pub n_clusters: Option<usize>,
    pub purity: Option<f64>,
}

impl SummaryRow {
    pub fn from_outcome(outcome: &ExperimentOutcome) -> Self {
        Self {
            seed: outcome.config.federation.seed,
            pre_accuracy: outcome.pre_clustering_accuracy(),
            final_accuracy: outcome.final_mean_accuracy(),
            n_clusters: outcome.louvain.as_ref().map(|p| p.num_clusters()),
            purity: outcome.purity(),
        }
    }
}

/// Per-seed rows followed by `mean` and `std` rows.
pub fn write_summary(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut out = String::from("seed,pre_accuracy,final_accuracy,n_clusters,purity\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.seed,
            fixed(r.pre_accuracy),
            fixed(r.final_accuracy),
            r.n_clusters.map(|n| n.to_string()).unwrap_or_default(),
            r.purity.map(fixed).unwrap_or_default(),
        );
    }
    let column = |f: &dyn Fn(&SummaryRow) -> Option<f64>| mean_std(rows.iter().filter_map(f));
    let stats = [
        column(&|r| Some(r.pre_accuracy)),
        column(&|r| Some(r.final_accuracy)),
        column(&|r| r.n_clusters.map(|n| n as f64)),
        column(&|r| r.purity),
    ];
    for (label, pick) in [("mean", 0), ("std", 1)] {
        let cells: Vec<String> = stats.iter().map(|s| fixed(if pick == 0 { s.0 } else { s.1 })).collect();
        let _ = writeln!(out, "{label},{}", cells.join(","));
    }
    write(path, &out)
}
