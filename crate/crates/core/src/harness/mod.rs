//! End-to-end experiments: phase-1 FedAvg with incremental similarity,
//! a Louvain split at round `T`, per-cluster training and metrics export.

mod config;
mod output;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use log::{debug, info};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use config::{
    load_config, parse_config, parse_vector, AssignUnsampled, ClusteringConfig, ClusteringMethod, ExperimentConfig,
    FederationConfig, ModelConfig, OutputConfig, ScenarioConfig, ThreatConfig, ThreatKind,
};
pub use output::{write_outputs, write_summary, MetricsRow, Phase, SummaryRow};

use crate::clustering::{self, ClusterPartition};
use crate::data::{self, ClientDataset, ScenarioKind};
use crate::error::{FlicError, Result};
use crate::federation::{mean_std, run_cluster_phase, ClusterRun, RoundEnv, RoundReport, ServerState};
use crate::model::{self, ModelKind, ModelSpec};
use crate::params::ParamVector;
use crate::similarity::{bias_diagnostics, BiasDiagnostics, GlobalHistory, SimilarityMatrix};
use crate::threat::{AttackKind, ThreatModel};

const INIT_STREAM: u64 = 0x1a17_0000_0000_0001;
const SAMPLING_STREAM: u64 = 0x5a3b_0000_0000_0002;
const ATTACKER_STREAM: u64 = 0xa77a_0000_0000_0003;

/// Clients, model and threat built from a config.
#[derive(Debug, Clone)]
pub struct Setup {
    pub spec: ModelSpec,
    pub clients: Vec<ClientDataset>,
    pub threat: Option<ThreatModel>,
}

impl Setup {
    /// Ground-truth group per client; attackers form group 1 of an
    /// otherwise single-group population.
    pub fn groups(&self) -> Vec<usize> {
        self.clients.iter().map(|c| c.group_id).collect()
    }
}

pub fn prepare(config: &ExperimentConfig) -> Result<Setup> {
    config.validate()?;
    let scenario = config.scenario_spec();
    let raw = match &config.scenario.mnist_dir {
        Some(dir) if scenario.kind != ScenarioKind::RegressionToy => Some(data::load_mnist(dir)?),
        _ => None,
    };
    let mut clients = data::build_scenario(&scenario, raw.as_ref())?;

    let spec = match config.model.kind {
        ModelKind::LinearRegression1d => ModelSpec::linear_regression_1d(),
        ModelKind::MlpClassifier => {
            let num_classes = match (&raw, &scenario.synthetic) {
                (Some(b), _) => b.num_classes,
                (None, data::SyntheticSource::Blobs { num_classes, .. })
                | (None, data::SyntheticSource::Images { num_classes, .. }) => *num_classes,
            };
            let input_dim = clients[0].train.inputs().ncols();
            ModelSpec::mlp(input_dim, config.model.hidden.clone(), num_classes)?
        }
    };

    let threat = build_threat(config, &spec)?;
    if let Some(t) = &threat {
        if scenario.effective_groups() == 1 {
            for c in &mut clients {
                c.group_id = usize::from(t.is_attacker(c.client_id));
            }
        }
    }
    Ok(Setup { spec, clients, threat })
}

fn build_threat(config: &ExperimentConfig, spec: &ModelSpec) -> Result<Option<ThreatModel>> {
    let t = &config.threat;
    let k = config.scenario.clients;
    let kind = match t.kind {
        ThreatKind::None => return Ok(None),
        ThreatKind::MinusGrad => AttackKind::MinusGrad,
        ThreatKind::Omniscient => {
            let path = t
                .target_file
                .as_ref()
                .ok_or_else(|| FlicError::config("omniscient threat needs threat.target_file"))?;
            let text = fs::read_to_string(path).map_err(|e| FlicError::io(path, e))?;
            AttackKind::Omniscient { target: spec.wrap(parse_vector(&text)?)? }
        }
    };
    let attackers: Vec<usize> = match (&t.attacker_ids, t.attackers) {
        (Some(ids), _) => ids.clone(),
        (None, Some(n)) => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.federation.seed ^ ATTACKER_STREAM);
            index::sample(&mut rng, k, n).into_iter().collect()
        }
        (None, None) => return Err(FlicError::config("threat needs attackers or attacker_ids")),
    };
    if attackers.is_empty() {
        return Ok(None);
    }
    ThreatModel::new(attackers, kind, k).map(Some)
}

/// Louvain run on `S_t` without affecting training.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticRow {
    pub round: usize,
    pub n_clusters: usize,
    pub purity: f64,
    pub all_singletons: bool,
    pub modularity: f64,
}

/// Bias terms for the pair `(i, j)` as held in memory after a round.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasRecord {
    pub round: usize,
    pub i: usize,
    pub j: usize,
    pub terms: BiasDiagnostics,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub spec: ModelSpec,
    pub groups: Vec<usize>,
    pub attackers: BTreeSet<usize>,
    /// Phase-1 rounds, then any extra global rounds of a non-clustered run.
    pub global_rounds: Vec<RoundReport>,
    /// `w_0, w_1, …` of the global server.
    pub history: GlobalHistory,
    /// `S_T`.
    pub similarity: SimilarityMatrix,
    pub snapshots: Vec<(usize, SimilarityMatrix)>,
    pub diagnostics: Vec<DiagnosticRow>,
    pub bias: Vec<BiasRecord>,
    /// Louvain output at the split.
    pub louvain: Option<ClusterPartition>,
    /// Louvain output plus evaluated never-sampled clients.
    pub partition: Option<ClusterPartition>,
    pub clusters: Vec<ClusterRun>,
    /// Each client's test accuracy under the model that serves it at the end.
    pub final_accuracy: Vec<(usize, f64)>,
    pub metrics: Vec<MetricsRow>,
}

impl ExperimentOutcome {
    /// Mean client accuracy of the global model at round `T`.
    pub fn pre_clustering_accuracy(&self) -> f64 {
        let t = self.config.federation.rounds;
        self.global_rounds[t - 1].mean_accuracy()
    }

    pub fn final_mean_accuracy(&self) -> f64 {
        mean_std(self.final_accuracy.iter().map(|(_, a)| *a)).0
    }

    /// Mean final accuracy over the listed clients.
    pub fn final_mean_accuracy_of(&self, clients: &BTreeSet<usize>) -> f64 {
        mean_std(self.final_accuracy.iter().filter(|(k, _)| clients.contains(k)).map(|(_, a)| *a)).0
    }

    pub fn loyal_clients(&self) -> BTreeSet<usize> {
        (0..self.groups.len()).filter(|k| !self.attackers.contains(k)).collect()
    }

    /// Purity of the Louvain partition at the split.
    pub fn purity(&self) -> Option<f64> {
        self.louvain.as_ref().and_then(|p| clustering::purity(p, &self.groups).ok())
    }

    /// `w_{t−1} − δ` for each update received in global round `t`.
    pub fn local_models(&self, round: usize) -> Vec<(usize, ParamVector)> {
        let Some(w_prev) = self.history.get(round.wrapping_sub(1)) else {
            return Vec::new();
        };
        self.global_rounds[round - 1].received.iter().filter_map(|(k, d)| w_prev.sub(d).ok().map(|w| (*k, w))).collect()
    }

    pub fn metrics_csv(&self) -> String {
        output::metrics_csv(&self.metrics)
    }

    pub fn partition_csv(&self) -> Option<String> {
        self.partition.as_ref().map(|p| output::partition_csv(p, &self.groups))
    }
}

/// Test accuracy (negative MSE for regression) of each listed client under
/// the model `model_for(client)`.
pub fn evaluate_clients<'a>(
    spec: &ModelSpec,
    clients: &[ClientDataset],
    ids: &[usize],
    model_for: impl Fn(usize) -> &'a ParamVector + Sync,
) -> Result<Vec<(usize, f64)>> {
    ids.par_iter()
        .map(|&k| {
            let data = clients.get(k).ok_or_else(|| FlicError::config(format!("unknown client {k}")))?;
            if data.test.is_empty() {
                return Err(FlicError::config(format!("client {k} has an empty test set")));
            }
            Ok((k, model::evaluate(spec, model_for(k), &data.test)?))
        })
        .collect()
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let setup = prepare(config)?;
    run_prepared(config, &setup)
}

/// Runs phase 1, the split and phase 2 on an already built setup.
pub fn run_prepared(config: &ExperimentConfig, setup: &Setup) -> Result<ExperimentOutcome> {
    let fed = &config.federation;
    let k = setup.clients.len();
    let seed = fed.seed;
    let spec = &setup.spec;
    let groups = setup.groups();
    let env = RoundEnv {
        spec,
        clients: &setup.clients,
        training: config.training(),
        fraction: fed.fraction,
        threat: setup.threat.as_ref(),
        seed,
    };
    let flic = config.clustering.method == ClusteringMethod::Flic;
    let self_loops = config.clustering.self_loops;
    let snapshot_rounds = config.snapshot_rounds();

    let w0 = spec.init_params(&mut ChaCha8Rng::seed_from_u64(seed ^ INIT_STREAM));
    let mut server = ServerState::new(w0.clone(), fed.aggregation, seed ^ SAMPLING_STREAM);
    let mut history = GlobalHistory::new(w0);
    let mut similarity = SimilarityMatrix::new(k);
    let mut snapshots = Vec::new();
    let mut diagnostics = Vec::new();
    let mut bias = Vec::new();
    let mut metrics = Vec::new();
    let mut global_rounds = Vec::new();
    let everyone: Vec<usize> = (0..k).collect();

    if snapshot_rounds.contains(&0) {
        snapshots.push((0, similarity.clone()));
    }
    let global_total = if flic { fed.rounds } else { fed.rounds + fed.cluster_rounds };
    for t in 1..=global_total {
        let w_prev = server.global().clone();
        let report = server.run_round(&everyone, &env)?;
        if t <= fed.rounds {
            similarity.ingest_round(server.memory(), &report.sampled, t)?;
        }
        history.push(server.global().clone());

        if t <= fed.rounds && config.clustering.bias_diagnostics {
            bias.extend(bias_records(&server, &history, &report.sampled, &w_prev, t, &env)?);
        }
        let diagnostic = if t <= fed.rounds && config.clustering.diagnostic_per_round {
            let partition = clustering::louvain(&clustering::build_graph(&similarity, self_loops));
            let row = DiagnosticRow {
                round: t,
                n_clusters: partition.num_clusters(),
                purity: clustering::purity(&partition, &groups)?,
                all_singletons: partition.num_clusters() == partition.assignment().len(),
                modularity: partition.modularity(),
            };
            debug!("round {t}: {} clusters, purity {:.3}", row.n_clusters, row.purity);
            diagnostics.push(row.clone());
            Some(row)
        } else {
            None
        };
        if snapshot_rounds.contains(&t) {
            snapshots.push((t, similarity.clone()));
        }

        let (mean, std) = mean_std(report.accuracies.iter().map(|a| a.1));
        info!("round {t}: global accuracy {mean:.4}");
        metrics.push(MetricsRow {
            round: t,
            phase: if t <= fed.rounds { Phase::Pre } else { Phase::Post },
            cluster: None,
            mean_accuracy: mean,
            std_accuracy: std,
            mean_train_loss: mean_std(report.train_loss.iter().map(|l| l.1)).0,
            n_clusters: diagnostic.as_ref().map(|d| d.n_clusters),
            purity: diagnostic.as_ref().map(|d| d.purity),
            attacker_cluster: None,
        });
        global_rounds.push(report);
    }

    let mut louvain = None;
    let mut partition = None;
    let mut clusters = Vec::new();
    let final_accuracy;
    if flic {
        let found = clustering::louvain(&clustering::build_graph(&similarity, self_loops));
        info!("split at round {}: {} clusters, modularity {:.4}", fed.rounds, found.num_clusters(), found.modularity());
        let mut split = found.clone();
        if config.clustering.assign_unsampled == AssignUnsampled::AtSplit && !split.unassigned().is_empty() {
            let models = (0..split.num_clusters()).map(|c| (c, server.global().clone())).collect();
            clustering::assign_unsampled(&mut split, &models, spec, &setup.clients)?;
        }
        clusters = run_cluster_phase(&split, server.global(), fed.cluster_rounds, &server, &env)?;
        if !split.unassigned().is_empty() {
            let models: BTreeMap<usize, ParamVector> =
                clusters.iter().map(|run| (run.cluster, run.server.global().clone())).collect();
            clustering::assign_unsampled(&mut split, &models, spec, &setup.clients)?;
        }

        let split_purity = clustering::purity(&found, &groups).ok();
        for r in 0..fed.cluster_rounds {
            for run in &clusters {
                let report = &run.reports[r];
                let (mean, std) = mean_std(report.accuracies.iter().map(|a| a.1));
                metrics.push(MetricsRow {
                    round: report.round,
                    phase: Phase::Post,
                    cluster: Some(run.cluster),
                    mean_accuracy: mean,
                    std_accuracy: std,
                    mean_train_loss: mean_std(report.train_loss.iter().map(|l| l.1)).0,
                    n_clusters: Some(found.num_clusters()),
                    purity: split_purity,
                    attacker_cluster: setup.threat.as_ref().map(|t| run.members.iter().any(|&m| t.is_attacker(m))),
                });
            }
        }

        let models: BTreeMap<usize, &ParamVector> =
            clusters.iter().map(|run| (run.cluster, run.server.global())).collect();
        let fallback = server.global();
        final_accuracy = evaluate_clients(spec, &setup.clients, &everyone, |c| {
            split.cluster_of(c).and_then(|cl| models.get(&cl).copied()).unwrap_or(fallback)
        })?;
        louvain = Some(found);
        partition = Some(split);
    } else {
        final_accuracy = global_rounds.last().map(|r| r.accuracies.clone()).unwrap_or_default();
    }

    Ok(ExperimentOutcome {
        config: config.clone(),
        spec: spec.clone(),
        groups,
        attackers: setup.threat.as_ref().map(|t| t.attackers().clone()).unwrap_or_default(),
        global_rounds,
        history,
        similarity,
        snapshots,
        diagnostics,
        bias,
        louvain,
        partition,
        clusters,
        final_accuracy,
        metrics,
    })
}

/// Bias terms between each client stored in round `t` and every older
/// update in memory, with the older client retrained from `w_{t−1}`.
fn bias_records(
    server: &ServerState,
    history: &GlobalHistory,
    sampled: &[usize],
    w_prev: &ParamVector,
    t: usize,
    env: &RoundEnv<'_>,
) -> Result<Vec<BiasRecord>> {
    let memory = server.memory();
    let pairs: Vec<(usize, usize)> = sampled
        .iter()
        .flat_map(|&i| memory.iter().filter(move |(&j, rec)| j != i && rec.origin_round < t).map(move |(&j, _)| (i, j)))
        .collect();
    let older: BTreeSet<usize> = pairs.iter().map(|p| p.1).collect();
    let retrained: BTreeMap<usize, ParamVector> = older
        .par_iter()
        .map(|&j| {
            let mut update = env.local_update(w_prev, t, j)?;
            if let Some(threat) = env.threat {
                if threat.is_attacker(j) && matches!(threat.kind(), AttackKind::MinusGrad) {
                    update.delta = crate::threat::apply_minus_grad(&update.delta);
                }
            }
            Ok((j, update.delta))
        })
        .collect::<Result<_>>()?;
    pairs
        .into_iter()
        .map(|(i, j)| {
            let terms = bias_diagnostics(memory, history, i, j, &retrained[&j], 2.0)?;
            Ok(BiasRecord { round: t, i, j, terms })
        })
        .collect()
}

/// Runs `repeat` seeds starting at the config seed, writing each run to
/// `<out>/seed_<s>/` and a `summary.csv` across runs.
pub fn run_repeated(config: &ExperimentConfig, repeat: usize, out: &Path) -> Result<Vec<SummaryRow>> {
    let mut rows = Vec::with_capacity(repeat);
    for r in 0..repeat {
        let mut cfg = config.clone();
        cfg.federation.seed = config.federation.seed + r as u64;
        let outcome = run_experiment(&cfg)?;
        let dir = out.join(format!("seed_{}", cfg.federation.seed));
        write_outputs(&outcome, &dir)?;
        rows.push(SummaryRow::from_outcome(&outcome));
    }
    write_summary(&rows, &out.join("summary.csv"))?;
    Ok(rows)
}
