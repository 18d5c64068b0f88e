//! FedAvg rounds, aggregation rules and the server's update memory.

use std::collections::BTreeMap;

use log::warn;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::ClusterPartition;
use crate::data::ClientDataset;
use crate::error::{FlicError, Result};
use crate::model::{self, ClientUpdate, LocalTraining, ModelSpec};
use crate::params::ParamVector;
use crate::threat::ThreatModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationRule {
    #[default]
    WeightedMean,
    CoordinateMedian,
}

impl AggregationRule {
    pub fn as_str(&self) -> &'static str {
        match self {
            AggregationRule::WeightedMean => "weighted_mean",
            AggregationRule::CoordinateMedian => "coordinate_median",
        }
    }
}

/// The latest update the server holds for one client.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateRecord {
    pub delta: ParamVector,
    pub origin_round: usize,
    pub num_samples: usize,
}

/// Server memory `M`: client id → most recent update.
pub type UpdateMemory = BTreeMap<usize, UpdateRecord>;

/// `max(1, round(fraction · eligible))`.
pub fn cohort_size(eligible: usize, fraction: f64) -> usize {
    ((fraction * eligible as f64).round() as usize).clamp(1, eligible.max(1))
}

/// Draws a cohort uniformly without replacement; returned ids are ascending.
pub fn sample_clients(eligible: &[usize], fraction: f64, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if eligible.is_empty() {
        return Err(FlicError::Precondition("no eligible clients to sample".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(FlicError::config(format!("client fraction must be in (0, 1], got {fraction}")));
    }
    let m = cohort_size(eligible.len(), fraction);
    let mut picked: Vec<usize> = index::sample(rng, eligible.len(), m).into_iter().map(|i| eligible[i]).collect();
    picked.sort_unstable();
    Ok(picked)
}

fn check_updates(updates: &[(ParamVector, usize)], w_prev: &ParamVector) -> Result<()> {
    if updates.is_empty() {
        return Err(FlicError::Precondition("aggregation over an empty cohort".into()));
    }
    for (delta, _) in updates {
        w_prev.check_compatible(delta, "aggregated update")?;
    }
    Ok(())
}

/// `Σ λ_k δ_k` with `λ_k = n_k / Σ n`, summed in the given order.
pub fn weighted_mean_update(updates: &[(ParamVector, usize)], w_prev: &ParamVector) -> Result<ParamVector> {
    check_updates(updates, w_prev)?;
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(FlicError::config("cohort has zero total samples"));
    }
    let mut acc = ParamVector::zeros(w_prev.len(), w_prev.digest());
    for (delta, n) in updates {
        acc.axpy(*n as f64 / total as f64, delta)?;
    }
    Ok(acc)
}

/// FedAvg step: `w_prev − Σ λ_k δ_k`.
pub fn aggregate_weighted_mean(updates: &[(ParamVector, usize)], w_prev: &ParamVector) -> Result<ParamVector> {
    w_prev.sub(&weighted_mean_update(updates, w_prev)?)
}

/// Unweighted per-coordinate median of the deltas (mean of the two middle
/// values for an even count).
pub fn coordinate_median_update(updates: &[(ParamVector, usize)], w_prev: &ParamVector) -> Result<ParamVector> {
    check_updates(updates, w_prev)?;
    let mut column = Vec::with_capacity(updates.len());
    let values = (0..w_prev.len())
        .map(|i| {
            column.clear();
            column.extend(updates.iter().map(|(d, _)| d[i]));
            column.sort_unstable_by(f64::total_cmp);
            let mid = column.len() / 2;
            if column.len() % 2 == 0 {
                (column[mid - 1] + column[mid]) / 2.0
            } else {
                column[mid]
            }
        })
        .collect();
    Ok(ParamVector::new(values, w_prev.digest()))
}

pub fn aggregate_coordinate_median(updates: &[(ParamVector, usize)], w_prev: &ParamVector) -> Result<ParamVector> {
    w_prev.sub(&coordinate_median_update(updates, w_prev)?)
}

pub fn aggregate(rule: AggregationRule, updates: &[(ParamVector, usize)], w_prev: &ParamVector) -> Result<ParamVector> {
    match rule {
        AggregationRule::WeightedMean => aggregate_weighted_mean(updates, w_prev),
        AggregationRule::CoordinateMedian => aggregate_coordinate_median(updates, w_prev),
    }
}

/// Seed for a client's local-training stream in a given round.
///
/// Depends only on the run seed, the round and the client, so the same
/// client trains identically whichever server (global or cluster) asks.
pub fn client_seed(seed: u64, round: usize, client: usize) -> u64 {
    let mut z =
        seed ^ (round as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (client as u64).wrapping_mul(0xd1b5_4a32_d192_ed03);
    // splitmix64 finaliser
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Everything a round needs besides the server state.
#[derive(Clone, Copy)]
pub struct RoundEnv<'a> {
    pub spec: &'a ModelSpec,
    /// Indexed by client id.
    pub clients: &'a [ClientDataset],
    pub training: LocalTraining,
    pub fraction: f64,
    pub threat: Option<&'a ThreatModel>,
    pub seed: u64,
}

impl RoundEnv<'_> {
    /// Honest local training of `client` from `w` as it would run in `round`.
    pub fn local_update(&self, w: &ParamVector, round: usize, client: usize) -> Result<ClientUpdate> {
        let data = self.clients.get(client).ok_or_else(|| FlicError::config(format!("unknown client {client}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(client_seed(self.seed, round, client));
        model::client_update(self.spec, w, &data.train, &self.training, &mut rng)
            .map_err(|e| e.at(Some(round), Some(client)))
    }

    /// Test accuracy of `w` on each listed client.
    pub fn evaluate(&self, w: &ParamVector, clients: &[usize]) -> Result<Vec<(usize, f64)>> {
        clients
            .par_iter()
            .map(|&k| {
                let acc = model::evaluate(self.spec, w, &self.clients[k].test)?;
                Ok((k, acc))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub sampled: Vec<usize>,
    /// Final-epoch training loss per sampled client.
    pub train_loss: Vec<(usize, f64)>,
    /// Accuracy of the new model on each eligible client's test set.
    pub accuracies: Vec<(usize, f64)>,
    pub aggregation: AggregationRule,
    /// Updates as received by the server (after any attack), ascending ids.
    pub received: Vec<(usize, ParamVector)>,
}

impl RoundReport {
    pub fn mean_accuracy(&self) -> f64 {
        mean_std(self.accuracies.iter().map(|(_, a)| *a)).0
    }
}

pub fn mean_std(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Server state `(t, w_t, M)` plus its sampling stream.
#[derive(Debug, Clone)]
pub struct ServerState {
    round: usize,
    global: ParamVector,
    memory: UpdateMemory,
    rng: ChaCha8Rng,
    aggregation: AggregationRule,
}

impl ServerState {
    pub fn new(global: ParamVector, aggregation: AggregationRule, sampling_seed: u64) -> Self {
        Self {
            round: 0,
            global,
            memory: UpdateMemory::new(),
            rng: ChaCha8Rng::seed_from_u64(sampling_seed),
            aggregation,
        }
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn global(&self) -> &ParamVector {
        &self.global
    }

    pub fn memory(&self) -> &UpdateMemory {
        &self.memory
    }

    pub fn aggregation(&self) -> AggregationRule {
        self.aggregation
    }

    /// A new server starting from `global` that continues this server's
    /// round counter and sampling stream, with empty memory.
    pub fn fork(&self, global: ParamVector) -> Self {
        Self {
            round: self.round,
            global,
            memory: UpdateMemory::new(),
            rng: self.rng.clone(),
            aggregation: self.aggregation,
        }
    }

    /// One FedAvg round over `eligible` clients.
    ///
    /// Every received update (including malicious ones) replaces the
    /// sender's entry in memory before aggregation.
    pub fn run_round(&mut self, eligible: &[usize], env: &RoundEnv<'_>) -> Result<RoundReport> {
        let t = self.round + 1;
        let sampled = sample_clients(eligible, env.fraction, &mut self.rng)?;

        let global = &self.global;
        let mut cohort: Vec<(usize, ClientUpdate)> =
            sampled.par_iter().map(|&k| env.local_update(global, t, k).map(|u| (k, u))).collect::<Result<_>>()?;

        if let Some(threat) = env.threat {
            threat.intercept(&mut cohort)?;
        }

        let train_loss = cohort.iter().map(|(k, u)| (*k, u.train_loss)).collect();
        let updates: Vec<(ParamVector, usize)> = cohort.iter().map(|(_, u)| (u.delta.clone(), u.num_samples)).collect();
        let next = aggregate(self.aggregation, &updates, &self.global)?;
        if !next.is_finite() {
            return Err(
                FlicError::Numerical { quantity: "aggregated model", site: Default::default() }.at(Some(t), None)
            );
        }

        let received: Vec<(usize, ParamVector)> = cohort.iter().map(|(k, u)| (*k, u.delta.clone())).collect();
        for (k, u) in cohort {
            self.memory.insert(k, UpdateRecord { delta: u.delta, origin_round: t, num_samples: u.num_samples });
        }
        self.global = next;
        self.round = t;

        Ok(RoundReport {
            round: t,
            sampled,
            train_loss,
            accuracies: env.evaluate(&self.global, eligible)?,
            aggregation: self.aggregation,
            received,
        })
    }
}

/// One cluster's independent training after the split.
#[derive(Debug, Clone)]
pub struct ClusterRun {
    pub cluster: usize,
    pub members: Vec<usize>,
    pub server: ServerState,
    pub reports: Vec<RoundReport>,
}

/// Runs `rounds` FedAvg rounds per cluster, each cluster starting from
/// `w_split` with `base`'s round counter and sampling stream. Empty
/// clusters are skipped.
pub fn run_cluster_phase(
    partition: &ClusterPartition,
    w_split: &ParamVector,
    rounds: usize,
    base: &ServerState,
    env: &RoundEnv<'_>,
) -> Result<Vec<ClusterRun>> {
    let mut runs = Vec::new();
    for cluster in 0..partition.num_clusters() {
        let members = partition.members(cluster);
        if members.is_empty() {
            warn!("cluster {cluster} has no members; skipping");
            continue;
        }
        let mut server = base.fork(w_split.clone());
        let reports = (0..rounds).map(|_| server.run_round(&members, env)).collect::<Result<Vec<_>>>()?;
        runs.push(ClusterRun { cluster, members, server, reports });
    }
    Ok(runs)
}
