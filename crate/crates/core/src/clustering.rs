//! Similarity graphs, deterministic Louvain community detection, purity and
//! the assignment of never-sampled clients.

use std::collections::{BTreeMap, BTreeSet};

use crate::data::ClientDataset;
use crate::error::{FlicError, Result};
use crate::model::{self, ModelSpec};
use crate::params::ParamVector;
use crate::similarity::SimilarityMatrix;

/// Modularity gain below which Louvain stops aggregating.
pub const LOUVAIN_TOLERANCE: f64 = 1e-9;

/// Undirected graph over client ids with strictly positive weights.
///
/// `self_loops` is empty unless requested; a loop of weight `w` adds `2w`
/// to its node's degree and `w` to the total weight.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedGraph {
    num_clients: usize,
    nodes: Vec<usize>,
    edges: Vec<(usize, usize, f64)>,
    self_loops: BTreeMap<usize, f64>,
}

impl WeightedGraph {
    /// `nodes` must be distinct client ids below `num_clients`; edges join
    /// two different nodes with a positive, finite weight.
    pub fn new(
        num_clients: usize,
        nodes: impl IntoIterator<Item = usize>,
        edges: Vec<(usize, usize, f64)>,
    ) -> Result<Self> {
        let nodes: BTreeSet<usize> = nodes.into_iter().collect();
        if let Some(&bad) = nodes.iter().find(|&&v| v >= num_clients) {
            return Err(FlicError::Precondition(format!("node {bad} outside {num_clients} clients")));
        }
        let mut normalized = Vec::with_capacity(edges.len());
        for (a, b, w) in edges {
            if !(w > 0.0 && w.is_finite()) {
                return Err(FlicError::Precondition(format!("edge ({a}, {b}) has nonpositive weight {w}")));
            }
            if a == b {
                return Err(FlicError::Precondition(format!("edge ({a}, {a}) is a self-loop")));
            }
            if !nodes.contains(&a) || !nodes.contains(&b) {
                return Err(FlicError::Precondition(format!("edge ({a}, {b}) touches an unknown node")));
            }
            normalized.push((a.min(b), a.max(b), w));
        }
        normalized.sort_by_key(|e| (e.0, e.1));
        Ok(Self { num_clients, nodes: nodes.into_iter().collect(), edges: normalized, self_loops: BTreeMap::new() })
    }

    /// Adds a self-loop per listed node.
    pub fn with_self_loops(mut self, loops: impl IntoIterator<Item = (usize, f64)>) -> Result<Self> {
        for (v, w) in loops {
            if !(w > 0.0 && w.is_finite()) {
                return Err(FlicError::Precondition(format!("self-loop on {v} has nonpositive weight {w}")));
            }
            if self.nodes.binary_search(&v).is_err() {
                return Err(FlicError::Precondition(format!("self-loop on unknown node {v}")));
            }
            self.self_loops.insert(v, w);
        }
        Ok(self)
    }

    pub fn num_clients(&self) -> usize {
        self.num_clients
    }

    /// Ascending client ids.
    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    /// `(i, j, w)` with `i < j`, sorted.
    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    pub fn self_loops(&self) -> &BTreeMap<usize, f64> {
        &self.self_loops
    }

    /// Sum of edge and self-loop weights (`m`).
    pub fn total_weight(&self) -> f64 {
        self.edges.iter().map(|e| e.2).sum::<f64>() + self.self_loops.values().sum::<f64>()
    }

    /// Same topology with every weight multiplied by `factor > 0`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let edges = self.edges.iter().map(|&(a, b, w)| (a, b, w * factor)).collect();
        Self::new(self.num_clients, self.nodes.iter().copied(), edges)?
            .with_self_loops(self.self_loops.iter().map(|(&v, &w)| (v, w * factor)))
    }

    fn index_of(&self, client: usize) -> usize {
        self.nodes.binary_search(&client).expect("edge endpoints are nodes")
    }

    fn level(&self) -> Level {
        let n = self.nodes.len();
        let mut adj = vec![Vec::new(); n];
        for &(a, b, w) in &self.edges {
            let (ia, ib) = (self.index_of(a), self.index_of(b));
            adj[ia].push((ib, w));
            adj[ib].push((ia, w));
        }
        let mut loops = vec![0.0; n];
        for (&v, &w) in &self.self_loops {
            loops[self.index_of(v)] = w;
        }
        Level { adj, loops }
    }
}

/// Graph over every client that has a computed similarity entry.
///
/// With `self_loops`, each stored update also gets a loop weighted by its
/// similarity with itself, and a client with a stored update but no pair
/// yet still appears as a node.
pub fn build_graph(s: &SimilarityMatrix, self_loops: bool) -> WeightedGraph {
    let k = s.size();
    let nodes: Vec<usize> = (0..k)
        .filter(|&i| (0..k).any(|j| s.entry_round(i, j) >= 0) || (self_loops && s.self_similarity(i) > 0.0))
        .collect();
    let mut edges = Vec::new();
    for (a, &i) in nodes.iter().enumerate() {
        for &j in &nodes[a + 1..] {
            let w = s.get(i, j);
            if s.entry_round(i, j) >= 0 && w > 0.0 {
                edges.push((i, j, w));
            }
        }
    }
    let graph = WeightedGraph::new(k, nodes.iter().copied(), edges).expect("similarities are valid weights");
    if self_loops {
        let loops = nodes.iter().map(|&i| (i, s.self_similarity(i))).filter(|&(_, w)| w > 0.0);
        graph.with_self_loops(loops).expect("self-similarities are valid weights")
    } else {
        graph
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssignedVia {
    Louvain,
    UnsampledEval,
}

impl AssignedVia {
    pub fn as_str(&self) -> &'static str {
        match self {
            AssignedVia::Louvain => "louvain",
            AssignedVia::UnsampledEval => "unsampled-eval",
        }
    }
}

/// Clients split into clusters `0..num_clusters` plus never-sampled ones.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterPartition {
    num_clients: usize,
    assignment: BTreeMap<usize, usize>,
    unassigned: BTreeSet<usize>,
    via_eval: BTreeSet<usize>,
    modularity: f64,
}

impl ClusterPartition {
    /// Partition from an explicit assignment; ids are relabeled contiguously
    /// in order of smallest member, and clients below `num_clients` that are
    /// not assigned become unassigned.
    pub fn from_assignment(num_clients: usize, assignment: &BTreeMap<usize, usize>, modularity: f64) -> Result<Self> {
        if let Some(&bad) = assignment.keys().find(|&&k| k >= num_clients) {
            return Err(FlicError::Precondition(format!("client {bad} outside {num_clients} clients")));
        }
        let mut relabel = BTreeMap::new();
        let assignment = assignment
            .iter()
            .map(|(&k, &c)| {
                let next = relabel.len();
                (k, *relabel.entry(c).or_insert(next))
            })
            .collect::<BTreeMap<_, _>>();
        let unassigned = (0..num_clients).filter(|k| !assignment.contains_key(k)).collect();
        Ok(Self { num_clients, assignment, unassigned, via_eval: BTreeSet::new(), modularity })
    }

    pub fn num_clients(&self) -> usize {
        self.num_clients
    }

    pub fn assignment(&self) -> &BTreeMap<usize, usize> {
        &self.assignment
    }

    pub fn unassigned(&self) -> &BTreeSet<usize> {
        &self.unassigned
    }

    /// Modularity of the Louvain output on its graph.
    pub fn modularity(&self) -> f64 {
        self.modularity
    }

    pub fn num_clusters(&self) -> usize {
        self.assignment.values().max().map_or(0, |&c| c + 1)
    }

    /// Ascending member ids of `cluster`.
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.assignment.iter().filter(|&(_, &c)| c == cluster).map(|(&k, _)| k).collect()
    }

    pub fn cluster_of(&self, client: usize) -> Option<usize> {
        self.assignment.get(&client).copied()
    }

    pub fn assigned_via(&self, client: usize) -> Option<AssignedVia> {
        self.assignment.get(&client).map(|_| {
            if self.via_eval.contains(&client) {
                AssignedVia::UnsampledEval
            } else {
                AssignedVia::Louvain
            }
        })
    }

    /// The partition without clients placed by model evaluation.
    pub fn louvain_only(&self) -> Self {
        let mut p = self.clone();
        for k in std::mem::take(&mut p.via_eval) {
            p.assignment.remove(&k);
            p.unassigned.insert(k);
        }
        p
    }

    fn assign(&mut self, client: usize, cluster: usize) {
        self.unassigned.remove(&client);
        self.assignment.insert(client, cluster);
        self.via_eval.insert(client);
    }
}

/// Adjacency form of one Louvain level; loops carry internal weight.
struct Level {
    adj: Vec<Vec<(usize, f64)>>,
    loops: Vec<f64>,
}

impl Level {
    fn len(&self) -> usize {
        self.loops.len()
    }

    fn degrees(&self) -> Vec<f64> {
        self.adj.iter().zip(&self.loops).map(|(nbrs, l)| nbrs.iter().map(|e| e.1).sum::<f64>() + 2.0 * l).collect()
    }

    /// `Σ_c [L_c/m − (K_c/2m)²]`; zero for a weightless graph.
    fn modularity(&self, labels: &[usize]) -> f64 {
        let degrees = self.degrees();
        let two_m: f64 = degrees.iter().sum();
        if two_m <= 0.0 {
            return 0.0;
        }
        let communities = labels.iter().max().map_or(0, |&c| c + 1);
        let mut inside = vec![0.0; communities];
        let mut total = vec![0.0; communities];
        for v in 0..self.len() {
            let c = labels[v];
            total[c] += degrees[v];
            // each internal edge is seen from both ends
            inside[c] +=
                2.0 * self.loops[v] + self.adj[v].iter().filter(|e| labels[e.0] == c).map(|e| e.1).sum::<f64>();
        }
        inside.iter().zip(&total).map(|(l, k)| l / two_m - (k / two_m).powi(2)).sum()
    }

    /// Greedy local moves until a full pass changes nothing.
    /// Returns contiguous labels (by first node) and whether anything moved.
    fn local_moves(&self) -> (Vec<usize>, bool) {
        let n = self.len();
        let degrees = self.degrees();
        let two_m: f64 = degrees.iter().sum();
        let mut labels: Vec<usize> = (0..n).collect();
        if two_m <= 0.0 {
            return (labels, false);
        }
        let mut total = degrees.clone();
        let mut link = vec![0.0; n];
        let mut touched: Vec<usize> = Vec::new();
        let mut moved_any = false;

        for _pass in 0..10_000 {
            let mut moved = false;
            for v in 0..n {
                let home = labels[v];
                let k_v = degrees[v];
                total[home] -= k_v;

                touched.clear();
                touched.push(home);
                link[home] = 0.0;
                for &(u, w) in &self.adj[v] {
                    let c = labels[u];
                    if !touched.contains(&c) {
                        touched.push(c);
                        link[c] = 0.0;
                    }
                    link[c] += w;
                }
                touched.sort_unstable();

                let gain = |c: usize| link[c] - total[c] * k_v / two_m;
                let tolerance = 1e-12 * k_v.max(f64::MIN_POSITIVE);
                let mut best = home;
                let mut best_gain = gain(home);
                for &c in &touched {
                    let g = gain(c);
                    if g > best_gain + tolerance {
                        best = c;
                        best_gain = g;
                    }
                }
                total[best] += k_v;
                if best != home {
                    labels[v] = best;
                    moved = true;
                    moved_any = true;
                }
            }
            if !moved {
                break;
            }
        }
        (relabel(&labels), moved_any)
    }

    fn aggregate(&self, labels: &[usize]) -> Level {
        let communities = labels.iter().max().map_or(0, |&c| c + 1);
        let mut loops = vec![0.0; communities];
        let mut weights: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); communities];
        for v in 0..self.len() {
            let c = labels[v];
            loops[c] += self.loops[v];
            for &(u, w) in &self.adj[v] {
                let d = labels[u];
                if d == c {
                    // seen from both endpoints
                    loops[c] += w / 2.0;
                } else {
                    *weights[c].entry(d).or_insert(0.0) += w;
                }
            }
        }
        let adj = weights.into_iter().map(|m| m.into_iter().collect()).collect();
        Level { adj, loops }
    }
}

fn relabel(labels: &[usize]) -> Vec<usize> {
    let mut map = BTreeMap::new();
    labels
        .iter()
        .map(|&c| {
            let next = map.len();
            *map.entry(c).or_insert(next)
        })
        .collect()
}

/// Modularity of `partition` restricted to the graph's nodes.
pub fn modularity(graph: &WeightedGraph, partition: &ClusterPartition) -> Result<f64> {
    let labels = graph
        .nodes
        .iter()
        .map(|&v| partition.cluster_of(v).ok_or(FlicError::Coverage(v)))
        .collect::<Result<Vec<_>>>()?;
    Ok(graph.level().modularity(&relabel(&labels)))
}

/// Two-phase Louvain with ascending scan order and lowest-id tie-breaking.
pub fn louvain(graph: &WeightedGraph) -> ClusterPartition {
    let base = graph.level();
    let n = base.len();
    let mut membership: Vec<usize> = (0..n).collect();
    let mut level = graph.level();
    let mut best_q = base.modularity(&membership);

    loop {
        let (labels, moved) = level.local_moves();
        if !moved {
            break;
        }
        let candidate: Vec<usize> = membership.iter().map(|&c| labels[c]).collect();
        let q = base.modularity(&candidate);
        if q - best_q < LOUVAIN_TOLERANCE {
            if q > best_q {
                membership = candidate;
                best_q = q;
            }
            break;
        }
        membership = candidate;
        best_q = q;
        level = level.aggregate(&labels);
    }

    let assignment = graph.nodes.iter().zip(relabel(&membership)).map(|(&v, c)| (v, c)).collect();
    ClusterPartition::from_assignment(graph.num_clients, &assignment, best_q).expect("graph nodes are valid clients")
}

/// Fraction of assigned clients whose whole cluster shares their group.
///
/// `ground_truth` is indexed by client id.
pub fn purity(partition: &ClusterPartition, ground_truth: &[usize]) -> Result<f64> {
    if partition.assignment.is_empty() {
        return Err(FlicError::Precondition("purity of an empty partition".into()));
    }
    if let Some(&bad) = partition.assignment.keys().find(|&&k| k >= ground_truth.len()) {
        return Err(FlicError::config(format!("client {bad} has no ground-truth group")));
    }
    let mut groups: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for (&k, &c) in &partition.assignment {
        groups.entry(c).or_default().insert(ground_truth[k]);
    }
    let pure = partition.assignment.values().filter(|c| groups[c].len() == 1).count();
    Ok(pure as f64 / partition.assignment.len() as f64)
}

/// Places each unassigned client in the cluster whose model scores best on
/// that client's test set (lowest cluster id on ties).
pub fn assign_unsampled(
    partition: &mut ClusterPartition,
    cluster_models: &BTreeMap<usize, ParamVector>,
    spec: &ModelSpec,
    clients: &[ClientDataset],
) -> Result<()> {
    if cluster_models.is_empty() {
        return Err(FlicError::Precondition("no cluster models to assign clients to".into()));
    }
    let pending: Vec<usize> = partition.unassigned.iter().copied().collect();
    for k in pending {
        let data = clients.get(k).ok_or_else(|| FlicError::config(format!("unknown client {k}")))?;
        if data.test.is_empty() {
            return Err(FlicError::config(format!("client {k} has an empty test set")));
        }
        let mut best: Option<(usize, f64)> = None;
        for (&c, w) in cluster_models {
            let acc = model::evaluate(spec, w, &data.test)?;
            if best.is_none_or(|(_, b)| acc > b) {
                best = Some((c, acc));
            }
        }
        let (cluster, _) = best.expect("at least one model");
        partition.assign(k, cluster);
    }
    Ok(())
}
