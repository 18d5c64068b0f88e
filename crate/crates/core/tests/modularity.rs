//! The exhaustive modularity oracle against the library's modularity and Louvain.

#![allow(clippy::needless_range_loop)]

mod common;

use std::collections::BTreeMap;

use flic_core::clustering::{louvain, modularity};
use flic_core::{ClusterPartition, WeightedGraph};
use proptest::prelude::*;

use common::{brute_force_optimum, canonical, modularity_oracle, Adjacency};

fn graph_of(a: &Adjacency) -> WeightedGraph {
    let n = a.len();
    let edges = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .filter(|&(i, j)| a[i][j] > 0.0)
        .map(|(i, j)| (i, j, a[i][j]))
        .collect();
    WeightedGraph::new(n, 0..n, edges).unwrap()
}

fn partition(labels: &[usize]) -> ClusterPartition {
    let map: BTreeMap<usize, usize> = labels.iter().copied().enumerate().collect();
    ClusterPartition::from_assignment(labels.len(), &map, 0.0).unwrap()
}

fn arb_adjacency(max_n: usize) -> impl Strategy<Value = Adjacency> {
    (2..=max_n).prop_flat_map(|n| {
        proptest::collection::vec(proptest::option::weighted(0.6, 0.05f64..2.0), n * (n - 1) / 2).prop_map(move |ws| {
            let mut a = vec![vec![0.0; n]; n];
            let mut it = ws.into_iter();
            for i in 0..n {
                for j in i + 1..n {
                    if let Some(w) = it.next().flatten() {
                        a[i][j] = w;
                        a[j][i] = w;
                    }
                }
            }
            a
        })
    })
}

#[test]
fn two_cliques_joined_weakly() {
    let mut a = vec![vec![0.0; 8]; 8];
    for (i, row) in a.iter_mut().enumerate() {
        for (j, w) in row.iter_mut().enumerate() {
            if i != j && (i < 4) == (j < 4) {
                *w = 2.0;
            }
        }
    }
    a[3][4] = 0.01;
    a[4][3] = 0.01;
    let (best, labels) = brute_force_optimum(&a);
    assert_eq!(canonical(&labels), vec![0, 0, 0, 0, 1, 1, 1, 1]);
    let found = louvain(&graph_of(&a));
    assert_eq!(found.num_clusters(), 2);
    assert!((found.modularity() - best).abs() < 1e-12);
}

#[test]
fn uniform_complete_graph_matches_optimum() {
    for n in 3..=8 {
        let a: Adjacency = (0..n).map(|i| (0..n).map(|j| if i == j { 0.0 } else { 1.0 }).collect()).collect();
        let (best, _) = brute_force_optimum(&a);
        let found = louvain(&graph_of(&a));
        assert!((found.modularity() - best).abs() < 1e-12, "n = {n}");
        // merging everything scores zero and nothing beats it
        assert!(best.abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn library_modularity_matches_oracle(a in arb_adjacency(7), seed in any::<u64>()) {
        let n = a.len();
        let labels: Vec<usize> = (0..n).map(|i| ((seed >> (i * 3)) & 3) as usize).collect();
        let q = modularity(&graph_of(&a), &partition(&labels)).unwrap();
        prop_assert!((q - modularity_oracle(&a, &labels)).abs() < 1e-12);
    }

    #[test]
    fn louvain_never_beats_the_optimum(a in arb_adjacency(6)) {
        let found = louvain(&graph_of(&a));
        let (best, _) = brute_force_optimum(&a);
        prop_assert!(found.modularity() <= best + 1e-12);
    }
}
