//! Shared helpers: shipped configs, a brute-force modularity oracle and
//! uncaptured pass/fail reporting.

#![allow(dead_code)]

use std::io::Write;
use std::path::PathBuf;

use flic_core::harness::{load_config, ExperimentConfig};

pub fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

pub fn config(name: &str) -> ExperimentConfig {
    load_config(&configs_dir().join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

pub fn with_seed(config: &ExperimentConfig, seed: u64) -> ExperimentConfig {
    let mut c = config.clone();
    c.federation.seed = seed;
    c
}

/// Writes straight to stderr so the line survives test output capture.
pub fn report(criterion: &str, pass: bool, detail: &str) {
    let mark = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "[{mark}] {criterion}: {detail}");
}

/// Dense symmetric weight matrix with a zero diagonal.
pub type Adjacency = Vec<Vec<f64>>;

/// `1/(2m) Σ_ij [A_ij − k_i k_j / 2m] [c_i = c_j]`.
pub fn modularity_oracle(a: &Adjacency, labels: &[usize]) -> f64 {
    let n = a.len();
    let k: Vec<f64> = a.iter().map(|row| row.iter().sum()).collect();
    let two_m: f64 = k.iter().sum();
    if two_m == 0.0 {
        return 0.0;
    }
    let mut q = 0.0;
    for i in 0..n {
        for j in 0..n {
            if labels[i] == labels[j] {
                q += a[i][j] - k[i] * k[j] / two_m;
            }
        }
    }
    q / two_m
}

/// Best modularity over every set partition (restricted growth strings).
pub fn brute_force_optimum(a: &Adjacency) -> (f64, Vec<usize>) {
    let n = a.len();
    let mut labels = vec![0usize; n];
    let mut best = (f64::NEG_INFINITY, labels.clone());
    loop {
        let q = modularity_oracle(a, &labels);
        if q > best.0 + 1e-12 {
            best = (q, labels.clone());
        }
        // next restricted growth string
        let mut i = n;
        loop {
            if i <= 1 {
                return best;
            }
            i -= 1;
            let max_prefix = labels[..i].iter().copied().max().unwrap_or(0);
            if labels[i] <= max_prefix {
                labels[i] += 1;
                for l in labels.iter_mut().skip(i + 1) {
                    *l = 0;
                }
                break;
            }
        }
    }
}

/// Canonical labels: first appearance order.
pub fn canonical(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::BTreeMap::new();
    labels
        .iter()
        .map(|&c| {
            let next = map.len();
            *map.entry(c).or_insert(next)
        })
        .collect()
}
