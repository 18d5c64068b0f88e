//! Acceptance criteria, one test each. Every test prints a `[PASS]` or
//! `[FAIL]` line to stderr before asserting.

#![allow(clippy::needless_range_loop)]

mod common;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use flic_core::federation::{aggregate_weighted_mean, mean_std};
use flic_core::harness::{run_experiment, write_outputs, ClusteringMethod, ExperimentConfig, ThreatKind};
use flic_core::model::ClientUpdate;
use flic_core::model::{loss_and_grad, ModelSpec, Samples, Targets};
use flic_core::threat::{AttackKind, ThreatModel};
use flic_core::{clustering, ParamVector};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{brute_force_optimum, canonical, config, report, with_seed, Adjacency};

const SEEDS: u64 = 20;

fn five_minutes() -> Duration {
    Duration::from_secs(300)
}

fn slope(params: &ParamVector) -> f64 {
    params[0]
}

#[test]
fn toy_regression() {
    let criterion = "1-D regression toy";
    let start = Instant::now();
    let iid = run_experiment(&config("toy_iid.toml")).unwrap();
    let noniid = run_experiment(&config("toy_noniid.toml")).unwrap();
    let elapsed = start.elapsed();

    let w_iid = slope(iid.history.get(iid.history.len() - 1).unwrap());
    let w_non = slope(noniid.history.get(noniid.history.len() - 1).unwrap());
    // a client's local model moves at least 5 past the midpoint toward its own slope
    let slopes = &noniid.config.scenario.regression.slopes;
    let mut pulled = [false; 2];
    for t in 1..=noniid.config.federation.rounds {
        for (k, w) in noniid.local_models(t) {
            let toward = (slopes[k] - 45.0).signum();
            if (slope(&w) - 45.0) * toward >= 5.0 {
                pulled[k] = true;
            }
        }
    }
    let pass = (w_iid - 45.0).abs() <= 0.5
        && (w_non - 45.0).abs() <= 1.0
        && pulled.iter().all(|&p| p)
        && elapsed < Duration::from_secs(1);
    report(
        criterion,
        pass,
        &format!(
            "IID w={w_iid:.4}, non-IID w={w_non:.4}, clients pulled toward own slope {pulled:?}, {:.3}s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

struct SplitStats {
    clean: usize,
    pre: Vec<f64>,
    post: Vec<f64>,
    elapsed: Duration,
}

fn split_runs(base: &ExperimentConfig, groups: usize) -> SplitStats {
    let start = Instant::now();
    let mut stats = SplitStats { clean: 0, pre: Vec::new(), post: Vec::new(), elapsed: Duration::ZERO };
    for seed in 1..=SEEDS {
        let out = run_experiment(&with_seed(base, seed)).unwrap();
        let partition = out.louvain.as_ref().unwrap();
        if out.purity() == Some(1.0) && partition.num_clusters() == groups {
            stats.clean += 1;
        }
        stats.pre.push(out.pre_clustering_accuracy());
        stats.post.push(out.final_mean_accuracy());
    }
    stats.elapsed = start.elapsed();
    stats
}

#[test]
fn label_swap_clustering() {
    let criterion = "label-swap clustering";
    let s = split_runs(&config("label_swap.toml"), 5);
    let (pre, post) = (mean_std(s.pre.iter().copied()).0, mean_std(s.post.iter().copied()).0);
    let pass = s.clean >= 18 && post > pre && s.elapsed < five_minutes();
    report(
        criterion,
        pass,
        &format!(
            "{}/{SEEDS} runs with purity 1 and 5 clusters, accuracy {pre:.4} -> {post:.4}, {:.1}s",
            s.clean,
            s.elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn rotation_clustering() {
    let criterion = "image-rotation clustering";
    let s = split_runs(&config("rotation.toml"), 4);
    let (pre, post) = (mean_std(s.pre.iter().copied()).0, mean_std(s.post.iter().copied()).0);
    let pass = s.clean == SEEDS as usize && post >= pre && s.elapsed < five_minutes();
    report(
        criterion,
        pass,
        &format!(
            "{}/{SEEDS} runs with purity 1 and 4 clusters, accuracy {pre:.4} -> {post:.4}, {:.1}s",
            s.clean,
            s.elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn early_round_purity_curve() {
    let criterion = "early-round purity curve";
    let mut base = config("label_swap.toml");
    base.clustering.diagnostic_per_round = true;
    let groups = base.scenario.num_groups;
    let t = base.federation.rounds;
    let mut good = 0;
    let mut dipped = 0;
    let mut first_clean = Vec::new();
    for seed in 1..=SEEDS {
        let out = run_experiment(&with_seed(&base, seed)).unwrap();
        let d = &out.diagnostics;
        let starts_pure = d[0].round == 1 && d[0].purity == 1.0 && d[0].all_singletons;
        let recovered =
            d.iter().find(|r| r.round < t && r.purity == 1.0 && r.n_clusters == groups && !r.all_singletons);
        if d.iter().any(|r| r.purity < 1.0) {
            dipped += 1;
        }
        if starts_pure {
            if let Some(r) = recovered {
                good += 1;
                first_clean.push(r.round);
            }
        }
    }
    let pass = good >= 15;
    report(
        criterion,
        pass,
        &format!(
            "{good}/{SEEDS} runs start all-singleton at purity 1 and reach purity 1 with {groups} clusters before round {t} \
             (first at rounds {first_clean:?}; {dipped} runs dipped below 1)"
        ),
    );
    assert!(pass);
}

fn undefended(base: &ExperimentConfig, rule: flic_core::AggregationRule) -> ExperimentConfig {
    let mut c = base.clone();
    c.clustering.method = ClusteringMethod::None;
    c.federation.aggregation = rule;
    c
}

fn attack_free(base: &ExperimentConfig) -> ExperimentConfig {
    let mut c = undefended(base, flic_core::AggregationRule::WeightedMean);
    c.threat.kind = ThreatKind::None;
    c.threat.attackers = None;
    c.threat.attacker_ids = None;
    c
}

#[test]
fn attack_separation_under_majority() {
    let criterion = "attack separation (60% minus-grad)";
    let start = Instant::now();
    let base = config("attack.toml");
    let chance = 0.1;
    let mut pure_runs = 0;
    let (mut loyal, mut baseline, mut mean_agg, mut median_agg) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for seed in 1..=SEEDS {
        let flic = run_experiment(&with_seed(&base, seed)).unwrap();
        assert_eq!(flic.attackers.len(), 12);
        if flic.purity() == Some(1.0) {
            pure_runs += 1;
        }
        loyal.push(flic.final_mean_accuracy_of(&flic.loyal_clients()));
        baseline.push(run_experiment(&with_seed(&attack_free(&base), seed)).unwrap().final_mean_accuracy());
        let mean_cfg = undefended(&base, flic_core::AggregationRule::WeightedMean);
        mean_agg.push(run_experiment(&with_seed(&mean_cfg, seed)).unwrap().final_mean_accuracy());
        let median_cfg = undefended(&base, flic_core::AggregationRule::CoordinateMedian);
        median_agg.push(run_experiment(&with_seed(&median_cfg, seed)).unwrap().final_mean_accuracy());
    }
    let elapsed = start.elapsed();
    let m = |v: &[f64]| mean_std(v.iter().copied());
    let ((lo, lo_sd), (ba, ba_sd), (me, me_sd), (md, md_sd)) = (m(&loyal), m(&baseline), m(&mean_agg), m(&median_agg));
    let pass = pure_runs == SEEDS as usize
        && (lo - ba).abs() <= 0.05
        && (me - chance).abs() <= 0.05
        && (md - chance).abs() <= 0.05
        && elapsed < five_minutes();
    report(
        criterion,
        pass,
        &format!(
            "purity 1 in {pure_runs}/{SEEDS}; mean over runs: loyal {lo:.4}±{lo_sd:.4} vs attack-free {ba:.4}±{ba_sd:.4}, \
             undefended mean {me:.4}±{me_sd:.4}, median {md:.4}±{md_sd:.4} (chance {chance}); {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn median_defense_under_minority() {
    let criterion = "median defense (30% minus-grad)";
    let mut base = config("attack.toml");
    base.threat.attackers = Some(6);
    let mut median = Vec::new();
    let mut baseline = Vec::new();
    for seed in 1..=SEEDS {
        let cfg = undefended(&base, flic_core::AggregationRule::CoordinateMedian);
        let out = run_experiment(&with_seed(&cfg, seed)).unwrap();
        assert_eq!(out.attackers.len(), 6);
        median.push(out.final_mean_accuracy());
        baseline.push(run_experiment(&with_seed(&attack_free(&base), seed)).unwrap().final_mean_accuracy());
    }
    let (md, md_sd) = mean_std(median.iter().copied());
    let (ba, ba_sd) = mean_std(baseline.iter().copied());
    let pass = (md - ba).abs() <= 0.05;
    report(criterion, pass, &format!("mean over runs: median {md:.4}±{md_sd:.4} vs attack-free {ba:.4}±{ba_sd:.4}"));
    assert!(pass);
}

#[test]
fn omniscient_exactness() {
    let criterion = "omniscient attack exactness";
    let mut rng = ChaCha8Rng::seed_from_u64(0x0a11);
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for _ in 0..200 {
        let dim = rng.random_range(1..40);
        let size = rng.random_range(1..10);
        let vec = |rng: &mut ChaCha8Rng, scale: f64| {
            ParamVector::new((0..dim).map(|_| rng.random_range(-scale..scale)).collect(), 11)
        };
        let target = vec(&mut rng, 5.0);
        let w_prev = vec(&mut rng, 1.0);
        let mut cohort: Vec<(usize, ClientUpdate)> = (0..size)
            .map(|k| {
                (
                    k,
                    ClientUpdate {
                        delta: vec(&mut rng, 1.0),
                        num_samples: rng.random_range(1..600),
                        steps: 1,
                        train_loss: 0.0,
                    },
                )
            })
            .collect();
        let attackers: Vec<usize> = (0..size).filter(|_| rng.random_bool(0.5)).collect();
        // cohorts without a drawn attacker make client 0 the attacker
        let attackers = if attackers.is_empty() { vec![0] } else { attackers };
        let threat = ThreatModel::new(attackers, AttackKind::Omniscient { target: target.clone() }, size).unwrap();
        threat.intercept(&mut cohort).unwrap();
        let updates: Vec<(ParamVector, usize)> = cohort.iter().map(|(_, u)| (u.delta.clone(), u.num_samples)).collect();
        let w_next = aggregate_weighted_mean(&updates, &w_prev).unwrap();

        // independent weighted mean, then compare w_prev − w_next with the target
        let total: usize = updates.iter().map(|u| u.1).sum();
        let mut mean = vec![0.0; dim];
        for (d, n) in &updates {
            for (m, x) in mean.iter_mut().zip(d.iter()) {
                *m += *n as f64 / total as f64 * x;
            }
        }
        let err = |got: &[f64]| {
            let num: f64 = got.iter().zip(target.iter()).map(|(g, t)| (g - t).powi(2)).sum::<f64>().sqrt();
            num / target.l2_norm().max(f64::MIN_POSITIVE)
        };
        let applied: Vec<f64> = w_prev.iter().zip(w_next.iter()).map(|(a, b)| a - b).collect();
        let e = err(&mean).max(err(&applied));
        worst = worst.max(e);
        if e > 1e-9 {
            failures += 1;
        }
    }
    let pass = failures == 0;
    report(criterion, pass, &format!("200 cohorts, {failures} above 1e-9 relative error, worst {worst:.2e}"));
    assert!(pass);
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> Adjacency {
    let density = rng.random_range(0.3..1.0);
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(density) {
                let w = rng.random_range(0.05..2.0);
                a[i][j] = w;
                a[j][i] = w;
            }
        }
    }
    a
}

fn to_graph(a: &Adjacency) -> flic_core::WeightedGraph {
    let n = a.len();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if a[i][j] > 0.0 {
                edges.push((i, j, a[i][j]));
            }
        }
    }
    flic_core::WeightedGraph::new(n, 0..n, edges).unwrap()
}

fn labels_of(p: &flic_core::ClusterPartition, n: usize) -> Vec<usize> {
    (0..n).map(|k| p.cluster_of(k).unwrap()).collect()
}

#[test]
fn louvain_matches_brute_force() {
    let criterion = "Louvain vs exhaustive modularity";
    let mut rng = ChaCha8Rng::seed_from_u64(0x10b1);
    let mut optimal = 0;
    let mut worst_gap: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(3..=8);
        let a = random_graph(&mut rng, n);
        let p = clustering::louvain(&to_graph(&a));
        let q = common::modularity_oracle(&a, &labels_of(&p, n));
        let (best, _) = brute_force_optimum(&a);
        let gap = best - q;
        worst_gap = worst_gap.max(gap);
        if gap <= 1e-9 {
            optimal += 1;
        }
    }

    let mut recovered = 0;
    for _ in 0..50 {
        let n = rng.random_range(6..=12);
        let left = rng.random_range(3..=n - 3);
        let eps = rng.random_range(0.001..=0.1);
        let planted: Vec<usize> = (0..n).map(|i| usize::from(i >= left)).collect();
        // shuffle node ids so the blocks are not contiguous
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in i + 1..n {
                let w = if planted[i] == planted[j] { 2.0 - eps } else { eps };
                a[order[i]][order[j]] = w;
                a[order[j]][order[i]] = w;
            }
        }
        let mut truth = vec![0; n];
        for i in 0..n {
            truth[order[i]] = planted[i];
        }
        let found = labels_of(&clustering::louvain(&to_graph(&a)), n);
        let (_, best) = brute_force_optimum(&a);
        if canonical(&found) == canonical(&truth) && canonical(&best) == canonical(&truth) {
            recovered += 1;
        }
    }
    let pass = optimal >= 45 && worst_gap <= 0.02 && recovered == 50;
    report(
        criterion,
        pass,
        &format!("{optimal}/50 random graphs optimal (worst gap {worst_gap:.2e}); planted two-clique recovery {recovered}/50"),
    );
    assert!(pass);
}

#[test]
fn update_bias_bound() {
    let criterion = "update-bias triangle bound";
    let mut cfg = config("label_swap.toml");
    cfg.clustering.bias_diagnostics = true;
    cfg.federation.rounds = 20;
    cfg.federation.cluster_rounds = 0;
    let out = run_experiment(&cfg).unwrap();
    let violations: Vec<_> = out.bias.iter().filter(|b| !b.terms.bound_holds()).collect();
    let cross_round = out.bias.iter().filter(|b| b.terms.round_j < b.terms.round_i).count();
    let pass = violations.is_empty() && cross_round > 0 && out.config.scenario.clients == 20;
    report(
        criterion,
        pass,
        &format!(
            "{} tuples ({cross_round} cross-round) from a 20-client run, {} violations",
            out.bias.len(),
            violations.len()
        ),
    );
    assert!(pass);
}

fn random_case(rng: &mut ChaCha8Rng, case: usize) -> (ModelSpec, ParamVector, Samples) {
    let rows = rng.random_range(1..7);
    if case.is_multiple_of(10) {
        let spec = ModelSpec::linear_regression_1d();
        let x = Array2::from_shape_fn((rows, 1), |_| rng.random_range(-2.0..2.0));
        let y = (0..rows).map(|_| rng.random_range(-5.0..5.0)).collect();
        let w = spec.wrap(vec![rng.random_range(-3.0..3.0)]).unwrap();
        return (spec, w, Samples::new(x, Targets::Values(y)).unwrap());
    }
    let input = rng.random_range(1..6);
    let hidden: Vec<usize> = (0..rng.random_range(0..3)).map(|_| rng.random_range(1..6)).collect();
    let classes = rng.random_range(2..5);
    let spec = ModelSpec::mlp(input, hidden, classes).unwrap();
    let x = Array2::from_shape_fn((rows, input), |_| rng.random_range(-1.0..1.0));
    let labels = (0..rows).map(|_| rng.random_range(0..classes)).collect();
    let w = spec.wrap((0..spec.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    (spec, w, Samples::new(x, Targets::Labels(labels)).unwrap())
}

#[test]
fn gradient_suite() {
    let criterion = "finite-difference gradient checks";
    let mut rng = ChaCha8Rng::seed_from_u64(0x9dad);
    let h = 1e-5;
    let mut passed = 0;
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let (spec, w, batch) = random_case(&mut rng, case);
        let (_, grad) = loss_and_grad(&spec, &w, &batch).unwrap();
        let mut numeric = Vec::with_capacity(w.len());
        for i in 0..w.len() {
            let mut plus = w.clone();
            plus[i] += h;
            let mut minus = w.clone();
            minus[i] -= h;
            let lp = loss_and_grad(&spec, &plus, &batch).unwrap().0;
            let lm = loss_and_grad(&spec, &minus, &batch).unwrap().0;
            numeric.push((lp - lm) / (2.0 * h));
        }
        let diff: f64 = grad.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = grad.l2_norm() + numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rel = if scale < 1e-12 { diff } else { diff / scale };
        worst = worst.max(rel);
        if rel <= 1e-4 {
            passed += 1;
        }
    }
    let pass = passed == 100;
    report(criterion, pass, &format!("{passed}/100 within 1e-4 relative error (worst {worst:.2e})"));
    assert!(pass);
}

#[test]
fn determinism() {
    let criterion = "byte-identical reruns";
    let mut diag = config("label_swap.toml");
    diag.clustering.diagnostic_per_round = true;
    let mut cases: BTreeMap<&str, ExperimentConfig> = BTreeMap::new();
    for name in ["toy_iid.toml", "toy_noniid.toml", "label_swap.toml", "rotation.toml", "attack.toml"] {
        cases.insert(name, config(name));
    }
    cases.insert("label_swap.toml (diagnostic)", diag);
    let mut identical = 0;
    for (name, cfg) in &cases {
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        for dir in &dirs {
            write_outputs(&run_experiment(cfg).unwrap(), dir.path()).unwrap();
        }
        let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("metrics.csv")).unwrap();
        if read(&dirs[0]) == read(&dirs[1]) && !read(&dirs[0]).is_empty() {
            identical += 1;
        } else {
            report(criterion, false, &format!("{name} differs between reruns"));
        }
    }
    let pass = identical == cases.len();
    report(criterion, pass, &format!("{identical}/{} configs rerun to identical metrics.csv", cases.len()));
    assert!(pass);
}
