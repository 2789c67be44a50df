mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::World;
use hetserve::config_space::{
    enumerate_configs, feasible_at_saturation, prune_batch_sizes, prune_parallelism, pruned_configs, request_classes,
    ConfigSpace, PruneAudit, PruneDecision,
};
use hetserve::model::{ClusterSpec, InstanceConfig, ModelId, ModelSpec, ParallelismStrategy, Request};
use hetserve::profiler::{ProfileSet, ThroughputModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GIB: u64 = 1 << 30;

fn strategies() -> Vec<ParallelismStrategy> {
    vec![
        ParallelismStrategy::DP,
        ParallelismStrategy::tp(2),
        ParallelismStrategy::tp(4),
        ParallelismStrategy::pp(2),
    ]
}

fn model(id: &str) -> ModelSpec {
    ModelSpec {
        id: id.into(),
        weight_bytes: 8 * GIB,
        kv_bytes_per_slot: 0,
        baseline_throughput: strategies().into_iter().map(|s| (s, 10.0)).collect(),
        memory_per_gpu: strategies()
            .into_iter()
            .map(|s| (s, (8 * GIB).div_ceil(s.degree() as u64)))
            .collect(),
    }
}

fn random_profiles(rng: &mut ChaCha8Rng, models: &[&str]) -> ProfileSet {
    let mut out = Vec::new();
    for m in models {
        for s in strategies() {
            let t0 = rng.random_range(5.0..40.0);
            let delta = rng.random_range(0.0..0.2);
            out.push(ThroughputModel::new(*m, s, t0, delta, 1.0));
        }
    }
    ProfileSet::new(out)
}

fn cluster() -> ClusterSpec {
    ClusterSpec {
        gpu_count: 8,
        gpu_memory: 32 * GIB,
        time_slice: 0.05,
    }
}

#[test]
fn traversal_order_matches_exhaustive_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let profiles = random_profiles(&mut rng, &["m"]);
    let space = ConfigSpace {
        strategies: vec![ParallelismStrategy::DP, ParallelismStrategy::tp(2), ParallelismStrategy::tp(4)],
        batch_grid: vec![4, 8],
        ..ConfigSpace::default()
    };
    let got = enumerate_configs(&[model("m")], &space, &profiles, &cluster()).unwrap();

    let mut all: Vec<InstanceConfig> = Vec::new();
    for s in &space.strategies {
        for b in &space.batch_grid {
            all.push(InstanceConfig::new("m", *s, *b));
        }
    }
    // Insertion sort under the stated key: rate desc, GPUs asc, batch asc.
    let key = |c: &InstanceConfig| {
        let r = profiles.get(&c.model, c.strategy).unwrap().eval_throughput(c.batch_size, c.batch_size);
        (-r, c.strategy.degree(), c.batch_size)
    };
    let mut expect: Vec<InstanceConfig> = Vec::new();
    for c in all {
        let pos = expect
            .iter()
            .position(|e| key(&c).partial_cmp(&key(e)).unwrap().is_lt())
            .unwrap_or(expect.len());
        expect.insert(pos, c);
    }
    assert_eq!(got, expect);
}

#[test]
fn parallelism_pruning_matches_dominance_filter() {
    let space = ConfigSpace::default();
    for trial in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
        let profiles = random_profiles(&mut rng, &["m", "n"]);
        let models = [model("m"), model("n")];
        let configs = enumerate_configs(&models, &space, &profiles, &cluster()).unwrap();
        let mut audit = PruneAudit::default();
        let kept: BTreeSet<InstanceConfig> = prune_parallelism(&configs, &profiles, &mut audit).into_iter().collect();

        let mut expect = BTreeSet::new();
        for c in &configs {
            let tm = profiles.get(&c.model, c.strategy).unwrap();
            let dp = profiles.get(&c.model, ParallelismStrategy::DP).unwrap();
            let beats_somewhere = space
                .batch_grid
                .iter()
                .any(|&b| tm.eval_throughput(b, b) > dp.eval_throughput(b, b));
            if c.strategy.degree() == 1 || beats_somewhere {
                expect.insert(c.clone());
            }
        }
        assert_eq!(kept, expect, "trial {trial}");
        assert_eq!(audit.records.len(), configs.len() - kept.len());
    }
}

/// Independent frontier filter: walk batches from large to small, keep a
/// batch when it serves a class no larger kept batch serves.
fn pareto_oracle(
    configs: &[InstanceConfig],
    requests: &[Request],
    profiles: &ProfileSet,
    buckets: usize,
) -> BTreeMap<InstanceConfig, PruneDecision> {
    let mut out = BTreeMap::new();
    let models: BTreeSet<&ModelId> = configs.iter().map(|c| &c.model).collect();
    for m in models {
        let reqs: Vec<&Request> = requests.iter().filter(|r| &r.model == m).collect();
        let cls = request_classes(&reqs, buckets);
        let strategies: BTreeSet<ParallelismStrategy> =
            configs.iter().filter(|c| &c.model == m).map(|c| c.strategy).collect();
        for s in strategies {
            let tm = profiles.get(m, s).unwrap();
            let mut batches: Vec<u32> = configs
                .iter()
                .filter(|c| &c.model == m && c.strategy == s)
                .map(|c| c.batch_size)
                .collect();
            batches.sort_unstable_by(|a, b| b.cmp(a));
            // feasibility matrix: rows are batches, columns are classes
            let matrix: Vec<BTreeSet<(usize, usize)>> = batches
                .iter()
                .map(|&b| {
                    (0..reqs.len())
                        .filter(|&j| reqs[j].decode_len as f64 <= tm.eval_throughput(b, b) * reqs[j].deadline)
                        .map(|j| cls[j])
                        .collect()
                })
                .collect();
            for (i, &b) in batches.iter().enumerate() {
                let decision = if matrix[i].is_empty() {
                    PruneDecision::TooHigh
                } else {
                    let kept_larger: BTreeSet<(usize, usize)> = (0..i)
                        .filter(|&k| out[&InstanceConfig::new(m.clone(), s, batches[k])] == PruneDecision::Retained)
                        .flat_map(|k| matrix[k].iter().copied())
                        .collect();
                    if matrix[i].is_subset(&kept_larger) {
                        PruneDecision::TooLow
                    } else {
                        PruneDecision::Retained
                    }
                };
                out.insert(InstanceConfig::new(m.clone(), s, b), decision);
            }
        }
    }
    out
}

#[test]
fn batch_pruning_matches_pareto_oracle_on_two_class_trace() {
    let w = World::desk(8);
    let reqs = w.mini_trace(4, 400, 2.0, 5);
    let configs = enumerate_configs(&w.models, &w.space, &w.profiles, &w.cluster).unwrap();
    let mut audit = PruneAudit::default();
    let kept = prune_batch_sizes(&configs, &reqs, &w.profiles, w.space.class_buckets, &mut audit).unwrap();
    let oracle = pareto_oracle(&configs, &reqs, &w.profiles, w.space.class_buckets);
    let expect: Vec<InstanceConfig> = configs
        .iter()
        .filter(|c| oracle[*c] == PruneDecision::Retained)
        .cloned()
        .collect();
    assert_eq!(kept, expect);
    for rec in &audit.records {
        let c = InstanceConfig::new(rec.model.clone(), rec.strategy, rec.batch);
        assert_eq!(oracle[&c], rec.decision);
    }
    assert!(!kept.is_empty());
}

#[test]
fn too_high_removals_serve_nobody() {
    let w = World::desk(8);
    for family in [1u8, 3, 4, 6] {
        let reqs = w.mini_trace(family, 300, 2.0, family as u64);
        let pruned = pruned_configs(&w.models, &w.space, &w.profiles, &w.cluster, &reqs).unwrap();
        for rec in pruned.audit.records.iter().filter(|r| r.decision == PruneDecision::TooHigh) {
            let rate = w.profiles.get(&rec.model, rec.strategy).unwrap().saturated(rec.batch);
            assert!(reqs
                .iter()
                .filter(|r| r.model == rec.model)
                .all(|r| !feasible_at_saturation(r, rate)));
        }
        assert!(!pruned.configs.is_empty());
        for c in &pruned.covered {
            assert!(pruned.usable(&c.model, c.strategy, c.batch_size));
            assert!(!pruned.allows(&c.model, c.strategy, c.batch_size));
        }
    }
}

#[test]
fn pruning_is_deterministic() {
    let w = World::desk(8);
    let reqs = w.mini_trace(4, 300, 2.0, 9);
    let a = pruned_configs(&w.models, &w.space, &w.profiles, &w.cluster, &reqs).unwrap();
    let b = pruned_configs(&w.models, &w.space, &w.profiles, &w.cluster, &reqs).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}
