//! Candidate `(strategy, batch)` configurations and the pruning that trims
//! them before the placer searches.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClusterSpec, InstanceConfig, ModelId, ModelSpec, ParallelismStrategy, Request, DEFAULT_MAX_BATCH};
use crate::profiler::ProfileSet;

pub fn default_batch_grid() -> Vec<u32> {
    (0..=8).map(|i| 1u32 << i).collect()
}

fn default_buckets() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSpace {
    pub strategies: Vec<ParallelismStrategy>,
    #[serde(default = "default_batch_grid")]
    pub batch_grid: Vec<u32>,
    #[serde(default = "default_max_batch")]
    pub max_batch: u32,
    /// Quantile buckets per axis when grouping requests into classes.
    #[serde(default = "default_buckets")]
    pub class_buckets: usize,
}

fn default_max_batch() -> u32 {
    DEFAULT_MAX_BATCH
}

impl Default for ConfigSpace {
    fn default() -> Self {
        Self {
            strategies: vec![
                ParallelismStrategy::DP,
                ParallelismStrategy::tp(2),
                ParallelismStrategy::tp(4),
                ParallelismStrategy::pp(2),
            ],
            batch_grid: default_batch_grid(),
            max_batch: DEFAULT_MAX_BATCH,
            class_buckets: default_buckets(),
        }
    }
}

/// A strategy node and its batch-size children.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyNode {
    pub model: ModelId,
    pub strategy: ParallelismStrategy,
    pub batches: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigTree {
    pub nodes: Vec<StrategyNode>,
    order: Vec<InstanceConfig>,
}

impl ConfigTree {
    /// Leaves in decreasing saturated per-request throughput.
    pub fn traverse(&self) -> &[InstanceConfig] {
        &self.order
    }
}

/// Total order used for traversal: faster saturated rate first, then fewer
/// GPUs, then smaller batch.
pub fn traversal_cmp(a: &InstanceConfig, b: &InstanceConfig, profiles: &ProfileSet) -> std::cmp::Ordering {
    let rate = |c: &InstanceConfig| {
        profiles
            .get(&c.model, c.strategy)
            .map(|tm| tm.saturated(c.batch_size))
            .unwrap_or(0.0)
    };
    rate(b)
        .total_cmp(&rate(a))
        .then(a.strategy.degree().cmp(&b.strategy.degree()))
        .then(a.batch_size.cmp(&b.batch_size))
        .then(a.model.cmp(&b.model))
        .then(a.strategy.cmp(&b.strategy))
}

/// Builds the configuration tree for every model over the strategy and
/// batch grids. Strategies the model does not list, that need more GPUs
/// than the cluster has, or that overflow GPU memory are left out.
pub fn build_tree(
    models: &[ModelSpec],
    space: &ConfigSpace,
    profiles: &ProfileSet,
    cluster: &ClusterSpec,
) -> Result<ConfigTree> {
    let mut nodes = Vec::new();
    for model in models {
        for &strategy in &space.strategies {
            if !model.memory_per_gpu.contains_key(&strategy) || strategy.degree() > cluster.gpu_count {
                continue;
            }
            profiles.require(&model.id, strategy)?;
            let batches: Vec<u32> = space
                .batch_grid
                .iter()
                .copied()
                .filter(|&b| b >= 1 && b <= space.max_batch)
                .filter(|&b| {
                    model
                        .instance_memory_per_gpu(strategy, b)
                        .is_some_and(|m| m <= cluster.gpu_memory)
                })
                .collect();
            if !batches.is_empty() {
                nodes.push(StrategyNode {
                    model: model.id.clone(),
                    strategy,
                    batches,
                });
            }
        }
    }
    let mut order: Vec<InstanceConfig> = nodes
        .iter()
        .flat_map(|n| {
            n.batches
                .iter()
                .map(|&b| InstanceConfig::new(n.model.clone(), n.strategy, b))
        })
        .collect();
    order.sort_by(|a, b| traversal_cmp(a, b, profiles));
    Ok(ConfigTree { nodes, order })
}

pub fn enumerate_configs(
    models: &[ModelSpec],
    space: &ConfigSpace,
    profiles: &ProfileSet,
    cluster: &ClusterSpec,
) -> Result<Vec<InstanceConfig>> {
    Ok(build_tree(models, space, profiles, cluster)?.order)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneDecision {
    Retained,
    /// Never faster per request than a data-parallel instance.
    DominatedByDp,
    /// No request meets its deadline at saturation.
    TooHigh,
    /// Every request class it serves is served by a retained larger batch.
    TooLow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneRecord {
    pub model: ModelId,
    pub strategy: ParallelismStrategy,
    pub batch: u32,
    pub decision: PruneDecision,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PruneAudit {
    pub records: Vec<PruneRecord>,
}

impl PruneAudit {
    fn push(&mut self, cfg: &InstanceConfig, decision: PruneDecision) {
        self.records.push(PruneRecord {
            model: cfg.model.clone(),
            strategy: cfg.strategy,
            batch: cfg.batch_size,
            decision,
        });
    }

    pub fn count(&self, decision: PruneDecision) -> usize {
        self.records.iter().filter(|r| r.decision == decision).count()
    }
}

/// Drops multi-GPU strategies whose saturated per-request rate never beats
/// the data-parallel rate at the same batch size anywhere on their grid.
pub fn prune_parallelism(
    configs: &[InstanceConfig],
    profiles: &ProfileSet,
    audit: &mut PruneAudit,
) -> Vec<InstanceConfig> {
    let mut grids: BTreeMap<(&ModelId, ParallelismStrategy), Vec<u32>> = BTreeMap::new();
    for c in configs {
        grids.entry((&c.model, c.strategy)).or_default().push(c.batch_size);
    }
    let dominated: BTreeSet<(&ModelId, ParallelismStrategy)> = grids
        .iter()
        .filter(|((model, strategy), batches)| {
            if strategy.degree() <= 1 {
                return false;
            }
            let (Some(dp), Some(tm)) = (
                profiles.get(model, ParallelismStrategy::DP),
                profiles.get(model, *strategy),
            ) else {
                return false;
            };
            batches.iter().all(|&b| tm.saturated(b) <= dp.saturated(b))
        })
        .map(|(k, _)| *k)
        .collect();

    let mut kept = Vec::with_capacity(configs.len());
    for c in configs {
        if dominated.contains(&(&c.model, c.strategy)) {
            audit.push(c, PruneDecision::DominatedByDp);
        } else {
            kept.push(c.clone());
        }
    }
    kept
}

/// Quantile bucket of every value: `floor(rank * buckets / n)` where rank is
/// the position of the value's first occurrence in sorted order.
fn quantile_buckets(values: &[f64], buckets: usize) -> Vec<usize> {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = values.len().max(1);
    values
        .iter()
        .map(|v| {
            let rank = sorted.partition_point(|x| x.total_cmp(v).is_lt());
            (rank * buckets / n).min(buckets.saturating_sub(1))
        })
        .collect()
}

/// Request class of each request: `(decode-length bucket, SLO-factor bucket)`.
pub fn request_classes(requests: &[&Request], buckets: usize) -> Vec<(usize, usize)> {
    let lens: Vec<f64> = requests.iter().map(|r| r.decode_len as f64).collect();
    let factors: Vec<f64> = requests.iter().map(|r| r.slo_factor).collect();
    let a = quantile_buckets(&lens, buckets.max(1));
    let b = quantile_buckets(&factors, buckets.max(1));
    a.into_iter().zip(b).collect()
}

/// Whether a request can meet its deadline at the saturated rate, ignoring
/// queueing.
pub fn feasible_at_saturation(r: &Request, saturated_rate: f64) -> bool {
    r.decode_len as f64 <= saturated_rate * r.deadline
}

/// Keeps, per `(model, strategy)`, only batch sizes on the latency/SLO
/// frontier for `requests`.
pub fn prune_batch_sizes(
    configs: &[InstanceConfig],
    requests: &[Request],
    profiles: &ProfileSet,
    buckets: usize,
    audit: &mut PruneAudit,
) -> Result<Vec<InstanceConfig>> {
    if requests.is_empty() {
        return Err(Error::invalid("batch-size pruning needs at least one request"));
    }
    let mut by_model: BTreeMap<&ModelId, Vec<&Request>> = BTreeMap::new();
    for r in requests {
        by_model.entry(&r.model).or_default().push(r);
    }
    let classes: BTreeMap<&ModelId, Vec<(usize, usize)>> = by_model
        .iter()
        .map(|(m, rs)| (*m, request_classes(rs, buckets)))
        .collect();

    let mut groups: BTreeMap<(&ModelId, ParallelismStrategy), BTreeSet<u32>> = BTreeMap::new();
    for c in configs {
        groups.entry((&c.model, c.strategy)).or_default().insert(c.batch_size);
    }

    let mut decisions: BTreeMap<(&ModelId, ParallelismStrategy, u32), PruneDecision> = BTreeMap::new();
    for ((model, strategy), batches) in &groups {
        let tm = profiles.require(model, *strategy)?;
        let (reqs, cls) = match (by_model.get(model), classes.get(model)) {
            (Some(r), Some(c)) => (r, c),
            _ => {
                for &b in batches {
                    decisions.insert((model, *strategy, b), PruneDecision::TooHigh);
                }
                continue;
            }
        };
        let mut covered: BTreeSet<(usize, usize)> = BTreeSet::new();
        for &b in batches.iter().rev() {
            let rate = tm.saturated(b);
            let served: BTreeSet<(usize, usize)> = reqs
                .iter()
                .zip(cls)
                .filter(|(r, _)| feasible_at_saturation(r, rate))
                .map(|(_, c)| *c)
                .collect();
            let decision = if served.is_empty() {
                PruneDecision::TooHigh
            } else if served.is_subset(&covered) {
                PruneDecision::TooLow
            } else {
                covered.extend(served);
                PruneDecision::Retained
            };
            decisions.insert((model, *strategy, b), decision);
        }
    }

    let mut kept = Vec::new();
    for c in configs {
        match decisions[&(&c.model, c.strategy, c.batch_size)] {
            PruneDecision::Retained => kept.push(c.clone()),
            d => audit.push(c, d),
        }
    }
    Ok(kept)
}

/// Configurations that survive both pruning passes for `requests`, in
/// traversal order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrunedConfigs {
    pub configs: Vec<InstanceConfig>,
    /// Dropped as too low: they serve requests, just none that a retained
    /// larger batch does not.
    #[serde(default)]
    pub covered: Vec<InstanceConfig>,
    pub audit: PruneAudit,
}

impl PrunedConfigs {
    /// Distinct `(strategy, batch)` pairs in traversal order of first
    /// appearance.
    pub fn pairs(&self) -> Vec<(ParallelismStrategy, u32)> {
        let mut seen = BTreeSet::new();
        self.configs
            .iter()
            .map(|c| (c.strategy, c.batch_size))
            .filter(|p| seen.insert(*p))
            .collect()
    }

    pub fn allows(&self, model: &ModelId, strategy: ParallelismStrategy, batch: u32) -> bool {
        self.configs
            .iter()
            .any(|c| &c.model == model && c.strategy == strategy && c.batch_size == batch)
    }

    /// Whether a model can be given this configuration at all: retained,
    /// or dropped only because a larger batch covers it.
    pub fn usable(&self, model: &ModelId, strategy: ParallelismStrategy, batch: u32) -> bool {
        self.allows(model, strategy, batch)
            || self
                .covered
                .iter()
                .any(|c| &c.model == model && c.strategy == strategy && c.batch_size == batch)
    }

    pub fn retain_strategies(&mut self, keep: impl Fn(ParallelismStrategy) -> bool) {
        self.configs.retain(|c| keep(c.strategy));
        self.covered.retain(|c| keep(c.strategy));
    }
}

pub fn pruned_configs(
    models: &[ModelSpec],
    space: &ConfigSpace,
    profiles: &ProfileSet,
    cluster: &ClusterSpec,
    requests: &[Request],
) -> Result<PrunedConfigs> {
    let mut audit = PruneAudit::default();
    let all = enumerate_configs(models, space, profiles, cluster)?;
    let par = prune_parallelism(&all, profiles, &mut audit);
    let configs = prune_batch_sizes(&par, requests, profiles, space.class_buckets, &mut audit)?;
    for c in &configs {
        audit.push(c, PruneDecision::Retained);
    }
    let covered = par
        .iter()
        .filter(|c| {
            audit.records.iter().any(|r| {
                r.decision == PruneDecision::TooLow
                    && r.model == c.model
                    && r.strategy == c.strategy
                    && r.batch == c.batch_size
            })
        })
        .cloned()
        .collect();
    Ok(PrunedConfigs { configs, covered, audit })
}
