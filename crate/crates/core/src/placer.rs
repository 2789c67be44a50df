//! Instance placement.
//!
//! [`deploy_instances`] greedily grows a deployment per candidate
//! configuration, scoring every step with a full simulation, and records the
//! best deployment for every GPU budget. [`partition_resources`] splits the
//! cluster between strict and relaxed requests by scanning those per-budget
//! tables. The two baselines reuse the same greedy core.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config_space::{pruned_configs, ConfigSpace, PruneAudit, PrunedConfigs};
use crate::distributor::{PolicySpec, SloSplit};
use crate::error::{Error, Result};
use crate::model::{ClusterSpec, Instance, InstanceConfig, ModelId, ModelSpec, ParallelismStrategy, Request, SubCluster};
use crate::par::{self, Execution};
use crate::profiler::ProfileSet;
use crate::sim::{serving_score, simulate, Outcome, SimMetrics, SimParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionInit {
    /// Start from the best single-cluster deployment over all requests.
    #[default]
    Homogeneous,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionObjective {
    /// Sub-cluster scores weighted by their share of requests.
    #[default]
    RequestWeighted,
    /// Plain sum of the two sub-cluster scores.
    Sum,
}

impl PartitionObjective {
    pub fn combine(self, phi_t: f64, phi_l: f64, n_t: usize, n_l: usize) -> f64 {
        match self {
            PartitionObjective::Sum => phi_t + phi_l,
            PartitionObjective::RequestWeighted => {
                let n = (n_t + n_l) as f64;
                (n_t as f64 * phi_t + n_l as f64 * phi_l) / n
            }
        }
    }
}

fn default_sample_threshold() -> usize {
    5000
}

fn default_sample_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacerOptions {
    #[serde(default)]
    pub split: SloSplit,
    #[serde(default)]
    pub init: PartitionInit,
    #[serde(default)]
    pub objective: PartitionObjective,
    /// Traces longer than this are scored on a contiguous window.
    #[serde(default = "default_sample_threshold")]
    pub sample_threshold: usize,
    #[serde(default = "default_sample_fraction")]
    pub sample_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub execution: Execution,
}

impl Default for PlacerOptions {
    fn default() -> Self {
        Self {
            split: SloSplit::default(),
            init: PartitionInit::default(),
            objective: PartitionObjective::default(),
            sample_threshold: default_sample_threshold(),
            sample_fraction: default_sample_fraction(),
            seed: 0,
            execution: Execution::default(),
        }
    }
}

/// Everything the placer reads, plus a counter of scoring simulations.
pub struct Placer<'a> {
    pub models: &'a [ModelSpec],
    pub space: &'a ConfigSpace,
    pub profiles: &'a ProfileSet,
    pub cluster: &'a ClusterSpec,
    pub params: &'a SimParams,
    pub options: &'a PlacerOptions,
    simulations: AtomicUsize,
}

/// One iteration of the greedy inner loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreedyStep {
    pub model: ModelId,
    /// `None` when the model had no usable configuration or it did not fit.
    pub config: Option<InstanceConfig>,
    /// Score of the candidate deployment.
    pub score: f64,
    pub accepted: bool,
    /// GPUs in use after the step.
    pub gpus_used: u32,
}

/// Best deployment and score for every GPU budget `k` in `0..=G_x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentSolutionArray {
    pub instances: Vec<Vec<Instance>>,
    pub scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
    #[serde(skip)]
    pub audit: PruneAudit,
}

impl DeploymentSolutionArray {
    fn empty(gpus: u32) -> Self {
        Self {
            instances: vec![Vec::new(); gpus as usize + 1],
            scores: vec![0.0; gpus as usize + 1],
            diagnostic: None,
            audit: PruneAudit::default(),
        }
    }

    /// Budget with the highest score; ties go to fewer GPUs.
    pub fn best(&self) -> (usize, f64) {
        self.scores
            .iter()
            .copied()
            .enumerate()
            .fold((0, 0.0), |acc, (k, s)| if s > acc.1 { (k, s) } else { acc })
    }

    /// Elementwise max; ties keep `self`.
    fn merge(&mut self, other: Self) {
        for (k, (inst, s)) in other.instances.into_iter().zip(other.scores).enumerate() {
            if s > self.scores[k] {
                self.scores[k] = s;
                self.instances[k] = inst;
            }
        }
    }

    /// Makes entry `k` the best deployment using at most `k` GPUs.
    fn prefix_max(&mut self) {
        for k in 1..self.scores.len() {
            if self.scores[k - 1] > self.scores[k] {
                self.scores[k] = self.scores[k - 1];
                self.instances[k] = self.instances[k - 1].clone();
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub throughput_gpus: u32,
    pub latency_gpus: u32,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PartitionDiagnostics {
    pub requests_throughput: usize,
    pub requests_latency: usize,
    /// Initial latency sub-cluster size, `floor(|R_l| / |R| * |G|)`.
    pub latency_gpus_initial: u32,
    pub scores_throughput: Vec<f64>,
    pub scores_latency: Vec<f64>,
    pub initial_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementSolution {
    pub gpu_count: u32,
    /// `None` when the cluster is served as one pool.
    pub partition: Option<Partition>,
    pub split: Option<SloSplit>,
    pub instances: Vec<Instance>,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<PartitionDiagnostics>,
}

impl PlacementSolution {
    fn single(gpu_count: u32, instances: Vec<Instance>, score: f64) -> Self {
        Self {
            gpu_count,
            partition: None,
            split: None,
            instances,
            score,
            diagnostics: None,
        }
    }

    pub fn sub_cluster(&self, group: SubCluster) -> impl Iterator<Item = &Instance> {
        self.instances.iter().filter(move |i| i.group == Some(group))
    }

    pub fn gpus_used(&self) -> u32 {
        self.instances.iter().map(|i| i.config.strategy.degree()).sum()
    }
}

pub fn split_requests(requests: &[Request], split: &SloSplit) -> (Vec<Request>, Vec<Request>) {
    requests
        .iter()
        .cloned()
        .partition(|r| split.classify(r) == SubCluster::Throughput)
}

/// Model with the most unserved requests among `candidates`; ties go to the
/// lexicographically smallest id.
pub fn most_unserved_model(unserved: &BTreeMap<ModelId, usize>, candidates: &BTreeSet<ModelId>) -> Result<ModelId> {
    let mut best: Option<(&ModelId, usize)> = None;
    for m in candidates {
        let n = unserved.get(m).copied().unwrap_or(0);
        if best.is_none_or(|(_, b)| n > b) {
            best = Some((m, n));
        }
    }
    best.map(|(m, _)| m.clone())
        .ok_or_else(|| Error::invalid("no candidate model left"))
}

pub fn unserved_by_model(metrics: &SimMetrics) -> BTreeMap<ModelId, usize> {
    let mut out = BTreeMap::new();
    for r in &metrics.records {
        if r.outcome != Outcome::Met {
            *out.entry(r.model.clone()).or_insert(0) += 1;
        }
    }
    out
}

fn models_of(requests: &[Request]) -> BTreeSet<ModelId> {
    requests.iter().map(|r| r.model.clone()).collect()
}

impl<'a> Placer<'a> {
    pub fn new(
        models: &'a [ModelSpec],
        space: &'a ConfigSpace,
        profiles: &'a ProfileSet,
        cluster: &'a ClusterSpec,
        params: &'a SimParams,
        options: &'a PlacerOptions,
    ) -> Self {
        Self {
            models,
            space,
            profiles,
            cluster,
            params,
            options,
            simulations: AtomicUsize::new(0),
        }
    }

    /// Scoring simulations run so far.
    pub fn simulations(&self) -> usize {
        self.simulations.load(Ordering::Relaxed)
    }

    fn score(&self, instances: &[Instance], requests: &[Request], policy: &PolicySpec) -> Result<(f64, SimMetrics)> {
        self.simulations.fetch_add(1, Ordering::Relaxed);
        let m = simulate(instances, requests, policy.build().as_ref(), self.profiles, self.params)?;
        Ok((serving_score(&m, self.params), m))
    }

    /// Requests used for scoring: all of them, or a contiguous window when
    /// the trace is long.
    pub fn scoring_window<'r>(&self, requests: &'r [Request]) -> &'r [Request] {
        let n = requests.len();
        if n <= self.options.sample_threshold {
            return requests;
        }
        let w = ((n as f64 * self.options.sample_fraction).ceil() as usize).clamp(1, n);
        let mut rng = ChaCha8Rng::seed_from_u64(self.options.seed ^ n as u64);
        let start = rng.random_range(0..=n - w);
        &requests[start..start + w]
    }

    pub fn configs_for(&self, requests: &[Request], gpus: u32) -> Result<PrunedConfigs> {
        let sub = ClusterSpec {
            gpu_count: gpus,
            ..self.cluster.clone()
        };
        pruned_configs(self.models, self.space, self.profiles, &sub, requests)
    }

    /// Greedy growth of one deployment. `choose` gives the configuration to
    /// use for a model, or `None` if the model cannot be deployed; such
    /// models are saturated immediately.
    fn greedy(
        &self,
        requests: &[Request],
        gpus: u32,
        models: &BTreeSet<ModelId>,
        choose: &dyn Fn(&ModelId) -> Option<InstanceConfig>,
        policy: &PolicySpec,
        mut steps: Option<&mut Vec<GreedyStep>>,
    ) -> Result<DeploymentSolutionArray> {
        let mut table = DeploymentSolutionArray::empty(gpus);
        let mut current: Vec<Instance> = Vec::new();
        let mut used = 0u32;
        let mut saturated: BTreeSet<ModelId> = BTreeSet::new();
        let mut phi = 0.0;
        let mut unserved: BTreeMap<ModelId, usize> = BTreeMap::new();
        for r in requests {
            *unserved.entry(r.model.clone()).or_insert(0) += 1;
        }

        while used < gpus && saturated.len() < models.len() {
            let open: BTreeSet<ModelId> = models.difference(&saturated).cloned().collect();
            let model = most_unserved_model(&unserved, &open)?;
            let cfg = match choose(&model) {
                Some(c) if used + c.strategy.degree() <= gpus => c,
                _ => {
                    if let Some(s) = steps.as_deref_mut() {
                        s.push(GreedyStep {
                            model: model.clone(),
                            config: None,
                            score: phi,
                            accepted: false,
                            gpus_used: used,
                        });
                    }
                    saturated.insert(model);
                    continue;
                }
            };
            let degree = cfg.strategy.degree();
            let mut candidate = current.clone();
            candidate.push(Instance::new(cfg.clone(), (used..used + degree).collect()));
            let (phi_new, m_new) = self.score(&candidate, requests, policy)?;
            let accepted = phi_new > phi;
            if accepted {
                phi = phi_new;
                current = candidate;
                unserved = unserved_by_model(&m_new);
                used += degree;
            } else {
                saturated.insert(model.clone());
            }
            if let Some(s) = steps.as_deref_mut() {
                s.push(GreedyStep {
                    model,
                    config: Some(cfg),
                    score: phi_new,
                    accepted,
                    gpus_used: used,
                });
            }
            let k = used as usize;
            if phi > table.scores[k] {
                table.scores[k] = phi;
                table.instances[k] = current.clone();
            }
        }
        Ok(table)
    }

    /// Runs the greedy loop for a single `(strategy, batch)` pair and returns
    /// every step it took, for inspection.
    pub fn greedy_steps(
        &self,
        requests: &[Request],
        gpus: u32,
        strategy: ParallelismStrategy,
        batch: u32,
        policy: &PolicySpec,
    ) -> Result<(DeploymentSolutionArray, Vec<GreedyStep>)> {
        let pruned = self.configs_for(requests, gpus)?;
        let models = models_of(requests);
        let choose = |m: &ModelId| {
            pruned
                .usable(m, strategy, batch)
                .then(|| InstanceConfig::new(m.clone(), strategy, batch))
        };
        let mut steps = Vec::new();
        let table = self.greedy(requests, gpus, &models, &choose, policy, Some(&mut steps))?;
        Ok((table, steps))
    }

    /// Best deployment for every GPU budget up to `gpus`, searching every
    /// pruned `(strategy, batch)` pair. `dp_only` restricts the search to
    /// data-parallel instances.
    pub fn deploy_instances(
        &self,
        requests: &[Request],
        gpus: u32,
        policy: &PolicySpec,
        dp_only: bool,
    ) -> Result<DeploymentSolutionArray> {
        if gpus == 0 {
            return Ok(DeploymentSolutionArray::empty(0));
        }
        if requests.is_empty() {
            return Err(Error::invalid("deployment needs at least one request"));
        }
        let mut pruned = self.configs_for(requests, gpus)?;
        if dp_only {
            pruned.retain_strategies(|s| s.is_dp());
        }
        let pairs = pruned.pairs();
        let mut table = DeploymentSolutionArray::empty(gpus);
        if pairs.is_empty() {
            table.diagnostic = Some("no configuration serves any request".into());
            table.audit = pruned.audit;
            return Ok(table);
        }
        let window = self.scoring_window(requests);
        let models = models_of(window);
        let tables = par::map(self.options.execution, &pairs, |&(strategy, batch)| {
            let choose = |m: &ModelId| {
                pruned
                    .usable(m, strategy, batch)
                    .then(|| InstanceConfig::new(m.clone(), strategy, batch))
            };
            self.greedy(window, gpus, &models, &choose, policy, None)
        });
        for t in tables {
            table.merge(t?);
        }
        table.prefix_max();
        table.audit = pruned.audit;
        Ok(table)
    }

    /// Splits the cluster into a throughput-oriented and a latency-tolerant
    /// sub-cluster.
    pub fn partition_resources(&self, requests: &[Request], policy: &PolicySpec) -> Result<PlacementSolution> {
        if requests.is_empty() {
            return Err(Error::invalid("partitioning needs at least one request"));
        }
        let g = self.cluster.gpu_count;
        let split = self.options.split;
        let (r_t, r_l) = split_requests(requests, &split);
        if g < 2 || r_t.is_empty() || r_l.is_empty() {
            return self.single_pool(requests, policy);
        }

        let g_l0 = (r_l.len() as f64 / requests.len() as f64 * g as f64).floor() as u32;
        let table_l = self.deploy_instances(&r_l, g_l0, policy, false)?;
        let table_t = self.deploy_instances(&r_t, g, policy, false)?;

        let mut best: Option<PlacementSolution> = None;
        let mut phi_opt = 0.0;
        if self.options.init == PartitionInit::Homogeneous {
            let whole = self.single_pool(requests, policy)?;
            phi_opt = whole.score;
            best = Some(whole);
        }
        let initial_score = phi_opt;

        for g_l in 1..=g_l0 {
            let g_t = g - g_l;
            let phi_t = table_t.scores[g_t as usize];
            let phi_l = table_l.scores[g_l as usize];
            let phi = self.options.objective.combine(phi_t, phi_l, r_t.len(), r_l.len());
            if phi > phi_opt {
                phi_opt = phi;
                best = Some(self.combine(
                    &table_t.instances[g_t as usize],
                    &table_l.instances[g_l as usize],
                    g_t,
                    g_l,
                    phi,
                ));
            }
        }

        let mut solution = match best {
            Some(s) => s,
            None => self.single_pool(requests, policy)?,
        };
        solution.diagnostics = Some(PartitionDiagnostics {
            requests_throughput: r_t.len(),
            requests_latency: r_l.len(),
            latency_gpus_initial: g_l0,
            scores_throughput: table_t.scores,
            scores_latency: table_l.scores,
            initial_score,
        });
        Ok(solution)
    }

    fn combine(&self, t: &[Instance], l: &[Instance], g_t: u32, g_l: u32, score: f64) -> PlacementSolution {
        let mut instances = Vec::with_capacity(t.len() + l.len());
        for inst in t {
            let mut i = inst.clone();
            i.group = Some(SubCluster::Throughput);
            instances.push(i);
        }
        for inst in l {
            let mut i = inst.clone();
            i.group = Some(SubCluster::Latency);
            i.gpus.iter_mut().for_each(|g| *g += g_t);
            instances.push(i);
        }
        PlacementSolution {
            gpu_count: self.cluster.gpu_count,
            partition: Some(Partition {
                throughput_gpus: g_t,
                latency_gpus: g_l,
            }),
            split: Some(self.options.split),
            instances,
            score,
            diagnostics: None,
        }
    }

    fn single_pool(&self, requests: &[Request], policy: &PolicySpec) -> Result<PlacementSolution> {
        let table = self.deploy_instances(requests, self.cluster.gpu_count, policy, false)?;
        let (k, score) = table.best();
        Ok(PlacementSolution::single(
            self.cluster.gpu_count,
            table.instances[k].clone(),
            score,
        ))
    }

    /// Data-parallel replicas only, with batch size still searched.
    pub fn baseline_sr(&self, requests: &[Request], policy: &PolicySpec) -> Result<PlacementSolution> {
        let table = self.deploy_instances(requests, self.cluster.gpu_count, policy, true)?;
        let (k, score) = table.best();
        Ok(PlacementSolution::single(
            self.cluster.gpu_count,
            table.instances[k].clone(),
            score,
        ))
    }

    /// One `(strategy, batch)` per model, used by every instance of that
    /// model. Every combination of per-model configurations is searched
    /// jointly.
    pub fn baseline_homogeneous(&self, requests: &[Request], policy: &PolicySpec) -> Result<PlacementSolution> {
        let g = self.cluster.gpu_count;
        if requests.is_empty() {
            return Err(Error::invalid("placement needs at least one request"));
        }
        let pruned = self.configs_for(requests, g)?;
        let window = self.scoring_window(requests);
        let mut per_model: BTreeMap<ModelId, Vec<InstanceConfig>> = BTreeMap::new();
        for c in &pruned.configs {
            per_model.entry(c.model.clone()).or_default().push(c.clone());
        }
        let models: BTreeSet<ModelId> = models_of(window)
            .into_iter()
            .filter(|m| per_model.contains_key(m))
            .collect();
        if models.is_empty() {
            return Ok(PlacementSolution::single(g, Vec::new(), 0.0));
        }

        let mut tuples: Vec<BTreeMap<ModelId, InstanceConfig>> = vec![BTreeMap::new()];
        for m in &models {
            let options = &per_model[m];
            tuples = tuples
                .into_iter()
                .flat_map(|t| {
                    options.iter().map(move |c| {
                        let mut t = t.clone();
                        t.insert(c.model.clone(), c.clone());
                        t
                    })
                })
                .collect();
        }

        let results = par::map(self.options.execution, &tuples, |tuple| {
            let choose = |m: &ModelId| tuple.get(m).cloned();
            self.greedy(window, g, &models, &choose, policy, None).map(|t| {
                let (k, s) = t.best();
                (t.instances[k].clone(), s)
            })
        });
        let mut best = (Vec::new(), 0.0);
        for r in results {
            let (inst, s) = r?;
            if s > best.1 {
                best = (inst, s);
            }
        }
        Ok(PlacementSolution::single(g, best.0, best.1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Maaso,
    MaasoStar,
    Sr,
    Homogeneous,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Maaso, Method::MaasoStar, Method::Sr, Method::Homogeneous];

    pub fn name(self) -> &'static str {
        match self {
            Method::Maaso => "maaso",
            Method::MaasoStar => "maaso_star",
            Method::Sr => "sr",
            Method::Homogeneous => "homogeneous",
        }
    }

    /// SLO weight used by the method's serving score.
    pub fn alpha(self, default: f64) -> f64 {
        match self {
            Method::MaasoStar => 10.0,
            _ => default,
        }
    }

    pub fn is_baseline(self) -> bool {
        matches!(self, Method::Sr | Method::Homogeneous)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownMethod(s.to_owned()))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselinePolicy {
    /// The same SLO-aware distributor as the partitioned methods, without a
    /// sub-cluster split.
    #[default]
    SloAware,
    /// Shortest queue; requests are only dropped once they can no longer
    /// finish in time.
    LoadBalance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub simulations: usize,
    pub wall_seconds: f64,
}

/// Places instances with `method` and returns the placement, the routing
/// policy to serve it with, and solver effort.
pub fn place(
    placer: &Placer<'_>,
    method: Method,
    requests: &[Request],
    baseline_policy: BaselinePolicy,
) -> Result<(PlacementSolution, PolicySpec, SolverStats)> {
    let start = Instant::now();
    let before = placer.simulations();
    let unsplit = PolicySpec::SloAware {
        split: None,
        protection: true,
    };
    let baseline = match baseline_policy {
        BaselinePolicy::LoadBalance => PolicySpec::LoadBalance,
        BaselinePolicy::SloAware => unsplit,
    };
    let (solution, policy) = match method {
        Method::Maaso | Method::MaasoStar => {
            let s = placer.partition_resources(requests, &unsplit)?;
            let policy = PolicySpec::SloAware {
                split: s.split,
                protection: true,
            };
            (s, policy)
        }
        Method::Sr => (placer.baseline_sr(requests, &baseline)?, baseline),
        Method::Homogeneous => (placer.baseline_homogeneous(requests, &baseline)?, baseline),
    };
    let stats = SolverStats {
        simulations: placer.simulations() - before,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((solution, policy, stats))
}
