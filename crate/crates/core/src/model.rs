//! Domain types shared by the profiler, placer, distributor and simulator.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cap on an instance's inference batch size.
pub const DEFAULT_MAX_BATCH: u32 = 256;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelId(pub String);

impl ModelId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ModelId {
    fn from(s: &str) -> Self {
        ModelId(s.to_owned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StrategyKind {
    Dp,
    Tp,
    Pp,
}

/// A parallelism strategy written `dp`, `tp-<degree>` or `pp-<degree>`.
///
/// The degree is the number of GPUs one instance occupies; a data-parallel
/// replica always occupies one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct ParallelismStrategy {
    kind: StrategyKind,
    degree: u32,
}

impl ParallelismStrategy {
    pub const DP: ParallelismStrategy = ParallelismStrategy {
        kind: StrategyKind::Dp,
        degree: 1,
    };

    pub fn new(kind: StrategyKind, degree: u32) -> Result<Self> {
        if degree == 0 {
            return Err(Error::invalid("parallelism degree must be >= 1"));
        }
        if kind == StrategyKind::Dp && degree != 1 {
            return Err(Error::invalid("a data-parallel instance has degree 1"));
        }
        Ok(Self { kind, degree })
    }

    pub fn tp(degree: u32) -> Self {
        Self::new(StrategyKind::Tp, degree).expect("tp degree must be >= 1")
    }

    pub fn pp(degree: u32) -> Self {
        Self::new(StrategyKind::Pp, degree).expect("pp degree must be >= 1")
    }

    pub fn kind(self) -> StrategyKind {
        self.kind
    }

    pub fn degree(self) -> u32 {
        self.degree
    }

    pub fn gpu_count(self) -> u32 {
        self.degree
    }

    pub fn is_dp(self) -> bool {
        self.kind == StrategyKind::Dp
    }
}

impl fmt::Display for ParallelismStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            StrategyKind::Dp => f.write_str("dp"),
            StrategyKind::Tp => write!(f, "tp-{}", self.degree),
            StrategyKind::Pp => write!(f, "pp-{}", self.degree),
        }
    }
}

impl FromStr for ParallelismStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "dp" {
            return Ok(Self::DP);
        }
        let (kind, degree) = s
            .split_once('-')
            .ok_or_else(|| Error::invalid(format!("bad strategy `{s}`")))?;
        let kind = match kind {
            "tp" => StrategyKind::Tp,
            "pp" => StrategyKind::Pp,
            "dp" => StrategyKind::Dp,
            _ => return Err(Error::invalid(format!("bad strategy kind in `{s}`"))),
        };
        let degree = degree
            .parse::<u32>()
            .map_err(|_| Error::invalid(format!("bad strategy degree in `{s}`")))?;
        Self::new(kind, degree)
    }
}

impl From<ParallelismStrategy> for String {
    fn from(p: ParallelismStrategy) -> String {
        p.to_string()
    }
}

impl TryFrom<String> for ParallelismStrategy {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub id: ModelId,
    pub weight_bytes: u64,
    /// KV-cache bytes reserved per batch slot, spread over the instance's GPUs.
    #[serde(default)]
    pub kv_bytes_per_slot: u64,
    /// Tokens/s of one instance serving a single request, per admissible strategy.
    pub baseline_throughput: BTreeMap<ParallelismStrategy, f64>,
    pub memory_per_gpu: BTreeMap<ParallelismStrategy, u64>,
}

impl ModelSpec {
    pub fn strategies(&self) -> impl Iterator<Item = ParallelismStrategy> + '_ {
        self.memory_per_gpu.keys().copied()
    }

    pub fn validate(&self) -> Result<()> {
        let a: BTreeSet<_> = self.baseline_throughput.keys().collect();
        let b: BTreeSet<_> = self.memory_per_gpu.keys().collect();
        if a != b {
            return Err(Error::invalid(format!(
                "model {}: baseline_throughput and memory_per_gpu list different strategies",
                self.id
            )));
        }
        for (p, t0) in &self.baseline_throughput {
            if !(*t0 > 0.0 && t0.is_finite()) {
                return Err(Error::invalid(format!("model {}: T0 for {p} must be > 0", self.id)));
            }
        }
        for (p, mem) in &self.memory_per_gpu {
            if mem.saturating_mul(p.degree() as u64) < self.weight_bytes {
                return Err(Error::invalid(format!(
                    "model {}: {p} memory footprint cannot hold the weights",
                    self.id
                )));
            }
        }
        Ok(())
    }

    /// Per-GPU bytes needed by an instance of this model at `(strategy, batch)`.
    pub fn instance_memory_per_gpu(&self, strategy: ParallelismStrategy, batch: u32) -> Option<u64> {
        let base = *self.memory_per_gpu.get(&strategy)?;
        let kv = self.kv_bytes_per_slot.saturating_mul(batch as u64);
        Some(base + kv.div_ceil(strategy.degree() as u64))
    }
}

pub fn find_model<'a>(models: &'a [ModelSpec], id: &ModelId) -> Option<&'a ModelSpec> {
    models.iter().find(|m| &m.id == id)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct InstanceConfig {
    pub model: ModelId,
    pub strategy: ParallelismStrategy,
    pub batch_size: u32,
}

impl InstanceConfig {
    pub fn new(model: impl Into<ModelId>, strategy: ParallelismStrategy, batch_size: u32) -> Self {
        Self {
            model: model.into(),
            strategy,
            batch_size,
        }
    }

    pub fn validate(&self, max_batch: u32) -> Result<()> {
        if self.batch_size == 0 || self.batch_size > max_batch {
            return Err(Error::invalid(format!(
                "batch size {} outside [1, {max_batch}]",
                self.batch_size
            )));
        }
        Ok(())
    }
}

impl From<String> for ModelId {
    fn from(s: String) -> Self {
        ModelId(s)
    }
}

/// A deployed instance: a configuration pinned to a set of GPUs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub config: InstanceConfig,
    pub gpus: Vec<u32>,
    /// Sub-cluster the instance belongs to, when the cluster is partitioned.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<SubCluster>,
}

impl Instance {
    pub fn new(config: InstanceConfig, gpus: Vec<u32>) -> Self {
        Self {
            config,
            gpus,
            group: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubCluster {
    /// Strict-deadline requests.
    Throughput,
    /// Relaxed-deadline requests.
    Latency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    /// Seconds.
    pub arrival: f64,
    pub model: ModelId,
    /// Tokens to decode.
    pub decode_len: u32,
    pub slo_factor: f64,
    /// Seconds allowed between arrival and the last decoded token.
    pub deadline: f64,
}

impl Request {
    pub fn new(
        id: u64,
        model: impl Into<ModelId>,
        arrival: f64,
        decode_len: u32,
        slo_factor: f64,
        time_slice: f64,
    ) -> Result<Self> {
        let deadline = derive_deadline(decode_len, slo_factor, time_slice)?;
        Ok(Self {
            id,
            model: model.into(),
            arrival,
            decode_len,
            slo_factor,
            deadline,
        })
    }

    /// Absolute time by which decoding has to finish.
    pub fn due(&self) -> f64 {
        self.arrival + self.deadline
    }

    /// Time spent waiting so far if the clock reads `clock`.
    pub fn pending_at(&self, clock: f64) -> f64 {
        (clock - self.arrival).max(0.0)
    }
}

/// Deadline in seconds: decode length times SLO factor times the time slice.
pub fn derive_deadline(decode_len: u32, slo_factor: f64, time_slice: f64) -> Result<f64> {
    if decode_len == 0 {
        return Err(Error::invalid("decode length must be > 0"));
    }
    if !(slo_factor > 0.0 && slo_factor.is_finite()) {
        return Err(Error::invalid("SLO factor must be > 0"));
    }
    if !(time_slice > 0.0 && time_slice.is_finite()) {
        return Err(Error::invalid("time slice must be > 0"));
    }
    Ok(decode_len as f64 * slo_factor * time_slice)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub gpu_count: u32,
    /// Bytes per GPU. GPUs are homogeneous.
    pub gpu_memory: u64,
    /// Seconds per token of a data-parallel instance serving one request.
    pub time_slice: f64,
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.gpu_count == 0 {
            return Err(Error::invalid("cluster needs at least one GPU"));
        }
        if !(self.time_slice > 0.0 && self.time_slice.is_finite()) {
            return Err(Error::invalid("time slice must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    /// Batch size outside `[1, max]`.
    InvalidBatch { instance: usize, batch_size: u32 },
    UnknownModel { instance: usize, model: ModelId },
    UnsupportedStrategy {
        instance: usize,
        model: ModelId,
        strategy: ParallelismStrategy,
    },
    DegreeMismatch {
        instance: usize,
        expected: u32,
        got: usize,
    },
    GpuOutOfRange { instance: usize, gpu: u32 },
    /// GPU exclusivity.
    GpuShared { gpu: u32, first: usize, second: usize },
    /// Total GPU budget.
    GpuBudget { used: u64, available: u32 },
    /// Per-GPU memory.
    Memory {
        instance: usize,
        required: u64,
        available: u64,
    },
}

/// Checks exclusivity, the GPU budget and per-GPU memory. An empty result
/// means the placement is valid.
pub fn validate_placement(
    instances: &[Instance],
    cluster: &ClusterSpec,
    models: &[ModelSpec],
    max_batch: u32,
) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut owner: BTreeMap<u32, usize> = BTreeMap::new();
    let mut used: u64 = 0;

    for (idx, inst) in instances.iter().enumerate() {
        let cfg = &inst.config;
        used += cfg.strategy.degree() as u64;
        if cfg.batch_size == 0 || cfg.batch_size > max_batch {
            out.push(Violation::InvalidBatch {
                instance: idx,
                batch_size: cfg.batch_size,
            });
        }
        if inst.gpus.len() != cfg.strategy.degree() as usize {
            out.push(Violation::DegreeMismatch {
                instance: idx,
                expected: cfg.strategy.degree(),
                got: inst.gpus.len(),
            });
        }
        for &gpu in &inst.gpus {
            if gpu >= cluster.gpu_count {
                out.push(Violation::GpuOutOfRange { instance: idx, gpu });
            }
            match owner.get(&gpu) {
                Some(&first) => out.push(Violation::GpuShared {
                    gpu,
                    first,
                    second: idx,
                }),
                None => {
                    owner.insert(gpu, idx);
                }
            }
        }
        match find_model(models, &cfg.model) {
            None => out.push(Violation::UnknownModel {
                instance: idx,
                model: cfg.model.clone(),
            }),
            Some(spec) => match spec.instance_memory_per_gpu(cfg.strategy, cfg.batch_size) {
                None => out.push(Violation::UnsupportedStrategy {
                    instance: idx,
                    model: cfg.model.clone(),
                    strategy: cfg.strategy,
                }),
                Some(required) if required > cluster.gpu_memory => out.push(Violation::Memory {
                    instance: idx,
                    required,
                    available: cluster.gpu_memory,
                }),
                Some(_) => {}
            },
        }
    }
    if used > cluster.gpu_count as u64 {
        out.push(Violation::GpuBudget {
            used,
            available: cluster.gpu_count,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const GIB: u64 = 1 << 30;

    fn model() -> ModelSpec {
        let mut t = BTreeMap::new();
        let mut m = BTreeMap::new();
        for (p, mem) in [("dp", 14 * GIB), ("tp-2", 7 * GIB), ("tp-4", 4 * GIB)] {
            let p: ParallelismStrategy = p.parse().unwrap();
            t.insert(p, 20.0);
            m.insert(p, mem);
        }
        ModelSpec {
            id: "m".into(),
            weight_bytes: 14 * GIB,
            kv_bytes_per_slot: 0,
            baseline_throughput: t,
            memory_per_gpu: m,
        }
    }

    fn cluster(n: u32) -> ClusterSpec {
        ClusterSpec {
            gpu_count: n,
            gpu_memory: 16 * GIB,
            time_slice: 0.05,
        }
    }

    fn inst(strategy: &str, gpus: &[u32]) -> Instance {
        Instance::new(InstanceConfig::new("m", strategy.parse().unwrap(), 8), gpus.to_vec())
    }

    #[test]
    fn strategy_notation_round_trips() {
        for s in ["dp", "tp-2", "tp-8", "pp-4"] {
            let p: ParallelismStrategy = s.parse().unwrap();
            assert_eq!(p.to_string(), s);
        }
        assert_eq!(ParallelismStrategy::tp(4).gpu_count(), 4);
        assert!("dp-2".parse::<ParallelismStrategy>().is_err());
        assert!("tp-0".parse::<ParallelismStrategy>().is_err());
        assert!("xp-2".parse::<ParallelismStrategy>().is_err());
        let json = serde_json::to_string(&ParallelismStrategy::pp(8)).unwrap();
        assert_eq!(json, "\"pp-8\"");
    }

    #[test]
    fn deadline_examples() {
        assert_eq!(derive_deadline(100, 1.0, 0.05).unwrap(), 5.0);
        assert!(derive_deadline(0, 1.0, 0.05).is_err());
        assert!(derive_deadline(10, 0.0, 0.05).is_err());
        assert!(derive_deadline(10, 1.0, -1.0).is_err());
        // 400 * 0.8 = 320 tokens of slack, at 0.025 s each.
        let d = derive_deadline(400, 0.8, 0.025).unwrap();
        assert!((d - 8.0).abs() < 1e-12);
    }

    #[test]
    fn empty_placement_is_valid() {
        assert!(validate_placement(&[], &cluster(8), &[model()], 256).is_empty());
    }

    #[test]
    fn shared_gpu_is_reported() {
        let v = validate_placement(&[inst("dp", &[0]), inst("dp", &[0])], &cluster(8), &[model()], 256);
        assert!(matches!(v.as_slice(), [Violation::GpuShared { gpu: 0, first: 0, second: 1 }]));
    }

    #[test]
    fn over_budget_is_reported() {
        let placement = [
            inst("tp-4", &[0, 1, 2, 3]),
            inst("tp-4", &[4, 5, 6, 7]),
            inst("tp-4", &[8, 9, 10, 11]),
        ];
        let v = validate_placement(&placement, &cluster(8), &[model()], 256);
        assert!(v.contains(&Violation::GpuBudget { used: 12, available: 8 }));
    }

    #[test]
    fn memory_and_degree_checks() {
        let mut m = model();
        m.kv_bytes_per_slot = GIB;
        // dp needs 14 GiB + 8 slots * 1 GiB on one GPU.
        let v = validate_placement(&[inst("dp", &[0])], &cluster(8), &[m.clone()], 256);
        assert!(matches!(v.as_slice(), [Violation::Memory { .. }]));
        // tp-4 spreads the 8 GiB of KV over four GPUs: 4 + 2 = 6 GiB each.
        assert!(validate_placement(&[inst("tp-4", &[0, 1, 2, 3])], &cluster(8), &[m], 256).is_empty());
        let v = validate_placement(&[inst("tp-2", &[0])], &cluster(8), &[model()], 256);
        assert!(matches!(v.as_slice(), [Violation::DegreeMismatch { .. }]));
    }

    #[test]
    fn model_spec_checks_footprint() {
        let mut m = model();
        assert!(m.validate().is_ok());
        m.memory_per_gpu.insert(ParallelismStrategy::tp(2), GIB);
        assert!(m.validate().is_err());
    }
}
