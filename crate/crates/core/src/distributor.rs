//! Request routing: sub-cluster mapping, shortest-queue assignment among
//! instances that can still meet the deadline, and overflow protection.

use serde::{Deserialize, Serialize};

use crate::model::{Request, SubCluster};
use crate::profiler::ThroughputModel;
use crate::sim::LiveInstance;

pub const DEFAULT_SLO_THRESHOLD: f64 = 1.1;

/// Splits requests by SLO factor: below the threshold goes to the
/// throughput-oriented sub-cluster, at or above it to the latency-tolerant
/// one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SloSplit {
    pub threshold: f64,
}

impl Default for SloSplit {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_SLO_THRESHOLD,
        }
    }
}

impl SloSplit {
    pub fn classify(&self, r: &Request) -> SubCluster {
        if r.slo_factor < self.threshold {
            SubCluster::Throughput
        } else {
            SubCluster::Latency
        }
    }
}

pub fn map_subcluster(r: &Request, split: &SloSplit) -> SubCluster {
    split.classify(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    /// No instance can meet the deadline under worst-case throughput.
    Overflow,
    /// No instance serves the request's model.
    NoInstance,
    /// Waited in a queue until the remaining time no longer covered decoding.
    Timeout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoutingOutcome {
    Assigned(usize),
    Rejected(RejectReason),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub request: u64,
    pub outcome: RoutingOutcome,
    pub predicted_lq: Option<f64>,
    pub predicted_ld: Option<f64>,
}

impl RoutingDecision {
    fn rejected(request: u64, reason: RejectReason) -> Self {
        Self {
            request,
            outcome: RoutingOutcome::Rejected(reason),
            predicted_lq: None,
            predicted_ld: None,
        }
    }
}

/// Worst-case `(queueing, decoding)` latency of `r` on `inst`.
///
/// Decoding uses the saturated rate `F(B, B)`. Queueing is zero while a slot
/// is free; otherwise the request waits `ceil(pos / B)` slot waves of the mean
/// worst-case decode time of the requests already on the instance, where
/// `pos` is its 1-based position in the waiting queue.
pub fn predict_latency(r: &Request, inst: &LiveInstance, tm: &ThroughputModel, requests: &[Request]) -> (f64, f64) {
    let batch = inst.instance.config.batch_size;
    let rate = tm.saturated(batch);
    let ld = r.decode_len as f64 / rate;
    if inst.running.len() < batch as usize && inst.waiting.is_empty() {
        return (0.0, ld);
    }
    let queued = inst.running.iter().chain(inst.waiting.iter());
    let (sum, n) = queued.fold((0.0, 0usize), |(s, n), &j| (s + requests[j].decode_len as f64 / rate, n + 1));
    let mean = if n == 0 { 0.0 } else { sum / n as f64 };
    let pos = inst.waiting.len() + 1;
    let waves = pos.div_ceil(batch as usize);
    (waves as f64 * mean, ld)
}

fn queue_len(inst: &LiveInstance) -> usize {
    inst.running.len() + inst.waiting.len()
}

/// Picks the shortest-queue instance among `candidates` whose worst-case
/// prediction fits in the request's remaining time; ties go to the lowest
/// instance id. With `protect` off every candidate qualifies.
pub fn assign_instance<'a>(
    r: &Request,
    candidates: impl IntoIterator<Item = &'a LiveInstance>,
    requests: &[Request],
    clock: f64,
    protect: bool,
) -> RoutingDecision {
    let budget = r.deadline - r.pending_at(clock);
    let mut any = false;
    let mut best: Option<(&LiveInstance, f64, f64)> = None;
    for inst in candidates {
        any = true;
        let (lq, ld) = predict_latency(r, inst, &inst.profile, requests);
        if protect && lq + ld > budget {
            continue;
        }
        let better = match best {
            None => true,
            Some((b, _, _)) => (queue_len(inst), inst.id) < (queue_len(b), b.id),
        };
        if better {
            best = Some((inst, lq, ld));
        }
    }
    match best {
        Some((inst, lq, ld)) => RoutingDecision {
            request: r.id,
            outcome: RoutingOutcome::Assigned(inst.id),
            predicted_lq: Some(lq),
            predicted_ld: Some(ld),
        },
        None if any => RoutingDecision::rejected(r.id, RejectReason::Overflow),
        None => RoutingDecision::rejected(r.id, RejectReason::NoInstance),
    }
}

/// What a policy sees when a request arrives.
pub struct RouteContext<'a> {
    pub index: usize,
    pub requests: &'a [Request],
    pub instances: &'a [LiveInstance],
    pub clock: f64,
}

impl RouteContext<'_> {
    pub fn request(&self) -> &Request {
        &self.requests[self.index]
    }
}

pub trait DistributionPolicy: Send + Sync {
    fn route(&self, ctx: &RouteContext<'_>) -> RoutingDecision;

    /// Whether queued requests are re-checked against the worst-case rate
    /// before taking a slot.
    fn overflow_protection(&self) -> bool;
}

/// The SLO-aware distributor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SloAwarePolicy {
    /// Sub-cluster mapping; `None` routes over every instance.
    pub split: Option<SloSplit>,
    pub protection: bool,
}

impl SloAwarePolicy {
    pub fn new(split: Option<SloSplit>) -> Self {
        Self { split, protection: true }
    }
}

impl DistributionPolicy for SloAwarePolicy {
    fn route(&self, ctx: &RouteContext<'_>) -> RoutingDecision {
        let r = ctx.request();
        let group = self.split.map(|s| s.classify(r));
        let candidates = ctx.instances.iter().filter(|i| {
            i.instance.config.model == r.model && (group.is_none() || i.instance.group == group)
        });
        assign_instance(r, candidates, ctx.requests, ctx.clock, self.protection)
    }

    fn overflow_protection(&self) -> bool {
        self.protection
    }
}

/// Plain load balancing: shortest queue among the model's instances, no
/// deadline checks at routing time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadBalancePolicy;

impl DistributionPolicy for LoadBalancePolicy {
    fn route(&self, ctx: &RouteContext<'_>) -> RoutingDecision {
        let r = ctx.request();
        let candidates = ctx.instances.iter().filter(|i| i.instance.config.model == r.model);
        assign_instance(r, candidates, ctx.requests, ctx.clock, false)
    }

    fn overflow_protection(&self) -> bool {
        false
    }
}

/// Serializable choice of policy, as recorded in placement manifests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySpec {
    SloAware {
        split: Option<SloSplit>,
        protection: bool,
    },
    LoadBalance,
}

impl PolicySpec {
    pub fn build(&self) -> Box<dyn DistributionPolicy> {
        match *self {
            PolicySpec::SloAware { split, protection } => Box::new(SloAwarePolicy { split, protection }),
            PolicySpec::LoadBalance => Box::new(LoadBalancePolicy),
        }
    }
}
