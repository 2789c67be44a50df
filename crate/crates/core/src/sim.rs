//! Discrete-event simulation of heterogeneous instances with virtual slots.
//!
//! Each instance has `B` slots. Every running request on an instance decodes
//! at the same per-request rate `F(B, W)`, `W` being the number of occupied
//! slots, and the rate is recomputed whenever a request is admitted or
//! completes. Between those events rates are constant, so an instance only
//! needs a cumulative per-request progress counter: a request admitted when
//! the counter reads `p` finishes when it reaches `p + S_r`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::distributor::{DistributionPolicy, RejectReason, RouteContext, RoutingOutcome};
use crate::error::{Error, Result};
use crate::model::{Instance, ModelId, Request};
use crate::profiler::{ProfileSet, ThroughputModel};

/// Slack allowed when comparing a completion time with a deadline.
pub const DEFAULT_TIME_RESOLUTION: f64 = 1e-9;

fn default_time_resolution() -> f64 {
    DEFAULT_TIME_RESOLUTION
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub alpha: f64,
    pub beta: f64,
    /// Throughput normalizer, tokens/s.
    pub gamma_t: f64,
    /// Latency normalizer, seconds.
    pub gamma_l: f64,
    /// Seconds per token of the reference instance; the first token of an
    /// admitted request appears one time slice after admission.
    pub time_slice: f64,
    #[serde(default = "default_time_resolution")]
    pub time_resolution: f64,
    /// Count rejected requests in the attainment denominator.
    #[serde(default = "default_true")]
    pub rejected_in_attainment: bool,
    /// Average rejected requests' time-to-rejection into the latency metric.
    #[serde(default)]
    pub latency_includes_rejected: bool,
}

impl SimParams {
    pub const DEFAULT_ALPHA: f64 = 4.0;
    pub const DEFAULT_BETA: f64 = 0.3;

    pub fn new(gamma_t: f64, gamma_l: f64, time_slice: f64) -> Self {
        Self {
            alpha: Self::DEFAULT_ALPHA,
            beta: Self::DEFAULT_BETA,
            gamma_t,
            gamma_l,
            time_slice,
            time_resolution: DEFAULT_TIME_RESOLUTION,
            rejected_in_attainment: true,
            latency_includes_rejected: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha > 0.0
            && (0.0..=1.0).contains(&self.beta)
            && self.gamma_t > 0.0
            && self.gamma_l > 0.0
            && self.time_slice > 0.0
            && self.time_resolution >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(
                "sim params need alpha > 0, beta in [0, 1], positive gammas and time slice",
            ))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Met,
    Missed,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: u64,
    pub model: ModelId,
    pub decode_len: u32,
    pub arrival: f64,
    /// Absolute due time.
    pub due: f64,
    pub outcome: Outcome,
    pub reason: Option<RejectReason>,
    pub instance: Option<usize>,
    pub predicted_lq: Option<f64>,
    pub predicted_ld: Option<f64>,
    pub admission: Option<f64>,
    pub first_token: Option<f64>,
    pub completion: Option<f64>,
    pub rejected_at: Option<f64>,
}

impl RequestRecord {
    fn pending(r: &Request) -> Self {
        Self {
            id: r.id,
            model: r.model.clone(),
            decode_len: r.decode_len,
            arrival: r.arrival,
            due: r.due(),
            outcome: Outcome::Rejected,
            reason: None,
            instance: None,
            predicted_lq: None,
            predicted_ld: None,
            admission: None,
            first_token: None,
            completion: None,
            rejected_at: None,
        }
    }

    pub fn response_latency(&self) -> Option<f64> {
        self.first_token.map(|t| t - self.arrival)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub requests_total: usize,
    pub requests_slo_met: usize,
    pub requests_missed: usize,
    pub requests_rejected: usize,
    /// Requests that obtained a slot.
    pub requests_admitted: usize,
    /// Requests averaged into `avg_latency`.
    pub latency_samples: usize,
    /// Fraction of requests meeting their deadline.
    pub slo_attainment: f64,
    /// Decoded tokens per second over the makespan.
    pub avg_throughput: f64,
    /// Mean time to first token, seconds.
    pub avg_latency: f64,
    pub decoded_tokens: u64,
    pub makespan: f64,
    #[serde(skip)]
    pub records: Vec<RequestRecord>,
}

/// Weighted serving score:
/// `alpha * S + beta * min(T, gamma_t) / gamma_t + (1 - beta) * max(gamma_l - L, 0) / gamma_l`.
///
/// The latency term is zero when no request was served.
pub fn serving_score(m: &SimMetrics, p: &SimParams) -> f64 {
    let throughput = m.avg_throughput.max(0.0).min(p.gamma_t) / p.gamma_t;
    let latency = if m.latency_samples == 0 {
        0.0
    } else {
        (p.gamma_l - m.avg_latency).max(0.0) / p.gamma_l
    };
    p.alpha * m.slo_attainment + p.beta * throughput + (1.0 - p.beta) * latency
}

/// Runtime state of one instance.
#[derive(Debug, Clone)]
pub struct LiveInstance {
    pub id: usize,
    pub instance: Instance,
    pub profile: ThroughputModel,
    /// Trace indices of requests holding a slot.
    pub running: Vec<usize>,
    /// Trace indices of requests queued for a slot, FIFO.
    pub waiting: VecDeque<usize>,
    /// Progress value at which each running request finishes.
    targets: Vec<f64>,
    progress: f64,
    last_update: f64,
    rate: f64,
    next_done: f64,
}

impl LiveInstance {
    pub fn new(id: usize, instance: Instance, profile: ThroughputModel) -> Self {
        let rate = profile.eval_throughput(instance.config.batch_size, 0);
        Self {
            id,
            instance,
            profile,
            running: Vec::new(),
            waiting: VecDeque::new(),
            targets: Vec::new(),
            progress: 0.0,
            last_update: 0.0,
            rate,
            next_done: f64::INFINITY,
        }
    }

    pub fn batch(&self) -> usize {
        self.instance.config.batch_size as usize
    }

    pub fn has_free_slot(&self) -> bool {
        self.running.len() < self.batch()
    }

    /// Per-request rate right now.
    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Absolute time of the next completion, infinite when idle.
    pub fn next_completion(&self) -> f64 {
        self.next_done
    }

    fn advance(&mut self, t: f64) {
        if !self.running.is_empty() {
            self.progress += self.rate * (t - self.last_update);
        }
        self.last_update = t;
    }

    fn refresh(&mut self) {
        let w = self.running.len() as u32;
        self.rate = self.profile.eval_throughput(self.instance.config.batch_size, w);
        self.next_done = self
            .targets
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if self.next_done.is_finite() {
            self.next_done = self.last_update + (self.next_done - self.progress).max(0.0) / self.rate;
        }
    }

    fn admit(&mut self, idx: usize, tokens: u32) {
        self.running.push(idx);
        self.targets.push(self.progress + tokens as f64);
    }

    /// Removes and returns the requests finishing at the current progress.
    fn take_finished(&mut self) -> Vec<usize> {
        let min = self.targets.iter().copied().fold(f64::INFINITY, f64::min);
        self.progress = self.progress.max(min);
        let mut done = Vec::new();
        let mut i = 0;
        while i < self.running.len() {
            if self.targets[i] <= self.progress + 1e-9 {
                done.push(self.running.remove(i));
                self.targets.remove(i);
            } else {
                i += 1;
            }
        }
        done
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SimEvent {
    Arrival(usize),
    Completion { instance: usize, requests: Vec<usize> },
}

pub struct SimulationState<'a> {
    clock: f64,
    requests: &'a [Request],
    next_arrival: usize,
    instances: Vec<LiveInstance>,
    records: Vec<RequestRecord>,
    policy: &'a dyn DistributionPolicy,
    params: &'a SimParams,
    profiles: &'a ProfileSet,
}

impl<'a> SimulationState<'a> {
    pub fn new(
        instances: &[Instance],
        requests: &'a [Request],
        policy: &'a dyn DistributionPolicy,
        profiles: &'a ProfileSet,
        params: &'a SimParams,
    ) -> Result<Self> {
        if requests.windows(2).any(|w| w[1].arrival < w[0].arrival) {
            return Err(Error::invalid("requests must be sorted by arrival time"));
        }
        let live = instances
            .iter()
            .enumerate()
            .map(|(id, inst)| {
                let tm = profiles.for_config(&inst.config)?.clone();
                Ok(LiveInstance::new(id, inst.clone(), tm))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            clock: requests.first().map_or(0.0, |r| r.arrival),
            requests,
            next_arrival: 0,
            instances: live,
            records: requests.iter().map(RequestRecord::pending).collect(),
            policy,
            params,
            profiles,
        })
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn instances(&self) -> &[LiveInstance] {
        &self.instances
    }

    pub fn records(&self) -> &[RequestRecord] {
        &self.records
    }

    fn next_completion(&self) -> Option<(f64, usize)> {
        self.instances
            .iter()
            .filter(|i| i.next_done.is_finite())
            .map(|i| (i.next_done, i.id))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
    }

    /// Processes the earliest pending event. Completions at the same instant
    /// as an arrival go first so the freed slot is visible to routing.
    pub fn advance_to_next_event(&mut self) -> Result<Option<SimEvent>> {
        let arrival = self.requests.get(self.next_arrival).map(|r| r.arrival);
        let completion = self.next_completion();
        match (arrival, completion) {
            (None, None) => Ok(None),
            (Some(ta), Some((tc, i))) if tc <= ta => Ok(Some(self.complete(i, tc))),
            (None, Some((tc, i))) => Ok(Some(self.complete(i, tc))),
            (Some(ta), _) => self.arrive(ta).map(Some),
        }
    }

    fn arrive(&mut self, t: f64) -> Result<SimEvent> {
        self.clock = self.clock.max(t);
        let idx = self.next_arrival;
        self.next_arrival += 1;
        let r = &self.requests[idx];
        if !self.profiles.has_model(&r.model) {
            return Err(Error::UnknownModel(r.model.clone()));
        }
        let decision = self.policy.route(&RouteContext {
            index: idx,
            requests: self.requests,
            instances: &self.instances,
            clock: self.clock,
        });
        let rec = &mut self.records[idx];
        rec.predicted_lq = decision.predicted_lq;
        rec.predicted_ld = decision.predicted_ld;
        match decision.outcome {
            RoutingOutcome::Rejected(reason) => {
                rec.reason = Some(reason);
                rec.rejected_at = Some(self.clock);
            }
            RoutingOutcome::Assigned(i) => {
                let valid = self
                    .instances
                    .get(i)
                    .is_some_and(|inst| inst.instance.config.model == r.model);
                if !valid {
                    return Err(Error::InvalidRouting {
                        request: r.id,
                        instance: i,
                    });
                }
                rec.instance = Some(i);
                self.instances[i].waiting.push_back(idx);
                self.fill_slots(i);
            }
        }
        Ok(SimEvent::Arrival(idx))
    }

    fn complete(&mut self, i: usize, t: f64) -> SimEvent {
        self.clock = self.clock.max(t);
        let inst = &mut self.instances[i];
        inst.advance(self.clock);
        let done = inst.take_finished();
        for &j in &done {
            let rec = &mut self.records[j];
            rec.completion = Some(self.clock);
            rec.outcome = if self.clock <= rec.due + self.params.time_resolution {
                Outcome::Met
            } else {
                Outcome::Missed
            };
        }
        self.fill_slots(i);
        SimEvent::Completion {
            instance: i,
            requests: done,
        }
    }

    /// Moves queued requests into free slots. A queued request whose
    /// remaining time cannot cover decoding is rejected instead: at the
    /// worst-case rate under overflow protection, at the rate it would get
    /// right now otherwise.
    fn fill_slots(&mut self, i: usize) {
        let now = self.clock;
        let protect = self.policy.overflow_protection();
        let tol = self.params.time_resolution;
        let inst = &mut self.instances[i];
        inst.advance(now);
        let batch = inst.instance.config.batch_size;
        while inst.has_free_slot() {
            let Some(j) = inst.waiting.pop_front() else { break };
            let r = &self.requests[j];
            let rate = if protect {
                inst.profile.saturated(batch)
            } else {
                inst.profile.eval_throughput(batch, inst.running.len() as u32 + 1)
            };
            let rec = &mut self.records[j];
            if now + r.decode_len as f64 / rate > r.due() + tol {
                rec.reason = Some(RejectReason::Timeout);
                rec.rejected_at = Some(now);
                continue;
            }
            rec.admission = Some(now);
            rec.first_token = Some(now + self.params.time_slice);
            inst.admit(j, r.decode_len);
        }
        inst.refresh();
    }

    pub fn run(mut self) -> Result<SimMetrics> {
        while self.advance_to_next_event()?.is_some() {}
        Ok(self.finish())
    }

    pub fn finish(self) -> SimMetrics {
        summarize(self.records, self.params)
    }
}

fn summarize(records: Vec<RequestRecord>, params: &SimParams) -> SimMetrics {
    let total = records.len();
    let met = records.iter().filter(|r| r.outcome == Outcome::Met).count();
    let missed = records.iter().filter(|r| r.outcome == Outcome::Missed).count();
    let rejected = total - met - missed;
    let admitted = records.iter().filter(|r| r.admission.is_some()).count();

    let denom = if params.rejected_in_attainment { total } else { total - rejected };
    let slo_attainment = if denom == 0 { 1.0 } else { met as f64 / denom as f64 };

    let mut latencies: Vec<f64> = records.iter().filter_map(RequestRecord::response_latency).collect();
    if params.latency_includes_rejected {
        latencies.extend(
            records
                .iter()
                .filter(|r| r.admission.is_none())
                .filter_map(|r| r.rejected_at.map(|t| t - r.arrival)),
        );
    }
    let avg_latency = if latencies.is_empty() {
        0.0
    } else {
        latencies.iter().sum::<f64>() / latencies.len() as f64
    };

    let decoded_tokens: u64 = records
        .iter()
        .filter(|r| r.completion.is_some())
        .map(|r| r.decode_len as u64)
        .sum();
    let start = records.first().map_or(0.0, |r| r.arrival);
    let end = records
        .iter()
        .filter_map(|r| r.completion)
        .fold(f64::NEG_INFINITY, f64::max);
    let makespan = if end.is_finite() { end - start } else { 0.0 };
    let avg_throughput = if makespan > 0.0 {
        decoded_tokens as f64 / makespan
    } else {
        0.0
    };

    SimMetrics {
        requests_total: total,
        requests_slo_met: met,
        requests_missed: missed,
        requests_rejected: rejected,
        requests_admitted: admitted,
        latency_samples: latencies.len(),
        slo_attainment,
        avg_throughput,
        avg_latency,
        decoded_tokens,
        makespan,
        records,
    }
}

/// Replays `requests` through `instances` under `policy`.
pub fn simulate(
    instances: &[Instance],
    requests: &[Request],
    policy: &dyn DistributionPolicy,
    profiles: &ProfileSet,
    params: &SimParams,
) -> Result<SimMetrics> {
    SimulationState::new(instances, requests, policy, profiles, params)?.run()
}
