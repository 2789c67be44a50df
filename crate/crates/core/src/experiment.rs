//! End-to-end runs: generate a trace, prune, place, simulate, and write a
//! report bundle. Also sweeps and cross-method comparison tables.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config_space::{pruned_configs, ConfigSpace, PruneAudit};
use crate::distributor::PolicySpec;
use crate::error::{Error, Result};
use crate::io;
use crate::model::{validate_placement, ClusterSpec, ModelSpec, Request};
use crate::par::{self, Execution};
use crate::placer::{place, BaselinePolicy, Method, Partition, PlacementSolution, Placer, PlacerOptions};
use crate::preset::DeskPreset;
use crate::profiler::{ProfileSet, ThroughputModel};
use crate::sim::{serving_score, simulate, RequestRecord, SimMetrics, SimParams};
use crate::workload::{generate_trace, save_trace, TraceConfig};

/// Optional overrides of the serving-score and simulator parameters.
/// Unset normalizers are derived from the configuration space and trace.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_t: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_l: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejected_in_attainment: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_includes_rejected: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    ClusterSize,
    Cv,
    TotalRequests,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::ClusterSize => "cluster_size",
            SweepAxis::Cv => "cv",
            SweepAxis::TotalRequests => "total_requests",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [SweepAxis::ClusterSize, SweepAxis::Cv, SweepAxis::TotalRequests]
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown sweep axis {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisPoint {
    pub axis: SweepAxis,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    #[serde(default = "default_name")]
    pub name: String,
    pub cluster: ClusterSpec,
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub space: ConfigSpace,
    pub profiles: Vec<ThroughputModel>,
    pub trace: TraceConfig,
    pub method: Method,
    #[serde(default)]
    pub sim: SimOverrides,
    #[serde(default)]
    pub placer: PlacerOptions,
    #[serde(default)]
    pub baseline_policy: BaselinePolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Sweep>,
    /// Set on a single point of a sweep.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point: Option<AxisPoint>,
    pub output_dir: PathBuf,
}

fn default_name() -> String {
    "experiment".to_owned()
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.cluster.validate()?;
        self.trace.validate()?;
        if self.models.is_empty() {
            return Err(Error::invalid("experiment lists no models"));
        }
        for m in &self.models {
            m.validate()?;
        }
        for p in &self.profiles {
            p.validate()?;
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(Error::invalid("sweep has no values"));
            }
            if s.values.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::invalid("sweep values must be strictly increasing"));
            }
            if s.values.iter().any(|v| !v.is_finite() || *v <= 0.0) {
                return Err(Error::invalid("sweep values must be positive"));
            }
            if s.axis != SweepAxis::Cv && s.values.iter().any(|v| v.fract() != 0.0) {
                return Err(Error::invalid(format!("{} values must be integers", s.axis.name())));
            }
        }
        Ok(())
    }

    /// The experiment spec for one sweep point, with the axis value applied.
    pub fn at(&self, axis: SweepAxis, value: f64) -> Self {
        let mut s = self.clone();
        match axis {
            SweepAxis::ClusterSize => s.cluster.gpu_count = value as u32,
            SweepAxis::Cv => s.trace.cv = value,
            SweepAxis::TotalRequests => s.trace.rate = value / s.trace.duration,
        }
        s.sweep = None;
        s.point = Some(AxisPoint { axis, value });
        s.output_dir = self.output_dir.join(format!("{}-{}", axis.name(), value));
        s
    }

    pub fn profile_set(&self) -> ProfileSet {
        ProfileSet::new(self.profiles.iter().cloned())
    }

    pub fn trace_requests(&self) -> Result<Vec<Request>> {
        generate_trace(&self.trace, self.cluster.time_slice)
    }
}

/// Simulator parameters with all defaults materialized. The throughput
/// normalizer defaults to the best saturated aggregate throughput among the
/// pruned configurations, the latency normalizer to the loosest deadline.
pub fn resolve_params(spec: &ExperimentSpec, requests: &[Request], profiles: &ProfileSet) -> Result<(SimParams, PruneAudit)> {
    let pruned = pruned_configs(&spec.models, &spec.space, profiles, &spec.cluster, requests)?;
    let gamma_t = match spec.sim.gamma_t {
        Some(g) => g,
        None => {
            let mut best = 0.0f64;
            for c in &pruned.configs {
                best = best.max(profiles.for_config(c)?.saturated_aggregate(c.batch_size));
            }
            best
        }
    };
    let gamma_l = spec
        .sim
        .gamma_l
        .unwrap_or_else(|| requests.iter().map(|r| r.deadline).fold(0.0, f64::max));
    let mut p = SimParams::new(gamma_t.max(f64::MIN_POSITIVE), gamma_l.max(f64::MIN_POSITIVE), spec.cluster.time_slice);
    p.alpha = spec.method.alpha(spec.sim.alpha.unwrap_or(p.alpha));
    if let Some(b) = spec.sim.beta {
        p.beta = b;
    }
    if let Some(v) = spec.sim.rejected_in_attainment {
        p.rejected_in_attainment = v;
    }
    if let Some(v) = spec.sim.latency_includes_rejected {
        p.latency_includes_rejected = v;
    }
    p.validate()?;
    Ok((p, pruned.audit))
}

/// Everything needed to replay a placement against a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub method: Method,
    pub cluster: ClusterSpec,
    pub policy: PolicySpec,
    pub params: SimParams,
    pub placement: PlacementSolution,
}

impl Manifest {
    pub fn replay(&self, requests: &[Request], profiles: &ProfileSet) -> Result<SimMetrics> {
        simulate(
            &self.placement.instances,
            requests,
            self.policy.build().as_ref(),
            profiles,
            &self.params,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point: Option<AxisPoint>,
    pub gpu_count: u32,
    pub gpus_used: u32,
    pub instances: usize,
    pub partition: Option<Partition>,
    pub metrics: SimMetrics,
    pub score: f64,
    /// Scoring simulations run by the placer.
    pub simulations: usize,
    pub params: SimParams,
    pub spec: ExperimentSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub placer_seconds: f64,
    pub simulate_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub summary: Summary,
    pub timing: Timing,
    pub manifest: Manifest,
    pub records: Vec<RequestRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TIMING_FILE: &str = "timing.json";
pub const REQUESTS_FILE: &str = "requests.csv";
pub const TRACE_FILE: &str = "trace.csv";
pub const PROFILES_FILE: &str = "profiles.json";
pub const AUDIT_FILE: &str = "prune_audit.json";
pub const SWEEP_FILE: &str = "sweep.csv";

/// A placement ready to be replayed, plus what was needed to produce it.
#[derive(Debug, Clone)]
pub struct Plan {
    pub manifest: Manifest,
    pub requests: Vec<Request>,
    pub profiles: ProfileSet,
    pub audit: PruneAudit,
    pub simulations: usize,
    pub placer_seconds: f64,
}

/// Generates the trace, resolves parameters and runs the placer.
pub fn plan(spec: &ExperimentSpec) -> Result<Plan> {
    spec.validate()?;
    let profiles = spec.profile_set();
    let requests = spec.trace_requests()?;
    let (params, audit) = resolve_params(spec, &requests, &profiles)?;
    let placer = Placer::new(&spec.models, &spec.space, &profiles, &spec.cluster, &params, &spec.placer);
    let (placement, policy, stats) = place(&placer, spec.method, &requests, spec.baseline_policy)?;

    let violations = validate_placement(&placement.instances, &spec.cluster, &spec.models, spec.space.max_batch);
    if !violations.is_empty() {
        return Err(Error::invalid(format!("placer produced an invalid placement: {violations:?}")));
    }
    Ok(Plan {
        manifest: Manifest {
            method: spec.method,
            cluster: spec.cluster.clone(),
            policy,
            params,
            placement,
        },
        requests,
        profiles,
        audit,
        simulations: stats.simulations,
        placer_seconds: stats.wall_seconds,
    })
}

/// Runs one point: no sweep expansion and no files written.
pub fn run_point(spec: &ExperimentSpec) -> Result<(RunReport, Plan)> {
    let plan = plan(spec)?;
    let start = std::time::Instant::now();
    let mut metrics = plan.manifest.replay(&plan.requests, &plan.profiles)?;
    let simulate_seconds = start.elapsed().as_secs_f64();
    let records = std::mem::take(&mut metrics.records);
    let manifest = plan.manifest.clone();
    let params = manifest.params.clone();
    let summary = Summary {
        name: spec.name.clone(),
        method: spec.method,
        point: spec.point,
        gpu_count: spec.cluster.gpu_count,
        gpus_used: manifest.placement.gpus_used(),
        instances: manifest.placement.instances.len(),
        partition: manifest.placement.partition,
        score: serving_score(&metrics, &params),
        metrics,
        simulations: plan.simulations,
        params,
        spec: spec.clone(),
    };
    let report = RunReport {
        summary,
        timing: Timing {
            placer_seconds: plan.placer_seconds,
            simulate_seconds,
        },
        manifest,
        records,
    };
    Ok((report, plan))
}

/// Writes the placement side of a run: manifest, trace, profiles and the
/// pruning audit. Together they are enough to replay the placement.
pub fn write_plan(dir: &Path, plan: &Plan) -> Result<()> {
    io::ensure_dir(dir)?;
    io::write_json(&dir.join(MANIFEST_FILE), &plan.manifest)?;
    io::write_json(&dir.join(AUDIT_FILE), &plan.audit)?;
    save_trace(&dir.join(TRACE_FILE), &plan.requests)?;
    plan.profiles.save(&dir.join(PROFILES_FILE))
}

pub fn write_report(dir: &Path, report: &RunReport, plan: &Plan) -> Result<()> {
    write_plan(dir, plan)?;
    io::write_json(&dir.join(SUMMARY_FILE), &report.summary)?;
    io::write_json(&dir.join(TIMING_FILE), &report.timing)?;
    io::write_csv(&dir.join(REQUESTS_FILE), &report.records)
}

pub fn read_report(dir: &Path) -> Result<(Summary, Timing)> {
    Ok((
        io::read_json(&dir.join(SUMMARY_FILE))?,
        io::read_json(&dir.join(TIMING_FILE))?,
    ))
}

/// Runs the experiment and writes one report bundle per point. Sweep points
/// run concurrently and land in `<output_dir>/<axis>-<value>/`, with a
/// `sweep.csv` table alongside.
pub fn run_experiment(spec: &ExperimentSpec, exec: Execution) -> Result<Vec<RunReport>> {
    spec.validate()?;
    let points: Vec<ExperimentSpec> = match &spec.sweep {
        None => vec![spec.clone()],
        Some(s) => s.values.iter().map(|&v| spec.at(s.axis, v)).collect(),
    };
    let results = par::map(exec, &points, |p| -> Result<RunReport> {
        let (report, plan) = run_point(p)?;
        write_report(&p.output_dir, &report, &plan)?;
        Ok(report)
    });
    let reports = results.into_iter().collect::<Result<Vec<_>>>()?;
    if spec.sweep.is_some() {
        let rows = comparison_rows(&reports.iter().map(|r| (r.summary.clone(), r.timing)).collect::<Vec<_>>(), None)?;
        io::write_csv(&spec.output_dir.join(SWEEP_FILE), &without_timing(rows))?;
    }
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub axis: Option<SweepAxis>,
    pub axis_value: Option<f64>,
    pub method: Method,
    pub slo_attainment: f64,
    pub avg_throughput: f64,
    pub avg_latency: f64,
    /// Placer wall time; left out of tables that must be reproducible.
    pub solver_seconds: Option<f64>,
    pub simulations: usize,
    pub baseline: Method,
    pub delta_slo_attainment: f64,
    pub delta_avg_throughput: f64,
    pub delta_avg_latency: f64,
}

fn trace_key(s: &Summary) -> (String, ClusterSpec) {
    let mut trace = s.spec.trace.clone();
    let mut cluster = s.spec.cluster.clone();
    if let Some(p) = s.point {
        match p.axis {
            SweepAxis::ClusterSize => cluster.gpu_count = 0,
            SweepAxis::Cv => trace.cv = 0.0,
            SweepAxis::TotalRequests => trace.rate = 0.0,
        }
    }
    (serde_json::to_string(&trace).unwrap_or_default(), cluster)
}

/// Drops wall-clock columns so the table is byte-stable across runs.
pub fn without_timing(mut rows: Vec<ComparisonRow>) -> Vec<ComparisonRow> {
    for r in &mut rows {
        r.solver_seconds = None;
    }
    rows
}

/// One row per (axis value, method) with deltas against `baseline`. With no
/// baseline given, `sr` is used if present, else the first method.
pub fn compare_methods(reports: &[(Summary, Timing)], baseline: Option<Method>) -> Result<Vec<ComparisonRow>> {
    comparison_rows(reports, baseline)
}

type MethodRow<'a> = BTreeMap<Method, &'a (Summary, Timing)>;

fn comparison_rows(reports: &[(Summary, Timing)], baseline: Option<Method>) -> Result<Vec<ComparisonRow>> {
    let first = reports
        .first()
        .ok_or_else(|| Error::invalid("no reports to compare"))?;
    let axis = first.0.point.map(|p| p.axis);
    let key = trace_key(&first.0);
    for (s, _) in reports {
        if s.point.map(|p| p.axis) != axis {
            return Err(Error::MismatchedAxes("reports sweep different axes".into()));
        }
        if trace_key(s) != key {
            return Err(Error::MismatchedAxes(format!(
                "report {:?} ({}) uses a different trace or cluster",
                s.name, s.method
            )));
        }
    }

    let mut table: BTreeMap<u64, MethodRow> = BTreeMap::new();
    for r in reports {
        let v = r.0.point.map(|p| p.value).unwrap_or(0.0);
        if table.entry(v.to_bits()).or_default().insert(r.0.method, r).is_some() {
            return Err(Error::MismatchedAxes(format!("duplicate report for {} at {v}", r.0.method)));
        }
    }
    let methods: BTreeSet<Method> = reports.iter().map(|r| r.0.method).collect();
    for row in table.values() {
        if row.len() != methods.len() {
            return Err(Error::MismatchedAxes("methods cover different axis values".into()));
        }
    }
    let baseline = match baseline {
        Some(b) if methods.contains(&b) => b,
        Some(b) => return Err(Error::invalid(format!("baseline {b} not among the reports"))),
        None if methods.contains(&Method::Sr) => Method::Sr,
        None => first.0.method,
    };

    let mut values: Vec<(f64, &MethodRow)> =
        table.iter().map(|(k, v)| (f64::from_bits(*k), v)).collect();
    values.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rows = Vec::new();
    for (value, row) in values {
        let base = &row[&baseline].0.metrics;
        for (method, (s, t)) in row {
            let m = &s.metrics;
            rows.push(ComparisonRow {
                axis,
                axis_value: axis.map(|_| value),
                method: *method,
                slo_attainment: m.slo_attainment,
                avg_throughput: m.avg_throughput,
                avg_latency: m.avg_latency,
                solver_seconds: Some(t.placer_seconds),
                simulations: s.simulations,
                baseline,
                delta_slo_attainment: m.slo_attainment - base.slo_attainment,
                delta_avg_throughput: m.avg_throughput - base.avg_throughput,
                delta_avg_latency: m.avg_latency - base.avg_latency,
            });
        }
    }
    Ok(rows)
}

/// Experiment spec for the desk preset on one trace family.
pub fn desk_experiment(preset: &DeskPreset, family: u8, method: Method, output_dir: impl Into<PathBuf>) -> Result<ExperimentSpec> {
    let profiles = preset.profiles()?;
    let time_slice = preset.time_slice(&profiles)?;
    Ok(ExperimentSpec {
        name: format!("desk-trace{family}"),
        cluster: preset.cluster(time_slice),
        models: preset.models(),
        space: ConfigSpace::default(),
        profiles: profiles.to_vec(),
        trace: preset.trace(family)?,
        method,
        sim: SimOverrides::default(),
        placer: PlacerOptions::default(),
        baseline_policy: BaselinePolicy::default(),
        sweep: None,
        point: None,
        output_dir: output_dir.into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake(method: Method, point: Option<AxisPoint>, slo: f64) -> (Summary, Timing) {
        let spec = desk_experiment(&DeskPreset::default(), 4, method, "out").unwrap();
        let metrics = SimMetrics {
            requests_total: 10,
            requests_slo_met: (slo * 10.0) as usize,
            requests_missed: 0,
            requests_rejected: 0,
            requests_admitted: 10,
            latency_samples: 10,
            slo_attainment: slo,
            avg_throughput: 100.0,
            avg_latency: 1.0,
            decoded_tokens: 1000,
            makespan: 10.0,
            records: Vec::new(),
        };
        let summary = Summary {
            name: spec.name.clone(),
            method,
            point,
            gpu_count: 8,
            gpus_used: 8,
            instances: 4,
            partition: None,
            metrics,
            score: 0.0,
            simulations: 1,
            params: SimParams::new(1.0, 1.0, 0.05),
            spec,
        };
        (summary, Timing { placer_seconds: 0.5, simulate_seconds: 0.1 })
    }

    #[test]
    fn compare_single_method() {
        let rows = compare_methods(&[fake(Method::Maaso, None, 0.8)], None).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].slo_attainment, 0.8);
        assert_eq!(rows[0].delta_slo_attainment, 0.0);
    }

    #[test]
    fn compare_against_sr() {
        let rows = compare_methods(&[fake(Method::Maaso, None, 0.8), fake(Method::Sr, None, 0.5)], None).unwrap();
        let m = rows.iter().find(|r| r.method == Method::Maaso).unwrap();
        assert_eq!(m.baseline, Method::Sr);
        assert!((m.delta_slo_attainment - 0.3).abs() < 1e-12);
    }

    #[test]
    fn compare_rejects_bad_input() {
        assert!(compare_methods(&[], None).is_err());
        let a = AxisPoint { axis: SweepAxis::Cv, value: 2.0 };
        let b = AxisPoint { axis: SweepAxis::ClusterSize, value: 8.0 };
        let err = compare_methods(&[fake(Method::Maaso, Some(a), 0.8), fake(Method::Sr, Some(b), 0.5)], None);
        assert!(matches!(err, Err(Error::MismatchedAxes(_))));
        let c = AxisPoint { axis: SweepAxis::Cv, value: 4.0 };
        let err = compare_methods(&[fake(Method::Maaso, Some(a), 0.8), fake(Method::Sr, Some(c), 0.5)], None);
        assert!(matches!(err, Err(Error::MismatchedAxes(_))));
    }

    #[test]
    fn sweep_values_must_increase() {
        let mut spec = desk_experiment(&DeskPreset::default(), 4, Method::Sr, "out").unwrap();
        spec.sweep = Some(Sweep { axis: SweepAxis::ClusterSize, values: vec![8.0, 8.0] });
        assert!(spec.validate().is_err());
        spec.sweep = Some(Sweep { axis: SweepAxis::ClusterSize, values: vec![8.0, 16.0, 24.0] });
        spec.validate().unwrap();
        let p = spec.at(SweepAxis::ClusterSize, 16.0);
        assert_eq!(p.cluster.gpu_count, 16);
        assert!(p.sweep.is_none());
    }

    #[test]
    fn star_variant_weights_attainment() {
        let spec = desk_experiment(&DeskPreset::default(), 4, Method::MaasoStar, "out").unwrap();
        let reqs = spec.trace_requests().unwrap();
        let (p, _) = resolve_params(&spec, &reqs, &spec.profile_set()).unwrap();
        assert_eq!(p.alpha, 10.0);
        assert!(p.gamma_t > 0.0 && p.gamma_l > 0.0);
    }
}
