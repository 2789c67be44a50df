//! Throughput decay model and its fit from sparse profiling samples.
//!
//! The per-request decode rate of an instance with batch cap `B` under
//! workload level `W` is
//!
//! ```text
//! F(B, W) = T0 * max(floor, 1 - delta * ln(epsilon + min(B, W)))
//! ```
//!
//! so the rate decays logarithmically as requests are admitted and stops
//! decaying once the batch is full. The aggregate instance rate is
//! `min(B, W) * F(B, W)`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{InstanceConfig, ModelId, ParallelismStrategy};

pub const DEFAULT_FLOOR: f64 = 0.05;
pub const DEFAULT_EPSILON_GRID: [f64; 4] = [1.0, 2.0, 4.0, 8.0];

fn default_floor() -> f64 {
    DEFAULT_FLOOR
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputModel {
    pub model: ModelId,
    pub strategy: ParallelismStrategy,
    /// Tokens/s.
    pub t0: f64,
    pub delta: f64,
    pub epsilon: f64,
    /// Lower clamp on the decay factor, as a fraction of `t0`.
    #[serde(default = "default_floor")]
    pub floor: f64,
}

impl ThroughputModel {
    pub fn new(model: impl Into<ModelId>, strategy: ParallelismStrategy, t0: f64, delta: f64, epsilon: f64) -> Self {
        Self {
            model: model.into(),
            strategy,
            t0,
            delta,
            epsilon,
            floor: DEFAULT_FLOOR,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.t0 > 0.0
            && self.t0.is_finite()
            && self.delta >= 0.0
            && self.epsilon >= 1.0
            && self.floor > 0.0
            && self.floor <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "throughput model {}/{} violates T0 > 0, delta >= 0, epsilon >= 1, floor in (0, 1]",
                self.model, self.strategy
            )))
        }
    }

    /// Per-request decode rate in tokens/s. `workload == 0` is treated as 1.
    pub fn eval_throughput(&self, batch: u32, workload: u32) -> f64 {
        let w = batch.min(workload.max(1)) as f64;
        let factor = 1.0 - self.delta * (self.epsilon + w).ln();
        self.t0 * factor.max(self.floor)
    }

    /// Per-request rate with the batch full; the slowest rate the instance
    /// can deliver.
    pub fn saturated(&self, batch: u32) -> f64 {
        self.eval_throughput(batch, batch)
    }

    /// Aggregate tokens/s of a full instance.
    pub fn saturated_aggregate(&self, batch: u32) -> f64 {
        batch as f64 * self.saturated(batch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSample {
    pub model: ModelId,
    pub strategy: ParallelismStrategy,
    pub batch: u32,
    pub workload: u32,
    pub throughput: f64,
}

impl ProfileSample {
    pub fn effective_workload(&self) -> u32 {
        self.batch.min(self.workload)
    }
}

/// Fitted models keyed by `(model, strategy)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProfileSet {
    models: BTreeMap<(ModelId, ParallelismStrategy), ThroughputModel>,
}

impl ProfileSet {
    pub fn new(models: impl IntoIterator<Item = ThroughputModel>) -> Self {
        Self {
            models: models
                .into_iter()
                .map(|m| ((m.model.clone(), m.strategy), m))
                .collect(),
        }
    }

    pub fn get(&self, model: &ModelId, strategy: ParallelismStrategy) -> Option<&ThroughputModel> {
        self.models.get(&(model.clone(), strategy))
    }

    pub fn require(&self, model: &ModelId, strategy: ParallelismStrategy) -> Result<&ThroughputModel> {
        self.get(model, strategy).ok_or_else(|| Error::MissingProfile {
            model: model.clone(),
            strategy,
        })
    }

    pub fn for_config(&self, cfg: &InstanceConfig) -> Result<&ThroughputModel> {
        self.require(&cfg.model, cfg.strategy)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ThroughputModel> {
        self.models.values()
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn has_model(&self, model: &ModelId) -> bool {
        self.models.keys().any(|(m, _)| m == model)
    }

    pub fn to_vec(&self) -> Vec<ThroughputModel> {
        self.models.values().cloned().collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let models: Vec<ThroughputModel> = crate::io::read_json(path)?;
        for m in &models {
            m.validate()?;
        }
        Ok(Self::new(models))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, &self.to_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub epsilon_grid: Vec<f64>,
    pub floor: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            epsilon_grid: DEFAULT_EPSILON_GRID.to_vec(),
            floor: DEFAULT_FLOOR,
        }
    }
}

/// Minimum number of samples, each with a distinct effective workload.
pub const MIN_FIT_SAMPLES: usize = 3;

struct LineFit {
    intercept: f64,
    slope: f64,
    rss: f64,
}

/// Ordinary least squares of `y = a + b x` with `b <= 0` enforced.
fn fit_line(xs: &[f64], ys: &[f64]) -> LineFit {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let mut slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    if slope > 0.0 {
        // Throughput never grows with load; the constrained optimum sits on
        // the boundary.
        slope = 0.0;
    }
    let intercept = my - slope * mx;
    let rss = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    LineFit { intercept, slope, rss }
}

/// Fits `(T0, delta, epsilon)` for one `(model, strategy)`.
///
/// For a fixed epsilon the decay function is linear in `ln(epsilon + W)`
/// with intercept `T0` and slope `-T0 * delta`, so each grid point is solved
/// exactly by linear least squares; the epsilon with the smallest residual
/// wins (ties keep the smaller epsilon).
pub fn fit_decay_params(samples: &[ProfileSample], opts: &FitOptions) -> Result<ThroughputModel> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("no profile samples"))?;
    let (model, strategy) = (first.model.clone(), first.strategy);
    if samples.len() < MIN_FIT_SAMPLES {
        return Err(Error::InsufficientSamples {
            model,
            strategy,
            got: samples.len(),
            need: MIN_FIT_SAMPLES,
        });
    }
    for s in samples {
        if s.model != model || s.strategy != strategy {
            return Err(Error::invalid(format!(
                "samples mix {model}/{strategy} with {}/{}",
                s.model, s.strategy
            )));
        }
        if !(s.throughput > 0.0 && s.throughput.is_finite()) || s.workload == 0 || s.batch == 0 {
            return Err(Error::invalid(format!(
                "sample for {model}/{strategy} needs throughput > 0, batch >= 1 and workload >= 1"
            )));
        }
    }
    let mut distinct: Vec<u32> = samples.iter().map(ProfileSample::effective_workload).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < MIN_FIT_SAMPLES {
        return Err(Error::IllConditioned {
            model,
            strategy,
            reason: format!(
                "only {} distinct effective workload level(s)",
                distinct.len()
            ),
        });
    }
    if opts.epsilon_grid.is_empty() || opts.epsilon_grid.iter().any(|e| !(*e >= 1.0)) {
        return Err(Error::invalid("epsilon grid must be non-empty with values >= 1"));
    }

    let ys: Vec<f64> = samples.iter().map(|s| s.throughput).collect();
    let mut best: Option<(f64, LineFit)> = None;
    for &eps in &opts.epsilon_grid {
        let xs: Vec<f64> = samples
            .iter()
            .map(|s| (eps + s.effective_workload() as f64).ln())
            .collect();
        let fit = fit_line(&xs, &ys);
        if fit.intercept <= 0.0 {
            continue;
        }
        if best.as_ref().is_none_or(|(_, b)| fit.rss < b.rss) {
            best = Some((eps, fit));
        }
    }
    let (epsilon, fit) = best.ok_or_else(|| Error::IllConditioned {
        model: model.clone(),
        strategy,
        reason: "no epsilon yields a positive baseline throughput".into(),
    })?;
    Ok(ThroughputModel {
        model,
        strategy,
        t0: fit.intercept,
        delta: -fit.slope / fit.intercept,
        epsilon,
        floor: opts.floor,
    })
}

/// Groups samples by `(model, strategy)` and fits each group.
pub fn fit_all(samples: &[ProfileSample], opts: &FitOptions) -> Result<ProfileSet> {
    let mut groups: BTreeMap<(ModelId, ParallelismStrategy), Vec<ProfileSample>> = BTreeMap::new();
    for s in samples {
        groups
            .entry((s.model.clone(), s.strategy))
            .or_default()
            .push(s.clone());
    }
    let fitted = groups
        .values()
        .map(|g| fit_decay_params(g, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(ProfileSet::new(fitted))
}

/// Samples a known model on a `(batch, workload)` grid; used to build
/// synthetic profile sets.
pub fn sample_model(tm: &ThroughputModel, points: &[(u32, u32)]) -> Vec<ProfileSample> {
    points
        .iter()
        .map(|&(batch, workload)| ProfileSample {
            model: tm.model.clone(),
            strategy: tm.strategy,
            batch,
            workload,
            throughput: tm.eval_throughput(batch, workload),
        })
        .collect()
}

pub fn load_samples(path: &Path) -> Result<Vec<ProfileSample>> {
    crate::io::read_csv(path)
}

pub fn save_samples(path: &Path, samples: &[ProfileSample]) -> Result<()> {
    crate::io::write_csv(path, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tm(t0: f64, delta: f64, eps: f64) -> ThroughputModel {
        ThroughputModel::new("m", ParallelismStrategy::DP, t0, delta, eps)
    }

    #[test]
    fn zero_delta_is_flat() {
        let m = tm(42.0, 0.0, 1.0);
        for (b, w) in [(1, 1), (8, 3), (256, 256), (4, 1000)] {
            assert_eq!(m.eval_throughput(b, w), 42.0);
        }
    }

    #[test]
    fn workload_is_truncated_at_batch() {
        let m = tm(50.0, 0.08, 1.0);
        assert_eq!(m.eval_throughput(8, 8), m.eval_throughput(8, 512));
        assert_eq!(m.eval_throughput(8, 0), m.eval_throughput(8, 1));
    }

    #[test]
    fn known_value_at_sixteen() {
        // ln(17) = 2.833213344056216
        let expected = 50.0 * (1.0 - 0.08 * 2.833213344056216);
        let m = tm(50.0, 0.08, 1.0);
        assert!((m.eval_throughput(16, 16) - expected).abs() < 1e-12);
        assert!((expected - 38.667).abs() < 1e-3);

        let samples = sample_model(&m, &[(256, 1), (256, 4), (256, 16), (256, 64)]);
        let fitted = fit_decay_params(&samples, &FitOptions::default()).unwrap();
        assert!((fitted.eval_throughput(16, 16) - expected).abs() < 1e-6);
    }

    #[test]
    fn floor_clamps_far_outside_fit() {
        let m = tm(10.0, 0.5, 1.0);
        assert!((m.eval_throughput(256, 256) - 10.0 * DEFAULT_FLOOR).abs() < 1e-12);
    }

    #[test]
    fn noiseless_round_trip() {
        let truth = tm(100.0, 0.1, 1.0);
        let samples = sample_model(&truth, &[(64, 1), (64, 4), (64, 16), (64, 64)]);
        let fit = fit_decay_params(&samples, &FitOptions::default()).unwrap();
        assert!((fit.t0 - 100.0).abs() / 100.0 < 0.01);
        assert!((fit.delta - 0.1).abs() / 0.1 < 0.01);
        assert_eq!(fit.epsilon, 1.0);
        let rss: f64 = samples
            .iter()
            .map(|s| (s.throughput - fit.eval_throughput(s.batch, s.workload)).powi(2))
            .sum();
        let scale: f64 = samples.iter().map(|s| s.throughput.powi(2)).sum();
        assert!(rss <= 1e-6 * scale);
    }

    #[test]
    fn too_few_samples() {
        let truth = tm(100.0, 0.1, 1.0);
        let samples = sample_model(&truth, &[(64, 1), (64, 4)]);
        assert!(matches!(
            fit_decay_params(&samples, &FitOptions::default()),
            Err(Error::InsufficientSamples { got: 2, .. })
        ));
    }

    #[test]
    fn degenerate_workloads() {
        let truth = tm(100.0, 0.1, 1.0);
        // W beyond B collapses to the same effective level.
        let samples = sample_model(&truth, &[(4, 4), (4, 8), (4, 16), (4, 64)]);
        assert!(matches!(
            fit_decay_params(&samples, &FitOptions::default()),
            Err(Error::IllConditioned { .. })
        ));
    }

    #[test]
    fn mixed_groups_are_rejected() {
        let mut samples = sample_model(&tm(100.0, 0.1, 1.0), &[(64, 1), (64, 4), (64, 16)]);
        samples[1].strategy = ParallelismStrategy::tp(2);
        assert!(fit_decay_params(&samples, &FitOptions::default()).is_err());
    }

    #[test]
    fn increasing_throughput_fits_flat() {
        let samples: Vec<ProfileSample> = [(1, 10.0), (2, 11.0), (4, 12.0)]
            .into_iter()
            .map(|(w, t)| ProfileSample {
                model: "m".into(),
                strategy: ParallelismStrategy::DP,
                batch: 8,
                workload: w,
                throughput: t,
            })
            .collect();
        let fit = fit_decay_params(&samples, &FitOptions::default()).unwrap();
        assert_eq!(fit.delta, 0.0);
        assert!((fit.t0 - 11.0).abs() < 1e-12);
    }

    fn arb_model() -> impl Strategy<Value = ThroughputModel> {
        (1.0f64..200.0, 0.0f64..0.3, prop::sample::select(vec![1.0, 2.0, 4.0, 8.0]))
            .prop_map(|(t0, d, e)| tm(t0, d, e))
    }

    proptest! {
        #[test]
        fn non_increasing_in_workload(m in arb_model(), b in 1u32..=256, w in 0u32..600) {
            prop_assert!(m.eval_throughput(b, w + 1) <= m.eval_throughput(b, w));
        }

        #[test]
        fn constant_beyond_batch(m in arb_model(), b in 1u32..=256, extra in 0u32..600) {
            prop_assert_eq!(m.eval_throughput(b, b + extra), m.eval_throughput(b, b));
        }

        #[test]
        fn non_increasing_in_batch_when_saturated(m in arb_model(), b in 1u32..256, w in 256u32..600) {
            prop_assert!(m.eval_throughput(b + 1, w) <= m.eval_throughput(b, w));
        }
    }
}
