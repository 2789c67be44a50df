//! Desk-scale preset: two synthetic models on eight GPUs.
//!
//! The synthetic profiles give tensor parallelism a per-request speed
//! advantage at small batches and data parallelism the better aggregate
//! throughput at large ones. Profiles are fitted from noiseless samples of
//! the generating curves so the whole pipeline runs end to end.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{ClusterSpec, ModelId, ModelSpec, ParallelismStrategy};
use crate::profiler::{fit_all, sample_model, FitOptions, ProfileSample, ProfileSet, ThroughputModel};
use crate::workload::TraceConfig;

const GIB: u64 = 1 << 30;

/// Generating curve for one strategy, relative to the data-parallel `T0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCurve {
    pub strategy: ParallelismStrategy,
    pub speedup: f64,
    pub delta: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskPreset {
    pub gpu_count: u32,
    pub gpu_memory: u64,
    pub requests: usize,
    pub duration: f64,
    pub cv: f64,
    /// Data-parallel `T0` in tokens/s; sets the load relative to arrivals.
    pub base_throughput: f64,
    pub curves: Vec<SyntheticCurve>,
    pub seed: u64,
}

impl Default for DeskPreset {
    fn default() -> Self {
        Self {
            gpu_count: 8,
            gpu_memory: 32 * GIB,
            requests: 2000,
            duration: 600.0,
            cv: 2.0,
            base_throughput: 12.0,
            curves: vec![
                SyntheticCurve {
                    strategy: ParallelismStrategy::DP,
                    speedup: 1.0,
                    delta: 0.05,
                    epsilon: 1.0,
                },
                SyntheticCurve {
                    strategy: ParallelismStrategy::tp(2),
                    speedup: 2.2,
                    delta: 0.2,
                    epsilon: 1.0,
                },
                SyntheticCurve {
                    strategy: ParallelismStrategy::tp(4),
                    speedup: 3.0,
                    delta: 0.3,
                    epsilon: 1.0,
                },
                SyntheticCurve {
                    strategy: ParallelismStrategy::pp(2),
                    speedup: 1.0,
                    delta: 0.06,
                    epsilon: 1.0,
                },
            ],
            seed: 7,
        }
    }
}

/// Batch and workload points sampled for each strategy.
pub fn sample_grid() -> Vec<(u32, u32)> {
    let mut pts = Vec::new();
    for b in [1u32, 4, 16, 64, 256] {
        for w in [1u32, 2, 4, 8, 16, 32, 64, 128, 256] {
            if w <= b {
                pts.push((b, w));
            }
        }
    }
    pts
}

impl DeskPreset {
    pub fn model_ids(&self) -> Vec<ModelId> {
        vec!["lm-a".into(), "lm-b".into()]
    }

    /// `lm-b` has twice the weights, so large data-parallel batches run out
    /// of memory.
    pub fn models(&self) -> Vec<ModelSpec> {
        let kv = 64 << 20;
        [("lm-a", 14 * GIB), ("lm-b", 26 * GIB)]
            .into_iter()
            .map(|(id, weights)| ModelSpec {
                id: id.into(),
                weight_bytes: weights,
                kv_bytes_per_slot: kv,
                baseline_throughput: self
                    .curves
                    .iter()
                    .map(|c| (c.strategy, self.base_throughput * c.speedup))
                    .collect(),
                memory_per_gpu: self
                    .curves
                    .iter()
                    .map(|c| (c.strategy, weights.div_ceil(c.strategy.degree() as u64)))
                    .collect(),
            })
            .collect()
    }

    pub fn generating_curves(&self) -> Vec<ThroughputModel> {
        let mut out = Vec::new();
        for id in self.model_ids() {
            for c in &self.curves {
                out.push(ThroughputModel::new(
                    id.clone(),
                    c.strategy,
                    self.base_throughput * c.speedup,
                    c.delta,
                    c.epsilon,
                ));
            }
        }
        out
    }

    pub fn samples(&self) -> Vec<ProfileSample> {
        let grid = sample_grid();
        self.generating_curves()
            .iter()
            .flat_map(|tm| sample_model(tm, &grid))
            .collect()
    }

    pub fn profiles(&self) -> Result<ProfileSet> {
        fit_all(&self.samples(), &FitOptions::default())
    }

    /// Single-token decode time of a data-parallel instance serving one
    /// request.
    pub fn time_slice(&self, profiles: &ProfileSet) -> Result<f64> {
        let ids = self.model_ids();
        let tm = profiles.require(&ids[0], ParallelismStrategy::DP)?;
        Ok(1.0 / tm.eval_throughput(1, 1))
    }

    pub fn cluster(&self, time_slice: f64) -> ClusterSpec {
        ClusterSpec {
            gpu_count: self.gpu_count,
            gpu_memory: self.gpu_memory,
            time_slice,
        }
    }

    pub fn trace(&self, family: u8) -> Result<TraceConfig> {
        TraceConfig::preset(
            family,
            self.requests as f64 / self.duration,
            self.cv,
            self.duration,
            &self.model_ids(),
            self.seed,
        )
    }
}
