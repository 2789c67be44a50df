#![allow(dead_code)]

use hetserve::config_space::ConfigSpace;
use hetserve::model::{ClusterSpec, ModelId, ModelSpec, ParallelismStrategy, Request};
use hetserve::preset::DeskPreset;
use hetserve::profiler::ProfileSet;
use hetserve::sim::SimParams;
use hetserve::workload::{generate_trace, uniform_mix, RequestClass, TraceConfig};

/// Desk models, fitted profiles and cluster, resized to `gpus`.
pub struct World {
    pub preset: DeskPreset,
    pub models: Vec<ModelSpec>,
    pub profiles: ProfileSet,
    pub cluster: ClusterSpec,
    pub space: ConfigSpace,
}

impl World {
    pub fn desk(gpus: u32) -> Self {
        let preset = DeskPreset {
            gpu_count: gpus,
            ..DeskPreset::default()
        };
        let profiles = preset.profiles().unwrap();
        let ts = preset.time_slice(&profiles).unwrap();
        Self {
            models: preset.models(),
            cluster: preset.cluster(ts),
            preset,
            profiles,
            space: ConfigSpace::default(),
        }
    }

    pub fn with_strategies(mut self, strategies: &[ParallelismStrategy], batches: &[u32]) -> Self {
        self.space.strategies = strategies.to_vec();
        self.space.batch_grid = batches.to_vec();
        self
    }

    pub fn model_ids(&self) -> Vec<ModelId> {
        self.models.iter().map(|m| m.id.clone()).collect()
    }

    pub fn time_slice(&self) -> f64 {
        self.cluster.time_slice
    }

    /// Short trace drawn from a two-class mix, for placer-scale tests.
    pub fn mini_trace(&self, family: u8, requests: usize, rate: f64, seed: u64) -> Vec<Request> {
        let cfg = TraceConfig {
            trace_id: Some(family),
            classes: hetserve::workload::trace_family(family).unwrap(),
            rate,
            cv: 2.0,
            duration: requests as f64 / rate,
            model_mix: uniform_mix(&self.model_ids()),
            seed,
        };
        generate_trace(&cfg, self.time_slice()).unwrap()
    }

    pub fn custom_trace(&self, classes: Vec<RequestClass>, models: &[ModelId], requests: usize, rate: f64, seed: u64) -> Vec<Request> {
        let cfg = TraceConfig {
            trace_id: None,
            classes,
            rate,
            cv: 1.0,
            duration: requests as f64 / rate,
            model_mix: uniform_mix(models),
            seed,
        };
        generate_trace(&cfg, self.time_slice()).unwrap()
    }

    pub fn params(&self, requests: &[Request]) -> SimParams {
        let gamma_l = requests.iter().map(|r| r.deadline).fold(0.0, f64::max);
        SimParams::new(2000.0, gamma_l.max(1.0), self.time_slice())
    }
}

/// Random mini-scenario: a few instances of two models with random decay
/// curves and a short bursty trace with mixed deadlines.
pub struct MiniCase {
    pub instances: Vec<hetserve::model::Instance>,
    pub requests: Vec<Request>,
    pub profiles: ProfileSet,
    pub params: SimParams,
}

pub fn mini_case(seed: u64) -> MiniCase {
    use hetserve::model::{Instance, InstanceConfig};
    use hetserve::profiler::ThroughputModel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let models: Vec<ModelId> = vec!["a".into(), "b".into()];
    let strategies = [ParallelismStrategy::DP, ParallelismStrategy::tp(2)];
    let mut tms = Vec::new();
    for m in &models {
        for s in strategies {
            let t0 = rng.random_range(10.0..60.0);
            let delta = rng.random_range(0.0..0.3);
            let eps = [1.0, 2.0, 4.0][rng.random_range(0..3)];
            tms.push(ThroughputModel::new(m.clone(), s, t0, delta, eps));
        }
    }
    let profiles = ProfileSet::new(tms);
    let ts = 1.0 / profiles.require(&models[0], ParallelismStrategy::DP).unwrap().eval_throughput(1, 1);

    let mut instances = Vec::new();
    let mut gpu = 0;
    for _ in 0..rng.random_range(1..=4) {
        let s = strategies[rng.random_range(0..2)];
        let m = models[rng.random_range(0..2)].clone();
        let b = [1u32, 2, 4, 8, 16][rng.random_range(0..5)];
        instances.push(Instance::new(InstanceConfig::new(m, s, b), (gpu..gpu + s.degree()).collect()));
        gpu += s.degree();
    }

    let classes = vec![
        RequestClass::new((20, 120), (0.6, 1.2), 0.5),
        RequestClass::new((50, 300), (1.0, 3.0), 0.5),
    ];
    let n = rng.random_range(5..60);
    let cfg = TraceConfig {
        trace_id: None,
        classes,
        rate: rng.random_range(0.2..3.0),
        cv: rng.random_range(0.5..3.0),
        duration: 0.0,
        model_mix: uniform_mix(&models),
        seed,
    };
    let cfg = TraceConfig {
        duration: n as f64 / cfg.rate,
        ..cfg
    };
    let requests = generate_trace(&cfg, ts).unwrap();
    let gamma_l = requests.iter().map(|r| r.deadline).fold(1.0, f64::max);
    MiniCase {
        instances,
        requests,
        profiles,
        params: SimParams::new(500.0, gamma_l, ts),
    }
}
