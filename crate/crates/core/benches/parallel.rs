//! Sequential against rayon execution for the placer's independent work.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hetserve::distributor::PolicySpec;
use hetserve::experiment::{desk_experiment, resolve_params};
use hetserve::par::{self, Execution};
use hetserve::placer::{Method, Placer, PlacerOptions};
use hetserve::preset::DeskPreset;
use hetserve::sim::simulate;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

const POLICY: PolicySpec = PolicySpec::SloAware {
    split: None,
    protection: true,
};

fn placer_benches(c: &mut Criterion) {
    let preset = DeskPreset {
        requests: 600,
        duration: 180.0,
        ..DeskPreset::default()
    };
    let spec = desk_experiment(&preset, 4, Method::Maaso, "unused").unwrap();
    let profiles = spec.profile_set();
    let requests = spec.trace_requests().unwrap();
    let (params, _) = resolve_params(&spec, &requests, &profiles).unwrap();

    let mut group = c.benchmark_group("placer");
    group.sample_size(10);
    for (name, exec) in MODES {
        let opts = PlacerOptions {
            execution: exec,
            ..PlacerOptions::default()
        };
        let placer = Placer::new(&spec.models, &spec.space, &profiles, &spec.cluster, &params, &opts);
        group.bench_with_input(BenchmarkId::new("deploy_instances", name), &exec, |b, _| {
            b.iter(|| black_box(placer.deploy_instances(&requests, spec.cluster.gpu_count, &POLICY, false).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("homogeneous_search", name), &exec, |b, _| {
            b.iter(|| black_box(placer.baseline_homogeneous(&requests, &POLICY).unwrap()))
        });
    }
    group.finish();

    // A batch of independent replays, as a sweep would run them.
    let opts = PlacerOptions::default();
    let placer = Placer::new(&spec.models, &spec.space, &profiles, &spec.cluster, &params, &opts);
    let table = placer.deploy_instances(&requests, spec.cluster.gpu_count, &POLICY, false).unwrap();
    let deployments: Vec<_> = table.instances.iter().filter(|d| !d.is_empty()).cloned().collect();
    let policy = POLICY.build();
    let mut group = c.benchmark_group("simulate_batch");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(name, |b| {
            b.iter(|| {
                black_box(par::map(exec, &deployments, |d| {
                    simulate(d, &requests, policy.as_ref(), &profiles, &params).unwrap().slo_attainment
                }))
            })
        });
    }
    group.finish();
}

criterion_group!(benches, placer_benches);
criterion_main!(benches);
