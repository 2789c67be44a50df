use hetserve::model::ParallelismStrategy;
use hetserve::profiler::{fit_decay_params, sample_model, FitOptions, ThroughputModel};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn rel(a: f64, b: f64) -> f64 {
    ((a - b) / b).abs()
}

#[test]
fn fitted_curve_matches_hand_value() {
    let truth = ThroughputModel::new("m", ParallelismStrategy::DP, 50.0, 0.08, 1.0);
    let pts: Vec<(u32, u32)> = [1, 2, 4, 8, 16, 32].iter().map(|&w| (32, w)).collect();
    let fit = fit_decay_params(&sample_model(&truth, &pts), &FitOptions::default()).unwrap();
    let expect = 50.0 * (1.0 - 0.08 * 17f64.ln());
    assert!((expect - 38.6668).abs() < 1e-3);
    assert!(rel(fit.eval_throughput(16, 16), expect) < 1e-9);
}

#[test]
fn noisy_samples_recover_delta() {
    let truth = ThroughputModel::new("m", ParallelismStrategy::tp(2), 100.0, 0.1, 1.0);
    let pts: Vec<(u32, u32)> = [1, 2, 3, 4, 6, 8, 12, 16, 24, 32, 48, 64]
        .iter()
        .map(|&w| (64, w))
        .collect();
    let noise = Normal::new(1.0, 0.05).unwrap();
    let mut errors: Vec<f64> = (0..100u64)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut samples = sample_model(&truth, &pts);
            for s in &mut samples {
                s.throughput *= noise.sample(&mut rng);
            }
            let fit = fit_decay_params(&samples, &FitOptions::default()).unwrap();
            rel(fit.delta, truth.delta)
        })
        .collect();
    errors.sort_by(f64::total_cmp);
    let median = (errors[49] + errors[50]) / 2.0;
    eprintln!("median relative delta error over 100 seeds: {median:.4}");
    assert!(median <= 0.15);
}

fn arb_truth() -> impl Strategy<Value = ThroughputModel> {
    (
        5.0f64..200.0,
        0.0f64..0.15,
        prop::sample::select(vec![1.0, 2.0, 4.0, 8.0]),
    )
        .prop_map(|(t0, d, e)| ThroughputModel::new("m", ParallelismStrategy::DP, t0, d, e))
}

proptest! {
    #[test]
    fn noiseless_fit_leaves_tiny_residual(truth in arb_truth()) {
        let pts: Vec<(u32, u32)> = [1, 4, 16, 64].iter().map(|&w| (64, w)).collect();
        let samples = sample_model(&truth, &pts);
        let fit = fit_decay_params(&samples, &FitOptions::default()).unwrap();
        let rss: f64 = samples
            .iter()
            .map(|s| (fit.eval_throughput(s.batch, s.workload) - s.throughput).powi(2))
            .sum();
        let scale: f64 = samples.iter().map(|s| s.throughput.powi(2)).sum();
        prop_assert!(rss <= 1e-6 * scale);
    }
}
