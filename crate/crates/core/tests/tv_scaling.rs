use netdiag_core::dof::estimate_dof_slope;
use netdiag_core::tv::{block_pair, calibrate, effective_noise_and_rate, sample_block_channel, TvParams};
use netdiag_core::{stats, GainDistribution};

fn mean_slope(k: usize, n: u32, eps: f64, exponents: std::ops::RangeInclusive<i32>) -> (f64, f64) {
    let params = TvParams {
        epsilon: eps,
        power: 1e2,
        ..TvParams::new(k, n)
    };
    let (inst, _) = calibrate(params, GainDistribution::default(), 1000, 31).unwrap();
    let blocks = 20;
    let ch = sample_block_channel(&inst, blocks, GainDistribution::default(), 32).unwrap();
    let noises: Vec<_> = (0..blocks)
        .filter_map(|m| {
            let (first, second) = block_pair(&inst, &ch, m).unwrap();
            effective_noise_and_rate(&inst, &first, &second).ok()
        })
        .collect();
    assert!(!noises.is_empty());
    let samples: Vec<(f64, f64)> = exponents
        .map(|e| 10f64.powi(e))
        .map(|p| (p, stats::mean(&noises.iter().map(|z| z.sum_rate(p)).collect::<Vec<_>>())))
        .collect();
    let target = k as f64 * (1.0 - 3.0 * eps) * (n as f64 / (n as f64 + 1.0)).powi((k * k) as i32);
    (estimate_dof_slope(&samples).unwrap().slope, target)
}

#[test]
fn slope_reaches_dof_once_power_dominates_noise_k2_n1() {
    let (slope, target) = mean_slope(2, 1, 0.02, 16..=24);
    assert!((slope - target).abs() <= 0.01 * target, "slope {slope} target {target}");
}

#[test]
fn slope_reaches_dof_once_power_dominates_noise_k2_n2() {
    let (slope, target) = mean_slope(2, 2, 0.01, 22..=28);
    assert!((slope - target).abs() <= 0.01 * target, "slope {slope} target {target}");
}
