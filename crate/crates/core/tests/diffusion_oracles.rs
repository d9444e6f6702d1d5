//! Sampler and schedule behavior checked against closed-form oracles.

use dancelab_core::diffusion::{
    cfg_derivative, integrate, ode_derivative, sample, sample_noise_level, sigma_grid, DenoiserPair, GuidanceConfig,
    ScheduleState, SigmaRange, Unconditional, DEFAULT_RHO,
};
use dancelab_core::numerics::{Rng, Tensor};

/// Two-sided Kolmogorov–Smirnov statistic of `samples` against `cdf`.
fn ks_statistic(mut samples: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn beta3_draws_follow_closed_form_cdf() {
    let range = SigmaRange::edm();
    let state = ScheduleState::new(3.0, 6.0, 1000, range).unwrap();
    let mut rng = Rng::seed_from(2024);
    let u: Vec<f64> = (0..100_000).map(|_| range.unit_of(sample_noise_level(&state, &mut rng))).collect();
    // ∫₀ᵘ 3(1-x)² dx = 1 - (1-u)³
    let ks = ks_statistic(u, |x| 1.0 - (1.0 - x).powi(3));
    assert!(ks <= 0.02, "KS = {ks}");
}

#[test]
fn beta1_gives_log_uniform_sigma() {
    let range = SigmaRange::edm();
    let state = ScheduleState::uniform(1000, range).unwrap();
    let mut rng = Rng::seed_from(77);
    let (lo, hi) = (range.sigma_min().ln(), range.sigma_max().ln());
    let logs: Vec<f64> = (0..100_000).map(|_| sample_noise_level(&state, &mut rng).ln()).collect();
    assert!(logs.iter().all(|&l| l >= lo - 1e-12 && l <= hi + 1e-12));
    let ks = ks_statistic(logs, |l| ((l - lo) / (hi - lo)).clamp(0.0, 1.0));
    assert!(ks <= 0.02, "KS = {ks}");
}

fn gaussian_posterior_mean(mu: f64, s: f64) -> impl Fn(&Tensor<f64>, f64) -> dancelab_core::Result<Tensor<f64>> {
    move |x: &Tensor<f64>, sigma: f64| {
        let (s2, v2) = (s * s, sigma * sigma);
        Ok(x.map_values(|xv| (s2 * xv + v2 * mu) / (s2 + v2)))
    }
}

trait MapValues {
    fn map_values(&self, f: impl Fn(f64) -> f64) -> Tensor<f64>;
}

impl MapValues for Tensor<f64> {
    fn map_values(&self, f: impl Fn(f64) -> f64) -> Tensor<f64> {
        Tensor::new(self.shape().to_vec(), self.data().iter().map(|&v| f(v)).collect()).unwrap()
    }
}

#[test]
fn gaussian_oracle_recovers_data_moments() {
    let grid = sigma_grid(50, SigmaRange::edm(), DEFAULT_RHO).unwrap();
    let d = Unconditional(gaussian_posterior_mean(0.0, 1.0));
    let mut rng = Rng::seed_from(5);
    let out: Tensor<f64> = sample(&d, &[2000], &grid, GuidanceConfig::new(1.0).unwrap(), &mut rng).unwrap();
    let n = out.numel() as f64;
    let mean = out.data().iter().sum::<f64>() / n;
    let var = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!(mean.abs() <= 0.05, "mean {mean}");
    assert!((0.9..=1.1).contains(&var), "variance {var}");
}

#[test]
fn single_point_oracle_reaches_target() {
    let target = Tensor::from_f64(&[4], &[0.3, -1.2, 0.7, 0.05]).unwrap();
    let t2 = target.clone();
    let d = Unconditional(move |_: &Tensor<f64>, _: f64| Ok(t2.clone()));
    for steps in [30, 50, 80] {
        let grid = sigma_grid(steps, SigmaRange::edm(), DEFAULT_RHO).unwrap();
        let mut rng = Rng::seed_from(steps as u64);
        let out: Tensor<f64> = sample(&d, &[4], &grid, GuidanceConfig::default(), &mut rng).unwrap();
        assert!(out.max_abs_diff(&target).unwrap() <= 1e-3);
    }
}

#[test]
fn euler_error_shrinks_with_refinement() {
    // Single data point: the exact trajectory is linear in σ, so Euler is
    // exact up to rounding at every resolution.
    let target = Tensor::from_f64(&[3], &[0.5, -0.25, 1.0]).unwrap();
    let t2 = target.clone();
    let point = Unconditional(move |_: &Tensor<f64>, _: f64| Ok(t2.clone()));
    let x0 = Tensor::from_f64(&[3], &[60.0, -35.0, 12.0]).unwrap();
    let mut point_errors = Vec::new();
    for steps in [10, 20, 40, 80] {
        let grid = sigma_grid(steps, SigmaRange::edm(), DEFAULT_RHO).unwrap();
        let states = integrate(&point, x0.clone(), &grid, GuidanceConfig::unguided()).unwrap();
        point_errors.push(states.last().unwrap().max_abs_diff(&target).unwrap());
    }
    for w in point_errors.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "{point_errors:?}");
    }
    assert!(point_errors.iter().all(|&e| e <= 1e-12));

    // Gaussian data N(μ, s²): x(σ) = μ + (x₀ − μ)·√(s² + σ²)/√(s² + σ_max²).
    let (mu, s) = (0.4, 0.7);
    let gauss = Unconditional(gaussian_posterior_mean(mu, s));
    let x0 = Tensor::from_f64(&[3], &[50.0, -20.0, 5.0]).unwrap();
    let smax = SigmaRange::EDM_MAX;
    let exact: Vec<f64> = x0.data().iter().map(|&x| mu + (x - mu) * s / (s * s + smax * smax).sqrt()).collect();
    let mut errors = Vec::new();
    for steps in [10, 20, 40, 80] {
        let grid = sigma_grid(steps, SigmaRange::edm(), DEFAULT_RHO).unwrap();
        let states = integrate(&gauss, x0.clone(), &grid, GuidanceConfig::unguided()).unwrap();
        let last = states.last().unwrap();
        let err = last.data().iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        errors.push(err);
    }
    assert!(errors.windows(2).all(|w| w[1] < w[0]), "{errors:?}");
}

#[test]
fn unguided_trajectory_equals_conditional_only_bitwise() {
    let cond = |x: &Tensor<f64>, sigma: f64| {
        Ok(Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| (v * 0.3).tanh() + 0.1 * sigma.ln()).collect())
            .unwrap())
    };
    let uncond = |x: &Tensor<f64>, _: f64| Ok(x.map_values(|v| -v));
    let pair = DenoiserPair { cond, uncond };
    let grid = sigma_grid(25, SigmaRange::edm(), DEFAULT_RHO).unwrap();
    let mut rng = Rng::seed_from(1);
    let x0: Tensor<f64> = dancelab_core::diffusion::initial_noise(&[16], grid[0], &mut rng).unwrap();
    let guided = integrate(&pair, x0.clone(), &grid, GuidanceConfig::new(1.0).unwrap()).unwrap();

    let mut x = x0;
    let mut manual = vec![x.clone()];
    for w in grid.windows(2) {
        let d = ode_derivative(&cond(&x, w[0]).unwrap(), &x, w[0]).unwrap();
        let h = w[1] - w[0];
        x = Tensor::new(x.shape().to_vec(), x.data().iter().zip(d.data()).map(|(a, b)| a + h * b).collect()).unwrap();
        manual.push(x.clone());
    }
    assert_eq!(guided.len(), manual.len());
    for (a, b) in guided.iter().zip(&manual) {
        let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }

    let worked = cfg_derivative(
        &Tensor::<f64>::from_f64(&[1], &[2.0]).unwrap(),
        &Tensor::<f64>::from_f64(&[1], &[1.0]).unwrap(),
        &Tensor::<f64>::from_f64(&[1], &[0.0]).unwrap(),
        1.0,
        GuidanceConfig::new(6.0).unwrap(),
    )
    .unwrap();
    assert_eq!(worked.data(), &[-7.0]);
}

#[test]
fn sampling_is_seed_deterministic() {
    let d = Unconditional(gaussian_posterior_mean(0.2, 0.5));
    let grid = sigma_grid(20, SigmaRange::edm(), DEFAULT_RHO).unwrap();
    let run = |seed| {
        let mut rng = Rng::seed_from(seed);
        sample::<f64, _>(&d, &[64], &grid, GuidanceConfig::default(), &mut rng).unwrap()
    };
    assert_eq!(run(3), run(3));
    assert_ne!(run(3), run(4));
}

#[test]
fn null_condition_for_both_branches_is_gamma_independent() {
    let f = gaussian_posterior_mean(0.1, 0.8);
    let both = DenoiserPair { cond: &f, uncond: &f };
    let grid = sigma_grid(20, SigmaRange::edm(), DEFAULT_RHO).unwrap();
    let x0 = Tensor::from_f64(&[3], &[10.0, -40.0, 3.0]).unwrap();
    let a = integrate(&both, x0.clone(), &grid, GuidanceConfig::new(1.0).unwrap()).unwrap();
    let b = integrate(&both, x0, &grid, GuidanceConfig::new(6.0).unwrap()).unwrap();
    let diff = a.last().unwrap().max_abs_diff(b.last().unwrap()).unwrap();
    assert!(diff < 1e-9, "{diff}");
}
