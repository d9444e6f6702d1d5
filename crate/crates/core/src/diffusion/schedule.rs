//! Training noise-level distributions and the sampling σ grid.
//!
//! Noise levels are drawn on a normalized scale `u ∈ [0, 1]` and mapped
//! log-linearly onto `[sigma_min, sigma_max]`, so `u = 0` is the smallest
//! noise. During adapter training `u ~ Beta(1, β)` with β decaying from
//! `beta0` toward 1, which moves the emphasis from small noise levels to a
//! uniform spread over all of them.

use serde::{Deserialize, Serialize};

use crate::numerics::Rng;
use crate::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaRange {
    sigma_min: f64,
    sigma_max: f64,
}

impl SigmaRange {
    pub const EDM_MIN: f64 = 0.002;
    pub const EDM_MAX: f64 = 80.0;

    pub fn new(sigma_min: f64, sigma_max: f64) -> Result<Self> {
        if !(sigma_min.is_finite() && sigma_max.is_finite() && 0.0 < sigma_min && sigma_min < sigma_max) {
            return Err(invalid(format!(
                "sigma range requires 0 < sigma_min < sigma_max, got ({sigma_min}, {sigma_max})"
            )));
        }
        Ok(SigmaRange { sigma_min, sigma_max })
    }

    pub fn edm() -> Self {
        SigmaRange { sigma_min: Self::EDM_MIN, sigma_max: Self::EDM_MAX }
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    /// `σ = σ_min^(1-u) · σ_max^u`.
    pub fn sigma_at(&self, u: f64) -> f64 {
        let s = self.sigma_min.powf(1.0 - u) * self.sigma_max.powf(u);
        s.clamp(self.sigma_min, self.sigma_max)
    }

    /// Inverse of [`SigmaRange::sigma_at`].
    pub fn unit_of(&self, sigma: f64) -> f64 {
        (sigma.ln() - self.sigma_min.ln()) / (self.sigma_max.ln() - self.sigma_min.ln())
    }
}

impl Default for SigmaRange {
    fn default() -> Self {
        Self::edm()
    }
}

/// Density of `Beta(1, β)`: `(1-x)^(β-1) / B(1, β)` with `B(1, β) = 1/β`.
pub fn beta_pdf(x: f64, beta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(invalid(format!("beta_pdf: x = {x} outside [0, 1]")));
    }
    if !(beta >= 1.0) {
        return Err(invalid(format!("beta_pdf: beta = {beta} must be >= 1")));
    }
    Ok(beta * (1.0 - x).powf(beta - 1.0))
}

/// CDF of `Beta(1, β)`: `1 - (1-u)^β`.
pub fn beta_cdf(u: f64, beta: f64) -> f64 {
    1.0 - (1.0 - u.clamp(0.0, 1.0)).powf(beta)
}

/// Inverse CDF of `Beta(1, β)` applied to a uniform draw `v`.
pub fn beta_inverse_cdf(v: f64, beta: f64) -> f64 {
    1.0 - (1.0 - v).powf(1.0 / beta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    beta0: f64,
    beta_current: f64,
    step: usize,
    total_steps: usize,
    decay_rate: f64,
    sigma_range: SigmaRange,
}

impl ScheduleState {
    pub const DEFAULT_BETA0: f64 = 3.0;
    pub const DEFAULT_DECAY: f64 = 6.0;

    pub fn new(beta0: f64, decay_rate: f64, total_steps: usize, sigma_range: SigmaRange) -> Result<Self> {
        if !(beta0 >= 1.0 && beta0.is_finite()) {
            return Err(invalid(format!("beta0 = {beta0} must be >= 1")));
        }
        if !(decay_rate > 0.0 && decay_rate.is_finite()) {
            return Err(invalid(format!("decay rate = {decay_rate} must be positive")));
        }
        if total_steps == 0 {
            return Err(invalid("total_steps must be positive"));
        }
        Ok(ScheduleState { beta0, beta_current: beta0, step: 0, total_steps, decay_rate, sigma_range })
    }

    /// Uniform noise-level distribution throughout (β fixed at 1).
    pub fn uniform(total_steps: usize, sigma_range: SigmaRange) -> Result<Self> {
        Self::new(1.0, Self::DEFAULT_DECAY, total_steps, sigma_range)
    }

    /// Rebuilds a state at an arbitrary step (checkpoint restore).
    pub fn at_step(mut self, step: usize) -> Result<Self> {
        if step > self.total_steps {
            return Err(invalid(format!("step {step} beyond total {}", self.total_steps)));
        }
        self.step = step;
        self.beta_current = self.beta_at(step);
        Ok(self)
    }

    /// `β(s) = 1 + (β₀ - 1) · exp(-λ s / S)`.
    pub fn beta_at(&self, step: usize) -> f64 {
        1.0 + (self.beta0 - 1.0) * (-self.decay_rate * step as f64 / self.total_steps as f64).exp()
    }

    pub fn beta0(&self) -> f64 {
        self.beta0
    }

    pub fn beta_current(&self) -> f64 {
        self.beta_current
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn decay_rate(&self) -> f64 {
        self.decay_rate
    }

    pub fn sigma_range(&self) -> SigmaRange {
        self.sigma_range
    }
}

pub fn advance_schedule(state: &ScheduleState) -> Result<ScheduleState> {
    if state.step >= state.total_steps {
        return Err(invalid(format!("schedule already at its final step {}", state.total_steps)));
    }
    let mut next = state.clone();
    next.step += 1;
    next.beta_current = next.beta_at(next.step);
    Ok(next)
}

/// Maps a uniform draw `v ∈ [0, 1)` to a noise level under `state`.
pub fn noise_level_from_uniform(state: &ScheduleState, v: f64) -> f64 {
    let u = beta_inverse_cdf(v, state.beta_current);
    state.sigma_range.sigma_at(u)
}

pub fn sample_noise_level(state: &ScheduleState, rng: &mut Rng) -> f64 {
    noise_level_from_uniform(state, rng.uniform())
}

/// Karras power grid from `σ_max` down to `σ_min`, with a trailing zero.
pub fn sigma_grid(n_steps: usize, range: SigmaRange, rho: f64) -> Result<Vec<f64>> {
    if n_steps == 0 {
        return Err(invalid("sigma_grid needs at least one step"));
    }
    if !(rho > 0.0) {
        return Err(invalid(format!("rho = {rho} must be positive")));
    }
    let (lo, hi) = (range.sigma_min.powf(1.0 / rho), range.sigma_max.powf(1.0 / rho));
    let mut grid: Vec<f64> = if n_steps == 1 {
        vec![range.sigma_max]
    } else {
        (0..n_steps)
            .map(|i| {
                if i == 0 {
                    range.sigma_max
                } else if i == n_steps - 1 {
                    range.sigma_min
                } else {
                    (hi + i as f64 / (n_steps - 1) as f64 * (lo - hi)).powf(rho)
                }
            })
            .collect()
    };
    grid.push(0.0);
    if grid.windows(2).any(|w| !(w[0] > w[1])) {
        return Err(invalid("sigma grid is not strictly decreasing"));
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Trapezoid rule over `n` intervals.
    fn trapezoid(f: impl Fn(f64) -> f64, n: usize) -> f64 {
        let h = 1.0 / n as f64;
        let mut acc = 0.5 * (f(0.0) + f(1.0));
        for i in 1..n {
            acc += f(i as f64 * h);
        }
        acc * h
    }

    #[test]
    fn beta_pdf_examples_against_quadrature() {
        // B(1, 3) by quadrature of (1-x)^2, independent of the closed form.
        let b13 = trapezoid(|x| (1.0 - x).powi(2), 100_000);
        let at_half = 0.25 / b13;
        let at_zero = 1.0 / b13;
        assert!((at_half - 0.75).abs() < 1e-8);
        assert!((at_zero - 3.0).abs() < 1e-8);
        assert!((beta_pdf(0.5, 3.0).unwrap() - at_half).abs() < 1e-8);
        assert!((beta_pdf(0.0, 3.0).unwrap() - at_zero).abs() < 1e-8);
        for x in [0.0, 0.3, 1.0] {
            assert_eq!(beta_pdf(x, 1.0).unwrap(), 1.0);
        }
    }

    #[test]
    fn beta_pdf_integrates_to_one() {
        for beta in [1.0, 1.5, 3.0, 10.0] {
            let total = trapezoid(|x| beta_pdf(x, beta).unwrap(), 10_000);
            assert!((total - 1.0).abs() <= 1e-4, "beta {beta}: {total}");
        }
    }

    #[test]
    fn beta_pdf_rejects_bad_arguments() {
        assert!(beta_pdf(-0.1, 2.0).is_err());
        assert!(beta_pdf(1.1, 2.0).is_err());
        assert!(beta_pdf(0.5, 0.5).is_err());
    }

    #[test]
    fn decay_examples() {
        let range = SigmaRange::edm();
        let s = ScheduleState::new(3.0, 6.0, 100, range).unwrap();
        assert_eq!(s.beta_current(), 3.0);
        let mut cur = s.clone();
        for _ in 0..100 {
            cur = advance_schedule(&cur).unwrap();
        }
        assert!((cur.beta_current() - (1.0 + 2.0 * (-6.0f64).exp())).abs() < 1e-15);
        assert!(cur.beta_current() < 1.005);
        assert!(advance_schedule(&cur).is_err());

        let mut flat = ScheduleState::new(1.0, 6.0, 10, range).unwrap();
        for _ in 0..10 {
            assert_eq!(flat.beta_current(), 1.0);
            flat = advance_schedule(&flat).unwrap();
        }
        assert_eq!(flat.beta_current(), 1.0);
    }

    #[test]
    fn boundary_draw_maps_to_sigma_min() {
        let s = ScheduleState::new(3.0, 6.0, 10, SigmaRange::edm()).unwrap();
        assert_eq!(noise_level_from_uniform(&s, 0.0), SigmaRange::EDM_MIN);
    }

    #[test]
    fn sigma_grid_examples() {
        let r = SigmaRange::new(1.0, 3.0).unwrap();
        assert_eq!(sigma_grid(1, r, 7.0).unwrap(), vec![3.0, 0.0]);
        let g = sigma_grid(3, r, 1.0).unwrap();
        assert_eq!(g.len(), 4);
        for (a, b) in g.iter().zip([3.0, 2.0, 1.0, 0.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let g = sigma_grid(50, SigmaRange::edm(), 7.0).unwrap();
        assert_eq!(g[0], 80.0);
        assert_eq!(g[49], 0.002);
        assert_eq!(g[50], 0.0);
        assert!(g.windows(2).all(|w| w[0] > w[1]));
        assert!(sigma_grid(0, r, 7.0).is_err());
    }

    #[test]
    fn sigma_range_validation() {
        assert!(SigmaRange::new(0.0, 1.0).is_err());
        assert!(SigmaRange::new(2.0, 1.0).is_err());
        let r = SigmaRange::edm();
        assert!((r.unit_of(r.sigma_at(0.37)) - 0.37).abs() < 1e-12);
    }
}
