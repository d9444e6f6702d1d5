//! Denoiser loss, probability-flow derivative, guidance and Euler sampling.

use serde::{Deserialize, Serialize};

use crate::numerics::{Real, Rng, Tape, Tensor, Var};
use crate::{invalid, Result};

/// Classifier-free guidance scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    gamma: f64,
}

impl GuidanceConfig {
    pub const DEFAULT_GAMMA: f64 = 6.0;

    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma >= 1.0 && gamma.is_finite()) {
            return Err(invalid(format!("guidance scale {gamma} must be >= 1")));
        }
        Ok(GuidanceConfig { gamma })
    }

    /// No guidance: the conditional branch alone.
    pub fn unguided() -> Self {
        GuidanceConfig { gamma: 1.0 }
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig { gamma: Self::DEFAULT_GAMMA }
    }
}

/// A denoiser with a conditional and an unconditional branch that share
/// parameters.
pub trait GuidedDenoiser<T: Real> {
    fn denoise_cond(&self, x: &Tensor<T>, sigma: f64) -> Result<Tensor<T>>;
    fn denoise_uncond(&self, x: &Tensor<T>, sigma: f64) -> Result<Tensor<T>>;
}

/// Adapts two closures into a [`GuidedDenoiser`].
pub struct DenoiserPair<C, U> {
    pub cond: C,
    pub uncond: U,
}

impl<T, C, U> GuidedDenoiser<T> for DenoiserPair<C, U>
where
    T: Real,
    C: Fn(&Tensor<T>, f64) -> Result<Tensor<T>>,
    U: Fn(&Tensor<T>, f64) -> Result<Tensor<T>>,
{
    fn denoise_cond(&self, x: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
        (self.cond)(x, sigma)
    }

    fn denoise_uncond(&self, x: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
        (self.uncond)(x, sigma)
    }
}

/// Both branches are the same function.
pub struct Unconditional<F>(pub F);

impl<T, F> GuidedDenoiser<T> for Unconditional<F>
where
    T: Real,
    F: Fn(&Tensor<T>, f64) -> Result<Tensor<T>>,
{
    fn denoise_cond(&self, x: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
        (self.0)(x, sigma)
    }

    fn denoise_uncond(&self, x: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
        (self.0)(x, sigma)
    }
}

fn batch_size(shape: &[usize]) -> usize {
    if shape.len() >= 2 {
        shape[0]
    } else {
        1
    }
}

/// `‖D(y + n; σ) − y‖²`: squared error summed per item, averaged over the
/// leading batch axis (a rank-1 `y` is a single item).
pub fn edm_loss<T: Real>(
    denoiser: impl Fn(&Tensor<T>, f64) -> Result<Tensor<T>>,
    y: &Tensor<T>,
    sigma: f64,
    noise: &Tensor<T>,
) -> Result<T> {
    let noisy = y.add(noise)?;
    let denoised = denoiser(&noisy, sigma)?;
    let err = denoised.sub(y)?;
    let total: T = err.data().iter().map(|&e| e * e).sum();
    Ok(total / T::of_usize(batch_size(y.shape())))
}

/// Tape version of [`edm_loss`] on already-denoised values.
pub fn edm_loss_on_tape<T: Real>(tape: &Tape<T>, denoised: Var, target: Var) -> Result<Var> {
    let shape = tape.shape(target);
    let err = tape.sub(denoised, target)?;
    let sq = tape.square(err)?;
    let total = tape.sum(sq)?;
    Ok(tape.scale(total, T::one() / T::of_usize(batch_size(&shape)))?)
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid(format!("sigma = {sigma} must be positive")));
    }
    Ok(())
}

/// `dx/dσ = −(D − x)/σ`.
pub fn ode_derivative<T: Real>(denoised: &Tensor<T>, x: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
    check_sigma(sigma)?;
    let s = T::of(sigma);
    let diff = denoised.sub(x)?;
    Ok(diff.map(|d| -(d / s)))
}

/// Guided derivative `−γ(D_c − x)/σ + (γ−1)(D_u − x)/σ`.
///
/// At `γ = 1` the unconditional term has zero weight and the result is
/// exactly [`ode_derivative`] of the conditional branch.
pub fn cfg_derivative<T: Real>(
    d_cond: &Tensor<T>,
    d_uncond: &Tensor<T>,
    x: &Tensor<T>,
    sigma: f64,
    g: GuidanceConfig,
) -> Result<Tensor<T>> {
    check_sigma(sigma)?;
    if g.gamma == 1.0 {
        // Shape agreement is still part of the contract.
        d_uncond.sub(x)?;
        return ode_derivative(d_cond, x, sigma);
    }
    let s = T::of(sigma);
    let gamma = T::of(g.gamma);
    let c = d_cond.sub(x)?;
    let u = d_uncond.sub(x)?;
    let out: Vec<T> =
        c.data().iter().zip(u.data()).map(|(&c, &u)| -(gamma * (c / s)) + (gamma - T::one()) * (u / s)).collect();
    Ok(Tensor::new(x.shape().to_vec(), out)?)
}

fn check_grid(sigmas: &[f64]) -> Result<()> {
    if sigmas.len() < 2 {
        return Err(invalid("sigma grid needs at least two entries"));
    }
    if sigmas.windows(2).any(|w| !(w[0] > w[1])) {
        return Err(invalid("sigma grid must be strictly decreasing"));
    }
    if *sigmas.last().unwrap() != 0.0 {
        return Err(invalid("sigma grid must end at zero"));
    }
    Ok(())
}

/// Euler integration of the guided probability-flow ODE from `x_init`
/// (already scaled to `sigmas[0]`). Returns every state, initial included.
pub fn integrate<T: Real, D: GuidedDenoiser<T> + ?Sized>(
    denoiser: &D,
    x_init: Tensor<T>,
    sigmas: &[f64],
    g: GuidanceConfig,
) -> Result<Vec<Tensor<T>>> {
    check_grid(sigmas)?;
    let mut states = Vec::with_capacity(sigmas.len());
    let mut x = x_init;
    for w in sigmas.windows(2) {
        let (sigma, next) = (w[0], w[1]);
        let d_cond = denoiser.denoise_cond(&x, sigma)?;
        let deriv = if g.gamma == 1.0 {
            ode_derivative(&d_cond, &x, sigma)?
        } else {
            let d_uncond = denoiser.denoise_uncond(&x, sigma)?;
            cfg_derivative(&d_cond, &d_uncond, &x, sigma, g)?
        };
        let h = T::of(next - sigma);
        let stepped: Vec<T> = x.data().iter().zip(deriv.data()).map(|(&xv, &dv)| xv + h * dv).collect();
        let next_x = Tensor::new(x.shape().to_vec(), stepped)?;
        states.push(std::mem::replace(&mut x, next_x));
    }
    states.push(x);
    Ok(states)
}

/// Draws `x ~ N(0, σ_max² I)` of the given shape.
pub fn initial_noise<T: Real>(shape: &[usize], sigma_max: f64, rng: &mut Rng) -> Result<Tensor<T>> {
    Ok(Tensor::from_fn(shape, |_| T::of(sigma_max * rng.normal()))?)
}

/// Generates one batch by guided Euler sampling over `sigmas`.
pub fn sample<T: Real, D: GuidedDenoiser<T> + ?Sized>(
    denoiser: &D,
    shape: &[usize],
    sigmas: &[f64],
    g: GuidanceConfig,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    check_grid(sigmas)?;
    let x = initial_noise(shape, sigmas[0], rng)?;
    let mut states = integrate(denoiser, x, sigmas, g)?;
    Ok(states.pop().expect("integrate returns at least the initial state"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[data.len()], data).unwrap()
    }

    #[test]
    fn loss_examples() {
        let y = t(&[3.0, 4.0]);
        let zero = t(&[0.0, 0.0]);
        let perfect = |_: &Tensor<f64>, _: f64| Ok(t(&[3.0, 4.0]));
        assert_eq!(edm_loss(perfect, &y, 1.3, &t(&[0.2, -0.1])).unwrap(), 0.0);
        let null = |_: &Tensor<f64>, _: f64| Ok(t(&[0.0, 0.0]));
        assert_eq!(edm_loss(null, &y, 7.0, &zero).unwrap(), 25.0);
        let identity = |x: &Tensor<f64>, _: f64| Ok(x.clone());
        assert_eq!(edm_loss(identity, &t(&[1.0]), 0.5, &t(&[0.5])).unwrap(), 0.25);
    }

    #[test]
    fn loss_averages_over_batch() {
        let y = Tensor::from_f64(&[2, 2], &[3.0, 4.0, 0.0, 1.0]).unwrap();
        let zero = Tensor::zeros(&[2, 2]).unwrap();
        let null = |x: &Tensor<f64>, _: f64| Tensor::zeros(x.shape()).map_err(Into::into);
        assert_eq!(edm_loss(null, &y, 1.0, &zero).unwrap(), 13.0);
        assert!(edm_loss(null, &y, 1.0, &t(&[0.0])).is_err());
    }

    #[test]
    fn derivative_examples() {
        let x = t(&[1.5, -2.0]);
        let d = ode_derivative(&x, &x, 0.7).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
        assert_eq!(ode_derivative(&t(&[2.0]), &t(&[0.0]), 1.0).unwrap().data(), &[-2.0]);
        assert_eq!(ode_derivative(&t(&[0.0]), &t(&[4.0]), 2.0).unwrap().data(), &[2.0]);
        assert!(ode_derivative(&x, &x, 0.0).is_err());
        assert!(ode_derivative(&x, &x, -1.0).is_err());
    }

    #[test]
    fn cfg_examples() {
        let g6 = GuidanceConfig::new(6.0).unwrap();
        let out = cfg_derivative(&t(&[2.0]), &t(&[1.0]), &t(&[0.0]), 1.0, g6).unwrap();
        assert_eq!(out.data(), &[-7.0]);

        let (dc, du, x) = (t(&[0.3, -1.2]), t(&[2.0, 0.1]), t(&[0.5, 0.5]));
        let g1 = GuidanceConfig::new(1.0).unwrap();
        assert_eq!(cfg_derivative(&dc, &du, &x, 0.9, g1).unwrap(), ode_derivative(&dc, &x, 0.9).unwrap());

        for gamma in [1.0, 2.5, 6.0, 11.0] {
            let g = GuidanceConfig::new(gamma).unwrap();
            let out = cfg_derivative(&dc, &dc, &x, 0.9, g).unwrap();
            let base = ode_derivative(&dc, &x, 0.9).unwrap();
            assert!(out.max_abs_diff(&base).unwrap() < 1e-12);
        }
        assert!(cfg_derivative(&dc, &du, &x, 0.0, g6).is_err());
        assert!(GuidanceConfig::new(0.5).is_err());
    }

    #[test]
    fn fixed_point_denoiser_returns_initial_noise() {
        let grid = vec![80.0, 10.0, 1.0, 0.0];
        let identity = Unconditional(|x: &Tensor<f64>, _: f64| Ok(x.clone()));
        let mut a = Rng::seed_from(9);
        let mut b = Rng::seed_from(9);
        let out: Tensor<f64> = sample(&identity, &[5], &grid, GuidanceConfig::default(), &mut a).unwrap();
        let init: Tensor<f64> = initial_noise(&[5], 80.0, &mut b).unwrap();
        assert_eq!(out, init);
    }

    #[test]
    fn rejects_bad_grids() {
        let identity = Unconditional(|x: &Tensor<f64>, _: f64| Ok(x.clone()));
        let mut rng = Rng::seed_from(0);
        let g = GuidanceConfig::default();
        assert!(sample::<f64, _>(&identity, &[2], &[1.0, 2.0, 0.0], g, &mut rng).is_err());
        assert!(sample::<f64, _>(&identity, &[2], &[2.0, 1.0], g, &mut rng).is_err());
        assert!(sample::<f64, _>(&identity, &[2], &[2.0], g, &mut rng).is_err());
    }
}
