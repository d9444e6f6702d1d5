//! Denoiser training objective, guided probability-flow sampling and the
//! Beta-to-Uniform training noise schedule.

mod sampler;
mod schedule;

pub use sampler::{
    cfg_derivative, edm_loss, edm_loss_on_tape, initial_noise, integrate, ode_derivative, sample, DenoiserPair,
    GuidanceConfig, GuidedDenoiser, Unconditional,
};
pub use schedule::{
    advance_schedule, beta_cdf, beta_inverse_cdf, beta_pdf, noise_level_from_uniform, sample_noise_level, sigma_grid,
    ScheduleState, SigmaRange,
};

/// Karras grid exponent used for sampling.
pub const DEFAULT_RHO: f64 = 7.0;
