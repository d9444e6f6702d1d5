//! Sampling clips from a model, and the protocols built on it: held-out
//! beat alignment, prior drift and tempo response.

use serde::{Deserialize, Serialize};

use super::metrics::{beat_alignment_score, kinematic_peaks, rms_distance};
use crate::data::{retime_track, AudioTrack, ConditionTokens, MotionClip, SourceTag};
use crate::diffusion::{sample, sigma_grid, GuidanceConfig};
use crate::model::{Conditioned, Model};
use crate::numerics::{Real, Rng, Tensor};
use crate::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub steps: usize,
    pub gamma: f64,
    pub rho: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { steps: 50, gamma: 6.0, rho: 7.0 }
    }
}

/// What a batch of generations is conditioned on.
#[derive(Debug, Clone, Copy)]
pub struct Prompt<'a> {
    pub caption: ConditionTokens,
    pub track: Option<&'a AudioTrack>,
    /// Block bypassed in every denoiser call.
    pub skip: Option<usize>,
}

/// Generates `n` clips in one batch from noise seeded by `seed`.
pub fn generate<T: Real>(
    model: &Model<T>,
    prompt: Prompt<'_>,
    n: usize,
    seed: u64,
    sc: &SamplingConfig,
) -> Result<Vec<MotionClip>> {
    if n == 0 {
        return Err(invalid("generate needs n >= 1"));
    }
    let cfg = &model.config;
    let audio = match prompt.track {
        Some(t) if t.frames() != cfg.frames => {
            return Err(invalid(format!("track has {} frames, model generates {}", t.frames(), cfg.frames)))
        }
        Some(t) => Some(t.features.cast::<T>()),
        None => None,
    };
    let fps = prompt.track.map_or(crate::data::DEFAULT_FPS, |t| t.fps);
    let den = Conditioned { model, cond: vec![prompt.caption], audio, skip: prompt.skip };
    let sigmas = sigma_grid(sc.steps, cfg.sigma_range, sc.rho)?;
    let mut rng = Rng::seed_from(seed);
    let x: Tensor<T> =
        sample(&den, &[n, cfg.frames, cfg.joints, 2], &sigmas, GuidanceConfig::new(sc.gamma)?, &mut rng)?;
    let per = cfg.frames * cfg.joints * 2;
    let data = x.to_f64_vec();
    (0..n)
        .map(|i| {
            Ok(MotionClip {
                poses: Tensor::new(vec![cfg.frames, cfg.joints, 2], data[i * per..(i + 1) * per].to_vec())?,
                fps,
                style_id: prompt.caption.style().unwrap_or(0),
                source: SourceTag::Structured,
            })
        })
        .collect()
}

/// Beat alignment of `n` generations per track, one mean per track.
pub fn alignment_on_tracks<T: Real>(
    model: &Model<T>,
    caption: ConditionTokens,
    tracks: &[&AudioTrack],
    n: usize,
    seed: u64,
    sc: &SamplingConfig,
) -> Result<Vec<f64>> {
    tracks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let clips = generate(model, Prompt { caption, track: Some(t), skip: None }, n, seed + i as u64, sc)?;
            let scores = clips.iter().map(|c| beat_alignment_score(c, t)).collect::<Result<Vec<_>>>()?;
            Ok(scores.iter().sum::<f64>() / n as f64)
        })
        .collect()
}

/// Mean RMS distance between the two models' generations under identical
/// seeds and captions, without audio.
pub fn prior_drift<T: Real>(
    base: &Model<T>,
    adapted: &Model<T>,
    conditions: &[ConditionTokens],
    n: usize,
    seed: u64,
    sc: &SamplingConfig,
) -> Result<f64> {
    if !base.config.same_base(&adapted.config) {
        return Err(Error::ConfigMismatch("prior drift compares models with different base networks".into()));
    }
    if conditions.is_empty() {
        return Err(invalid("prior drift needs at least one condition"));
    }
    let mut total = 0.0;
    for (i, &caption) in conditions.iter().enumerate() {
        let p = Prompt { caption, track: None, skip: None };
        let a = generate(base, p, n, seed + i as u64, sc)?;
        let b = generate(adapted, p, n, seed + i as u64, sc)?;
        for (x, y) in a.iter().zip(&b) {
            total += rms_distance(&x.poses, &y.poses)?;
        }
    }
    Ok(total / (conditions.len() * n) as f64)
}

/// Kinematic peaks per second, averaged over clips.
pub fn peak_rate(clips: &[MotionClip]) -> f64 {
    let per: f64 = clips.iter().map(|c| kinematic_peaks(c).len() as f64 / (c.frames() as f64 / c.fps)).sum();
    per / clips.len().max(1) as f64
}

/// For each factor, the peak rate of generations on the track played that
/// much faster, relative to the rate on the original track. The same noise
/// seeds are used for every factor.
pub fn tempo_response<T: Real>(
    model: &Model<T>,
    caption: ConditionTokens,
    track: &AudioTrack,
    factors: &[f64],
    n: usize,
    seed: u64,
    sc: &SamplingConfig,
) -> Result<Vec<(f64, f64)>> {
    if let Some(f) = factors.iter().find(|f| !(**f > 0.0 && f.is_finite())) {
        return Err(invalid(format!("speed factor {f} must be positive")));
    }
    let rate = |f: f64| -> Result<f64> {
        let t = retime_track(track, f)?;
        Ok(peak_rate(&generate(model, Prompt { caption, track: Some(&t), skip: None }, n, seed, sc)?))
    };
    let reference = rate(1.0)?;
    if reference <= 0.0 {
        return Err(invalid("generations at the original tempo have no kinematic peaks"));
    }
    factors.iter().map(|&f| Ok((f, if f == 1.0 { 1.0 } else { rate(f)? / reference }))).collect()
}
