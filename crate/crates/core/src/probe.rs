//! Layer adaptability: how gracefully the base network tolerates losing a
//! block. Each block is bypassed in turn during sampling and the resulting
//! motion is scored by a quality proxy; the best-tolerated blocks receive
//! audio cross-attention.
//!
//! Quality is `w_v · validity + w_s · smoothness`, where validity averages
//! the fraction of coordinates inside `[-1, 1]` and the fraction of bones
//! within 25% of their rest length, and smoothness is `J₀ / (J₀ + J)` with
//! `J` the mean squared jerk and `J₀` that of unperturbed samples.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{synth_dance, AudioTrack, ConditionTokens, MotionClip, BONES, REST_POSE};
use crate::eval::{generate, Prompt, SamplingConfig};
use crate::model::{denoise, pose_center, preconditioning, DenoiserInput, Model};
use crate::numerics::{Real, Rng, Tensor};
use crate::{invalid, Result};

const BONE_TOLERANCE: f64 = 0.25;
/// A model whose denoising error is not at least this much below the
/// skip-only denoiser's is treated as untrained.
const UNTRAINED_RATIO: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub n_samples: usize,
    pub w_validity: f64,
    pub w_smoothness: f64,
    pub sampling: SamplingConfig,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            n_samples: 4,
            w_validity: 0.5,
            w_smoothness: 0.5,
            sampling: SamplingConfig { steps: 20, ..SamplingConfig::default() },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptabilityReport {
    /// Quality of samples with layer `ℓ` skipped, indexed by layer.
    pub scores: Vec<f64>,
    /// Layers from most to least adaptable.
    pub ranking: Vec<usize>,
    pub selected: BTreeSet<usize>,
    pub warning: Option<String>,
}

/// `round(L/3)`, the default number of audio-conditioned layers.
pub fn default_k(layers: usize) -> usize {
    (layers as f64 / 3.0).round() as usize
}

fn bone_length(p: &[f64], a: usize, b: usize) -> f64 {
    (p[2 * a] - p[2 * b]).hypot(p[2 * a + 1] - p[2 * b + 1])
}

/// Mean of in-bounds and rest-length-consistent fractions.
pub fn pose_validity(clip: &MotionClip) -> f64 {
    let d = clip.poses.data();
    let in_bounds = d.iter().filter(|v| v.abs() <= 1.0).count() as f64 / d.len().max(1) as f64;
    let joints = clip.joints();
    let bones: Vec<_> = BONES.iter().filter(|(a, b)| *a < joints && *b < joints).collect();
    if bones.is_empty() {
        return in_bounds;
    }
    let stride = joints * 2;
    let mut ok = 0usize;
    for frame in d.chunks(stride) {
        for &&(a, b) in &bones {
            let rest = (REST_POSE[a].0 - REST_POSE[b].0).hypot(REST_POSE[a].1 - REST_POSE[b].1);
            if (bone_length(frame, a, b) - rest).abs() <= BONE_TOLERANCE * rest {
                ok += 1;
            }
        }
    }
    let consistent = ok as f64 / (bones.len() * clip.frames()) as f64;
    0.5 * (in_bounds + consistent)
}

/// Mean squared third difference of the coordinates.
pub fn mean_squared_jerk(clip: &MotionClip) -> f64 {
    let f = clip.frames();
    if f < 4 {
        return 0.0;
    }
    let stride = clip.poses.numel() / f;
    let d = clip.poses.data();
    let mut total = 0.0;
    for t in 0..f - 3 {
        for k in 0..stride {
            let at = |i: usize| d[(t + i) * stride + k];
            let j = at(3) - 3.0 * at(2) + 3.0 * at(1) - at(0);
            total += j * j;
        }
    }
    total / ((f - 3) * stride) as f64
}

pub fn quality(clips: &[MotionClip], reference_jerk: f64, cfg: &ProbeConfig) -> f64 {
    let n = clips.len().max(1) as f64;
    let validity = clips.iter().map(pose_validity).sum::<f64>() / n;
    let jerk = clips.iter().map(mean_squared_jerk).sum::<f64>() / n;
    let smooth = if reference_jerk + jerk > 0.0 { reference_jerk / (reference_jerk + jerk) } else { 1.0 };
    cfg.w_validity * validity + cfg.w_smoothness * smooth
}

/// Denoising error of `model` relative to the skip-only denoiser on dances
/// synthesized for the evaluation tracks.
fn relative_denoising_error<T: Real>(
    model: &Model<T>,
    eval_set: &[(ConditionTokens, AudioTrack)],
    seed: u64,
) -> Result<f64> {
    let mut rng = Rng::derived(seed, 7);
    let (mut err, mut trivial) = (0.0, 0.0);
    for (cond, track) in eval_set {
        let clean = synth_dance(track, cond.style().unwrap_or(0), &mut rng)?;
        for sigma in [0.1, 0.5, 1.0, 2.0] {
            let noise = Tensor::<f64>::random_normal(clean.poses.shape(), sigma, &mut rng)?;
            let x = clean.poses.add(&noise)?;
            let out = denoise(model, &DenoiserInput { x: x.cast(), sigma, cond: vec![*cond], audio: None })?;
            let c_skip = preconditioning(sigma).0;
            let rest = pose_center(clean.joints()).into_iter().cycle();
            for (((o, c), xv), r) in out.to_f64_vec().iter().zip(clean.poses.data()).zip(x.data()).zip(rest) {
                err += (o - c) * (o - c);
                let skip_only = r + c_skip * (xv - r);
                trivial += (skip_only - c) * (skip_only - c);
            }
        }
    }
    Ok(err / trivial.max(f64::MIN_POSITIVE))
}

/// Scores every layer of `model` by the quality of samples drawn with that
/// layer bypassed. Read-only.
pub fn probe_layers<T: Real>(
    model: &Model<T>,
    eval_set: &[(ConditionTokens, AudioTrack)],
    cfg: &ProbeConfig,
) -> Result<AdaptabilityReport> {
    if eval_set.is_empty() || cfg.n_samples == 0 {
        return Err(invalid("the probe needs at least one condition and one sample"));
    }
    let layers = model.config.layers;
    let run = |skip: Option<usize>| -> Result<Vec<Vec<MotionClip>>> {
        eval_set
            .iter()
            .enumerate()
            .map(|(i, (caption, track))| {
                let p = Prompt { caption: *caption, track: Some(track), skip };
                generate(model, p, cfg.n_samples, cfg.seed + i as u64, &cfg.sampling)
            })
            .collect()
    };
    let reference: Vec<MotionClip> = run(None)?.into_iter().flatten().collect();
    let j0 = reference.iter().map(mean_squared_jerk).sum::<f64>() / reference.len() as f64;
    let mut scores = Vec::with_capacity(layers);
    for l in 0..layers {
        let clips: Vec<MotionClip> = run(Some(l))?.into_iter().flatten().collect();
        let q = quality(&clips, j0, cfg);
        if !q.is_finite() {
            return Err(invalid(format!("layer {l} produced a non-finite score")));
        }
        scores.push(q);
    }
    let rel = relative_denoising_error(model, eval_set, cfg.seed)?;
    let warning = (rel >= UNTRAINED_RATIO)
        .then(|| format!("model looks untrained: denoising error is {rel:.3} of the skip-only denoiser's"));
    let ranking = rank(&scores);
    let selected = ranking.iter().take(default_k(layers)).copied().collect();
    Ok(AdaptabilityReport { scores, ranking, selected, warning })
}

/// Layer indices by descending score, ties to the lower index.
fn rank(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// The `k` highest-scoring layers.
pub fn select_layers(report: &AdaptabilityReport, k: usize) -> Result<BTreeSet<usize>> {
    if k > report.scores.len() {
        return Err(invalid(format!("cannot select {k} of {} layers", report.scores.len())));
    }
    Ok(rank(&report.scores).into_iter().take(k).collect())
}

impl AdaptabilityReport {
    pub fn from_scores(scores: Vec<f64>, k: usize) -> Result<Self> {
        let mut r = AdaptabilityReport { ranking: rank(&scores), scores, selected: BTreeSet::new(), warning: None };
        r.selected = select_layers(&r, k)?;
        Ok(r)
    }

    /// `layer,score,rank,selected`, one row per layer in layer order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,score,rank,selected\n");
        for (l, s) in self.scores.iter().enumerate() {
            let rank = self.ranking.iter().position(|&x| x == l).unwrap_or(l);
            let _ = writeln!(out, "{l},{s},{rank},{}", self.selected.contains(&l) as u8);
        }
        out
    }
}
