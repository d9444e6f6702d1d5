//! Beat-structured audio tracks and beat-aligned dances.
//!
//! A dance moves each joint once around a small ellipse per beat, oriented
//! along a style-specific direction. The angle runs fastest as the joint
//! crosses the beat and slowest half a beat later, so joint speed, and hence
//! the kinetic-energy peaks, are largest exactly on the beats. The pose at
//! any frame is a function of the beat phase `φ mod 1` alone.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::numerics::{Rng, Tensor};
use crate::{invalid, Result};

pub const D_AUDIO: usize = 4;
pub const DEFAULT_FPS: f64 = 12.0;
pub const DEFAULT_JOINTS: usize = 8;
pub const MIN_TEMPO: f64 = 60.0;
pub const MAX_TEMPO: f64 = 200.0;

/// Width (seconds) of the Gaussian beat-proximity envelope.
const ENVELOPE_WIDTH: f64 = 0.06;
const POSE_NOISE: f64 = 0.0015;
/// How unevenly the loop angle advances over a beat; below 1.
const LOOP_SKEW: f64 = 0.7;
/// Minor over major axis of the loop.
const LOOP_ASPECT: f64 = 0.75;

/// Offset on the unit loop at beat phase `phase`, as (along, across) the
/// movement direction. Moves along the direction at the beat.
pub fn beat_loop(phase: f64) -> (f64, f64) {
    let u = 2.0 * PI * phase;
    let angle = u + LOOP_SKEW * u.sin();
    (angle.sin(), LOOP_ASPECT * angle.cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioTrack {
    pub tempo_bpm: f64,
    pub duration_s: f64,
    pub fps: f64,
    pub beat_times: Vec<f64>,
    /// `[frames, 4]`: beat envelope, sin and cos of beat phase, energy.
    pub features: Tensor<f64>,
}

impl AudioTrack {
    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn beat_period(&self) -> f64 {
        60.0 / self.tempo_bpm
    }
}

pub fn frame_count(duration_s: f64, fps: f64) -> usize {
    (duration_s * fps).round() as usize
}

fn check_tempo(tempo_bpm: f64) -> Result<()> {
    if !(MIN_TEMPO..=MAX_TEMPO).contains(&tempo_bpm) {
        return Err(invalid(format!("tempo {tempo_bpm} bpm outside [{MIN_TEMPO}, {MAX_TEMPO}]")));
    }
    Ok(())
}

/// A track whose first beat falls at `offset_s` (taken modulo the beat
/// period). Beats cover `[0, duration)`.
pub fn synth_track_with_offset(tempo_bpm: f64, duration_s: f64, fps: f64, offset_s: f64) -> Result<AudioTrack> {
    check_tempo(tempo_bpm)?;
    if !(duration_s > 0.0 && fps > 0.0 && duration_s.is_finite() && fps.is_finite()) {
        return Err(invalid(format!("duration {duration_s} s and fps {fps} must be positive")));
    }
    let frames = frame_count(duration_s, fps);
    if frames == 0 {
        return Err(invalid("track shorter than one frame"));
    }
    let period = 60.0 / tempo_bpm;
    let offset = offset_s.rem_euclid(period);
    let beat_times: Vec<f64> = (0..).map(|k| offset + k as f64 * period).take_while(|&t| t < duration_s).collect();
    let mut feats = Vec::with_capacity(frames * D_AUDIO);
    for f in 0..frames {
        let t = f as f64 / fps;
        let phase = (t - offset) / period;
        let nearest = phase.round();
        let dt = (phase - nearest) * period;
        let envelope = (-dt * dt / (2.0 * ENVELOPE_WIDTH * ENVELOPE_WIDTH)).exp();
        let downbeat = (nearest as i64).rem_euclid(4) == 0;
        let energy = 0.4 + envelope * if downbeat { 0.6 } else { 0.35 };
        let angle = 2.0 * PI * phase;
        feats.extend([envelope, angle.sin(), angle.cos(), energy]);
    }
    Ok(AudioTrack { tempo_bpm, duration_s, fps, beat_times, features: Tensor::new(vec![frames, D_AUDIO], feats)? })
}

/// A track with a random phase offset.
pub fn synth_track(tempo_bpm: f64, duration_s: f64, fps: f64, rng: &mut Rng) -> Result<AudioTrack> {
    check_tempo(tempo_bpm)?;
    let offset = rng.uniform() * 60.0 / tempo_bpm;
    synth_track_with_offset(tempo_bpm, duration_s, fps, offset)
}

/// The same music played `factor` times faster over the same duration.
pub fn retime_track(track: &AudioTrack, factor: f64) -> Result<AudioTrack> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(invalid(format!("speed factor {factor} must be positive")));
    }
    let offset = track.beat_times.first().copied().unwrap_or(0.0) / factor;
    synth_track_with_offset(track.tempo_bpm * factor, track.duration_s, track.fps, offset)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SourceTag {
    Structured,
    Wild,
}

impl SourceTag {
    pub fn code(self) -> u8 {
        match self {
            SourceTag::Structured => 0,
            SourceTag::Wild => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(SourceTag::Structured),
            1 => Some(SourceTag::Wild),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SourceTag::Structured => "structured",
            SourceTag::Wild => "wild",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionClip {
    /// `[frames, joints, 2]`, coordinates in `[-1, 1]`.
    pub poses: Tensor<f64>,
    pub fps: f64,
    pub style_id: usize,
    pub source: SourceTag,
}

impl MotionClip {
    pub fn frames(&self) -> usize {
        self.poses.shape()[0]
    }

    pub fn joints(&self) -> usize {
        self.poses.shape()[1]
    }
}

/// Per-joint movement recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleParams {
    pub name: &'static str,
    pub amplitude: Vec<f64>,
    /// Direction angle of each joint's movement, radians.
    pub direction: Vec<f64>,
    /// `±1` per joint: mirrored joints move against each other.
    pub sign: Vec<f64>,
    /// Static offset added to the rest pose.
    pub lean: (f64, f64),
}

/// Rest pose: head, neck, hands, hips, feet.
pub const REST_POSE: [(f64, f64); DEFAULT_JOINTS] =
    [(0.0, 0.7), (0.0, 0.45), (-0.45, 0.2), (0.45, 0.2), (-0.15, -0.1), (0.15, -0.1), (-0.2, -0.7), (0.2, -0.7)];

/// Joint pairs of the stick figure: head, neck, hands, hips, feet.
pub const BONES: [(usize, usize); 7] = [(0, 1), (1, 2), (1, 3), (1, 4), (1, 5), (4, 6), (5, 7)];

pub const STYLE_NAMES: [&str; 6] = ["sway", "bob", "arms", "footwork", "mirror", "full"];

/// The built-in style vocabulary.
pub fn style(style_id: usize) -> Result<StyleParams> {
    let j = DEFAULT_JOINTS;
    let deg = |d: f64| d.to_radians();
    let p = match style_id {
        0 => StyleParams {
            name: STYLE_NAMES[0],
            amplitude: vec![0.12, 0.1, 0.14, 0.14, 0.1, 0.1, 0.03, 0.03],
            direction: vec![deg(0.0); j],
            sign: vec![1.0; j],
            lean: (0.0, 0.0),
        },
        1 => StyleParams {
            name: STYLE_NAMES[1],
            amplitude: vec![0.12, 0.12, 0.1, 0.1, 0.12, 0.12, 0.02, 0.02],
            direction: vec![deg(90.0); j],
            sign: vec![1.0; j],
            lean: (0.0, -0.05),
        },
        2 => StyleParams {
            name: STYLE_NAMES[2],
            amplitude: vec![0.03, 0.03, 0.25, 0.25, 0.02, 0.02, 0.0, 0.0],
            direction: vec![deg(90.0), deg(90.0), deg(60.0), deg(120.0), deg(0.0), deg(0.0), 0.0, 0.0],
            sign: vec![1.0, 1.0, 1.0, -1.0, 1.0, 1.0, 1.0, 1.0],
            lean: (0.0, 0.05),
        },
        3 => StyleParams {
            name: STYLE_NAMES[3],
            amplitude: vec![0.02, 0.02, 0.05, 0.05, 0.06, 0.06, 0.22, 0.22],
            direction: vec![deg(90.0), deg(90.0), deg(0.0), deg(0.0), deg(0.0), deg(0.0), deg(30.0), deg(150.0)],
            sign: vec![1.0, 1.0, 1.0, 1.0, 1.0, -1.0, 1.0, -1.0],
            lean: (0.0, 0.0),
        },
        4 => StyleParams {
            name: STYLE_NAMES[4],
            amplitude: vec![0.06, 0.05, 0.2, 0.2, 0.08, 0.08, 0.12, 0.12],
            direction: vec![deg(0.0); j],
            sign: vec![1.0, 1.0, 1.0, -1.0, 1.0, -1.0, -1.0, 1.0],
            lean: (0.05, 0.0),
        },
        5 => StyleParams {
            name: STYLE_NAMES[5],
            amplitude: vec![0.1, 0.1, 0.2, 0.2, 0.12, 0.12, 0.12, 0.12],
            direction: vec![deg(45.0), deg(45.0), deg(100.0), deg(80.0), deg(135.0), deg(45.0), deg(90.0), deg(90.0)],
            sign: vec![1.0, 1.0, -1.0, 1.0, 1.0, -1.0, 1.0, 1.0],
            lean: (-0.05, 0.0),
        },
        _ => return Err(invalid(format!("unknown style {style_id}; styles are 0..{}", STYLE_NAMES.len()))),
    };
    Ok(p)
}

/// Dance for `track` in the given style. Each clip draws an amplitude
/// jitter and small per-frame pose noise.
pub fn synth_dance(track: &AudioTrack, style_id: usize, rng: &mut Rng) -> Result<MotionClip> {
    let params = style(style_id)?;
    let mut clip = synth_dance_styled(track, &params, rng)?;
    clip.style_id = style_id;
    Ok(clip)
}

pub fn synth_dance_styled(track: &AudioTrack, params: &StyleParams, rng: &mut Rng) -> Result<MotionClip> {
    let j = params.amplitude.len();
    if j == 0 || params.direction.len() != j || params.sign.len() != j || j > REST_POSE.len() {
        return Err(invalid("style parameters must cover every joint"));
    }
    let frames = track.frames();
    let period = track.beat_period();
    let offset = track.beat_times.first().copied().unwrap_or(0.0);
    let gain = rng.uniform_range(0.85, 1.15);
    let mut data = Vec::with_capacity(frames * j * 2);
    for f in 0..frames {
        let phase = (f as f64 / track.fps - offset) / period;
        let (along, across) = beat_loop(phase);
        for k in 0..j {
            let amp = gain * params.amplitude[k] * params.sign[k];
            let (dx, dy) = (params.direction[k].cos(), params.direction[k].sin());
            let (rx, ry) = REST_POSE[k];
            let x = rx + params.lean.0 + amp * (along * dx - across * dy) + POSE_NOISE * rng.normal();
            let y = ry + params.lean.1 + amp * (along * dy + across * dx) + POSE_NOISE * rng.normal();
            data.push(x.clamp(-1.0, 1.0));
            data.push(y.clamp(-1.0, 1.0));
        }
    }
    Ok(MotionClip {
        poses: Tensor::new(vec![frames, j, 2], data)?,
        fps: track.fps,
        style_id: 0,
        source: SourceTag::Structured,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beat_grid_examples() {
        let t = synth_track_with_offset(120.0, 4.0, 12.0, 0.0).unwrap();
        assert_eq!(t.beat_times.len(), 8);
        for w in t.beat_times.windows(2) {
            assert!((w[1] - w[0] - 0.5).abs() <= 1e-9);
        }
        let fast = synth_track_with_offset(150.0, 4.0, 12.0, 0.0).unwrap();
        assert_eq!(fast.beat_times.len(), 10);
        assert_eq!(t.frames(), 48);
        assert!(synth_track(40.0, 4.0, 12.0, &mut Rng::seed_from(0)).is_err());
        assert!(synth_track(201.0, 4.0, 12.0, &mut Rng::seed_from(0)).is_err());
    }

    #[test]
    fn envelope_peaks_at_beat_frames() {
        let mut rng = Rng::seed_from(5);
        for tempo in [80.0, 100.0, 120.0, 160.0] {
            let t = synth_track(tempo, 2.7, 12.0, &mut rng).unwrap();
            let env: Vec<f64> = t.features.data().chunks(D_AUDIO).map(|r| r[0]).collect();
            for &b in &t.beat_times {
                let fb = (b * t.fps).round() as usize;
                if fb == 0 || fb + 1 >= env.len() {
                    continue;
                }
                assert!(env[fb] >= env[fb - 1] && env[fb] >= env[fb + 1], "tempo {tempo} beat {b}");
            }
        }
    }

    #[test]
    fn phase_features_are_unit_norm() {
        let t = synth_track(97.0, 3.0, 12.0, &mut Rng::seed_from(1)).unwrap();
        for r in t.features.data().chunks(D_AUDIO) {
            assert!((r[1] * r[1] + r[2] * r[2] - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn dances_stay_in_bounds_and_vary_by_seed() {
        let t = synth_track(120.0, 2.7, 12.0, &mut Rng::seed_from(2)).unwrap();
        for s in 0..STYLE_NAMES.len() {
            let a = synth_dance(&t, s, &mut Rng::seed_from(10)).unwrap();
            let b = synth_dance(&t, s, &mut Rng::seed_from(11)).unwrap();
            assert!(a.poses.data().iter().all(|v| v.abs() <= 1.0));
            let dist: f64 = a
                .poses
                .data()
                .chunks(2)
                .zip(b.poses.data().chunks(2))
                .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
                .sum::<f64>();
            assert!(dist > 0.0);
        }
        assert!(synth_dance(&t, 6, &mut Rng::seed_from(0)).is_err());
    }

    #[test]
    fn loop_speed_peaks_only_on_the_beat() {
        let n = 1000;
        let speed: Vec<f64> = (0..n)
            .map(|i| {
                let (p, h) = (i as f64 / n as f64, 1e-6);
                let (a, b) = (beat_loop(p + h), beat_loop(p - h));
                ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() / (2.0 * h)
            })
            .collect();
        // Decreasing up to half a beat, increasing after.
        for i in 1..n / 2 {
            assert!(speed[i] < speed[i - 1], "phase {}", i as f64 / n as f64);
            assert!(speed[n - i] < speed[(n - i + 1) % n]);
        }
        let (a, b) = (beat_loop(0.3), beat_loop(1.3));
        assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
    }

    #[test]
    fn retiming_scales_tempo() {
        let t = synth_track_with_offset(120.0, 4.0, 12.0, 0.0).unwrap();
        let fast = retime_track(&t, 1.25).unwrap();
        assert_eq!(fast.tempo_bpm, 150.0);
        assert_eq!(fast.beat_times.len(), 10);
        assert!(retime_track(&t, 0.0).is_err());
    }
}
