//! Mixed structured/wild datasets, their train/test split and the 1:1
//! batch sampler.

use serde::{Deserialize, Serialize};

use super::synth::{frame_count, synth_dance, synth_track, AudioTrack, MotionClip, SourceTag, D_AUDIO};
use super::tokens::{ConditionTokens, CAMERAS, MAX_STYLES, SETTINGS};
use crate::numerics::{Rng, Tensor};
use crate::{invalid, Result};

/// Tempi are drawn from multiples of this step.
pub const TEMPO_STEP: f64 = 5.0;
/// Envelope noise of the wild pool.
pub const WILD_ENVELOPE_NOISE: f64 = 0.1;
/// Wild clips are cropped from a source up to this much longer.
pub const WILD_CROP: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Every fourth tempo on the grid (90, 110, 130, 150, ...) is held out.
pub fn is_held_out_tempo(tempo_bpm: f64) -> bool {
    ((tempo_bpm / TEMPO_STEP).round() as i64).rem_euclid(4) == 2
}

pub fn split_of(tempo_bpm: f64) -> Split {
    if is_held_out_tempo(tempo_bpm) {
        Split::Test
    } else {
        Split::Train
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_structured: usize,
    pub n_wild: usize,
    pub styles: Vec<usize>,
    pub tempo_min: f64,
    pub tempo_max: f64,
    pub seed: u64,
    pub p_base: f64,
    pub frames: usize,
    pub joints: usize,
    pub fps: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_structured: 1024,
            n_wild: 1024,
            styles: (0..MAX_STYLES).collect(),
            tempo_min: 80.0,
            tempo_max: 160.0,
            seed: 0,
            p_base: 0.1,
            frames: 32,
            joints: super::DEFAULT_JOINTS,
            fps: super::DEFAULT_FPS,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_structured + self.n_wild == 0 {
            return Err(invalid("dataset needs at least one clip"));
        }
        if self.styles.is_empty() || self.styles.iter().any(|&s| s >= MAX_STYLES) {
            return Err(invalid(format!("styles {:?} must be a non-empty subset of 0..{MAX_STYLES}", self.styles)));
        }
        if !(super::MIN_TEMPO <= self.tempo_min
            && self.tempo_min <= self.tempo_max
            && self.tempo_max <= super::MAX_TEMPO)
        {
            return Err(invalid(format!(
                "tempo range [{}, {}] must lie within [{}, {}]",
                self.tempo_min,
                self.tempo_max,
                super::MIN_TEMPO,
                super::MAX_TEMPO
            )));
        }
        if self.tempo_grid().is_empty() {
            return Err(invalid(format!(
                "tempo range [{}, {}] contains no multiple of {TEMPO_STEP}",
                self.tempo_min, self.tempo_max
            )));
        }
        if !(0.0..=1.0).contains(&self.p_base) {
            return Err(invalid(format!("p_base = {} outside [0, 1]", self.p_base)));
        }
        if self.joints != super::DEFAULT_JOINTS {
            return Err(invalid(format!("the dance styles define {} joints", super::DEFAULT_JOINTS)));
        }
        if self.frames < 3 || !(self.fps > 0.0) {
            return Err(invalid("clips need at least 3 frames and a positive fps"));
        }
        Ok(())
    }

    pub fn tempo_grid(&self) -> Vec<f64> {
        let lo = (self.tempo_min / TEMPO_STEP).ceil() as i64;
        let hi = (self.tempo_max / TEMPO_STEP).floor() as i64;
        (lo..=hi).map(|k| k as f64 * TEMPO_STEP).collect()
    }

    pub fn duration_s(&self) -> f64 {
        self.frames as f64 / self.fps
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetClip {
    pub motion: MotionClip,
    pub track: AudioTrack,
    pub caption: ConditionTokens,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub clips: Vec<DatasetClip>,
    pub frames: usize,
    pub joints: usize,
    pub fps: f64,
    pub p_base: f64,
}

/// Detailed caption of clip `index`. Structured clips are studio shots with
/// a fixed camera; wild clips cycle through the other settings and cameras.
pub fn caption_for(style: usize, source: SourceTag, index: usize) -> Result<ConditionTokens> {
    match source {
        SourceTag::Structured => ConditionTokens::detailed(style, 0, 0),
        SourceTag::Wild => ConditionTokens::detailed(
            style,
            1 + index % (SETTINGS.len() - 1),
            1 + (index / (SETTINGS.len() - 1)) % (CAMERAS.len() - 1),
        ),
    }
}

fn round_f32(t: &Tensor<f64>) -> Result<Tensor<f64>> {
    Ok(Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| v as f32 as f64).collect())?)
}

/// Rounds every stored value to 32-bit so in-memory datasets equal their
/// on-disk form.
fn quantize(mut clip: DatasetClip) -> Result<DatasetClip> {
    clip.motion.poses = round_f32(&clip.motion.poses)?;
    clip.track.features = round_f32(&clip.track.features)?;
    clip.track.tempo_bpm = clip.track.tempo_bpm as f32 as f64;
    for b in clip.track.beat_times.iter_mut() {
        *b = *b as f32 as f64;
    }
    Ok(clip)
}

/// Rows `start..start+frames` of a track, with beats re-expressed relative
/// to the window.
pub fn crop_track(track: &AudioTrack, start: usize, frames: usize) -> Result<AudioTrack> {
    if start + frames > track.frames() || frames == 0 {
        return Err(invalid(format!("crop [{start}, {}) outside a {}-frame track", start + frames, track.frames())));
    }
    let t0 = start as f64 / track.fps;
    let duration = frames as f64 / track.fps;
    Ok(AudioTrack {
        tempo_bpm: track.tempo_bpm,
        duration_s: duration,
        fps: track.fps,
        beat_times: track.beat_times.iter().map(|b| b - t0).filter(|&b| (0.0..duration).contains(&b)).collect(),
        features: track.features.slice(0, start, start + frames)?,
    })
}

fn wild_clip(spec: &DatasetSpec, tempo: f64, style: usize, rng: &mut Rng) -> Result<(MotionClip, AudioTrack)> {
    let extra = rng.below((WILD_CROP * spec.frames as f64).floor() as usize + 1);
    let long = synth_track(tempo, (spec.frames + extra) as f64 / spec.fps, spec.fps, rng)?;
    let dance = synth_dance(&long, style, rng)?;
    let start = rng.below(extra + 1);
    let mut track = crop_track(&long, start, spec.frames)?;

    let noisy: Vec<f64> = track
        .features
        .data()
        .chunks(D_AUDIO)
        .flat_map(|r| {
            let env = (r[0] + WILD_ENVELOPE_NOISE * rng.normal()).clamp(0.0, 1.5);
            [env, r[1], r[2], r[3]]
        })
        .collect();
    track.features = Tensor::new(track.features.shape().to_vec(), noisy)?;

    // Camera jitter: a small global scale and translation.
    let scale = rng.uniform_range(0.9, 1.1);
    let (dx, dy) = (rng.uniform_range(-0.08, 0.08), rng.uniform_range(-0.08, 0.08));
    let window = dance.poses.slice(0, start, start + spec.frames)?;
    let moved: Vec<f64> = window
        .data()
        .chunks(2)
        .flat_map(|p| [(p[0] * scale + dx).clamp(-1.0, 1.0), (p[1] * scale + dy).clamp(-1.0, 1.0)])
        .collect();
    let motion = MotionClip {
        poses: Tensor::new(window.shape().to_vec(), moved)?,
        fps: spec.fps,
        style_id: style,
        source: SourceTag::Wild,
    };
    Ok((motion, track))
}

/// Generates clip `index` of the dataset described by `spec`.
pub fn make_clip(spec: &DatasetSpec, index: usize) -> Result<DatasetClip> {
    let mut rng = Rng::derived(spec.seed, index as u64);
    let source = if index < spec.n_structured { SourceTag::Structured } else { SourceTag::Wild };
    let style = spec.styles[rng.below(spec.styles.len())];
    let grid = spec.tempo_grid();
    let tempo = grid[rng.below(grid.len())];
    let (motion, track) = match source {
        SourceTag::Structured => {
            let track = synth_track(tempo, spec.duration_s(), spec.fps, &mut rng)?;
            let mut motion = synth_dance(&track, style, &mut rng)?;
            motion.source = SourceTag::Structured;
            (motion, track)
        }
        SourceTag::Wild => wild_clip(spec, tempo, style, &mut rng)?,
    };
    debug_assert_eq!(track.frames(), frame_count(spec.duration_s(), spec.fps));
    quantize(DatasetClip { motion, track, caption: caption_for(style, source, index)?, split: split_of(tempo) })
}

pub fn make_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let clips = (0..spec.n_structured + spec.n_wild).map(|i| make_clip(spec, i)).collect::<Result<Vec<_>>>()?;
    Ok(Dataset { clips, frames: spec.frames, joints: spec.joints, fps: spec.fps, p_base: spec.p_base })
}

impl Dataset {
    pub fn indices(&self, split: Split, source: Option<SourceTag>) -> Vec<usize> {
        self.clips
            .iter()
            .enumerate()
            .filter(|(_, c)| c.split == split && source.is_none_or(|s| c.motion.source == s))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn sampler(&self) -> Result<MixedSampler> {
        MixedSampler::new(
            self.indices(Split::Train, Some(SourceTag::Structured)),
            self.indices(Split::Train, Some(SourceTag::Wild)),
        )
    }
}

/// Draws training clips alternately from the structured and wild pools.
#[derive(Debug, Clone)]
pub struct MixedSampler {
    structured: Vec<usize>,
    wild: Vec<usize>,
    turn: usize,
}

impl MixedSampler {
    pub fn new(structured: Vec<usize>, wild: Vec<usize>) -> Result<Self> {
        if structured.is_empty() && wild.is_empty() {
            return Err(invalid("both training pools are empty"));
        }
        Ok(MixedSampler { structured, wild, turn: 0 })
    }

    pub fn next(&mut self, rng: &mut Rng) -> usize {
        let pool = match (self.structured.is_empty(), self.wild.is_empty()) {
            (false, true) => &self.structured,
            (true, false) => &self.wild,
            _ if self.turn % 2 == 0 => &self.structured,
            _ => &self.wild,
        };
        self.turn += 1;
        pool[rng.below(pool.len())]
    }

    pub fn batch(&mut self, size: usize, rng: &mut Rng) -> Vec<usize> {
        (0..size).map(|_| self.next(rng)).collect()
    }

    /// Sampler position, for checkpointing.
    pub fn turn(&self) -> usize {
        self.turn
    }

    pub fn set_turn(&mut self, turn: usize) {
        self.turn = turn;
    }
}
