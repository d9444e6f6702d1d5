//! Aggregated metrics with JSON and CSV renderings.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{beat_alignment_score, diversity_score, kinematic_peaks, kinetic_energy};
use crate::data::{AudioTrack, MotionClip};
use crate::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub clip: usize,
    pub tempo_bpm: f64,
    pub beat_alignment: f64,
    pub peaks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub beat_alignment: f64,
    pub diversity: f64,
    pub prior_drift: Option<f64>,
    /// `(speed factor, peak-rate ratio)` pairs.
    pub tempo_response: Vec<(f64, f64)>,
    pub per_clip: Vec<ClipMetrics>,
}

impl MetricsReport {
    /// Beat alignment and diversity of `clips`, each paired with the track
    /// it was generated for. Diversity is 0 for fewer than two clips.
    pub fn from_clips(clips: &[(&MotionClip, &AudioTrack)]) -> Result<Self> {
        if clips.is_empty() {
            return Err(invalid("metrics need at least one clip"));
        }
        let per_clip = clips
            .iter()
            .enumerate()
            .map(|(i, (c, t))| {
                Ok(ClipMetrics {
                    clip: i,
                    tempo_bpm: t.tempo_bpm,
                    beat_alignment: beat_alignment_score(c, t)?,
                    peaks: kinematic_peaks(c).len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let beat_alignment = per_clip.iter().map(|m| m.beat_alignment).sum::<f64>() / per_clip.len() as f64;
        let poses: Vec<_> = clips.iter().map(|(c, _)| &c.poses).collect();
        let diversity = if poses.len() >= 2 { diversity_score(&poses)? } else { 0.0 };
        Ok(MetricsReport { beat_alignment, diversity, prior_drift: None, tempo_response: Vec::new(), per_clip })
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.beat_alignment.is_finite()
            && self.diversity.is_finite()
            && self.prior_drift.is_none_or(f64::is_finite)
            && self.tempo_response.iter().all(|(f, r)| f.is_finite() && r.is_finite());
        if !finite || !(0.0..=1.0).contains(&self.beat_alignment) || self.diversity < 0.0 {
            return Err(invalid("metrics report has out-of-range values"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        serde_json::to_string_pretty(self).map_err(|e| invalid(e.to_string()))
    }

    /// Per-clip breakdown: `clip,tempo_bpm,beat_alignment,peaks`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("clip,tempo_bpm,beat_alignment,peaks\n");
        for m in &self.per_clip {
            let _ = writeln!(out, "{},{},{},{}", m.clip, m.tempo_bpm, m.beat_alignment, m.peaks);
        }
        out
    }
}

/// Plot-ready kinetic energy over time with beat markers:
/// `time_s,energy,beat` where `beat` is 1 on the energy sample nearest a
/// beat.
pub fn energy_series_csv(clip: &MotionClip, track: &AudioTrack) -> String {
    let e = kinetic_energy(&clip.poses);
    let times: Vec<f64> = (0..e.len()).map(|t| (t as f64 + 0.5) / clip.fps).collect();
    let mut marks = vec![false; e.len()];
    for b in &track.beat_times {
        if let Some((i, _)) = times
            .iter()
            .enumerate()
            .map(|(i, t)| (i, (t - b).abs()))
            .filter(|(_, d)| *d <= 0.5 / clip.fps)
            .min_by(|a, b| a.1.total_cmp(&b.1))
        {
            marks[i] = true;
        }
    }
    let mut out = String::from("time_s,energy,beat\n");
    for ((t, v), m) in times.iter().zip(&e).zip(&marks) {
        let _ = writeln!(out, "{t},{v},{}", *m as u8);
    }
    out
}
