//! Pure motion metrics.

use crate::data::{AudioTrack, MotionClip};
use crate::numerics::Tensor;
use crate::{invalid, Result};

/// Beat-matching tolerance τ in seconds.
pub const BEAT_TOLERANCE_S: f64 = 0.1;
/// Minimum peak prominence as a fraction of the clip's maximum energy.
pub const PEAK_PROMINENCE: f64 = 0.1;

/// `E_t = Σ_j ‖p_{t+1,j} − p_{t,j}‖²` for `t = 0..F−1`.
pub fn kinetic_energy(poses: &Tensor<f64>) -> Vec<f64> {
    let frames = poses.shape()[0];
    let stride = poses.numel() / frames.max(1);
    let d = poses.data();
    (0..frames.saturating_sub(1))
        .map(|t| {
            let (a, b) = (&d[t * stride..(t + 1) * stride], &d[(t + 1) * stride..(t + 2) * stride]);
            a.iter().zip(b).map(|(x, y)| (y - x) * (y - x)).sum()
        })
        .collect()
}

/// Indices of interior local maxima of `e` whose topographic prominence is
/// at least `min_prominence`.
fn prominent_maxima(e: &[f64], min_prominence: f64) -> Vec<usize> {
    let n = e.len();
    let mut out = Vec::new();
    for i in 1..n.saturating_sub(1) {
        if !(e[i] > e[i - 1] && e[i] >= e[i + 1]) {
            continue;
        }
        // Plateaus count once, at their left edge.
        let mut left_min = e[i];
        let mut j = i;
        while j > 0 {
            j -= 1;
            if e[j] > e[i] {
                break;
            }
            left_min = left_min.min(e[j]);
        }
        let mut right_min = e[i];
        let mut j = i;
        while j + 1 < n {
            j += 1;
            if e[j] > e[i] {
                break;
            }
            right_min = right_min.min(e[j]);
        }
        if e[i] - left_min.max(right_min) >= min_prominence {
            out.push(i);
        }
    }
    out
}

/// Times (seconds) of kinetic-energy peaks. Energy sample `t` spans frames
/// `t` and `t+1`, so its time is `(t + ½)/fps`, refined by a parabola
/// through the neighbouring samples.
pub fn kinematic_peaks(clip: &MotionClip) -> Vec<f64> {
    if clip.frames() < 3 {
        return Vec::new();
    }
    let e = kinetic_energy(&clip.poses);
    let max = e.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Vec::new();
    }
    prominent_maxima(&e, PEAK_PROMINENCE * max)
        .into_iter()
        .map(|i| {
            let (l, c, r) = (e[i - 1], e[i], e[i + 1]);
            let curv = l - 2.0 * c + r;
            let shift = if curv < 0.0 { (0.5 * (l - r) / curv).clamp(-0.5, 0.5) } else { 0.0 };
            (i as f64 + 0.5 + shift) / clip.fps
        })
        .collect()
}

/// Mean of `exp(−Δ²/2τ²)` over peaks, `Δ` the distance to the nearest beat.
pub fn alignment_of_peaks(peaks: &[f64], track: &AudioTrack) -> f64 {
    if peaks.is_empty() || track.beat_times.is_empty() {
        return 0.0;
    }
    let period = track.beat_period();
    let first = track.beat_times[0];
    let last = *track.beat_times.last().unwrap();
    let beats: Vec<f64> = std::iter::once(first - period)
        .chain(track.beat_times.iter().copied())
        .chain(std::iter::once(last + period))
        .collect();
    let tau2 = 2.0 * BEAT_TOLERANCE_S * BEAT_TOLERANCE_S;
    peaks
        .iter()
        .map(|&p| {
            let delta = beats.iter().map(|b| (p - b).abs()).fold(f64::INFINITY, f64::min);
            (-delta * delta / tau2).exp()
        })
        .sum::<f64>()
        / peaks.len() as f64
}

pub fn beat_alignment_score(clip: &MotionClip, track: &AudioTrack) -> Result<f64> {
    if (clip.fps - track.fps).abs() > 1e-9 {
        return Err(invalid(format!("clip fps {} differs from track fps {}", clip.fps, track.fps)));
    }
    Ok(alignment_of_peaks(&kinematic_peaks(clip), track))
}

/// Root-mean-square coordinate distance between two equally shaped clips.
pub fn rms_distance(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(invalid(format!("clip shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    let sq: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((sq / a.numel() as f64).sqrt())
}

/// Mean pairwise RMS distance.
pub fn diversity_score(clips: &[&Tensor<f64>]) -> Result<f64> {
    if clips.len() < 2 {
        return Err(invalid("diversity needs at least two clips"));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..clips.len() {
        for j in i + 1..clips.len() {
            total += rms_distance(clips[i], clips[j])?;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}
