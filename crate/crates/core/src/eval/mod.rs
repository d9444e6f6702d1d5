//! Programmatic motion-quality metrics: beat alignment, diversity, prior
//! drift and tempo response.

mod generate;
mod metrics;
mod report;

pub use generate::{alignment_on_tracks, generate, peak_rate, prior_drift, tempo_response, Prompt, SamplingConfig};

pub use metrics::{
    alignment_of_peaks, beat_alignment_score, diversity_score, kinematic_peaks, kinetic_energy, rms_distance,
    BEAT_TOLERANCE_S, PEAK_PROMINENCE,
};
pub use report::{energy_series_csv, ClipMetrics, MetricsReport};
