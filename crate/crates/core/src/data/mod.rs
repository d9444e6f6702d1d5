//! Synthetic stand-ins for music and dance data: beat-structured audio
//! tracks, beat-aligned dances, caption tokens, mixed datasets and their
//! on-disk container.

mod container;
mod dataset;
mod synth;
mod tokens;

pub use container::{from_bytes, load_dataset, manifest, save_dataset, to_bytes, MAGIC};
pub use dataset::{
    caption_for, crop_track, is_held_out_tempo, make_clip, make_dataset, split_of, Dataset, DatasetClip, DatasetSpec,
    MixedSampler, Split, TEMPO_STEP, WILD_CROP, WILD_ENVELOPE_NOISE,
};
pub use synth::{
    beat_loop, frame_count, retime_track, style, synth_dance, synth_dance_styled, synth_track, synth_track_with_offset,
    AudioTrack, MotionClip, SourceTag, StyleParams, BONES, DEFAULT_FPS, DEFAULT_JOINTS, D_AUDIO, MAX_TEMPO, MIN_TEMPO,
    REST_POSE, STYLE_NAMES,
};
pub use tokens::{
    diversify_caption, ConditionTokens, DetailFlag, CAMERAS, EMPTY, MAX_STYLES, NULL, SETTINGS, SLOTS, TEMPLATE_BASE,
    TEMPLATE_DETAILED, VOCAB_SIZE,
};
