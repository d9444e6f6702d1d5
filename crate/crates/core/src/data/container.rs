//! `MIDS0001` binary dataset container and its plain-text manifest.
//!
//! Layout (little-endian): magic, then `u32` clip count, frames, joints and
//! audio width, `f32` fps, `f64` caption-diversification rate, then one record
//! per clip, then the SHA-256 of everything before it.
//!
//! Record: `u16` style, `u8` source, `u8` split, four `u16` caption ids,
//! `f32` tempo, `u16` beat count and `f32` beat times, then `f32` poses
//! `[F, J, 2]` and `f32` audio features `[F, 4]`.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::dataset::{Dataset, DatasetClip, Split};
use super::synth::{AudioTrack, MotionClip, SourceTag, D_AUDIO, STYLE_NAMES};
use super::tokens::ConditionTokens;
use crate::numerics::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MIDS0001";

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn to_bytes(d: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for v in [d.clips.len(), d.frames, d.joints, D_AUDIO] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    put_f32s(&mut out, &[d.fps]);
    out.extend_from_slice(&d.p_base.to_le_bytes());
    for c in &d.clips {
        out.extend_from_slice(&(c.motion.style_id as u16).to_le_bytes());
        out.push(c.motion.source.code());
        out.push(match c.split {
            Split::Train => 0,
            Split::Test => 1,
        });
        for id in c.caption.ids() {
            out.extend_from_slice(&id.to_le_bytes());
        }
        put_f32s(&mut out, &[c.track.tempo_bpm]);
        out.extend_from_slice(&(c.track.beat_times.len() as u16).to_le_bytes());
        put_f32s(&mut out, &c.track.beat_times);
        put_f32s(&mut out, c.motion.poses.data());
        put_f32s(&mut out, c.track.features.data());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format_err(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| format_err("length overflow"))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect())
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(format_err("not a MIDS0001 container"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(format_err("checksum mismatch"));
    }
    let mut r = Reader { bytes: body, pos: MAGIC.len() };
    let (n, frames, joints, d_audio) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    if d_audio != D_AUDIO {
        return Err(format_err(format!("audio width {d_audio}, expected {D_AUDIO}")));
    }
    let fps = r.f32s(1)?[0];
    let p_base = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let mut clips = Vec::with_capacity(n.min(1 << 20));
    for i in 0..n {
        let style_id = r.u16()? as usize;
        if style_id >= STYLE_NAMES.len() {
            return Err(format_err(format!("clip {i}: style {style_id} out of range")));
        }
        let source = SourceTag::from_code(r.u8()?).ok_or_else(|| format_err(format!("clip {i}: bad source tag")))?;
        let split = match r.u8()? {
            0 => Split::Train,
            1 => Split::Test,
            s => return Err(format_err(format!("clip {i}: bad split {s}"))),
        };
        let ids = [r.u16()?, r.u16()?, r.u16()?, r.u16()?];
        let caption = ConditionTokens::from_ids(ids).map_err(|e| format_err(format!("clip {i}: {e}")))?;
        let tempo_bpm = r.f32s(1)?[0];
        let n_beats = r.u16()? as usize;
        let beat_times = r.f32s(n_beats)?;
        let poses = Tensor::new(vec![frames, joints, 2], r.f32s(frames * joints * 2)?)?;
        let features = Tensor::new(vec![frames, D_AUDIO], r.f32s(frames * D_AUDIO)?)?;
        clips.push(DatasetClip {
            motion: MotionClip { poses, fps, style_id, source },
            track: AudioTrack { tempo_bpm, duration_s: frames as f64 / fps, fps, beat_times, features },
            caption,
            split,
        });
    }
    if r.pos != body.len() {
        return Err(format_err(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(Dataset { clips, frames, joints, fps, p_base })
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(d))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    from_bytes(&std::fs::read(path)?)
}

/// One line per clip: `index,style,tempo,source,split`.
pub fn manifest(d: &Dataset) -> String {
    let mut out = String::new();
    for (i, c) in d.clips.iter().enumerate() {
        let _ = writeln!(
            out,
            "{i},{},{},{},{}",
            STYLE_NAMES[c.motion.style_id],
            c.track.tempo_bpm,
            c.motion.source.name(),
            c.split.name()
        );
    }
    out
}
