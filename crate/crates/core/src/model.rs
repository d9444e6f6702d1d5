//! A frame-token diffusion transformer over 2D pose sequences.
//!
//! Each frame's `J×2` pose becomes one token. Tokens receive a learned
//! frame-position embedding plus a per-sample conditioning vector (noise
//! level features and the caption embedding), then pass through pre-norm
//! transformer blocks. The raw network output is wrapped in the standard
//! EDM preconditioning with data standard deviation 0.5, applied to poses
//! measured from the fixed rest pose so that the diffused signal is
//! roughly centred.
//!
//! Adapters hook in per block: LoRA on the four self-attention projections,
//! and audio conditioning (cross-attention or feature addition) right after
//! self-attention in the selected layers.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::adapters::{
    lora_on_tape, window_mask, zica_on_tape, AdapterLayout, AdapterSet, AudioConditioning, Projection,
};
use crate::data::{ConditionTokens, REST_POSE, VOCAB_SIZE};
use crate::diffusion::{GuidedDenoiser, SigmaRange};
use crate::numerics::{Real, Rng, Tape, Tensor, Var};
use crate::{invalid, Result};

pub const SIGMA_DATA: f64 = 0.5;
const LN_EPS: f64 = 1e-5;

/// How ZICA queries see the audio sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AudioAttention {
    /// Every frame attends to every audio token.
    #[default]
    Global,
    /// Frame `f` attends to audio tokens within `radius` of its own time.
    Windowed { radius: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub frames: usize,
    pub joints: usize,
    pub d_audio: usize,
    pub vocab: usize,
    pub sigma_range: SigmaRange,
    pub zica_layers: BTreeSet<usize>,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub conditioning: AudioConditioning,
    pub audio_attention: AudioAttention,
    pub mlp_ratio: usize,
    pub fourier_features: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 8,
            d_model: 64,
            heads: 4,
            frames: 32,
            joints: 8,
            d_audio: 4,
            vocab: VOCAB_SIZE,
            sigma_range: SigmaRange::edm(),
            zica_layers: BTreeSet::new(),
            lora_rank: 16,
            lora_alpha: 16.0,
            conditioning: AudioConditioning::CrossAttention,
            audio_attention: AudioAttention::Global,
            mlp_ratio: 4,
            fourier_features: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.layers > 0, "layers must be positive".to_string()),
            (self.d_model > 0 && self.heads > 0, "d_model and heads must be positive".into()),
            (
                self.heads > 0 && self.d_model % self.heads == 0,
                format!("heads = {} must divide d_model = {}", self.heads, self.d_model),
            ),
            (self.frames > 0 && self.joints > 0, "frames and joints must be positive".into()),
            (self.d_audio > 0, "d_audio must be positive".into()),
            (self.vocab >= VOCAB_SIZE, format!("vocab must cover {VOCAB_SIZE} tokens")),
            (self.mlp_ratio > 0 && self.fourier_features > 0, "mlp_ratio and fourier_features must be positive".into()),
            (
                self.zica_layers.iter().all(|&l| l < self.layers),
                format!("zica_layers {:?} outside 0..{}", self.zica_layers, self.layers),
            ),
            (self.lora_rank <= self.d_model, format!("lora_rank {} exceeds d_model {}", self.lora_rank, self.d_model)),
            (
                self.lora_rank == 0 || (self.lora_alpha > 0.0 && self.lora_alpha.is_finite()),
                format!("lora_alpha = {} must be positive", self.lora_alpha),
            ),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(invalid(msg));
            }
        }
        Ok(())
    }

    pub fn pose_dim(&self) -> usize {
        self.joints * 2
    }

    pub fn adapter_layout(&self) -> AdapterLayout {
        AdapterLayout {
            layers: self.layers,
            d_model: self.d_model,
            d_audio: self.d_audio,
            heads: self.heads,
            zica_layers: self.zica_layers.clone(),
            lora_rank: self.lora_rank,
            lora_alpha: self.lora_alpha,
            conditioning: self.conditioning,
        }
    }

    /// True when the two configs describe the same base network; adapter
    /// fields may differ.
    pub fn same_base(&self, other: &ModelConfig) -> bool {
        self.layers == other.layers
            && self.d_model == other.d_model
            && self.heads == other.heads
            && self.frames == other.frames
            && self.joints == other.joints
            && self.d_audio == other.d_audio
            && self.vocab == other.vocab
            && self.sigma_range == other.sigma_range
            && self.mlp_ratio == other.mlp_ratio
            && self.fourier_features == other.fourier_features
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<W> {
    pub ln1_gain: W,
    pub ln1_shift: W,
    pub w_q: W,
    pub w_k: W,
    pub w_v: W,
    pub w_o: W,
    pub ln2_gain: W,
    pub ln2_shift: W,
    pub mlp_in: W,
    pub mlp_in_bias: W,
    pub mlp_out: W,
    pub mlp_out_bias: W,
}

impl<W> Block<W> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a W) -> U) -> Block<U> {
        let mut g = |n: &str, w: &'a W| f(&format!("{prefix}.{n}"), w);
        Block {
            ln1_gain: g("ln1_gain", &self.ln1_gain),
            ln1_shift: g("ln1_shift", &self.ln1_shift),
            w_q: g("w_q", &self.w_q),
            w_k: g("w_k", &self.w_k),
            w_v: g("w_v", &self.w_v),
            w_o: g("w_o", &self.w_o),
            ln2_gain: g("ln2_gain", &self.ln2_gain),
            ln2_shift: g("ln2_shift", &self.ln2_shift),
            mlp_in: g("mlp_in", &self.mlp_in),
            mlp_in_bias: g("mlp_in_bias", &self.mlp_in_bias),
            mlp_out: g("mlp_out", &self.mlp_out),
            mlp_out_bias: g("mlp_out_bias", &self.mlp_out_bias),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut W)) {
        let fields: [(&str, &mut W); 12] = [
            ("ln1_gain", &mut self.ln1_gain),
            ("ln1_shift", &mut self.ln1_shift),
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
            ("w_o", &mut self.w_o),
            ("ln2_gain", &mut self.ln2_gain),
            ("ln2_shift", &mut self.ln2_shift),
            ("mlp_in", &mut self.mlp_in),
            ("mlp_in_bias", &mut self.mlp_in_bias),
            ("mlp_out", &mut self.mlp_out),
            ("mlp_out_bias", &mut self.mlp_out_bias),
        ];
        for (n, w) in fields {
            f(&format!("{prefix}.{n}"), w);
        }
    }

    fn projection(&self, p: Projection) -> &W {
        match p {
            Projection::Q => &self.w_q,
            Projection::K => &self.w_k,
            Projection::V => &self.w_v,
            Projection::O => &self.w_o,
        }
    }
}

/// The frozen-after-pretraining network.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseWeights<W> {
    /// `[d, J·2]`
    pub pose_in: W,
    pub pose_in_bias: W,
    /// `[F, d]`
    pub position: W,
    /// `[vocab, d]`
    pub caption: W,
    /// `[d, 2·fourier_features]`
    pub sigma_in: W,
    pub sigma_in_bias: W,
    pub sigma_out: W,
    pub sigma_out_bias: W,
    pub blocks: Vec<Block<W>>,
    pub ln_gain: W,
    pub ln_shift: W,
    /// `[J·2, d]`
    pub head: W,
    pub head_bias: W,
}

impl<W> BaseWeights<W> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a W) -> U) -> BaseWeights<U> {
        let pose_in = f(&format!("{prefix}pose_in"), &self.pose_in);
        let pose_in_bias = f(&format!("{prefix}pose_in_bias"), &self.pose_in_bias);
        let position = f(&format!("{prefix}position"), &self.position);
        let caption = f(&format!("{prefix}caption"), &self.caption);
        let sigma_in = f(&format!("{prefix}sigma_in"), &self.sigma_in);
        let sigma_in_bias = f(&format!("{prefix}sigma_in_bias"), &self.sigma_in_bias);
        let sigma_out = f(&format!("{prefix}sigma_out"), &self.sigma_out);
        let sigma_out_bias = f(&format!("{prefix}sigma_out_bias"), &self.sigma_out_bias);
        let blocks = self.blocks.iter().enumerate().map(|(i, b)| b.map(&format!("{prefix}block.{i}"), f)).collect();
        BaseWeights {
            pose_in,
            pose_in_bias,
            position,
            caption,
            sigma_in,
            sigma_in_bias,
            sigma_out,
            sigma_out_bias,
            blocks,
            ln_gain: f(&format!("{prefix}ln_gain"), &self.ln_gain),
            ln_shift: f(&format!("{prefix}ln_shift"), &self.ln_shift),
            head: f(&format!("{prefix}head"), &self.head),
            head_bias: f(&format!("{prefix}head_bias"), &self.head_bias),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut W)) {
        f(&format!("{prefix}pose_in"), &mut self.pose_in);
        f(&format!("{prefix}pose_in_bias"), &mut self.pose_in_bias);
        f(&format!("{prefix}position"), &mut self.position);
        f(&format!("{prefix}caption"), &mut self.caption);
        f(&format!("{prefix}sigma_in"), &mut self.sigma_in);
        f(&format!("{prefix}sigma_in_bias"), &mut self.sigma_in_bias);
        f(&format!("{prefix}sigma_out"), &mut self.sigma_out);
        f(&format!("{prefix}sigma_out_bias"), &mut self.sigma_out_bias);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.for_each_mut(&format!("{prefix}block.{i}"), f);
        }
        f(&format!("{prefix}ln_gain"), &mut self.ln_gain);
        f(&format!("{prefix}ln_shift"), &mut self.ln_shift);
        f(&format!("{prefix}head"), &mut self.head);
        f(&format!("{prefix}head_bias"), &mut self.head_bias);
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &W)> {
        let mut out = Vec::new();
        self.map(prefix, &mut |name, w| out.push((name.to_string(), w)));
        out
    }
}

fn normal<T: Real>(shape: &[usize], std: f64, rng: &mut Rng) -> Result<Tensor<T>> {
    Ok(Tensor::random_normal(shape, std, rng)?)
}

fn zeros<T: Real>(shape: &[usize]) -> Result<Tensor<T>> {
    Ok(Tensor::zeros(shape)?)
}

fn ones<T: Real>(shape: &[usize]) -> Result<Tensor<T>> {
    Ok(Tensor::ones(shape)?)
}

impl<T: Real> BaseWeights<Tensor<T>> {
    pub(crate) fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let d = cfg.d_model;
        let hidden = d * cfg.mlp_ratio;
        let p = cfg.pose_dim();
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        // Residual branch outputs shrink with depth so the initial stack stays
        // close to the identity.
        let resid = fan(d) / (2.0 * cfg.layers as f64).sqrt();
        let mut blocks = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            blocks.push(Block {
                ln1_gain: ones(&[d])?,
                ln1_shift: zeros(&[d])?,
                w_q: normal(&[d, d], fan(d), rng)?,
                w_k: normal(&[d, d], fan(d), rng)?,
                w_v: normal(&[d, d], fan(d), rng)?,
                w_o: normal(&[d, d], resid, rng)?,
                ln2_gain: ones(&[d])?,
                ln2_shift: zeros(&[d])?,
                mlp_in: normal(&[hidden, d], fan(d), rng)?,
                mlp_in_bias: zeros(&[hidden])?,
                mlp_out: normal(&[d, hidden], fan(hidden) / (2.0 * cfg.layers as f64).sqrt(), rng)?,
                mlp_out_bias: zeros(&[d])?,
            });
        }
        Ok(BaseWeights {
            pose_in: normal(&[d, p], fan(p), rng)?,
            pose_in_bias: zeros(&[d])?,
            position: normal(&[cfg.frames, d], 0.5, rng)?,
            caption: normal(&[cfg.vocab, d], 0.5, rng)?,
            sigma_in: normal(&[d, 2 * cfg.fourier_features], fan(2 * cfg.fourier_features), rng)?,
            sigma_in_bias: zeros(&[d])?,
            sigma_out: normal(&[d, d], fan(d), rng)?,
            sigma_out_bias: zeros(&[d])?,
            blocks,
            ln_gain: ones(&[d])?,
            ln_shift: zeros(&[d])?,
            head: zeros(&[p, d])?,
            head_bias: zeros(&[p])?,
        })
    }
}

/// Flattened `J×2` rest pose the preconditioning is centred on; joints
/// beyond the built-in skeleton sit at the origin.
pub fn pose_center(joints: usize) -> Vec<f64> {
    (0..joints).flat_map(|j| REST_POSE.get(j).map_or([0.0, 0.0], |&(x, y)| [x, y])).collect()
}

/// The `(c_skip, c_out, c_in, c_noise)` preconditioning coefficients.
pub fn preconditioning(sigma: f64) -> (f64, f64, f64, f64) {
    let s2 = sigma * sigma;
    let d2 = SIGMA_DATA * SIGMA_DATA;
    let c_skip = d2 / (s2 + d2);
    let c_out = sigma * SIGMA_DATA / (s2 + d2).sqrt();
    let c_in = 1.0 / (s2 + d2).sqrt();
    let c_noise = sigma.ln() / 4.0;
    (c_skip, c_out, c_in, c_noise)
}

/// Sinusoidal features of `c_noise` at frequencies from 0.5 to 32.
fn noise_features(c_noise: f64, k: usize) -> impl Iterator<Item = f64> {
    let freq = move |i: usize| {
        if k == 1 {
            1.0
        } else {
            0.5 * 64f64.powf(i as f64 / (k - 1) as f64)
        }
    };
    (0..k).map(move |i| (c_noise * freq(i)).sin()).chain((0..k).map(move |i| (c_noise * freq(i)).cos()))
}

/// Which parameters a forward pass should differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Base,
    Adapters,
    Everything,
}

/// Weights placed on a tape.
pub struct Bound {
    pub base: BaseWeights<Var>,
    pub adapters: Option<AdapterSet<Var>>,
}

impl Bound {
    /// Tape variables of every parameter, named as in checkpoints.
    pub fn named(&self) -> Vec<(String, Var)> {
        let mut out: Vec<(String, Var)> = self.base.named("base/").into_iter().map(|(n, v)| (n, *v)).collect();
        if let Some(a) = &self.adapters {
            out.extend(a.named("adapter/").into_iter().map(|(n, v)| (n, *v)));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub base: BaseWeights<Tensor<T>>,
    pub adapters: Option<AdapterSet<Tensor<T>>>,
}

/// A fresh base network (no adapters).
pub fn build_model<T: Real>(cfg: &ModelConfig, rng: &mut Rng) -> Result<Model<T>> {
    cfg.validate()?;
    Ok(Model { config: cfg.clone(), base: BaseWeights::init(cfg, rng)?, adapters: None })
}

pub fn null_condition() -> ConditionTokens {
    ConditionTokens::null()
}

/// One denoiser evaluation. `x` is `[F, J, 2]` or `[B, F, J, 2]`; `cond`
/// holds one caption per batch item (or a single caption for all), and
/// `audio` is `[T_a, d_audio]` or `[B, T_a, d_audio]`.
#[derive(Debug, Clone)]
pub struct DenoiserInput<T: Real> {
    pub x: Tensor<T>,
    pub sigma: f64,
    pub cond: Vec<ConditionTokens>,
    pub audio: Option<Tensor<T>>,
}

impl<T: Real> Model<T> {
    pub fn with_fresh_adapters(mut self, rng: &mut Rng) -> Result<Self> {
        self.adapters = Some(AdapterSet::init(&self.config.adapter_layout(), rng)?);
        Ok(self)
    }

    pub fn parameter_count(&self) -> usize {
        let base: usize = self.base.named("").iter().map(|(_, t)| t.numel()).sum();
        base + self.adapters.as_ref().map_or(0, |a| a.parameter_count())
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            base: self.base.map("", &mut |_, t| t.cast()),
            adapters: self.adapters.as_ref().map(|a| a.map("", &mut |_, t| t.cast())),
        }
    }

    pub fn bind(&self, tape: &Tape<T>, trainable: Trainable) -> Bound {
        let base_grad = matches!(trainable, Trainable::Base | Trainable::Everything);
        let adapter_grad = matches!(trainable, Trainable::Adapters | Trainable::Everything);
        let put = |t: &Tensor<T>, grad: bool| {
            if grad {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        Bound {
            base: self.base.map("", &mut |_, t| put(t, base_grad)),
            adapters: self.adapters.as_ref().map(|a| a.map("", &mut |_, t| put(t, adapter_grad))),
        }
    }

    /// Batched forward pass on a tape. `x` is `[B, F, J·2]`, `sigmas` and
    /// `cond` have length `B`, `audio` is `[B, T_a, d_audio]`. Returns the
    /// preconditioned denoiser output `[B, F, J·2]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &Tape<T>,
        w: &Bound,
        x: Var,
        sigmas: &[f64],
        cond: &[ConditionTokens],
        audio: Option<Var>,
        skip: Option<usize>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let shape = tape.shape(x);
        let (d, p) = (cfg.d_model, cfg.pose_dim());
        if shape.len() != 3 || shape[1] != cfg.frames || shape[2] != p {
            return Err(invalid(format!("model input {:?} does not match [B, {}, {}]", shape, cfg.frames, p)));
        }
        let b = shape[0];
        if sigmas.len() != b || cond.len() != b {
            return Err(invalid(format!(
                "batch of {b} needs {b} noise levels and captions, got {} and {}",
                sigmas.len(),
                cond.len()
            )));
        }
        if let Some(&s) = sigmas.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(invalid(format!("sigma = {s} must be positive and finite")));
        }
        if let Some(l) = skip {
            if l >= cfg.layers {
                return Err(invalid(format!("skip layer {l} outside 0..{}", cfg.layers)));
            }
        }
        let coeffs: Vec<_> = sigmas.iter().map(|&s| preconditioning(s)).collect();
        let per_item = |f: &dyn Fn(&(f64, f64, f64, f64)) -> f64| Tensor::from_fn(&[b, 1, 1], |i| T::of(f(&coeffs[i])));
        let c_skip = tape.constant(per_item(&|c| c.0)?);
        let c_out = tape.constant(per_item(&|c| c.1)?);
        let c_in = tape.constant(per_item(&|c| c.2)?);
        let center = pose_center(cfg.joints);
        let constant = |v: Vec<f64>| -> Result<Var> { Ok(tape.constant(Tensor::from_f64(&[1, 1, p], &v)?)) };
        let (center, below) = (constant(center.clone())?, constant(center.iter().map(|c| -c).collect())?);
        let x = tape.add_broadcast(x, below)?;

        let scaled = tape.mul_broadcast(x, c_in)?;
        let mut h = tape.linear(scaled, w.base.pose_in, Some(w.base.pose_in_bias))?;
        h = tape.add_broadcast(h, w.base.position)?;

        let k = cfg.fourier_features;
        let feats: Vec<T> = coeffs.iter().flat_map(|c| noise_features(c.3, k)).map(T::of).collect();
        let feats = tape.constant(Tensor::new(vec![b, 2 * k], feats)?);
        let s = tape.linear(feats, w.base.sigma_in, Some(w.base.sigma_in_bias))?;
        let s = tape.silu(s)?;
        let s = tape.linear(s, w.base.sigma_out, Some(w.base.sigma_out_bias))?;
        let hist: Vec<T> = cond
            .iter()
            .flat_map(|c| {
                let mut row = vec![T::zero(); cfg.vocab];
                for (i, &n) in c.histogram().iter().enumerate() {
                    row[i] = T::of(n as f64);
                }
                row
            })
            .collect();
        let hist = tape.constant(Tensor::new(vec![b, cfg.vocab], hist)?);
        let c = tape.matmul(hist, w.base.caption)?;
        let c = tape.add(c, s)?;
        let c = tape.reshape(c, &[b, 1, d])?;
        h = tape.add_broadcast(h, c)?;

        let adapters = w.adapters.as_ref();
        let audio_tokens = match (adapters, audio) {
            (Some(a), Some(au)) if !(a.zica.is_empty() && a.feature_add.is_empty()) => {
                let ash = tape.shape(au);
                if ash.len() != 3 || ash[0] != b || ash[2] != cfg.d_audio || ash[1] > cfg.frames {
                    return Err(invalid(format!(
                        "audio {:?} does not match [{b}, <= {}, {}]",
                        ash, cfg.frames, cfg.d_audio
                    )));
                }
                if !a.feature_add.is_empty() && ash[1] != cfg.frames {
                    return Err(invalid("feature addition needs one audio token per frame"));
                }
                let t = tape.linear(au, a.audio.proj, Some(a.audio.bias))?;
                let pos =
                    if ash[1] == cfg.frames { w.base.position } else { tape.slice(w.base.position, 0, 0, ash[1])? };
                Some((tape.add_broadcast(t, pos)?, ash[1]))
            }
            _ => None,
        };
        let mask = match (cfg.audio_attention, &audio_tokens) {
            (AudioAttention::Windowed { radius }, Some((_, ta))) => {
                Some(tape.constant(window_mask(cfg.frames, *ta, radius)?))
            }
            _ => None,
        };

        let eps = T::of(LN_EPS);
        for (l, blk) in w.base.blocks.iter().enumerate() {
            if skip == Some(l) {
                continue;
            }
            let proj = |x: Var, p: Projection| -> Result<Var> {
                match adapters.and_then(|a| a.lora.get(&(l, p))) {
                    Some(pair) => lora_on_tape(tape, x, *blk.projection(p), pair),
                    None => Ok(tape.linear(x, *blk.projection(p), None)?),
                }
            };
            let a = tape.layer_norm_affine(h, blk.ln1_gain, blk.ln1_shift, eps)?;
            let q = proj(a, Projection::Q)?;
            let kk = proj(a, Projection::K)?;
            let v = proj(a, Projection::V)?;
            let att = tape.multi_head_attention(q, kk, v, cfg.heads, None)?;
            let o = proj(att, Projection::O)?;
            h = tape.add(h, o)?;
            if let (Some(ad), Some((tokens, _))) = (adapters, &audio_tokens) {
                if let Some(z) = ad.zica.get(&l) {
                    h = zica_on_tape(tape, h, *tokens, z, mask)?;
                }
                if let Some(&wa) = ad.feature_add.get(&l) {
                    let add = tape.linear(*tokens, wa, None)?;
                    h = tape.add(h, add)?;
                }
            }
            let m = tape.layer_norm_affine(h, blk.ln2_gain, blk.ln2_shift, eps)?;
            let m = tape.linear(m, blk.mlp_in, Some(blk.mlp_in_bias))?;
            let m = tape.silu(m)?;
            let m = tape.linear(m, blk.mlp_out, Some(blk.mlp_out_bias))?;
            h = tape.add(h, m)?;
        }
        let out = tape.layer_norm_affine(h, w.base.ln_gain, w.base.ln_shift, eps)?;
        let raw = tape.linear(out, w.base.head, Some(w.base.head_bias))?;
        let skip_part = tape.mul_broadcast(x, c_skip)?;
        let out_part = tape.mul_broadcast(raw, c_out)?;
        let centred = tape.add(skip_part, out_part)?;
        Ok(tape.add_broadcast(centred, center)?)
    }

    fn run(&self, input: &DenoiserInput<T>, skip: Option<usize>) -> Result<Tensor<T>> {
        let cfg = &self.config;
        let xs = input.x.shape();
        let b = match xs.len() {
            3 => 1,
            4 => xs[0],
            _ => 0,
        };
        if b == 0 || xs[xs.len() - 3..] != [cfg.frames, cfg.joints, 2] {
            return Err(invalid(format!(
                "denoise: x {:?} must be [F, J, 2] or [B, F, J, 2] with F = {}, J = {}",
                xs, cfg.frames, cfg.joints
            )));
        }
        let cond: Vec<ConditionTokens> = match input.cond.len() {
            1 => vec![input.cond[0]; b],
            n if n == b => input.cond.clone(),
            n => return Err(invalid(format!("denoise: {n} captions for a batch of {b}"))),
        };
        let tape = Tape::new();
        let w = self.bind(&tape, Trainable::Nothing);
        let x = tape.constant(input.x.reshape(&[b, cfg.frames, cfg.pose_dim()])?);
        let audio = match &input.audio {
            None => None,
            Some(a) => {
                let a3 = match a.rank() {
                    2 if b == 1 => a.reshape(&[1, a.shape()[0], a.shape()[1]])?,
                    2 => {
                        let one = a.reshape(&[1, a.shape()[0], a.shape()[1]])?;
                        one.broadcast_to(&[b, a.shape()[0], a.shape()[1]])?
                    }
                    3 => a.clone(),
                    _ => return Err(invalid(format!("denoise: audio {:?} must be rank 2 or 3", a.shape()))),
                };
                Some(tape.constant(a3))
            }
        };
        let sigmas = vec![input.sigma; b];
        let out = self.forward(&tape, &w, x, &sigmas, &cond, audio, skip)?;
        Ok(tape.value(out).reshape(xs)?)
    }
}

pub fn denoise<T: Real>(m: &Model<T>, input: &DenoiserInput<T>) -> Result<Tensor<T>> {
    m.run(input, None)
}

/// As [`denoise`] with block `skip_layer` bypassed.
pub fn denoise_with_skip<T: Real>(m: &Model<T>, input: &DenoiserInput<T>, skip_layer: usize) -> Result<Tensor<T>> {
    if skip_layer >= m.config.layers {
        return Err(invalid(format!("skip layer {skip_layer} outside 0..{}", m.config.layers)));
    }
    m.run(input, Some(skip_layer))
}

/// A model with a fixed caption and audio track, exposed to the sampler.
/// The unconditional branch drops both the caption and the audio.
pub struct Conditioned<'a, T: Real> {
    pub model: &'a Model<T>,
    pub cond: Vec<ConditionTokens>,
    pub audio: Option<Tensor<T>>,
    pub skip: Option<usize>,
}

impl<T: Real> GuidedDenoiser<T> for Conditioned<'_, T> {
    fn denoise_cond(&self, x: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
        let input = DenoiserInput { x: x.clone(), sigma, cond: self.cond.clone(), audio: self.audio.clone() };
        self.model.run(&input, self.skip)
    }

    fn denoise_uncond(&self, x: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
        let input = DenoiserInput { x: x.clone(), sigma, cond: vec![null_condition()], audio: None };
        self.model.run(&input, self.skip)
    }
}
