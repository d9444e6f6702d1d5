//! Trainable audio adapters: zero-initialized cross-attention (ZICA) blocks
//! and low-rank updates (LoRA) on the self-attention projections.
//!
//! Both start as exact identities. ZICA computes `Z = V + W_O·Attn(V, A)`
//! with `W_O = 0`, and every LoRA pair starts with its up-projection `B = 0`.
//!
//! Weight containers are generic over the leaf type so the same structure
//! holds concrete tensors for storage and tape variables for a forward pass.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::numerics::{Real, Rng, Tape, Tensor, Var};
use crate::{invalid, Result};

/// Standard deviation of the Gaussian used for non-zero adapter weights.
pub const INIT_STD: f64 = 0.02;

/// Additive attention bias for keys outside a window.
const MASKED: f64 = -1.0e9;

#[derive(Debug, Clone, PartialEq)]
pub struct Zica<W> {
    /// `[d, d]`
    pub w_q: W,
    /// `[d, d_a]`
    pub w_k: W,
    /// `[d, d_a]`
    pub w_v: W,
    /// `[d, d]`, zero at initialization.
    pub w_o: W,
    pub heads: usize,
}

pub type ZicaWeights<T> = Zica<Tensor<T>>;

impl<W> Zica<W> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a W) -> U) -> Zica<U> {
        Zica {
            w_q: f(&format!("{prefix}.w_q"), &self.w_q),
            w_k: f(&format!("{prefix}.w_k"), &self.w_k),
            w_v: f(&format!("{prefix}.w_v"), &self.w_v),
            w_o: f(&format!("{prefix}.w_o"), &self.w_o),
            heads: self.heads,
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut W)) {
        f(&format!("{prefix}.w_q"), &mut self.w_q);
        f(&format!("{prefix}.w_k"), &mut self.w_k);
        f(&format!("{prefix}.w_v"), &mut self.w_v);
        f(&format!("{prefix}.w_o"), &mut self.w_o);
    }
}

impl<T: Real> ZicaWeights<T> {
    pub fn d_model(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn d_audio(&self) -> usize {
        self.w_k.shape()[1]
    }

    pub fn head_dim(&self) -> usize {
        self.d_model() / self.heads
    }
}

pub fn zica_init<T: Real>(d: usize, d_a: usize, heads: usize, rng: &mut Rng) -> Result<ZicaWeights<T>> {
    if d == 0 || d_a == 0 || heads == 0 || d % heads != 0 {
        return Err(invalid(format!(
            "zica_init: d = {d} must be a positive multiple of heads = {heads}, d_a = {d_a} positive"
        )));
    }
    Ok(Zica {
        w_q: Tensor::random_normal(&[d, d], INIT_STD, rng)?,
        w_k: Tensor::random_normal(&[d, d_a], INIT_STD, rng)?,
        w_v: Tensor::random_normal(&[d, d_a], INIT_STD, rng)?,
        w_o: Tensor::zeros(&[d, d])?,
        heads,
    })
}

/// ZICA on a tape. `v` is `[B, F, d]`, `audio` is `[B, T_a, d_a]`, and
/// `mask` an optional additive `[F, T_a]` bias (see [`window_mask`]).
pub fn zica_on_tape<T: Real>(tape: &Tape<T>, v: Var, audio: Var, w: &Zica<Var>, mask: Option<Var>) -> Result<Var> {
    let q = tape.linear(v, w.w_q, None)?;
    let k = tape.linear(audio, w.w_k, None)?;
    let values = tape.linear(audio, w.w_v, None)?;
    let attn = tape.multi_head_attention(q, k, values, w.heads, mask)?;
    let out = tape.linear(attn, w.w_o, None)?;
    Ok(tape.add(v, out)?)
}

/// Standalone ZICA: `V` is `[F, d]` (or `[B, F, d]`), `A` is `[T_a, d_a]`
/// (or `[B, T_a, d_a]`). Returns `Z` shaped like `V`.
pub fn zica_forward<T: Real>(v: &Tensor<T>, a: &Tensor<T>, w: &ZicaWeights<T>) -> Result<Tensor<T>> {
    let (v3, a3) = match (v.rank(), a.rank()) {
        (2, 2) => (v.reshape(&[1, v.shape()[0], v.shape()[1]])?, a.reshape(&[1, a.shape()[0], a.shape()[1]])?),
        (3, 3) => (v.clone(), a.clone()),
        _ => {
            return Err(invalid(format!(
                "zica_forward: expected V [F, d] and A [T_a, d_a], got {:?} and {:?}",
                v.shape(),
                a.shape()
            )))
        }
    };
    if a3.shape()[1] == 0 {
        return Err(invalid("zica_forward: no audio tokens"));
    }
    if v3.shape()[2] != w.d_model() || a3.shape()[2] != w.d_audio() || v3.shape()[0] != a3.shape()[0] {
        return Err(invalid(format!(
            "zica_forward: V {:?} / A {:?} inconsistent with weights d = {}, d_a = {}",
            v.shape(),
            a.shape(),
            w.d_model(),
            w.d_audio()
        )));
    }
    let tape = Tape::new();
    let vv = tape.constant(v3);
    let av = tape.constant(a3);
    let wv = w.map("zica", &mut |_, t| tape.constant(t.clone()));
    let z = zica_on_tape(&tape, vv, av, &wv, None)?;
    Ok(tape.value(z).reshape(v.shape())?)
}

/// Additive `[frames, tokens]` mask that lets frame `f` see only the audio
/// tokens within `radius` of its time-aligned token.
pub fn window_mask<T: Real>(frames: usize, tokens: usize, radius: usize) -> Result<Tensor<T>> {
    if frames == 0 || tokens == 0 {
        return Err(invalid("window_mask: empty sequence"));
    }
    Tensor::from_fn(&[frames, tokens], |i| {
        let (f, t) = (i / tokens, i % tokens);
        let centre = (f * tokens) / frames;
        if centre.abs_diff(t) <= radius {
            T::zero()
        } else {
            T::of(MASKED)
        }
    })
    .map_err(Into::into)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Projection {
    Q,
    K,
    V,
    O,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Projection::Q, Projection::K, Projection::V, Projection::O];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
            Projection::O => "o",
        }
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lora<W> {
    /// `A`, `[r, d_in]`
    pub down: W,
    /// `B`, `[d_out, r]`, zero at initialization.
    pub up: W,
    pub rank: usize,
    pub alpha: f64,
}

pub type LoraPair<T> = Lora<Tensor<T>>;

impl<W> Lora<W> {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a W) -> U) -> Lora<U> {
        Lora {
            down: f(&format!("{prefix}.down"), &self.down),
            up: f(&format!("{prefix}.up"), &self.up),
            rank: self.rank,
            alpha: self.alpha,
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut W)) {
        f(&format!("{prefix}.down"), &mut self.down);
        f(&format!("{prefix}.up"), &mut self.up);
    }
}

impl<T: Real> LoraPair<T> {
    fn check(&self) -> Result<()> {
        let (ds, us) = (self.down.shape(), self.up.shape());
        if ds.len() != 2 || us.len() != 2 || ds[0] != self.rank || us[1] != self.rank {
            return Err(invalid(format!("LoRA pair inconsistent with rank {}: A {:?}, B {:?}", self.rank, ds, us)));
        }
        if self.rank == 0 || self.rank > ds[1].min(us[0]) {
            return Err(invalid(format!("LoRA rank {} outside 1..={}", self.rank, ds[1].min(us[0]))));
        }
        Ok(())
    }

    pub fn d_in(&self) -> usize {
        self.down.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.up.shape()[0]
    }

    /// The effective update `(α/r)·B·A`, `[d_out, d_in]`.
    pub fn delta(&self) -> Result<Tensor<T>> {
        self.check()?;
        Ok(self.up.matmul(&self.down)?.scale(T::of(self.scale())))
    }
}

pub fn lora_init<T: Real>(d_in: usize, d_out: usize, rank: usize, alpha: f64, rng: &mut Rng) -> Result<LoraPair<T>> {
    if rank == 0 || rank > d_in.min(d_out) {
        return Err(invalid(format!("lora_init: rank {rank} outside 1..={}", d_in.min(d_out))));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(invalid(format!("lora_init: alpha = {alpha} must be positive")));
    }
    Ok(Lora {
        down: Tensor::random_normal(&[rank, d_in], 1.0 / (rank as f64).sqrt(), rng)?,
        up: Tensor::zeros(&[d_out, rank])?,
        rank,
        alpha,
    })
}

/// `x (W + (α/r)·B·A)ᵀ` on a tape, evaluated as `x Wᵀ + (α/r)·(x Aᵀ) Bᵀ`.
pub fn lora_on_tape<T: Real>(tape: &Tape<T>, x: Var, weight: Var, p: &Lora<Var>) -> Result<Var> {
    let base = tape.linear(x, weight, None)?;
    let down = tape.linear(x, p.down, None)?;
    let up = tape.linear(down, p.up, None)?;
    let update = tape.scale(up, T::of(p.scale()))?;
    Ok(tape.add(base, update)?)
}

/// `(W + (α/r)·B·A)·x` applied to the last axis of `x` (a vector or a batch
/// of row vectors).
pub fn lora_apply<T: Real>(weight: &Tensor<T>, p: &LoraPair<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    p.check()?;
    let ws = weight.shape();
    if ws.len() != 2 || ws[0] != p.d_out() || ws[1] != p.d_in() {
        return Err(invalid(format!("lora_apply: W {:?} does not match pair [{} x {}]", ws, p.d_out(), p.d_in())));
    }
    if x.rank() == 0 || *x.shape().last().unwrap() != p.d_in() {
        return Err(invalid(format!("lora_apply: x {:?} last axis must be {}", x.shape(), p.d_in())));
    }
    let rows = if x.rank() == 1 { x.reshape(&[1, p.d_in()])? } else { x.clone() };
    let tape = Tape::new();
    let xv = tape.constant(rows);
    let wv = tape.constant(weight.clone());
    let pv = p.map("lora", &mut |_, t| tape.constant(t.clone()));
    let y = tape.value(lora_on_tape(&tape, xv, wv, &pv)?);
    let mut out_shape = x.shape().to_vec();
    *out_shape.last_mut().unwrap() = p.d_out();
    Ok(y.reshape(&out_shape)?)
}

/// Projects raw per-frame audio features into the model width.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioEncoder<W> {
    /// `[d, d_audio]`
    pub proj: W,
    /// `[d]`
    pub bias: W,
}

impl<W> AudioEncoder<W> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a W) -> U) -> AudioEncoder<U> {
        AudioEncoder { proj: f(&format!("{prefix}.proj"), &self.proj), bias: f(&format!("{prefix}.bias"), &self.bias) }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut W)) {
        f(&format!("{prefix}.proj"), &mut self.proj);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

/// How audio enters the selected layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AudioConditioning {
    /// Zero-initialized cross-attention.
    #[default]
    CrossAttention,
    /// The ablation baseline: each frame's projected audio feature passes
    /// through a zero-initialized `[d, d]` map and is added to that frame's
    /// token.
    FeatureAddition,
}

/// Where and how adapters attach to a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterLayout {
    pub layers: usize,
    pub d_model: usize,
    pub d_audio: usize,
    pub heads: usize,
    pub zica_layers: BTreeSet<usize>,
    /// 0 disables LoRA.
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub conditioning: AudioConditioning,
}

/// The full trainable adapter stack.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet<W> {
    pub audio: AudioEncoder<W>,
    pub zica: BTreeMap<usize, Zica<W>>,
    pub feature_add: BTreeMap<usize, W>,
    pub lora: BTreeMap<(usize, Projection), Lora<W>>,
}

impl<W> AdapterSet<W> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a W) -> U) -> AdapterSet<U> {
        AdapterSet {
            audio: self.audio.map(&format!("{prefix}audio"), f),
            zica: self.zica.iter().map(|(&l, z)| (l, z.map(&format!("{prefix}zica.{l}"), f))).collect(),
            feature_add: self
                .feature_add
                .iter()
                .map(|(&l, w)| (l, f(&format!("{prefix}feature_add.{l}"), w)))
                .collect(),
            lora: self
                .lora
                .iter()
                .map(|(&(l, p), pair)| ((l, p), pair.map(&format!("{prefix}lora.{l}.{p}"), f)))
                .collect(),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut W)) {
        self.audio.for_each_mut(&format!("{prefix}audio"), f);
        for (l, z) in self.zica.iter_mut() {
            z.for_each_mut(&format!("{prefix}zica.{l}"), f);
        }
        for (l, w) in self.feature_add.iter_mut() {
            f(&format!("{prefix}feature_add.{l}"), w);
        }
        for ((l, p), pair) in self.lora.iter_mut() {
            pair.for_each_mut(&format!("{prefix}lora.{l}.{p}"), f);
        }
    }

    /// Every leaf with its name, in a fixed order.
    pub fn named(&self, prefix: &str) -> Vec<(String, &W)> {
        let mut out = Vec::new();
        self.map(prefix, &mut |name, w| out.push((name.to_string(), w)));
        out
    }
}

impl<T: Real> AdapterSet<Tensor<T>> {
    /// Fresh adapters: every path is an exact identity.
    pub fn init(layout: &AdapterLayout, rng: &mut Rng) -> Result<Self> {
        let AdapterLayout { layers, d_model: d, d_audio, heads, .. } = *layout;
        if let Some(&bad) = layout.zica_layers.iter().find(|&&l| l >= layers) {
            return Err(invalid(format!("adapter layer {bad} outside 0..{layers}")));
        }
        if d_audio == 0 {
            return Err(invalid("d_audio must be positive"));
        }
        let audio = AudioEncoder {
            proj: Tensor::random_normal(&[d, d_audio], 1.0 / (d_audio as f64).sqrt(), rng)?,
            bias: Tensor::zeros(&[d])?,
        };
        let mut zica = BTreeMap::new();
        let mut feature_add = BTreeMap::new();
        for &l in &layout.zica_layers {
            match layout.conditioning {
                AudioConditioning::CrossAttention => {
                    zica.insert(l, zica_init(d, d, heads, rng)?);
                }
                AudioConditioning::FeatureAddition => {
                    feature_add.insert(l, Tensor::zeros(&[d, d])?);
                }
            }
        }
        let mut lora = BTreeMap::new();
        if layout.lora_rank > 0 {
            for l in 0..layers {
                for p in Projection::ALL {
                    lora.insert((l, p), lora_init(d, d, layout.lora_rank, layout.lora_alpha, rng)?);
                }
            }
        }
        Ok(AdapterSet { audio, zica, feature_add, lora })
    }

    pub fn parameter_count(&self) -> usize {
        self.named("").iter().map(|(_, t)| t.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn zero_output_projection_is_identity_bitwise() {
        let mut rng = Rng::seed_from(3);
        let w = zica_init::<f64>(8, 4, 2, &mut rng).unwrap();
        assert_eq!(w.w_o.max_abs(), 0.0);
        let v = Tensor::random_normal(&[5, 8], 1.0, &mut rng).unwrap();
        let a = Tensor::random_normal(&[7, 4], 1.0, &mut rng).unwrap();
        let z = zica_forward(&v, &a, &w).unwrap();
        let bits = |x: &Tensor<f64>| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&z), bits(&v));
    }

    #[test]
    fn single_key_identity_projections_add_audio() {
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let w = Zica { w_q: id.clone(), w_k: id.clone(), w_v: id.clone(), w_o: id, heads: 1 };
        let v = t(&[1, 2], &[0.5, -1.0]);
        let a = t(&[1, 2], &[2.0, 3.0]);
        let z = zica_forward(&v, &a, &w).unwrap();
        assert_eq!(z.data(), &[2.5, 2.0]);
    }

    #[test]
    fn duplicated_audio_token_changes_nothing() {
        let mut rng = Rng::seed_from(9);
        let mut w = zica_init::<f64>(4, 3, 2, &mut rng).unwrap();
        w.w_o = Tensor::random_normal(&[4, 4], 1.0, &mut rng).unwrap();
        let v = Tensor::random_normal(&[3, 4], 1.0, &mut rng).unwrap();
        let one = Tensor::random_normal(&[1, 3], 1.0, &mut rng).unwrap();
        let two = Tensor::concat(&[&one, &one], 0).unwrap();
        let z1 = zica_forward(&v, &one, &w).unwrap();
        let z2 = zica_forward(&v, &two, &w).unwrap();
        assert!(z1.max_abs_diff(&z2).unwrap() < 1e-14);
    }

    #[test]
    fn zica_init_validation_and_determinism() {
        assert!(zica_init::<f64>(10, 4, 4, &mut Rng::seed_from(0)).is_err());
        let a = zica_init::<f32>(64, 64, 4, &mut Rng::seed_from(1)).unwrap();
        let b = zica_init::<f32>(64, 64, 4, &mut Rng::seed_from(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.head_dim(), 16);
    }

    #[test]
    fn zica_rejects_mismatched_shapes() {
        let w = zica_init::<f64>(4, 2, 1, &mut Rng::seed_from(0)).unwrap();
        let v = Tensor::zeros(&[3, 4]).unwrap();
        assert!(zica_forward(&v, &Tensor::zeros(&[2, 3]).unwrap(), &w).is_err());
        assert!(zica_forward(&v, &Tensor::zeros(&[2]).unwrap(), &w).is_err());
    }

    #[test]
    fn lora_examples() {
        let mut rng = Rng::seed_from(4);
        let w = Tensor::random_normal(&[3, 5], 1.0, &mut rng).unwrap();
        let p = lora_init::<f64>(5, 3, 2, 2.0, &mut rng).unwrap();
        assert_eq!(p.up.max_abs(), 0.0);
        let x = Tensor::random_normal(&[4, 5], 1.0, &mut rng).unwrap();
        let y = lora_apply(&w, &p, &x).unwrap();
        assert_eq!(y, x.matmul(&w.transpose().unwrap()).unwrap());

        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let pair = Lora { down: id.clone(), up: id, rank: 2, alpha: 2.0 };
        let x = t(&[2], &[3.0, -4.0]);
        assert_eq!(lora_apply(&Tensor::zeros(&[2, 2]).unwrap(), &pair, &x).unwrap().data(), &[3.0, -4.0]);

        let pair = Lora { down: t(&[1, 2], &[1.0, 0.0]), up: t(&[2, 1], &[0.0, 1.0]), rank: 1, alpha: 1.0 };
        let y = lora_apply(&Tensor::zeros(&[2, 2]).unwrap(), &pair, &t(&[2], &[5.0, 7.0])).unwrap();
        assert_eq!(y.data(), &[0.0, 5.0]);
    }

    #[test]
    fn lora_rank_bounds() {
        let mut rng = Rng::seed_from(0);
        assert!(lora_init::<f64>(4, 6, 0, 1.0, &mut rng).is_err());
        assert!(lora_init::<f64>(4, 6, 5, 1.0, &mut rng).is_err());
        let p = lora_init::<f64>(4, 6, 4, 4.0, &mut rng).unwrap();
        assert_eq!((p.d_in(), p.d_out(), p.rank), (4, 6, 4));
    }

    #[test]
    fn window_mask_allows_aligned_neighbourhood() {
        let m = window_mask::<f64>(4, 8, 1).unwrap();
        let row1: Vec<bool> = m.data()[8..16].iter().map(|&v| v == 0.0).collect();
        assert_eq!(row1, [false, true, true, true, false, false, false, false]);
    }

    #[test]
    fn adapter_set_layout() {
        let layout = AdapterLayout {
            layers: 4,
            d_model: 8,
            d_audio: 4,
            heads: 2,
            zica_layers: [1, 3].into_iter().collect(),
            lora_rank: 2,
            lora_alpha: 2.0,
            conditioning: AudioConditioning::CrossAttention,
        };
        let set = AdapterSet::<Tensor<f64>>::init(&layout, &mut Rng::seed_from(0)).unwrap();
        assert_eq!(set.zica.keys().copied().collect::<Vec<_>>(), vec![1, 3]);
        assert_eq!(set.lora.len(), 16);
        let names: Vec<String> = set.named("adapter/").into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "adapter/audio.proj");
        assert!(names.contains(&"adapter/zica.3.w_o".to_string()));
        assert!(names.contains(&"adapter/lora.0.q.down".to_string()));
        for (name, w) in set.named("") {
            let shape = w.shape().to_vec();
            if name.ends_with("w_o") || name.ends_with(".up") {
                assert_eq!(w.max_abs(), 0.0, "{name} {shape:?}");
            }
        }

        let bad = AdapterLayout { zica_layers: [4].into_iter().collect(), ..layout.clone() };
        assert!(AdapterSet::<Tensor<f64>>::init(&bad, &mut Rng::seed_from(0)).is_err());

        let add = AdapterLayout { conditioning: AudioConditioning::FeatureAddition, ..layout };
        let set = AdapterSet::<Tensor<f64>>::init(&add, &mut Rng::seed_from(0)).unwrap();
        assert!(set.zica.is_empty());
        assert_eq!(set.feature_add.len(), 2);
    }
}
