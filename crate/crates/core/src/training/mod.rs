//! Two-stage training: text-only base pre-training, then adapter training
//! on the frozen base.
//!
//! Both stages optimize the summed-per-clip denoising error averaged over
//! the batch. The base stage draws noise levels log-uniformly; the adapter
//! stage draws them from the decaying Beta schedule. A fraction of every
//! batch has its caption (and, in the adapter stage, its audio) dropped so
//! the unconditional guidance branch is learned.

mod adam;
mod checkpoint;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{
    base_weight_hash, checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, save_checkpoint, Checkpoint,
    CHECKPOINT_MAGIC,
};

use crate::data::{diversify_caption, ConditionTokens, Dataset, MixedSampler};
use crate::diffusion::{edm_loss_on_tape, sample_noise_level, ScheduleState};
use crate::model::{null_condition, Model, ModelConfig, Trainable};
use crate::numerics::{Real, Rng, Tape, Tensor, Var};
use crate::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Base,
    Adapter,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::Adapter => "adapter",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub p_cond_drop: f64,
    pub p_base: f64,
    pub beta0: f64,
    pub decay: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub checkpoint: Option<PathBuf>,
}

impl TrainConfig {
    pub const DEFAULT_STEPS: usize = 4000;
    pub const DESK_STEPS: usize = 2000;

    pub fn new(stage: Stage) -> Self {
        TrainConfig {
            stage,
            steps: Self::DEFAULT_STEPS,
            batch_size: 16,
            lr: 1e-4,
            p_cond_drop: 0.1,
            p_base: 0.1,
            beta0: ScheduleState::DEFAULT_BETA0,
            decay: ScheduleState::DEFAULT_DECAY,
            seed: 0,
            eval_every: 100,
            checkpoint: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(invalid("steps and batch size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.p_cond_drop) || !(0.0..=1.0).contains(&self.p_base) {
            return Err(invalid(format!(
                "p_cond_drop = {} and p_base = {} must lie in [0, 1]",
                self.p_cond_drop, self.p_base
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }

    /// Noise-level schedule of the adapter stage. `beta0 = 1` gives the
    /// uniform ablation.
    pub fn schedule(&self, model: &ModelConfig) -> Result<ScheduleState> {
        ScheduleState::new(self.beta0, self.decay, self.steps, model.sigma_range)
    }

    /// Guidance needs an unconditional branch, which is only trained when
    /// conditions were dropped.
    pub fn guidance_warning(&self) -> Option<String> {
        (self.p_cond_drop == 0.0)
            .then(|| "conditions were never dropped in training; the unconditional branch is untrained".to_string())
    }
}

/// One training batch with its noise already drawn, so the loss is a
/// deterministic function of the weights.
#[derive(Debug, Clone)]
pub struct Batch<T: Real> {
    /// Clean poses `[B, F, J·2]`.
    pub y: Tensor<T>,
    /// Noise `σ_i · ε` with the same shape.
    pub noise: Tensor<T>,
    pub sigmas: Vec<f64>,
    pub cond: Vec<ConditionTokens>,
    /// Audio features `[B, F, d_audio]`.
    pub audio: Tensor<T>,
    /// False where the condition was dropped; those items see no audio.
    pub keep: Vec<bool>,
}

impl<T: Real> Batch<T> {
    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }
}

/// Draws a batch. `sigma` maps the generator to one noise level.
pub fn draw_batch<T: Real>(
    dataset: &Dataset,
    sampler: &mut MixedSampler,
    cfg: &TrainConfig,
    rng: &mut Rng,
    sigma: &mut dyn FnMut(&mut Rng) -> f64,
) -> Result<Batch<T>> {
    let b = cfg.batch_size;
    let idx = sampler.batch(b, rng);
    let (f, p) = (dataset.frames, dataset.joints * 2);
    let mut y = Vec::with_capacity(b * f * p);
    let mut noise = Vec::with_capacity(b * f * p);
    let mut audio = Vec::new();
    let mut sigmas = Vec::with_capacity(b);
    let mut cond = Vec::with_capacity(b);
    let mut keep = Vec::with_capacity(b);
    for &i in &idx {
        let clip = &dataset.clips[i];
        let s = sigma(rng);
        let drop = rng.bernoulli(cfg.p_cond_drop);
        cond.push(if drop { null_condition() } else { diversify_caption(clip.caption, cfg.p_base, rng) });
        keep.push(!drop);
        sigmas.push(s);
        y.extend(clip.motion.poses.data().iter().map(|&v| T::of(v)));
        noise.extend((0..f * p).map(|_| T::of(s * rng.normal())));
        audio.extend(clip.track.features.data().iter().map(|&v| T::of(v)));
    }
    let d_audio = audio.len() / (b * f);
    Ok(Batch {
        y: Tensor::new(vec![b, f, p], y)?,
        noise: Tensor::new(vec![b, f, p], noise)?,
        sigmas,
        cond,
        audio: Tensor::new(vec![b, f, d_audio], audio)?,
        keep,
    })
}

fn gather<T: Real>(t: &Tensor<T>, rows: &[usize]) -> Result<Tensor<T>> {
    let parts: Vec<Tensor<T>> = rows.iter().map(|&r| t.slice(0, r, r + 1)).collect::<std::result::Result<_, _>>()?;
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    Ok(Tensor::concat(&refs, 0)?)
}

/// Batch loss on a tape. Items that kept their condition see the audio;
/// dropped items are denoised with neither caption nor audio.
pub fn batch_loss_on_tape<T: Real>(
    model: &Model<T>,
    tape: &Tape<T>,
    w: &crate::model::Bound,
    batch: &Batch<T>,
) -> Result<Var> {
    let b = batch.len();
    let noisy = batch.y.add(&batch.noise)?;
    let mut total: Option<Var> = None;
    for kept in [true, false] {
        let rows: Vec<usize> = (0..b).filter(|&i| batch.keep[i] == kept).collect();
        if rows.is_empty() {
            continue;
        }
        let x = tape.constant(gather(&noisy, &rows)?);
        let target = tape.constant(gather(&batch.y, &rows)?);
        let sig: Vec<f64> = rows.iter().map(|&i| batch.sigmas[i]).collect();
        let cond: Vec<ConditionTokens> = rows.iter().map(|&i| batch.cond[i]).collect();
        let audio = if kept { Some(tape.constant(gather(&batch.audio, &rows)?)) } else { None };
        let out = model.forward(tape, w, x, &sig, &cond, audio, None)?;
        // Mean over the sub-batch, re-weighted to a mean over the batch.
        let part = edm_loss_on_tape(tape, out, target)?;
        let part = tape.scale(part, T::of(rows.len() as f64 / b as f64))?;
        total = Some(match total {
            None => part,
            Some(t) => tape.add(t, part)?,
        });
    }
    total.ok_or_else(|| invalid("empty batch"))
}

/// Loss and gradients of every trainable parameter, keyed by checkpoint
/// name.
pub fn loss_and_gradients<T: Real>(
    model: &Model<T>,
    batch: &Batch<T>,
    trainable: Trainable,
) -> Result<(f64, BTreeMap<String, Tensor<T>>)> {
    let tape = Tape::new();
    let w = model.bind(&tape, trainable);
    let loss = batch_loss_on_tape(model, &tape, &w, batch)?;
    let value = tape.value(loss).item()?.as_f64();
    let grads = tape.backward(loss)?;
    let mut out = BTreeMap::new();
    for (name, v) in w.named() {
        if tape.requires_grad(v) {
            let like = tape.value(v);
            out.insert(name, grads.get_or_zeros(v, &like));
        }
    }
    Ok((value, out))
}

/// Applies one optimizer step to the named parameters of `model`.
pub fn apply_gradients<T: Real>(
    model: &mut Model<T>,
    opt: &mut Adam<T>,
    grads: &BTreeMap<String, Tensor<T>>,
) -> Result<()> {
    opt.begin_step();
    let mut err = None;
    let mut visit = |name: &str, t: &mut Tensor<T>| {
        if let Some(g) = grads.get(name) {
            if let Err(e) = opt.update(name, t, g) {
                err.get_or_insert(e);
            }
        }
    };
    model.base.for_each_mut("base/", &mut visit);
    if let Some(a) = model.adapters.as_mut() {
        a.for_each_mut("adapter/", &mut visit);
    }
    err.map_or(Ok(()), Err)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub beta: f64,
    pub sigma_mean: f64,
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("step,loss,beta,sigma_mean\n");
    for p in curve {
        let _ = writeln!(out, "{},{},{},{}", p.step, p.loss, p.beta, p.sigma_mean);
    }
    out
}

/// Resumable training state. Everything that influences the next step
/// lives in the checkpoint.
pub struct Trainer<T: Real> {
    pub state: Checkpoint<T>,
}

impl<T: Real> Trainer<T> {
    pub fn new_base(model: Model<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.stage != Stage::Base || model.adapters.is_some() {
            return Err(invalid("base training needs stage = base and a model without adapters"));
        }
        Ok(Trainer {
            state: Checkpoint {
                model,
                optim: Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() })?,
                schedule: None,
                rng: Rng::seed_from(cfg.seed).state(),
                step: 0,
                sampler_turn: 0,
                frozen_base_hash: None,
                train: cfg,
            },
        })
    }

    /// Attaches fresh adapters described by `adapter_config` to the base
    /// weights of `base` and freezes those weights.
    pub fn new_adapter(base: &Checkpoint<T>, adapter_config: &ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        adapter_config.validate()?;
        if cfg.stage != Stage::Adapter {
            return Err(invalid("adapter training needs stage = adapter"));
        }
        if !base.model.config.same_base(adapter_config) {
            return Err(Error::ConfigMismatch("adapter config describes a different base network".into()));
        }
        let mut init_rng = Rng::derived(cfg.seed, 1);
        let model = Model { config: adapter_config.clone(), base: base.model.base.clone(), adapters: None }
            .with_fresh_adapters(&mut init_rng)?;
        let hash = base_weight_hash(&model);
        Ok(Trainer {
            state: Checkpoint {
                schedule: Some(cfg.schedule(adapter_config)?),
                model,
                optim: Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() })?,
                rng: Rng::seed_from(cfg.seed).state(),
                step: 0,
                sampler_turn: 0,
                frozen_base_hash: Some(hash),
                train: cfg,
            },
        })
    }

    pub fn from_checkpoint(state: Checkpoint<T>) -> Self {
        Trainer { state }
    }

    pub fn into_checkpoint(self) -> Checkpoint<T> {
        self.state
    }

    /// Trains until `stop_at` (at most the configured step count), calling
    /// `on_step` after each step.
    pub fn run(
        &mut self,
        dataset: &Dataset,
        stop_at: usize,
        on_step: &mut dyn FnMut(&CurvePoint),
    ) -> Result<Vec<CurvePoint>> {
        let st = &mut self.state;
        let cfg = st.train.clone();
        let stop_at = stop_at.min(cfg.steps);
        if dataset.frames != st.model.config.frames || dataset.joints != st.model.config.joints {
            return Err(Error::ConfigMismatch(format!(
                "dataset clips are {}x{}, model expects {}x{}",
                dataset.frames, dataset.joints, st.model.config.frames, st.model.config.joints
            )));
        }
        let mut sampler = dataset.sampler()?;
        sampler.set_turn(st.sampler_turn);
        let mut rng = Rng::from_state(&st.rng);
        let trainable = match cfg.stage {
            Stage::Base => Trainable::Base,
            Stage::Adapter => Trainable::Adapters,
        };
        let range = st.model.config.sigma_range;
        let mut curve = Vec::new();
        while st.step < stop_at {
            let beta = st.schedule.as_ref().map_or(1.0, |s| s.beta_current());
            let batch = {
                let schedule = st.schedule.clone();
                let mut draw = |r: &mut Rng| match &schedule {
                    Some(s) => sample_noise_level(s, r),
                    None => range.sigma_at(r.uniform()),
                };
                draw_batch::<T>(dataset, &mut sampler, &cfg, &mut rng, &mut draw)?
            };
            let (loss, grads) = loss_and_gradients(&st.model, &batch, trainable)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { step: st.step, detail: format!("loss = {loss}") });
            }
            apply_gradients(&mut st.model, &mut st.optim, &grads)?;
            st.step += 1;
            if let Some(s) = st.schedule.as_mut() {
                *s = crate::diffusion::advance_schedule(s)?;
            }
            let point = CurvePoint {
                step: st.step,
                loss,
                beta,
                sigma_mean: batch.sigmas.iter().sum::<f64>() / batch.len() as f64,
            };
            on_step(&point);
            curve.push(point);
        }
        st.rng = rng.state();
        st.sampler_turn = sampler.turn();
        if let Some(expected) = &st.frozen_base_hash {
            let now = base_weight_hash(&st.model);
            if &now != expected {
                return Err(Error::FrozenViolation(format!("base hash {now} differs from {expected}")));
            }
        }
        Ok(curve)
    }
}

/// Stage-1 pre-training of a fresh base model.
pub fn train_base<T: Real>(
    model: Model<T>,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Checkpoint<T>, Vec<CurvePoint>)> {
    let mut t = Trainer::new_base(model, cfg.clone())?;
    let curve = t.run(dataset, cfg.steps, &mut |_| {})?;
    let ckpt = t.into_checkpoint();
    if let Some(path) = &cfg.checkpoint {
        save_checkpoint(&ckpt, path)?;
    }
    Ok((ckpt, curve))
}

/// Stage-2 adapter training on the frozen base of `base`.
pub fn train_adapters<T: Real>(
    base: &Checkpoint<T>,
    adapter_config: &ModelConfig,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Checkpoint<T>, Vec<CurvePoint>)> {
    let mut t = Trainer::new_adapter(base, adapter_config, cfg.clone())?;
    let curve = t.run(dataset, cfg.steps, &mut |_| {})?;
    let ckpt = t.into_checkpoint();
    if base_weight_hash(&ckpt.model) != base_weight_hash(&base.model) {
        return Err(Error::FrozenViolation("base weights differ from the input checkpoint".into()));
    }
    if let Some(path) = &cfg.checkpoint {
        save_checkpoint(&ckpt, path)?;
    }
    Ok((ckpt, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_dataset, DatasetSpec};
    use crate::model::build_model;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            layers: 2,
            d_model: 16,
            heads: 2,
            frames: 8,
            lora_rank: 4,
            lora_alpha: 4.0,
            fourier_features: 4,
            ..ModelConfig::default()
        }
    }

    fn tiny_data() -> Dataset {
        make_dataset(&DatasetSpec { n_structured: 12, n_wild: 12, frames: 8, ..DatasetSpec::default() }).unwrap()
    }

    fn cfg(stage: Stage, steps: usize) -> TrainConfig {
        TrainConfig { steps, batch_size: 4, lr: 1e-3, ..TrainConfig::new(stage) }
    }

    fn base_ckpt(data: &Dataset) -> Checkpoint<f64> {
        let model = build_model::<f64>(&tiny_model(), &mut Rng::seed_from(0)).unwrap();
        train_base(model, data, &cfg(Stage::Base, 5)).unwrap().0
    }

    #[test]
    fn identical_seeds_give_identical_curves() {
        let data = tiny_data();
        let run = || {
            let model = build_model::<f64>(&tiny_model(), &mut Rng::seed_from(0)).unwrap();
            train_base(model, &data, &cfg(Stage::Base, 4)).unwrap().1
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert!(a.iter().all(|p| p.loss.is_finite() && p.beta == 1.0));
    }

    #[test]
    fn adapter_stage_keeps_base_and_starts_at_beta0() {
        let data = tiny_data();
        let base = base_ckpt(&data);
        let acfg = ModelConfig { zica_layers: [1].into_iter().collect(), ..tiny_model() };
        let (out, curve) = train_adapters(&base, &acfg, &data, &cfg(Stage::Adapter, 4)).unwrap();
        assert_eq!(out.model.base, base.model.base);
        assert_eq!(curve[0].beta, 3.0);
        assert!(curve.windows(2).all(|w| w[1].beta <= w[0].beta));
        let w_o = &out.model.adapters.as_ref().unwrap().zica[&1].w_o;
        assert!(w_o.max_abs() > 0.0);
    }

    #[test]
    fn stage_and_config_checks() {
        let data = tiny_data();
        let base = base_ckpt(&data);
        assert!(Trainer::new_adapter(&base, &tiny_model(), cfg(Stage::Base, 3)).is_err());
        let other = ModelConfig { d_model: 32, ..tiny_model() };
        assert!(matches!(Trainer::new_adapter(&base, &other, cfg(Stage::Adapter, 3)), Err(Error::ConfigMismatch(_))));
        assert!(TrainConfig { p_base: 1.5, ..cfg(Stage::Base, 1) }.validate().is_err());
        assert!(TrainConfig { steps: 0, ..cfg(Stage::Base, 1) }.validate().is_err());
        assert!(TrainConfig { p_cond_drop: 0.0, ..cfg(Stage::Base, 1) }.guidance_warning().is_some());
    }

    #[test]
    fn tampered_base_is_caught() {
        let data = tiny_data();
        let base = base_ckpt(&data);
        let acfg = ModelConfig { zica_layers: [0].into_iter().collect(), ..tiny_model() };
        let mut t = Trainer::new_adapter(&base, &acfg, cfg(Stage::Adapter, 2)).unwrap();
        t.state.model.base.head_bias =
            t.state.model.base.head_bias.scale(2.0).add(&Tensor::full(&[16], 0.1).unwrap()).unwrap();
        assert!(matches!(t.run(&data, 2, &mut |_| {}), Err(Error::FrozenViolation(_))));
    }

    #[test]
    fn condition_drop_rate() {
        let data = tiny_data();
        let mut sampler = data.sampler().unwrap();
        let mut rng = Rng::seed_from(4);
        let c = TrainConfig { batch_size: 1, ..cfg(Stage::Adapter, 1) };
        let mut dropped = 0;
        for _ in 0..10_000 {
            let b = draw_batch::<f32>(&data, &mut sampler, &c, &mut rng, &mut |_| 1.0).unwrap();
            if !b.keep[0] {
                assert!(b.cond[0].is_null());
                dropped += 1;
            }
        }
        assert!((dropped as f64 / 1e4 - 0.1).abs() <= 0.01, "{dropped}");
    }

    #[test]
    fn curve_csv_header() {
        let s = curve_csv(&[CurvePoint { step: 1, loss: 2.0, beta: 3.0, sigma_mean: 0.5 }]);
        assert_eq!(s, "step,loss,beta,sigma_mean\n1,2,3,0.5\n");
    }
}
