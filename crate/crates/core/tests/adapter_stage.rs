//! Adapter-stage contracts on the full model: identity at initialization,
//! gradients against central differences, and which weights training may
//! touch.

use std::collections::BTreeMap;

use dancelab_core::data::{make_dataset, synth_track, ConditionTokens, Dataset, DatasetSpec, DEFAULT_FPS};
use dancelab_core::model::{
    build_model, denoise, pose_center, preconditioning, DenoiserInput, Model, ModelConfig, Trainable,
};
use dancelab_core::numerics::Tape;
use dancelab_core::training::{
    apply_gradients, base_weight_hash, batch_loss_on_tape, draw_batch, loss_and_gradients, Adam, AdamConfig, Batch,
    Stage, TrainConfig, Trainer,
};
use dancelab_core::{Real, Rng, Tensor};

/// Denoiser output when the network contributes nothing: the rest pose plus the scaled offset from it.
fn skip_only(x: &Tensor<f32>, sigma: f64) -> Tensor<f32> {
    let c_skip = preconditioning(sigma).0;
    let rest = pose_center(x.shape()[1]);
    let v: Vec<f64> = x.data().iter().zip(rest.iter().cycle()).map(|(&v, &r)| r + c_skip * (v.as_f64() - r)).collect();
    Tensor::from_f64(x.shape(), &v).unwrap()
}

fn desk_config() -> ModelConfig {
    ModelConfig { zica_layers: [1, 3, 5].into_iter().collect(), ..ModelConfig::default() }
}

fn small_dataset() -> Dataset {
    make_dataset(&DatasetSpec { n_structured: 24, n_wild: 24, seed: 5, ..DatasetSpec::default() }).unwrap()
}

/// A fresh base has a zero output head, which would hide every other
/// weight; give it one that a trained base could have.
fn with_live_head<T: Real>(mut m: Model<T>, rng: &mut Rng) -> Model<T> {
    m.base.head = Tensor::random_normal(m.base.head.shape(), 0.1, rng).unwrap();
    m
}

/// Base head and adapters all pushed away from their initial values, so
/// that no gradient path is trivially zero.
fn perturbed_model(cfg: &ModelConfig, seed: u64) -> Model<f64> {
    let mut rng = Rng::seed_from(seed);
    let base = with_live_head(build_model::<f64>(cfg, &mut rng).unwrap(), &mut rng);
    let mut m = base.with_fresh_adapters(&mut rng).unwrap();
    m.adapters.as_mut().unwrap().for_each_mut("", &mut |_, t| {
        *t = t.add(&Tensor::random_normal(t.shape(), 0.05, &mut rng).unwrap()).unwrap();
    });
    m
}

fn loss_only<T: Real>(m: &Model<T>, batch: &Batch<T>) -> f64 {
    let tape = Tape::new();
    let w = m.bind(&tape, Trainable::Nothing);
    let l = batch_loss_on_tape(m, &tape, &w, batch).unwrap();
    tape.value(l).item().unwrap().as_f64()
}

fn with_entry(m: &Model<f64>, name: &str, index: usize, delta: f64) -> Model<f64> {
    let mut out = m.clone();
    let target = name.strip_prefix("adapter/").expect("adapter parameter");
    out.adapters.as_mut().unwrap().for_each_mut("", &mut |n, t| {
        if n == target {
            let mut v = t.to_vec();
            v[index] += delta;
            *t = Tensor::new(t.shape().to_vec(), v).unwrap();
        }
    });
    out
}

/// |g_ad − g_fd| / max(|g_ad|, |g_fd|, 1e-8)
fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// `adapter/zica.3.w_q` and `adapter/zica.5.w_q` share a group.
fn group_of(name: &str) -> String {
    name.split('.').filter(|p| p.parse::<usize>().is_err()).collect::<Vec<_>>().join(".")
}

#[test]
fn fresh_adapters_preserve_base_output_in_f32() {
    let cfg = desk_config();
    let mut rng = Rng::seed_from(11);
    let base = with_live_head(build_model::<f32>(&cfg, &mut rng).unwrap(), &mut rng);
    let adapted = base.clone().with_fresh_adapters(&mut rng).unwrap();
    let (mut worst, mut reference_spread) = (0.0f64, 0.0f64);
    for i in 0..10 {
        let x = Tensor::<f32>::random_normal(&[cfg.frames, cfg.joints, 2], 1.0, &mut rng).unwrap();
        let sigma = 0.01 * 1000f64.powf(i as f64 / 9.0);
        let cond = vec![ConditionTokens::base()];
        let reference =
            denoise(&base, &DenoiserInput { x: x.clone(), sigma, cond: cond.clone(), audio: None }).unwrap();
        let skip_only = skip_only(&x, sigma);
        reference_spread = reference_spread.max(reference.max_abs_diff(&skip_only).unwrap().as_f64());
        for _ in 0..5 {
            let tempo = rng.uniform_range(80.0, 160.0);
            let track = synth_track(tempo, cfg.frames as f64 / DEFAULT_FPS, DEFAULT_FPS, &mut rng).unwrap();
            let input = DenoiserInput { x: x.clone(), sigma, cond: cond.clone(), audio: Some(track.features.cast()) };
            let out = denoise(&adapted, &input).unwrap();
            worst = worst.max(out.max_abs_diff(&reference).unwrap().as_f64());
        }
    }
    assert!(worst <= 1e-6, "max deviation {worst}");
    assert!(reference_spread > 1e-3, "base output does not depend on its input");
}

#[test]
fn adapter_loss_gradients_match_central_differences() {
    let cfg = desk_config();
    let model = perturbed_model(&cfg, 3);
    let data = small_dataset();
    let tc = TrainConfig { batch_size: 4, p_cond_drop: 0.5, ..TrainConfig::new(Stage::Adapter) };
    let mut rng = Rng::seed_from(8);
    let mut sampler = data.sampler().unwrap();
    let levels = [0.05, 0.3, 1.0, 4.0];
    let mut k = 0;
    let batch: Batch<f64> = draw_batch(&data, &mut sampler, &tc, &mut rng, &mut |_| {
        k += 1;
        levels[(k - 1) % levels.len()]
    })
    .unwrap();
    assert!(batch.keep.iter().any(|&k| k), "need a conditioned row");

    let (_, grads) = loss_and_gradients(&model, &batch, Trainable::Adapters).unwrap();
    let mut groups: BTreeMap<String, Vec<(String, usize)>> = BTreeMap::new();
    for (name, g) in &grads {
        groups.entry(group_of(name)).or_default().push((name.clone(), g.numel()));
    }
    assert!(groups.len() >= 7, "groups: {:?}", groups.keys().collect::<Vec<_>>());

    let h = 1e-4;
    let mut pick = Rng::seed_from(21);
    for (group, members) in &groups {
        let total: usize = members.iter().map(|(_, n)| n).sum();
        let (mut worst, mut nonzero) = (0.0f64, 0);
        for _ in 0..50 {
            let mut r = pick.below(total);
            let (name, idx) = members
                .iter()
                .find_map(|(n, size)| {
                    if r < *size {
                        Some((n, r))
                    } else {
                        r -= size;
                        None
                    }
                })
                .unwrap();
            let plus = loss_only(&with_entry(&model, name, idx, h), &batch);
            let minus = loss_only(&with_entry(&model, name, idx, -h), &batch);
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads[name].data()[idx];
            worst = worst.max(relative_error(analytic, numeric));
            nonzero += (analytic != 0.0) as usize;
        }
        assert!(nonzero > 0, "{group}: every sampled gradient is zero");
        assert!(worst <= 1e-5, "{group}: max relative error {worst}");
    }
}

#[test]
fn training_touches_adapters_only() {
    let cfg = desk_config();
    let data = small_dataset();
    let mut rng = Rng::seed_from(4);
    let base = with_live_head(build_model::<f32>(&cfg, &mut rng).unwrap(), &mut rng);
    let mut model = base.with_fresh_adapters(&mut rng).unwrap();
    let base_before = model.base.clone();
    let tc = TrainConfig { batch_size: 8, ..TrainConfig::new(Stage::Adapter) };
    let mut opt = Adam::new(AdamConfig::default()).unwrap();
    let mut sampler = data.sampler().unwrap();
    let mut touched: BTreeMap<String, Vec<bool>> = BTreeMap::new();
    // One epoch over the training pools.
    let epoch = data.clips.len().div_ceil(tc.batch_size);
    for _ in 0..epoch {
        let batch: Batch<f32> =
            draw_batch(&data, &mut sampler, &tc, &mut rng, &mut |r| cfg.sigma_range.sigma_at(r.uniform())).unwrap();
        let (_, grads) = loss_and_gradients(&model, &batch, Trainable::Adapters).unwrap();
        assert!(grads.keys().all(|n| n.starts_with("adapter/")));
        for (name, g) in &grads {
            let mask = touched.entry(name.clone()).or_insert_with(|| vec![false; g.numel()]);
            for (m, v) in mask.iter_mut().zip(g.data()) {
                *m |= *v != 0.0;
            }
        }
        apply_gradients(&mut model, &mut opt, &grads).unwrap();
    }
    assert_eq!(model.base, base_before, "base weights moved");
    let (hit, total) = touched.values().flatten().fold((0, 0), |(h, t), &m| (h + m as usize, t + 1));
    let expected: usize = model.adapters.as_ref().unwrap().parameter_count();
    assert_eq!(total, expected);
    assert!(hit as f64 >= 0.95 * total as f64, "{hit} of {total} adapter parameters received gradient");
    // Zero initialization does not block the output projections.
    for (name, t) in model.adapters.as_ref().unwrap().named("") {
        if name.ends_with("w_o") {
            assert!(t.max_abs() > 0.0, "{name} still zero");
        }
    }
}

#[test]
fn adapter_trainer_keeps_base_hash() {
    let data = small_dataset();
    let cfg = ModelConfig { layers: 3, d_model: 32, heads: 2, ..ModelConfig::default() };
    let base = build_model::<f32>(&cfg, &mut Rng::seed_from(1)).unwrap();
    let mut t =
        Trainer::new_base(base, TrainConfig { steps: 4, batch_size: 4, ..TrainConfig::new(Stage::Base) }).unwrap();
    t.run(&data, 4, &mut |_| {}).unwrap();
    let base = t.into_checkpoint();
    let before = base_weight_hash(&base.model);
    let acfg = ModelConfig { zica_layers: [0, 2].into_iter().collect(), lora_rank: 8, lora_alpha: 8.0, ..cfg };
    let tc = TrainConfig { steps: 6, batch_size: 4, ..TrainConfig::new(Stage::Adapter) };
    let mut t = Trainer::new_adapter(&base, &acfg, tc).unwrap();
    t.run(&data, 6, &mut |_| {}).unwrap();
    let after = t.into_checkpoint();
    assert_eq!(base_weight_hash(&after.model), before);
    assert_eq!(after.frozen_base_hash.as_deref(), Some(before.as_str()));
    assert_ne!(after.model.adapters, None);
}
