//! Subcommand implementations. Every command writes its resolved
//! configuration next to its outputs.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dancelab_core::adapters::AudioConditioning;
use dancelab_core::data::{
    load_dataset, make_dataset, manifest, retime_track, save_dataset, synth_track, AudioTrack, ConditionTokens,
    Dataset, DatasetClip, DatasetSpec, Split, STYLE_NAMES,
};
use dancelab_core::eval::{
    alignment_on_tracks, diversity_score, energy_series_csv, generate, prior_drift, tempo_response, MetricsReport,
    Prompt, SamplingConfig,
};
use dancelab_core::model::{build_model, AudioAttention, Model, ModelConfig};
use dancelab_core::probe::{probe_layers, select_layers, AdaptabilityReport, ProbeConfig};
use dancelab_core::training::{curve_csv, load_checkpoint, save_checkpoint, Checkpoint, Stage, TrainConfig, Trainer};
use dancelab_core::Rng;

use crate::config::Settings;
use crate::CliError;

type Ckpt = Checkpoint<f32>;

const TEMPO_FACTORS: [f64; 2] = [0.75, 1.25];

fn out_dir(s: &Settings) -> Result<PathBuf, CliError> {
    s.path("out", PathBuf::from("runs"))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

fn write_config(s: &Settings, out: &Path, name: &str) -> Result<(), CliError> {
    write(&out.join(format!("{name}_config.txt")), s.render())
}

fn load_ckpt(path: &Path) -> Result<Ckpt, CliError> {
    load_checkpoint(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn load_data(s: &Settings, out: &Path) -> Result<Dataset, CliError> {
    let path = s.path("data", out.join("dataset.mids"))?;
    load_dataset(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn held_out_tracks(data: &Dataset, n: usize) -> Result<Vec<&AudioTrack>, CliError> {
    let tracks: Vec<&AudioTrack> =
        data.indices(Split::Test, None).into_iter().take(n).map(|i| &data.clips[i].track).collect();
    if tracks.is_empty() {
        return Err(CliError::Runtime("the dataset has no held-out tracks".into()));
    }
    Ok(tracks)
}

fn sampling(s: &Settings) -> Result<SamplingConfig, CliError> {
    let d = SamplingConfig::default();
    Ok(SamplingConfig { steps: s.get("sample_steps", d.steps)?, gamma: s.get("gamma", d.gamma)?, rho: d.rho })
}

fn parse_caption(raw: &str) -> Result<ConditionTokens, CliError> {
    if raw == "base" {
        return Ok(ConditionTokens::base());
    }
    let style = STYLE_NAMES
        .iter()
        .position(|&n| n == raw)
        .or_else(|| raw.parse::<usize>().ok())
        .ok_or_else(|| CliError::Usage(format!("unknown caption {raw:?}; use base or a style name")))?;
    Ok(ConditionTokens::detailed(style, 0, 0)?)
}

pub fn datagen(s: &Settings) -> Result<(), CliError> {
    let d = DatasetSpec::default();
    let spec = DatasetSpec {
        n_structured: s.get("n_structured", d.n_structured)?,
        n_wild: s.get("n_wild", d.n_wild)?,
        styles: s.list("styles")?.unwrap_or(d.styles),
        tempo_min: s.get("tempo_min", d.tempo_min)?,
        tempo_max: s.get("tempo_max", d.tempo_max)?,
        seed: s.get("seed", d.seed)?,
        p_base: s.get("p_base", d.p_base)?,
        frames: s.get("frames", d.frames)?,
        joints: d.joints,
        fps: d.fps,
    };
    // Validate before touching the output directory.
    spec.validate()?;
    let out = out_dir(s)?;
    let data = make_dataset(&spec)?;
    let path = s.path("dataset", out.join("dataset.mids"))?;
    write(&path, dancelab_core::data::to_bytes(&data))?;
    write(&out.join("manifest.csv"), manifest(&data))?;
    write_config(s, &out, "datagen")?;
    let test = data.indices(Split::Test, None).len();
    println!("wrote {} clips ({} held out) to {}", data.clips.len(), test, path.display());
    Ok(())
}

fn adapter_model_config(s: &Settings, base: &Ckpt, data: &Dataset) -> Result<ModelConfig, CliError> {
    let mut cfg = base.model.config.clone();
    let layers = cfg.layers;
    cfg.zica_layers = if s.get("no_zica_selection", false)? {
        (0..layers).collect()
    } else if let Some(list) = s.list::<usize>("zica_layers")? {
        list.into_iter().collect()
    } else if let Some(path) = s.get_opt::<String>("probe_report")? {
        read_probe_selection(Path::new(&path))?
    } else {
        let report = run_probe(s, &base.model, data)?;
        eprintln!("probe selected layers {:?}", report.selected);
        report.selected
    };
    cfg.lora_rank = s.get("lora_rank", cfg.lora_rank)?;
    cfg.lora_alpha = s.get("lora_alpha", cfg.lora_rank as f64)?;
    if s.get("feature_addition", false)? {
        cfg.conditioning = AudioConditioning::FeatureAddition;
    }
    if let Some(r) = s.get_opt::<usize>("window")? {
        cfg.audio_attention = AudioAttention::Windowed { radius: r };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_probe_selection(path: &Path) -> Result<BTreeSet<usize>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let bad = || CliError::Runtime(format!("{}: not an adaptability report", path.display()));
    let mut out = BTreeSet::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        if f[3] == "1" {
            out.insert(f[0].parse().map_err(|_| bad())?);
        }
    }
    Ok(out)
}

fn run_probe(s: &Settings, model: &Model<f32>, data: &Dataset) -> Result<AdaptabilityReport, CliError> {
    let d = ProbeConfig::default();
    let cfg = ProbeConfig {
        n_samples: s.get("n_samples", d.n_samples)?,
        w_validity: s.get("w_validity", d.w_validity)?,
        w_smoothness: s.get("w_smoothness", d.w_smoothness)?,
        sampling: SamplingConfig { steps: s.get("probe_steps", d.sampling.steps)?, ..d.sampling },
        seed: s.get("seed", d.seed)?,
    };
    let n = s.get("probe_tracks", 4usize)?;
    let set: Vec<(ConditionTokens, AudioTrack)> =
        held_out_tracks(data, n)?.into_iter().map(|t| (ConditionTokens::base(), t.clone())).collect();
    let mut report = probe_layers(model, &set, &cfg)?;
    if let Some(k) = s.get_opt::<usize>("k")? {
        report.selected = select_layers(&report, k)?;
    }
    if let Some(w) = &report.warning {
        eprintln!("warning: {w}");
    }
    Ok(report)
}

fn train_config(s: &Settings, stage: Stage) -> Result<TrainConfig, CliError> {
    let d = TrainConfig::new(stage);
    let preset_steps = match s.get("preset", "full".to_string())?.as_str() {
        "desk" => TrainConfig::DESK_STEPS,
        "full" => TrainConfig::DEFAULT_STEPS,
        p => return Err(CliError::Usage(format!("unknown preset {p:?}"))),
    };
    let mut cfg = TrainConfig {
        stage,
        steps: s.get("steps", preset_steps)?,
        batch_size: s.get("batch_size", d.batch_size)?,
        lr: s.get("lr", d.lr)?,
        p_cond_drop: s.get("p_cond_drop", d.p_cond_drop)?,
        p_base: s.get("p_base", d.p_base)?,
        beta0: s.get("beta0", d.beta0)?,
        decay: s.get("decay", d.decay)?,
        seed: s.get("seed", d.seed)?,
        eval_every: s.get("eval_every", d.eval_every)?,
        checkpoint: None,
    };
    if stage == Stage::Adapter && s.get("uniform_schedule", false)? {
        cfg.beta0 = 1.0;
    }
    s.get("gamma", SamplingConfig::default().gamma)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run_trainer(mut t: Trainer<f32>, data: &Dataset) -> Result<(Ckpt, String), CliError> {
    let (every, steps) = (t.state.train.eval_every.max(1), t.state.train.steps);
    let mut window = 0.0;
    let start = std::time::Instant::now();
    let curve = t.run(data, steps, &mut |p| {
        window += p.loss;
        if p.step % every == 0 {
            eprintln!(
                "step {:>5}  loss {:.4}  beta {:.3}  {:.0}s",
                p.step,
                window / every as f64,
                p.beta,
                start.elapsed().as_secs_f64()
            );
            window = 0.0;
        }
    })?;
    Ok((t.into_checkpoint(), curve_csv(&curve)))
}

pub fn train(s: &Settings) -> Result<(), CliError> {
    let out = out_dir(s)?;
    let resume = s.get_opt::<String>("resume")?;
    let stage = match (s.get_opt::<String>("stage")?, &resume) {
        (Some(st), _) if st == "base" => Stage::Base,
        (Some(st), _) if st == "adapter" => Stage::Adapter,
        (Some(st), _) => return Err(CliError::Usage(format!("unknown stage {st:?}"))),
        (None, Some(_)) => Stage::Base,
        (None, None) => return Err(CliError::Usage("missing --stage (base or adapter)".into())),
    };
    let base_path = if stage == Stage::Adapter && resume.is_none() {
        Some(s.require::<String>("base_ckpt", "the adapter stage trains on a frozen base checkpoint")?)
    } else {
        None
    };
    // Configuration errors surface before any file is read.
    let cfg = if resume.is_none() { Some(train_config(s, stage)?) } else { None };
    let data = load_data(s, &out)?;
    let trainer = if let Some(r) = &resume {
        Trainer::from_checkpoint(load_ckpt(Path::new(r))?)
    } else {
        let cfg = cfg.expect("set without --resume");
        match &base_path {
            None => {
                let d = ModelConfig::default();
                let mcfg = ModelConfig {
                    layers: s.get("layers", d.layers)?,
                    d_model: s.get("d_model", d.d_model)?,
                    heads: s.get("heads", d.heads)?,
                    frames: data.frames,
                    joints: data.joints,
                    ..d
                };
                let model = build_model::<f32>(&mcfg, &mut Rng::derived(cfg.seed, 0))?;
                Trainer::new_base(model, cfg)?
            }
            Some(p) => {
                let base = load_ckpt(Path::new(p))?;
                let acfg = adapter_model_config(s, &base, &data)?;
                Trainer::new_adapter(&base, &acfg, cfg)?
            }
        }
    };
    let stage = trainer.state.train.stage;
    if let Some(w) = trainer.state.train.guidance_warning() {
        eprintln!("warning: {w}");
    }
    let (ckpt, curve) = run_trainer(trainer, &data)?;
    let path = s.path("ckpt", out.join(format!("{}.mick", stage.name())))?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    save_checkpoint(&ckpt, &path)?;
    write(&out.join(format!("{}_curve.csv", stage.name())), curve)?;
    write_config(s, &out, &format!("train_{}", stage.name()))?;
    println!("wrote {} (step {})", path.display(), ckpt.step);
    Ok(())
}

pub fn probe(s: &Settings) -> Result<(), CliError> {
    let out = out_dir(s)?;
    let ckpt = load_ckpt(Path::new(&s.require::<String>("ckpt", "the probe scores a base checkpoint")?))?;
    let data = load_data(s, &out)?;
    let report = run_probe(s, &ckpt.model, &data)?;
    write(&out.join("probe.csv"), report.to_csv())?;
    write(
        &out.join("probe.json"),
        serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?,
    )?;
    write_config(s, &out, "probe")?;
    print!("{}", report.to_csv());
    Ok(())
}

pub fn sample(s: &Settings) -> Result<(), CliError> {
    let out = out_dir(s)?;
    let ckpt = load_ckpt(Path::new(&s.require::<String>("ckpt", "sampling needs a checkpoint")?))?;
    let cfg = &ckpt.model.config;
    let seed = s.get("seed", 0u64)?;
    let speed = s.get("speed", 1.0f64)?;
    let caption = parse_caption(&s.get("caption", "base".to_string())?)?;
    let n = s.get("n", 1usize)?;
    let sc = sampling(s)?;
    let fps = dancelab_core::data::DEFAULT_FPS;
    let tracks: Vec<AudioTrack> = match s.get_opt::<f64>("tempo")? {
        Some(tempo) => {
            let mut rng = Rng::derived(seed, 2);
            vec![synth_track(tempo, cfg.frames as f64 / fps, fps, &mut rng)?]
        }
        None => {
            let data = load_data(s, &out)?;
            held_out_tracks(&data, s.get("n_tracks", 8usize)?)?.into_iter().cloned().collect()
        }
    };
    let mut clips = Vec::new();
    for (i, t) in tracks.iter().enumerate() {
        let track = retime_track(t, speed)?;
        let generated =
            generate(&ckpt.model, Prompt { caption, track: Some(&track), skip: None }, n, seed + i as u64, &sc)?;
        for motion in generated {
            clips.push(DatasetClip { motion, track: track.clone(), caption, split: Split::Test });
        }
    }
    let samples = Dataset { clips, frames: cfg.frames, joints: cfg.joints, fps, p_base: 0.0 };
    let path = s.path("samples", out.join("samples.mids"))?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    save_dataset(&samples, &path)?;
    write_config(s, &out, "sample")?;
    println!("wrote {} clips to {}", samples.clips.len(), path.display());
    Ok(())
}

pub fn eval(s: &Settings) -> Result<(), CliError> {
    let out = out_dir(s)?;
    let path = s.path("samples", out.join("samples.mids"))?;
    let samples = load_dataset(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let pairs: Vec<_> = samples.clips.iter().map(|c| (&c.motion, &c.track)).collect();
    let mut report = MetricsReport::from_clips(&pairs)?;
    let n = s.get("n", 4usize)?;
    let seed = s.get("seed", 0u64)?;
    let sc = sampling(s)?;
    if let Some(p) = s.get_opt::<String>("ckpt")? {
        let adapted = load_ckpt(Path::new(&p))?;
        let first = &samples.clips[0];
        let track = retime_track(&first.track, 1.0)?;
        report.tempo_response = tempo_response(&adapted.model, first.caption, &track, &TEMPO_FACTORS, n, seed, &sc)?;
        if let Some(b) = s.get_opt::<String>("base_ckpt")? {
            let base = load_ckpt(Path::new(&b))?;
            report.prior_drift = Some(prior_drift(&base.model, &adapted.model, &drift_conditions(), n, seed, &sc)?);
        }
    }
    write(&out.join("metrics.json"), report.to_json()?)?;
    write(&out.join("metrics.csv"), report.to_csv())?;
    write(&out.join("energy.csv"), energy_series_csv(&samples.clips[0].motion, &samples.clips[0].track))?;
    write_config(s, &out, "eval")?;
    println!(
        "beat_alignment {:.4}  diversity {:.4}  prior_drift {}  tempo_response {:?}",
        report.beat_alignment,
        report.diversity,
        report.prior_drift.map_or("-".into(), |d| format!("{d:.4}")),
        report.tempo_response
    );
    Ok(())
}

fn drift_conditions() -> Vec<ConditionTokens> {
    vec![ConditionTokens::base(), ConditionTokens::detailed(0, 0, 0).expect("style 0 exists")]
}

#[derive(Debug)]
struct Row {
    name: String,
    beat_alignment: f64,
    diversity: f64,
    prior_drift: f64,
    tempo: Vec<(f64, f64)>,
}

struct Protocol<'a> {
    base: &'a Model<f32>,
    tracks: Vec<&'a AudioTrack>,
    n: usize,
    seed: u64,
    sc: SamplingConfig,
}

impl Protocol<'_> {
    fn row(&self, name: &str, model: &Model<f32>) -> Result<Row, CliError> {
        let caption = ConditionTokens::base();
        let align = alignment_on_tracks(model, caption, &self.tracks, self.n, self.seed, &self.sc)?;
        let mut diversity = 0.0;
        if self.n >= 2 {
            for (i, t) in self.tracks.iter().enumerate() {
                let clips = generate(
                    model,
                    Prompt { caption, track: Some(t), skip: None },
                    self.n,
                    self.seed + i as u64,
                    &self.sc,
                )?;
                let poses: Vec<_> = clips.iter().map(|c| &c.poses).collect();
                diversity += diversity_score(&poses)?;
            }
            diversity /= self.tracks.len() as f64;
        }
        let drift = prior_drift(self.base, model, &drift_conditions(), self.n, self.seed, &self.sc)?;
        let tempo = match tempo_response(model, caption, self.tracks[0], &TEMPO_FACTORS, self.n, self.seed, &self.sc) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("warning: tempo response of {name}: {e}");
                TEMPO_FACTORS.iter().map(|&f| (f, f64::NAN)).collect()
            }
        };
        Ok(Row {
            name: name.to_string(),
            beat_alignment: align.iter().sum::<f64>() / align.len() as f64,
            diversity,
            prior_drift: drift,
            tempo,
        })
    }
}

const ABLATIONS: [&str; 4] = ["no-selection", "low-rank", "uniform-schedule", "feature-addition"];

fn requested_ablations(s: &Settings) -> Result<Vec<&'static str>, CliError> {
    let mut want: BTreeSet<&'static str> = BTreeSet::new();
    if let Some(list) = s.list::<String>("ablations")? {
        for a in list {
            if a == "all" {
                want.extend(ABLATIONS);
            } else {
                let known = ABLATIONS.iter().find(|&&k| k == a).ok_or_else(|| {
                    CliError::Usage(format!("unknown ablation {a:?}; choose from {}", ABLATIONS.join(", ")))
                })?;
                want.insert(known);
            }
        }
    }
    for (flag, name) in [
        ("no_zica_selection", "no-selection"),
        ("uniform_schedule", "uniform-schedule"),
        ("feature_addition", "feature-addition"),
    ] {
        if s.get_opt::<bool>(flag)?.unwrap_or(false) {
            want.insert(name);
        }
    }
    if s.get_opt::<usize>("lora_rank")?.is_some() {
        want.insert("low-rank");
    }
    Ok(ABLATIONS.iter().copied().filter(|a| want.contains(a)).collect())
}

pub fn report(s: &Settings) -> Result<(), CliError> {
    let out = out_dir(s)?;
    let base = load_ckpt(Path::new(&s.require::<String>("base_ckpt", "the report compares against the base")?))?;
    let adapted = load_ckpt(Path::new(&s.require::<String>("ckpt", "the report evaluates an adapter checkpoint")?))?;
    if !base.model.config.same_base(&adapted.model.config) {
        return Err(CliError::Usage("base and adapter checkpoints describe different networks".into()));
    }
    let ablations = requested_ablations(s)?;
    let data = load_data(s, &out)?;
    let protocol = Protocol {
        base: &base.model,
        tracks: held_out_tracks(&data, s.get("n_tracks", 8usize)?)?,
        n: s.get("n", 4usize)?,
        seed: s.get("seed", 0u64)?,
        sc: sampling(s)?,
    };
    let mut rows = vec![protocol.row("base", &base.model)?, protocol.row("adapted", &adapted.model)?];
    let steps = s.get("ablation_steps", adapted.train.steps)?;
    for name in ablations {
        let mut cfg = adapted.model.config.clone();
        let mut tc = TrainConfig { steps, checkpoint: None, ..adapted.train.clone() };
        match name {
            "no-selection" => cfg.zica_layers = (0..cfg.layers).collect(),
            "low-rank" => {
                cfg.lora_rank = s.get("lora_rank", 4usize)?;
                cfg.lora_alpha = cfg.lora_rank as f64;
            }
            "uniform-schedule" => tc.beta0 = 1.0,
            "feature-addition" => cfg.conditioning = AudioConditioning::FeatureAddition,
            _ => unreachable!("ablation names are validated"),
        }
        eprintln!("training ablation {name} for {steps} steps");
        let trainer = Trainer::new_adapter(&base, &cfg, tc)?;
        let (ckpt, _) = run_trainer(trainer, &data)?;
        rows.push(protocol.row(name, &ckpt.model)?);
    }
    let mut csv = String::from("variant,beat_alignment,diversity,prior_drift,tempo_0.75,tempo_1.25\n");
    let mut md = String::from("| variant | beat alignment | diversity | prior drift | tempo x0.75 | tempo x1.25 |\n|---|---|---|---|---|---|\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.name, r.beat_alignment, r.diversity, r.prior_drift, r.tempo[0].1, r.tempo[1].1
        );
        let _ = writeln!(
            md,
            "| {} | {:.3} | {:.4} | {:.4} | {:.3} | {:.3} |",
            r.name, r.beat_alignment, r.diversity, r.prior_drift, r.tempo[0].1, r.tempo[1].1
        );
    }
    write(&out.join("report.csv"), &csv)?;
    write(&out.join("report.md"), &md)?;
    write_config(s, &out, "report")?;
    print!("{md}");
    Ok(())
}
