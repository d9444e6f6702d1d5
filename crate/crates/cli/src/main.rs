//! `dancelab`: data generation, two-stage training, layer probing,
//! sampling, evaluation and ablation reports.
//!
//! Exit codes: 0 on success, 2 for usage or configuration errors, 3 for
//! runtime and data errors.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Settings;
use dancelab_core::Error;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::ConfigMismatch(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "dancelab", version, about = "Beat-synchronized dance generation with audio adapters")]
struct Cli {
    /// key=value configuration file; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "DANCELAB_OUT")]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the mixed structured/wild dataset and its manifest.
    Datagen(DatagenArgs),
    /// Train the base model or the audio adapters.
    Train(TrainArgs),
    /// Score layer adaptability of a base checkpoint.
    Probe(ProbeArgs),
    /// Generate clips for held-out or synthetic tracks.
    Sample(SampleArgs),
    /// Compute metrics for generated clips.
    Eval(EvalArgs),
    /// Compare base and adapted models, with optional ablations.
    Report(ReportArgs),
}

#[derive(Args)]
struct DatagenArgs {
    #[arg(long)]
    n_structured: Option<usize>,
    #[arg(long)]
    n_wild: Option<usize>,
    #[arg(long)]
    tempo_min: Option<f64>,
    #[arg(long)]
    tempo_max: Option<f64>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    p_base: Option<f64>,
    /// Comma-separated style ids.
    #[arg(long)]
    styles: Option<String>,
}

#[derive(Args, Clone, Default)]
struct AdapterFlags {
    /// Comma-separated layers for audio cross-attention.
    #[arg(long)]
    zica_layers: Option<String>,
    /// Adaptability CSV whose selected layers receive cross-attention.
    #[arg(long)]
    probe_report: Option<PathBuf>,
    /// Put cross-attention in every layer.
    #[arg(long)]
    no_zica_selection: bool,
    #[arg(long)]
    lora_rank: Option<usize>,
    #[arg(long)]
    lora_alpha: Option<f64>,
    /// Draw noise levels uniformly instead of the decaying Beta schedule.
    #[arg(long)]
    uniform_schedule: bool,
    /// Add projected audio features per frame instead of cross-attention.
    #[arg(long)]
    feature_addition: bool,
    /// Restrict audio attention to tokens within this many frames.
    #[arg(long)]
    window: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = ["base", "adapter"])]
    stage: Option<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    base_ckpt: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// `desk` shortens the default run to 2000 steps.
    #[arg(long, value_parser = ["full", "desk"])]
    preset: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    p_cond_drop: Option<f64>,
    #[arg(long)]
    p_base: Option<f64>,
    #[arg(long)]
    beta0: Option<f64>,
    #[arg(long)]
    decay: Option<f64>,
    /// Guidance scale recorded for later sampling.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[command(flatten)]
    adapter: AdapterFlags,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    n_tracks: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    w_validity: Option<f64>,
    #[arg(long)]
    w_smoothness: Option<f64>,
    #[arg(long)]
    sample_steps: Option<usize>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Synthesize a track at this tempo instead of using held-out tracks.
    #[arg(long)]
    tempo: Option<f64>,
    /// Play the track this many times faster before generating.
    #[arg(long)]
    speed: Option<f64>,
    #[arg(long)]
    n_tracks: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    /// `base`, or a style name or id for a detailed caption.
    #[arg(long)]
    caption: Option<String>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    sample_steps: Option<usize>,
    #[arg(long)]
    samples: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    samples: Option<PathBuf>,
    /// Adapted checkpoint, for tempo response.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Base checkpoint, for prior drift against `--ckpt`.
    #[arg(long)]
    base_ckpt: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    sample_steps: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    base_ckpt: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated ablations (no-selection, low-rank, uniform-schedule,
    /// feature-addition) or `all`.
    #[arg(long)]
    ablations: Option<String>,
    /// Training steps of each ablation variant.
    #[arg(long)]
    ablation_steps: Option<usize>,
    #[arg(long)]
    n_tracks: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    sample_steps: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[command(flatten)]
    adapter: AdapterFlags,
}

fn adapter_overrides(s: &mut Settings, a: &AdapterFlags) {
    s.set("zica_layers", a.zica_layers.clone());
    s.set("probe_report", a.probe_report.as_ref().map(|p| p.display().to_string()));
    s.flag("no_zica_selection", a.no_zica_selection);
    s.set("lora_rank", a.lora_rank);
    s.set("lora_alpha", a.lora_alpha);
    s.flag("uniform_schedule", a.uniform_schedule);
    s.flag("feature_addition", a.feature_addition);
    s.set("window", a.window);
}

fn disp(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut s = Settings::load(cli.config.as_deref())?;
    s.set("out", disp(&cli.out));
    s.set("seed", cli.seed);
    match cli.command {
        Command::Datagen(a) => {
            s.set("n_structured", a.n_structured);
            s.set("n_wild", a.n_wild);
            s.set("tempo_min", a.tempo_min);
            s.set("tempo_max", a.tempo_max);
            s.set("frames", a.frames);
            s.set("p_base", a.p_base);
            s.set("styles", a.styles);
            commands::datagen(&s)
        }
        Command::Train(a) => {
            s.set("stage", a.stage);
            s.set("data", disp(&a.data));
            s.set("base_ckpt", disp(&a.base_ckpt));
            s.set("resume", disp(&a.resume));
            s.set("ckpt", disp(&a.ckpt));
            s.set("preset", a.preset);
            s.set("steps", a.steps);
            s.set("batch_size", a.batch_size);
            s.set("lr", a.lr);
            s.set("p_cond_drop", a.p_cond_drop);
            s.set("p_base", a.p_base);
            s.set("beta0", a.beta0);
            s.set("decay", a.decay);
            s.set("gamma", a.gamma);
            s.set("eval_every", a.eval_every);
            s.set("layers", a.layers);
            s.set("d_model", a.d_model);
            s.set("heads", a.heads);
            adapter_overrides(&mut s, &a.adapter);
            commands::train(&s)
        }
        Command::Probe(a) => {
            s.set("ckpt", disp(&a.ckpt));
            s.set("data", disp(&a.data));
            s.set("n_samples", a.n_samples);
            s.set("n_tracks", a.n_tracks);
            s.set("k", a.k);
            s.set("w_validity", a.w_validity);
            s.set("w_smoothness", a.w_smoothness);
            s.set("sample_steps", a.sample_steps);
            commands::probe(&s)
        }
        Command::Sample(a) => {
            s.set("ckpt", disp(&a.ckpt));
            s.set("data", disp(&a.data));
            s.set("tempo", a.tempo);
            s.set("speed", a.speed);
            s.set("n_tracks", a.n_tracks);
            s.set("n", a.n);
            s.set("caption", a.caption);
            s.set("gamma", a.gamma);
            s.set("sample_steps", a.sample_steps);
            s.set("samples", disp(&a.samples));
            commands::sample(&s)
        }
        Command::Eval(a) => {
            s.set("samples", disp(&a.samples));
            s.set("ckpt", disp(&a.ckpt));
            s.set("base_ckpt", disp(&a.base_ckpt));
            s.set("n", a.n);
            s.set("sample_steps", a.sample_steps);
            commands::eval(&s)
        }
        Command::Report(a) => {
            s.set("base_ckpt", disp(&a.base_ckpt));
            s.set("ckpt", disp(&a.ckpt));
            s.set("data", disp(&a.data));
            s.set("ablations", a.ablations);
            s.set("ablation_steps", a.ablation_steps);
            s.set("n_tracks", a.n_tracks);
            s.set("n", a.n);
            s.set("sample_steps", a.sample_steps);
            s.set("gamma", a.gamma);
            adapter_overrides(&mut s, &a.adapter);
            commands::report(&s)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
