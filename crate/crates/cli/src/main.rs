//! Command-line front end.
//!
//! Four subcommands: `train` builds the procedural dataset and trains the
//! noise predictor; `stylize` runs attention-injection style transfer with
//! a trained checkpoint; `evaluate` scores (content, style, stylized)
//! triplets; `diagnose` emits the attention-spread table and a γ sweep.
//! Every command writes a full config echo next to its outputs, and
//! feeding that echo back through `--config` reproduces the run exactly.
//!
//! Exit codes: 0 success, 2 usage (bad flags/ranges), 3 I/O (missing or
//! unreadable files), 4 numeric or internal failure. Errors print one
//! machine-parsable line: `error: <category>: <detail>`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use restyle_core::dataset::{generate_dataset, write_dataset, ProceduralSpec};
use restyle_core::imageio::{load_image_resized, save_image, to_model_range, to_storage_range};
use restyle_core::metrics::{cfsd, histogram_loss, rgb_uv_histogram, DEFAULT_BINS};
use restyle_core::model::{
    load_checkpoint, save_checkpoint, LayerId, NoiseSchedule, UNetConfig, UNetWeights, IMAGE_SIZE,
};
use restyle_core::style::{
    attention_std_report, invert_with_capture, stylize_from_artifacts, CacheRole, StylizeConfig,
};
use restyle_core::trainer::{TrainConfig, TrainEvent, Trainer};
use restyle_core::{Error, Tensor};

#[derive(Parser)]
#[command(
    name = "restyle",
    version,
    about = "Training-free style transfer on a toy diffusion model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural dataset and train the noise predictor.
    Train(TrainArgs),
    /// Stylize a content image with a style image.
    Stylize(StylizeArgs),
    /// Score (content, style, stylized) triplets into a JSON-lines report.
    Evaluate(EvaluateArgs),
    /// Emit the attention-spread table and a γ-sweep metric table.
    Diagnose(DiagnoseArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Stylize(args) => cmd_stylize(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Diagnose(args) => cmd_diagnose(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (category, code) = classify(&e);
            eprintln!("error: {category}: {e}");
            ExitCode::from(code)
        }
    }
}

/// Maps an error to its exit category: flag/range problems are usage (2),
/// file problems are I/O (3), everything else is numeric/internal (4).
fn classify(e: &Error) -> (&'static str, u8) {
    match e {
        Error::Range(_) | Error::Config(_) => ("usage", 2),
        Error::Io(_) | Error::Image(_) | Error::Json(_) | Error::Checkpoint(_) => ("io", 3),
        _ => ("numeric", 4),
    }
}

// ---------------------------------------------------------------- train

/// Resolved training run: everything needed to reproduce the checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainRunConfig {
    model: UNetConfig,
    train: TrainConfig,
    dataset: ProceduralSpec,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            // Desk-scale width: trains in under two hours on one CPU core.
            model: UNetConfig {
                base_width: 16,
                groups: 8,
            },
            train: TrainConfig {
                // 1500 steps fits the two-hour budget; the smoothing
                // horizon (1/(1−decay) = 200 steps) is sized to that run
                // length so the averaged weights shed the initialization.
                steps: 1500,
                ema_decay: 0.995,
                ..TrainConfig::default()
            },
            dataset: ProceduralSpec::default(),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Output directory (dataset/, model.ckpt, losses.csv, config.json).
    #[arg(long)]
    out_dir: PathBuf,
    /// JSON run config; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    base_width: Option<usize>,
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long)]
    content_train: Option<usize>,
    #[arg(long)]
    style_train: Option<usize>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Error> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let mut run: TrainRunConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => TrainRunConfig::default(),
    };
    if let Some(v) = args.seed {
        run.train.seed = v;
        run.dataset.seed = v;
    }
    if let Some(v) = args.steps {
        run.train.steps = v;
    }
    if let Some(v) = args.batch_size {
        run.train.batch_size = v;
    }
    if let Some(v) = args.lr {
        run.train.lr = v;
    }
    if let Some(v) = args.base_width {
        run.model.base_width = v;
    }
    if let Some(v) = args.groups {
        run.model.groups = v;
    }
    if let Some(v) = args.content_train {
        run.dataset.content_train = v;
    }
    if let Some(v) = args.style_train {
        run.dataset.style_train = v;
    }

    fs::create_dir_all(&args.out_dir)?;
    fs::write(
        args.out_dir.join("config.json"),
        serde_json::to_vec_pretty(&run)?,
    )?;

    println!(
        "generating dataset ({} content + {} style train images)",
        run.dataset.content_train, run.dataset.style_train
    );
    let dataset = generate_dataset(&run.dataset);
    write_dataset(&dataset, &run.dataset, &args.out_dir.join("dataset"))?;

    let mut init_rng = rand_seed(run.train.seed);
    let weights = UNetWeights::init(run.model, &mut init_rng)?;
    println!(
        "training {} steps, batch {}, {} parameters",
        run.train.steps,
        run.train.batch_size,
        weights.params().total_elements()
    );
    let schedule = NoiseSchedule::default_schedule();
    let mut trainer = Trainer::new(weights, schedule, run.train.clone())?;

    let train_images: Vec<Tensor> = dataset
        .content_train
        .iter()
        .chain(&dataset.style_train)
        .cloned()
        .collect();
    let val_images: Vec<Tensor> = dataset
        .content_val
        .iter()
        .chain(&dataset.style_val)
        .cloned()
        .collect();

    let started = Instant::now();
    let report = trainer.train(&train_images, &val_images, |event| match event {
        TrainEvent::Step { step, loss } => {
            println!(
                "step {step:>6}  train loss {loss:.4}  ({:.0}s)",
                started.elapsed().as_secs_f64()
            )
        }
        TrainEvent::Val { step, loss } => println!("step {step:>6}  val loss   {loss:.4}"),
    })?;

    let mut csv = String::from("phase,step,loss\n");
    for (step, loss) in &report.train_curve {
        csv.push_str(&format!("train,{step},{loss:.6}\n"));
    }
    for (step, loss) in &report.val_curve {
        csv.push_str(&format!("val,{step},{loss:.6}\n"));
    }
    fs::write(args.out_dir.join("losses.csv"), csv)?;

    let ckpt = args.out_dir.join("model.ckpt");
    save_checkpoint(&ckpt, trainer.ema_weights())?;
    println!(
        "done: val loss {:.4} -> {:.4}; checkpoint at {}",
        report.initial_val_loss,
        report.final_val_loss,
        ckpt.display()
    );
    Ok(())
}

fn rand_seed(seed: u64) -> impl rand::Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha12Rng::seed_from_u64(seed)
}

// -------------------------------------------------------------- stylize

/// Resolved stylize run; the sidecar written next to the output is exactly
/// this structure plus timings, so it can be replayed through `--config`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct StylizeRunConfig {
    content: PathBuf,
    style: PathBuf,
    checkpoint: PathBuf,
    out: PathBuf,
    gamma: f32,
    tau: f32,
    steps: usize,
    layers: Vec<LayerId>,
    no_adain: bool,
    no_injection: bool,
    no_temperature: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model: Option<UNetConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    timings_sec: Option<StylizeTimings>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StylizeTimings {
    invert_content: f64,
    invert_style: f64,
    sample: f64,
}

#[derive(Args)]
struct StylizeArgs {
    #[arg(long)]
    content: Option<PathBuf>,
    #[arg(long)]
    style: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Query blend toward the content pass (1 = keep content queries).
    #[arg(long)]
    gamma: Option<f32>,
    /// Softmax temperature at injected layers (>= 1).
    #[arg(long)]
    tau: Option<f32>,
    /// Scheduled timestep count.
    #[arg(long)]
    steps: Option<usize>,
    /// Comma-separated attention layers to inject (e.g. dec.16,dec.32).
    #[arg(long)]
    layers: Option<String>,
    /// Skip initial-latent statistics matching.
    #[arg(long)]
    no_adain: bool,
    /// Skip attention feature injection.
    #[arg(long)]
    no_injection: bool,
    /// Skip temperature scaling.
    #[arg(long)]
    no_temperature: bool,
    /// JSON run config (e.g. a previous run's sidecar); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn resolve_stylize(args: &StylizeArgs) -> Result<StylizeRunConfig, Error> {
    let defaults = StylizeConfig::default();
    let base: Option<StylizeRunConfig> = args.config.as_ref().map(|p| read_json(p)).transpose()?;
    let need = |flag: &Option<PathBuf>, from_cfg: Option<&PathBuf>, name: &str| {
        flag.clone()
            .or_else(|| from_cfg.cloned())
            .ok_or_else(|| Error::Config(format!("--{name} is required (flag or config file)")))
    };
    let layers = match &args.layers {
        Some(spec) => spec
            .split(',')
            .map(|s| LayerId::parse(s.trim()))
            .collect::<Result<Vec<_>, _>>()?,
        None => base
            .as_ref()
            .map(|c| c.layers.clone())
            .unwrap_or_else(|| defaults.injected_layers.clone()),
    };
    Ok(StylizeRunConfig {
        content: need(&args.content, base.as_ref().map(|c| &c.content), "content")?,
        style: need(&args.style, base.as_ref().map(|c| &c.style), "style")?,
        checkpoint: need(
            &args.checkpoint,
            base.as_ref().map(|c| &c.checkpoint),
            "checkpoint",
        )?,
        out: need(&args.out, base.as_ref().map(|c| &c.out), "out")?,
        gamma: args
            .gamma
            .or(base.as_ref().map(|c| c.gamma))
            .unwrap_or(defaults.gamma),
        tau: args
            .tau
            .or(base.as_ref().map(|c| c.tau))
            .unwrap_or(defaults.tau),
        steps: args
            .steps
            .or(base.as_ref().map(|c| c.steps))
            .unwrap_or(defaults.steps),
        layers,
        no_adain: args.no_adain || base.as_ref().is_some_and(|c| c.no_adain),
        no_injection: args.no_injection || base.as_ref().is_some_and(|c| c.no_injection),
        no_temperature: args.no_temperature || base.as_ref().is_some_and(|c| c.no_temperature),
        model: None,
        timings_sec: None,
    })
}

fn stylize_config_of(run: &StylizeRunConfig) -> Result<StylizeConfig, Error> {
    let cfg = StylizeConfig {
        gamma: run.gamma,
        tau: run.tau,
        steps: run.steps,
        injected_layers: run.layers.clone(),
        enable_injection: !run.no_injection,
        enable_adain: !run.no_adain,
        enable_temperature: !run.no_temperature,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_stylize(args: StylizeArgs) -> Result<(), Error> {
    let mut run = resolve_stylize(&args)?;
    let cfg = stylize_config_of(&run)?;
    let weights = load_checkpoint(&run.checkpoint)?;
    let schedule = NoiseSchedule::default_schedule();

    let content = to_model_range(&load_image_resized(&run.content, IMAGE_SIZE)?)?;
    let style = to_model_range(&load_image_resized(&run.style, IMAGE_SIZE)?)?;

    let t0 = Instant::now();
    let content_art = invert_with_capture(&content, &weights, &schedule, &cfg, CacheRole::Content)?;
    let t1 = Instant::now();
    let style_art = invert_with_capture(&style, &weights, &schedule, &cfg, CacheRole::Style)?;
    let t2 = Instant::now();
    let stylized = stylize_from_artifacts(&content_art, &style_art, &weights, &schedule, &cfg)?;
    let t3 = Instant::now();

    save_image(&run.out, &to_storage_range(&stylized)?)?;

    run.model = Some(*weights.config());
    run.timings_sec = Some(StylizeTimings {
        invert_content: (t1 - t0).as_secs_f64(),
        invert_style: (t2 - t1).as_secs_f64(),
        sample: (t3 - t2).as_secs_f64(),
    });
    let sidecar = sidecar_path(&run.out);
    fs::write(&sidecar, serde_json::to_vec_pretty(&run)?)?;
    println!(
        "stylized {} with {} -> {} (config echo {})",
        run.content.display(),
        run.style.display(),
        run.out.display(),
        sidecar.display()
    );
    Ok(())
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    out.with_file_name(name)
}

// ------------------------------------------------------------- evaluate

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Triplet {
    content: PathBuf,
    style: PathBuf,
    stylized: PathBuf,
    #[serde(default)]
    gamma: Option<f32>,
    #[serde(default)]
    tau: Option<f32>,
}

#[derive(Debug, Serialize)]
struct TripletReport {
    content: PathBuf,
    style: PathBuf,
    stylized: PathBuf,
    cfsd: f64,
    hist_loss: f64,
    gamma: Option<f32>,
    tau: Option<f32>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// JSON array of {content, style, stylized, gamma?, tau?}; relative
    /// paths resolve against the manifest's directory.
    #[arg(long)]
    triplets: PathBuf,
    /// JSON-lines report, one object per triplet in manifest order.
    #[arg(long)]
    out: PathBuf,
    /// Histogram bins per log-chroma axis.
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), Error> {
    let triplets: Vec<Triplet> = read_json(&args.triplets)?;
    if triplets.is_empty() {
        return Err(Error::Config("triplet manifest is empty".into()));
    }
    let base = args
        .triplets
        .parent()
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let resolve = |p: &PathBuf| {
        if p.is_absolute() {
            p.clone()
        } else {
            base.join(p)
        }
    };

    let mut lines = String::new();
    let mut sum_cfsd = 0.0f64;
    let mut sum_hist = 0.0f64;
    for t in &triplets {
        let content = load_image_resized(&resolve(&t.content), IMAGE_SIZE)?;
        let style = load_image_resized(&resolve(&t.style), IMAGE_SIZE)?;
        let stylized = load_image_resized(&resolve(&t.stylized), IMAGE_SIZE)?;
        let structure = cfsd(&content, &stylized)?;
        let color = histogram_loss(
            &rgb_uv_histogram(&stylized, args.bins)?,
            &rgb_uv_histogram(&style, args.bins)?,
        )?;
        sum_cfsd += structure;
        sum_hist += color;
        let report = TripletReport {
            content: t.content.clone(),
            style: t.style.clone(),
            stylized: t.stylized.clone(),
            cfsd: structure,
            hist_loss: color,
            gamma: t.gamma,
            tau: t.tau,
        };
        lines.push_str(&serde_json::to_string(&report)?);
        lines.push('\n');
    }
    fs::write(&args.out, lines)?;
    let n = triplets.len() as f64;
    println!(
        "evaluated {} triplets: mean cfsd {:.6}, mean hist_loss {:.6} (report {})",
        triplets.len(),
        sum_cfsd / n,
        sum_hist / n,
        args.out.display()
    );
    Ok(())
}

// ------------------------------------------------------------- diagnose

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    content: PathBuf,
    #[arg(long)]
    style: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory (attention_std.csv, gamma_sweep.csv, config.json).
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    tau: Option<f32>,
    #[arg(long)]
    steps: Option<usize>,
    /// Comma-separated layers to inject.
    #[arg(long)]
    layers: Option<String>,
}

fn cmd_diagnose(args: DiagnoseArgs) -> Result<(), Error> {
    let mut cfg = StylizeConfig::default();
    if let Some(tau) = args.tau {
        cfg.tau = tau;
    }
    if let Some(steps) = args.steps {
        cfg.steps = steps;
    }
    if let Some(spec) = &args.layers {
        cfg.injected_layers = spec
            .split(',')
            .map(|s| LayerId::parse(s.trim()))
            .collect::<Result<Vec<_>, _>>()?;
    }
    cfg.validate()?;
    let weights = load_checkpoint(&args.checkpoint)?;
    let schedule = NoiseSchedule::default_schedule();
    fs::create_dir_all(&args.out_dir)?;

    let content01 = load_image_resized(&args.content, IMAGE_SIZE)?;
    let style01 = load_image_resized(&args.style, IMAGE_SIZE)?;
    let content = to_model_range(&content01)?;
    let style = to_model_range(&style01)?;

    // Attention-spread table at the configured temperature.
    println!("measuring attention logit spread over {} steps", cfg.steps);
    let rows = attention_std_report(&content, &style, &weights, &schedule, &cfg)?;
    let mut csv = String::from("t,no_injection,injected_tau1,injected_scaled\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{:.6e},{:.6e},{:.6e}\n",
            row.t, row.no_injection, row.injected_tau1, row.injected_scaled
        ));
    }
    fs::write(args.out_dir.join("attention_std.csv"), csv)?;

    // γ sweep over [0.3, 1.0] in steps of 0.1, reusing one inversion pair.
    println!("sweeping gamma over [0.3, 1.0]");
    let content_art = invert_with_capture(&content, &weights, &schedule, &cfg, CacheRole::Content)?;
    let style_art = invert_with_capture(&style, &weights, &schedule, &cfg, CacheRole::Style)?;
    let mut sweep = String::from("gamma,cfsd,hist_loss\n");
    for k in 0..8 {
        let gamma = (3 + k) as f32 / 10.0;
        let cfg_g = StylizeConfig {
            gamma,
            ..cfg.clone()
        };
        let stylized =
            stylize_from_artifacts(&content_art, &style_art, &weights, &schedule, &cfg_g)?;
        let stylized01 = to_storage_range(&stylized)?;
        let structure = cfsd(&content01, &stylized01)?;
        let color = histogram_loss(
            &rgb_uv_histogram(&stylized01, DEFAULT_BINS)?,
            &rgb_uv_histogram(&style01, DEFAULT_BINS)?,
        )?;
        sweep.push_str(&format!("{gamma:.1},{structure:.6e},{color:.6e}\n"));
    }
    fs::write(args.out_dir.join("gamma_sweep.csv"), sweep)?;

    #[derive(Serialize)]
    struct DiagnoseEcho<'a> {
        content: &'a Path,
        style: &'a Path,
        checkpoint: &'a Path,
        config: &'a StylizeConfig,
        model: &'a UNetConfig,
    }
    fs::write(
        args.out_dir.join("config.json"),
        serde_json::to_vec_pretty(&DiagnoseEcho {
            content: &args.content,
            style: &args.style,
            checkpoint: &args.checkpoint,
            config: &cfg,
            model: weights.config(),
        })?,
    )?;
    println!("wrote {}", args.out_dir.display());
    Ok(())
}
