use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use repcount_core::datasets::{generate_dataset, load_manifest, materialize, DatasetManifest, Split, VideoData};
use repcount_core::pipeline::eval::{evaluate_predictions, load_predictions, predict_all, save_predictions};
use repcount_core::pipeline::run::{load_split, run_training_stage, PREDICTIONS, REPORT};
use repcount_core::pipeline::{Evaluation, RunConfig, RunDir, Stage};
use repcount_core::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_DEPENDENCY: u8 = 3;
const EXIT_DATA: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "repcount", version, about = "Audio-visual repetition counting")]
struct Cli {
    /// TOML run configuration. Without it the small CPU preset is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with known counts.
    Synth {
        /// Output directory.
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Train one stage, or all four in order.
    Train {
        #[command(flatten)]
        io: Io,
        /// sight, sound, stride, reliability or all.
        #[arg(long, default_value = "all")]
        stage: String,
    },
    /// Predict counts for a split and write predictions.jsonl.
    Infer {
        #[command(flatten)]
        io: Io,
        #[command(flatten)]
        mode: Mode,
    },
    /// Predict and score a split; writes report.json.
    Evaluate {
        #[command(flatten)]
        io: Io,
        #[command(flatten)]
        mode: Mode,
    },
    /// Summarize the training record and the latest evaluation of a run.
    Report {
        #[arg(long)]
        weights_dir: PathBuf,
    },
}

#[derive(Args, Debug)]
struct Io {
    /// Dataset directory holding manifest.jsonl, or the manifest itself.
    #[arg(long)]
    dataset: PathBuf,
    /// Run directory for weights and intermediate files.
    #[arg(long)]
    weights_dir: PathBuf,
}

#[derive(Args, Debug)]
struct Mode {
    /// Split to run on. Defaults to test, or val when there is no test split.
    #[arg(long)]
    split: Option<String>,
    /// Use this stride for every video instead of the learned scorer.
    #[arg(long)]
    fixed_stride: Option<usize>,
    /// Sight stream only.
    #[arg(long)]
    no_audio: bool,
    /// Constant fusion weight in [0, 1] instead of the learned gate.
    #[arg(long)]
    gamma_override: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Config(_) | Error::Argument(_)) => EXIT_CONFIG,
        Some(Error::Dependency(_)) => EXIT_DEPENDENCY,
        Some(Error::Parse { .. } | Error::Media(_) | Error::Domain(_) | Error::Io(_) | Error::Json(_)) => EXIT_DATA,
        Some(Error::Nn(_)) | None => 1,
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.synth.seed = seed;
    }
    Ok(cfg)
}

fn open_manifest(path: &Path) -> anyhow::Result<DatasetManifest> {
    let file = if path.is_dir() { path.join("manifest.jsonl") } else { path.to_path_buf() };
    if !file.is_file() {
        return Err(Error::Media(format!("no manifest at {}", file.display())).into());
    }
    Ok(load_manifest(&file)?)
}

fn parse_stages(s: &str) -> anyhow::Result<Vec<Stage>> {
    if s == "all" {
        return Ok(vec![Stage::TrainSight, Stage::TrainSound, Stage::TrainStride, Stage::TrainReliability]);
    }
    let stage: Stage = s.parse()?;
    if !matches!(
        stage,
        Stage::TrainSight | Stage::TrainSound | Stage::TrainStride | Stage::TrainReliability
    ) {
        return Err(Error::Config(format!("{s:?} is not a training stage")).into());
    }
    Ok(vec![stage])
}

fn apply_mode(cfg: &mut RunConfig, mode: &Mode) -> anyhow::Result<()> {
    if mode.fixed_stride.is_some() {
        cfg.inference.fixed_stride = mode.fixed_stride;
    }
    if mode.gamma_override.is_some() {
        cfg.inference.gamma_override = mode.gamma_override;
    }
    cfg.inference.no_audio |= mode.no_audio;
    cfg.inference
        .validate()
        .map_err(|e| Error::Config(e.to_string()))?;
    Ok(())
}

fn pick_split(manifest: &DatasetManifest, requested: Option<&str>) -> anyhow::Result<Split> {
    if let Some(s) = requested {
        return s.parse().map_err(|_| Error::Config(format!("unknown split {s:?}")).into());
    }
    let counts = manifest.split_counts();
    Ok(if counts.get(&Split::Test).copied().unwrap_or(0) > 0 { Split::Test } else { Split::Val })
}

fn predict(cfg: &mut RunConfig, io: &Io, mode: &Mode) -> anyhow::Result<(RunDir, Vec<VideoData>)> {
    apply_mode(cfg, mode)?;
    let manifest = open_manifest(&io.dataset)?;
    let split = pick_split(&manifest, mode.split.as_deref())?;
    let run = RunDir::create(&io.weights_dir)?;
    let videos = load_split(&manifest, split, cfg)?;
    if videos.is_empty() {
        bail!(Error::Media(format!("split {} is empty", split.as_str())));
    }
    log::info!("{} {} videos", videos.len(), split.as_str());
    Ok((run, videos))
}

fn print_evaluation(eval: &Evaluation) {
    println!("fused\n{}", eval.fused.to_table());
    println!("sight\n{}", eval.sight.to_table());
    if let Some(s) = &eval.sound {
        println!("sound\n{}", s.to_table());
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = load_config(&cli)?;
    match &cli.command {
        Command::Synth { dataset } => {
            let videos = generate_dataset(&cfg.synth)?;
            let manifest = materialize(&videos, dataset)?;
            for (split, n) in manifest.split_counts() {
                println!("{} {n}", split.as_str());
            }
        }
        Command::Train { io, stage } => {
            let stages = parse_stages(stage)?;
            let manifest = open_manifest(&io.dataset)?;
            let run = RunDir::create(&io.weights_dir)?;
            std::fs::write(run.path("config.toml"), cfg.to_toml()?)
                .with_context(|| format!("writing config into {}", run.root.display()))?;
            for stage in stages {
                log::info!("stage {stage:?}");
                let record = run_training_stage(stage, &cfg, &manifest, &run)?;
                match record.epochs.last() {
                    Some(e) => println!(
                        "{stage:?}: {} epochs, final loss {:.5}{}",
                        record.epochs.len(),
                        e.train_loss,
                        e.val_rel_mae.map_or(String::new(), |v| format!(", val MAE {v:.4}"))
                    ),
                    None => println!("{stage:?}: no epochs"),
                }
            }
        }
        Command::Infer { io, mode } => {
            let (run, videos) = predict(&mut cfg, io, mode)?;
            let refs: Vec<&VideoData> = videos.iter().collect();
            let preds = predict_all(&refs, &run.models()?, &cfg.inference)?;
            save_predictions(&preds, &run.path(PREDICTIONS))?;
            for p in &preds {
                println!(
                    "{} stride {} sight {:.3} sound {} gamma {:.3} fused {:.3}",
                    p.video_id,
                    p.stride,
                    p.sight.value,
                    p.sound.map_or("-".to_string(), |s| format!("{:.3}", s.value)),
                    p.gamma,
                    p.fused.value
                );
            }
        }
        Command::Evaluate { io, mode } => {
            let (run, videos) = predict(&mut cfg, io, mode)?;
            let refs: Vec<&VideoData> = videos.iter().collect();
            let preds = predict_all(&refs, &run.models()?, &cfg.inference)?;
            save_predictions(&preds, &run.path(PREDICTIONS))?;
            let eval = evaluate_predictions(&preds, &refs)?;
            run.save_json(REPORT, &eval)?;
            print_evaluation(&eval);
        }
        Command::Report { weights_dir } => {
            let run = RunDir { root: weights_dir.clone() };
            if !run.root.is_dir() {
                bail!(Error::Dependency(format!("no run directory at {}", run.root.display())));
            }
            let record = run.record()?;
            if record.stages.is_empty() {
                println!("no training stages recorded");
            }
            for s in &record.stages {
                let losses = s.losses();
                let first = losses.first().copied().unwrap_or(f64::NAN);
                let last = losses.last().copied().unwrap_or(f64::NAN);
                let best_val = s
                    .epochs
                    .iter()
                    .filter_map(|e| e.val_rel_mae)
                    .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.min(v))));
                println!(
                    "{:?}: {} epochs, loss {first:.5} -> {last:.5}{}{}",
                    s.stage,
                    s.epochs.len(),
                    best_val.map_or(String::new(), |v| format!(", best val MAE {v:.4}")),
                    if s.skipped.is_empty() { String::new() } else { format!(", {} skipped", s.skipped.len()) }
                );
            }
            if let Some(eval) = run.optional::<Evaluation>(REPORT)? {
                print_evaluation(&eval);
            } else if run.has(PREDICTIONS) {
                let preds = load_predictions(&run.path(PREDICTIONS))?;
                println!("{} predictions on disk, not yet evaluated", preds.len());
            }
        }
    }
    Ok(())
}
