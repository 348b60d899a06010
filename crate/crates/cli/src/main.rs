//! `vsr`: curate, degrade, train, restore and evaluate from one config file.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use vsr_core::config::{parse_config, RunConfig};
use vsr_core::curator::{run_pipeline, CurateOptions};
use vsr_core::metrics::{evaluate, parse_metrics};
use vsr_core::models::Checkpoint;
use vsr_core::synth;
use vsr_core::workflow::{self, TrainData};
use vsr_core::Error;

#[derive(Parser, Debug)]
#[command(name = "vsr", version, about = "One-step diffusion video super-resolution toolkit")]
struct Cli {
    /// Where to write the run record (defaults next to the command's output).
    #[arg(long, global = true)]
    record: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArg {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Filter and crop a raw clip corpus into a training set.
    Curate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        force: bool,
    },
    /// Synthesize low-quality inputs from high-quality clips.
    Degrade {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Run training stage 1 (latent) or 2 (pixel).
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[command(flatten)]
        config: ConfigArg,
        /// Checkpoint to continue from; required for stage 2.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Output checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// HR training clips (overrides io.train_hr).
        #[arg(long)]
        hr: Option<PathBuf>,
        /// LR training clips (overrides io.train_lr).
        #[arg(long)]
        lr: Option<PathBuf>,
        /// HR image clips for stage 2 (overrides io.image_hr); defaults to the video frames.
        #[arg(long)]
        image_hr: Option<PathBuf>,
        #[arg(long)]
        image_lr: Option<PathBuf>,
        /// Overrides train.iters.
        #[arg(long)]
        iters: Option<usize>,
        /// Training log (JSON lines); defaults to `<out>.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Super-resolve every clip in a directory with a trained checkpoint.
    Restore {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// When given, the checkpoint's model must match this config.
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        t_star: Option<usize>,
        #[arg(long)]
        scale: Option<usize>,
        #[arg(long)]
        chunk_frames: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Compute PSNR, SSIM and the warping error over a clip directory.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        /// Comma-separated subset of psnr,ssim,warp (defaults to eval.metrics).
        #[arg(long)]
        metrics: Option<String>,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Write a synthetic corpus.
    Synth {
        #[arg(long, value_enum)]
        kind: SynthKind,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of clips (videos only).
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 9)]
        frames: usize,
        #[arg(long, default_value_t = 128)]
        height: usize,
        #[arg(long, default_value_t = 256)]
        width: usize,
        #[arg(long)]
        force: bool,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum SynthKind {
    /// The 20-clip labeled curation corpus.
    Curation,
    /// Eight small moving clips for an end-to-end run.
    Smoke,
    /// Panning textured clips of the requested size.
    Videos,
}

#[derive(Serialize)]
struct Versions {
    vsr: &'static str,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    args: Vec<String>,
    config_fingerprint: Option<String>,
    seed: Option<u64>,
    versions: Versions,
    wall_seconds: f64,
    exit_code: u8,
    error: Option<String>,
    outputs: serde_json::Value,
}

/// What a successful command reports back for the run record.
struct Outcome {
    config: Option<RunConfig>,
    outputs: serde_json::Value,
}

fn load_config(arg: &ConfigArg) -> Result<RunConfig, Error> {
    match &arg.config {
        Some(path) => parse_config(path),
        None => {
            let mut cfg = RunConfig::default();
            cfg.apply_seed_env()?;
            Ok(cfg)
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        _ => 1,
    }
}

fn default_record(cmd: &Command) -> PathBuf {
    let beside = |p: &Path, suffix: &str| {
        let mut s = p.as_os_str().to_os_string();
        s.push(suffix);
        PathBuf::from(s)
    };
    match cmd {
        Command::Curate { output, .. }
        | Command::Degrade { output, .. }
        | Command::Restore { output, .. }
        | Command::Synth { output, .. } => output.join("run_record.json"),
        Command::Train { out, .. } => beside(out, ".run_record.json"),
        Command::Eval { out, .. } => beside(out, ".run_record.json"),
    }
}

fn name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Curate { .. } => "curate",
        Command::Degrade { .. } => "degrade",
        Command::Train { .. } => "train",
        Command::Restore { .. } => "restore",
        Command::Eval { .. } => "eval",
        Command::Synth { .. } => "synth",
    }
}

fn run(cmd: &Command, config_used: &mut Option<RunConfig>) -> Result<serde_json::Value, Error> {
    match cmd {
        Command::Curate {
            input,
            output,
            config,
            jobs,
            force,
        } => {
            let cfg = load_config(config)?;
            *config_used = Some(cfg.clone());
            let m = run_pipeline(input, output, &cfg.curate, &CurateOptions { jobs: *jobs, force: *force })?;
            eprintln!(
                "curated {} clips: {} accepted, {} segments written",
                m.inputs, m.accepted_clips, m.emitted_segments
            );
            Ok(serde_json::json!({ "manifest": output.join(vsr_core::curator::MANIFEST_FILE) }))
        }
        Command::Degrade {
            input,
            output,
            config,
            seed,
            force,
        } => {
            let mut cfg = load_config(config)?;
            if let Some(s) = seed {
                cfg.seed = *s;
            }
            *config_used = Some(cfg.clone());
            let recipes = workflow::degrade_dir(input, output, &cfg.degrade, cfg.seed, *force)?;
            eprintln!("degraded {} clips", recipes.len());
            Ok(serde_json::json!({ "clips": recipes.len(), "recipes": output.join(workflow::RECIPES_FILE) }))
        }
        Command::Train {
            stage,
            config,
            resume,
            out,
            hr,
            lr,
            image_hr,
            image_lr,
            iters,
            log,
            force,
        } => {
            let mut cfg = load_config(config)?;
            cfg.train.stage = *stage;
            if iters.is_some() {
                cfg.train.iters = *iters;
            }
            cfg.validate()?;
            *config_used = Some(cfg.clone());
            if out.exists() && !force {
                return Err(Error::Exists(out.clone()));
            }
            let need = |flag: &Option<PathBuf>, key: &Option<PathBuf>, name: &str| {
                flag.clone()
                    .or_else(|| key.clone())
                    .ok_or_else(|| Error::config(format!("io.{name}"), "required (or pass the matching flag)"))
            };
            let hr = need(hr, &cfg.io.train_hr, "train_hr")?;
            let lr = need(lr, &cfg.io.train_lr, "train_lr")?;
            let videos = workflow::load_video_pairs(&hr, &lr)?;
            let images = match (image_hr.clone().or(cfg.io.image_hr.clone()), image_lr.clone().or(cfg.io.image_lr.clone())) {
                (Some(h), Some(l)) => workflow::load_image_pairs(&h, &l)?,
                (None, None) => workflow::images_from_videos(&videos),
                _ => return Err(Error::config("io.image_lr", "image_hr and image_lr must be given together")),
            };
            let resume = resume.as_deref().map(Checkpoint::load).transpose()?;
            let log_path = log.clone().unwrap_or_else(|| {
                let mut s = out.as_os_str().to_os_string();
                s.push(".log.jsonl");
                PathBuf::from(s)
            });
            if let Some(parent) = log_path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
            let mut writer = BufWriter::new(file);
            let total = cfg.train.effective_iters();
            let data = TrainData { videos, images };
            let ck = workflow::run_training(
                &cfg,
                &data,
                resume.as_ref(),
                &mut |i, l| {
                    if i % 100 == 0 {
                        eprintln!("vae step {i}: loss {l:.6}");
                    }
                },
                &mut |r| {
                    let line = serde_json::to_string(r)?;
                    writeln!(writer, "{line}").map_err(|e| Error::io(&log_path, e))?;
                    if r.step % 50 == 0 || r.step + 1 == total as u64 {
                        eprintln!("stage {} step {}: loss {:.6}", cfg.train.stage, r.step, r.loss);
                    }
                    Ok(())
                },
            )?;
            writer.flush().map_err(|e| Error::io(&log_path, e))?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            ck.save(out)?;
            Ok(serde_json::json!({ "checkpoint": out, "log": log_path, "step": ck.step, "stage": ck.stage }))
        }
        Command::Restore {
            input,
            output,
            checkpoint,
            config,
            t_star,
            scale,
            chunk_frames,
            force,
        } => {
            let ck = Checkpoint::load(checkpoint)?;
            let mut cfg = load_config(config)?;
            if config.config.is_some() {
                ck.check_compatible(&cfg.model)?;
            }
            if let Some(t) = t_star {
                cfg.diffusion.t_star = *t;
            }
            if let Some(s) = scale {
                cfg.io.scale = *s;
                cfg.degrade.scale = *s;
            }
            if let Some(c) = chunk_frames {
                cfg.io.chunk_frames = *c;
            }
            cfg.validate()?;
            *config_used = Some(cfg.clone());
            let pipe = workflow::pipeline_from_checkpoint(&ck, &cfg)?;
            let names = workflow::restore_dir(&pipe, input, output, *force)?;
            eprintln!("restored {} clips", names.len());
            Ok(serde_json::json!({ "clips": names, "model_fingerprint": ck.model_fingerprint() }))
        }
        Command::Eval {
            pred,
            reference,
            metrics,
            out,
            config,
        } => {
            let cfg = load_config(config)?;
            *config_used = Some(cfg.clone());
            let list = match metrics {
                Some(m) => parse_metrics(m)?,
                None => cfg.eval.metrics.clone(),
            };
            let report = evaluate(pred, reference.as_deref(), &list)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            fs::write(out, report.to_json()?).map_err(|e| Error::io(out, e))?;
            for (k, v) in &report.mean {
                eprintln!("{k}: {}", v.0);
            }
            Ok(serde_json::json!({ "report": out }))
        }
        Command::Synth {
            kind,
            output,
            seed,
            count,
            frames,
            height,
            width,
            force,
        } => {
            let n = match kind {
                SynthKind::Curation => synth::write_curation_corpus(output, *force)?.len(),
                SynthKind::Smoke => synth::write_smoke_corpus(output, *seed, *force)?.len(),
                SynthKind::Videos => {
                    for k in 0..*count {
                        let clip = synth::moving_clip(workflow::item_seed(*seed, &k.to_string()), *frames, *height, *width);
                        vsr_core::media::write_clip(&clip, &output.join(format!("clip_{k:04}")), *force)?;
                    }
                    *count
                }
            };
            eprintln!("wrote {n} clips");
            Ok(serde_json::json!({ "clips": n }))
        }
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let cli = Cli::parse();
    let started = Instant::now();
    let mut config = None;
    let result = run(&cli.command, &mut config).map(|outputs| Outcome { config: config.clone(), outputs });
    let (code, error, outputs, config) = match result {
        Ok(o) => (0, None, o.outputs, o.config),
        Err(e) => {
            eprintln!("error: {e}");
            (exit_code(&e), Some(e.to_string()), serde_json::Value::Null, config)
        }
    };
    let record = RunRecord {
        command: name(&cli.command),
        args: args.into_iter().skip(1).collect(),
        config_fingerprint: config.as_ref().map(RunConfig::fingerprint),
        seed: config.as_ref().map(|c| c.seed),
        versions: Versions {
            vsr: env!("CARGO_PKG_VERSION"),
        },
        wall_seconds: started.elapsed().as_secs_f64(),
        exit_code: code,
        error,
        outputs,
    };
    let path = cli.record.clone().unwrap_or_else(|| default_record(&cli.command));
    let written = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map_or(Ok(()), fs::create_dir_all)
        .and_then(|_| fs::write(&path, serde_json::to_string_pretty(&record).unwrap_or_default() + "\n"));
    if let Err(e) = written {
        eprintln!("warning: could not write run record {}: {e}", path.display());
    }
    ExitCode::from(code)
}
