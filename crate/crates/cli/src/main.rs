use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use lorat_core::config::RunConfig;
use lorat_core::evalkit::{
    average_iou, got10k_record, load_predictions, load_records, run_benchmark, save_predictions, save_records,
    save_suite, synthetic_suite, DummyStatic, FinetuneConfig, Method, ModelTracker, Prediction, Replay, Video,
};
use lorat_core::model::TrackerModel;
use lorat_core::numerics::Archive;
use lorat_core::pipeline::track_video;
use lorat_core::selftest::run_selftest;

#[derive(Parser)]
#[command(name = "lorat", version, about = "LoRA-adapted one-stream ViT tracker and benchmark harness")]
struct Cli {
    #[command(flatten)]
    run: RunArgs,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand; they override `--config`.
#[derive(Args, Debug, Default)]
struct RunArgs {
    /// key = value file with run settings
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    preset: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Full model or adapter archive
    #[arg(long, global = true)]
    weights: Option<PathBuf>,
    /// JSON Lines track annotations
    #[arg(long, global = true)]
    annotations: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// interpolate | slice
    #[arg(long, global = true)]
    pe_strategy: Option<String>,
    #[arg(long, global = true)]
    lora_rank: Option<usize>,
    #[arg(long, global = true)]
    lora_alpha: Option<f64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    context_factor: Option<f64>,
    #[arg(long, global = true)]
    search_factor: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Track every annotated video (or one) and write predictions
    Track {
        /// Only this video id
        #[arg(long)]
        video: Option<String>,
    },
    /// Score predictions against annotations
    Eval {
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Run the method table
    Bench {
        /// Comma-separated: dummy-static, lorat, or predictions:<file>
        #[arg(long, default_value = "dummy-static,lorat")]
        methods: String,
    },
    /// Fine-tune adapters, head and embedding tables
    Finetune {
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 100)]
        eval_every: usize,
        /// Stop once the train average IoU reaches this value
        #[arg(long)]
        target_iou: Option<f64>,
    },
    /// Write a synthetic dataset
    Synth {
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 24)]
        frames: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        /// Only static targets
        #[arg(long)]
        r#static: bool,
    },
    /// Run the built-in property suite
    Selftest,
    /// Convert GOT-10k sequence directories to JSON Lines annotations
    Convert {
        #[arg(required = true)]
        sequences: Vec<PathBuf>,
    },
}

fn run_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    let overrides: [(&str, Option<String>); 11] = [
        ("preset", args.preset.clone()),
        ("seed", args.seed.map(|v| v.to_string())),
        ("weights", path(&args.weights)),
        ("annotations", path(&args.annotations)),
        ("out", path(&args.out)),
        ("pe_strategy", args.pe_strategy.clone()),
        ("lora_rank", args.lora_rank.map(|v| v.to_string())),
        ("lora_alpha", args.lora_alpha.map(|v| v.to_string())),
        ("workers", args.workers.map(|v| v.to_string())),
        ("context_factor", args.context_factor.map(|v| v.to_string())),
        ("search_factor", args.search_factor.map(|v| v.to_string())),
    ];
    for (k, v) in overrides {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("run_config.txt"), format!("# fingerprint {}\n{}", cfg.fingerprint(), cfg.to_text()))?;
    Ok(dir)
}

fn annotations(cfg: &RunConfig) -> Result<Vec<lorat_core::evalkit::TrackRecord>> {
    let Some(p) = &cfg.annotations else {
        bail!("--annotations is required");
    };
    load_records(p).with_context(|| format!("reading {}", p.display()))
}

fn load_videos(cfg: &RunConfig) -> Result<Vec<Video>> {
    annotations(cfg)?
        .into_iter()
        .map(|r| {
            let id = r.video_id.clone();
            Video::load(r).with_context(|| format!("loading frames of {id}"))
        })
        .collect()
}

/// The base model for the preset and seed, with `--weights` applied.
fn build_model(cfg: &RunConfig) -> Result<TrackerModel<f32>> {
    let mut model = TrackerModel::<f32>::random(cfg.model_config()?, cfg.seed)?;
    model.strategy = cfg.pe_strategy;
    if let Some(w) = &cfg.weights {
        let archive = Archive::load(w).with_context(|| format!("reading {}", w.display()))?;
        model.load_archive(&archive, cfg.lora_alpha)?;
    }
    Ok(model)
}

fn merged_model(cfg: &RunConfig) -> Result<TrackerModel<f32>> {
    Ok(build_model(cfg)?.merged_copy()?)
}

fn cmd_track(cfg: &RunConfig, only: Option<&str>) -> Result<()> {
    let dir = out_dir(cfg)?;
    let model = merged_model(cfg)?;
    let mut preds = Vec::new();
    for rec in annotations(cfg)? {
        if only.is_some_and(|id| id != rec.video_id) {
            continue;
        }
        let v = Video::load(rec)?;
        let boxes = track_video(&model, &v.frames, &v.record.gt_boxes[0], cfg.tracker())?;
        info!("{}: {} frames", v.id(), boxes.len());
        preds.push(Prediction::new(v.id(), boxes));
    }
    if preds.is_empty() {
        bail!("no matching videos");
    }
    let path = dir.join("predictions.jsonl");
    save_predictions(&preds, &path)?;
    println!("wrote {} tracks to {}", preds.len(), path.display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, predictions: &Path) -> Result<()> {
    let records = annotations(cfg)?;
    let preds = load_predictions(predictions).with_context(|| format!("reading {}", predictions.display()))?;
    let mut report = average_iou(&records, &preds, "predictions")?;
    report.fingerprint = cfg.fingerprint();
    for (id, v) in &report.per_track {
        println!("{id}\t{v:.6}");
    }
    for (id, why) in &report.excluded {
        println!("{id}\texcluded: {why}");
    }
    println!("average IoU {:.6}", report.average_iou);
    if let Some(dir) = &cfg.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("eval.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn cmd_bench(cfg: &RunConfig, methods: &str) -> Result<()> {
    let videos = load_videos(cfg)?;
    let mut table = Vec::new();
    for name in methods.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let m = match name {
            "dummy-static" | "dummy" => Method::new("dummy-static", DummyStatic),
            "lorat" => Method::new(
                "lorat",
                ModelTracker {
                    model: Arc::new(merged_model(cfg)?),
                    config: cfg.tracker(),
                },
            ),
            other => match other.strip_prefix("predictions:") {
                Some(p) => Method::new(other, Replay(load_predictions(p)?)),
                None => bail!("unknown method {other:?}"),
            },
        };
        table.push(m);
    }
    let report = run_benchmark(&table, &videos, cfg.workers, &cfg.fingerprint())?;
    let dir = out_dir(cfg)?;
    let text = report.to_text();
    fs::write(dir.join("bench.txt"), &text)?;
    fs::write(dir.join("bench.json"), report.to_json()?)?;
    print!("{text}");
    Ok(())
}

fn cmd_finetune(cfg: &RunConfig, ft: FinetuneConfig) -> Result<()> {
    let videos = load_videos(cfg)?;
    let mut model = build_model(cfg)?;
    if model.is_merged() {
        model = model.wrapped(cfg.lora(), cfg.seed.wrapping_add(1))?;
    }
    let dir = out_dir(cfg)?;
    let log = lorat_core::evalkit::finetune(&mut model, &videos, &ft, &cfg.tracker())?;
    let path = dir.join("adapters.lorat");
    model.trainable_archive().save(&path)?;
    fs::write(dir.join("finetune.json"), serde_json::to_string_pretty(&log)?)?;
    println!(
        "{} steps, final loss {:.4}, best train IoU {}",
        log.steps_run,
        log.losses.last().copied().unwrap_or(f64::NAN),
        log.best_iou().map_or("n/a".into(), |v| format!("{v:.4}"))
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_synth(cfg: &RunConfig, count: usize, frames: usize, size: usize, still: bool) -> Result<()> {
    let videos = synthetic_suite(count, frames, (size, size), still, cfg.seed)?;
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("synth"));
    let path = save_suite(&videos, &dir)?;
    println!("wrote {} videos, annotations in {}", videos.len(), path.display());
    Ok(())
}

fn cmd_selftest() -> Result<bool> {
    let checks = run_selftest();
    for c in &checks {
        println!(
            "[{}] {} ({:.2}s): {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.seconds,
            c.detail
        );
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} passed, {failed} failed", checks.len() - failed);
    Ok(failed == 0)
}

fn cmd_convert(cfg: &RunConfig, sequences: &[PathBuf]) -> Result<()> {
    let records = sequences
        .iter()
        .map(|d| got10k_record(d).with_context(|| format!("reading {}", d.display())))
        .collect::<Result<Vec<_>>>()?;
    let path = cfg.out.clone().unwrap_or_else(|| PathBuf::from("annotations.jsonl"));
    save_records(&records, &path)?;
    println!("wrote {} records to {}", records.len(), path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = run_config(&cli.run)?;
    match cli.command {
        Command::Track { video } => cmd_track(&cfg, video.as_deref())?,
        Command::Eval { predictions } => cmd_eval(&cfg, &predictions)?,
        Command::Bench { methods } => cmd_bench(&cfg, &methods)?,
        Command::Finetune { steps, batch, lr, eval_every, target_iou } => cmd_finetune(
            &cfg,
            FinetuneConfig {
                steps,
                batch,
                lr,
                seed: cfg.seed,
                eval_every,
                target_iou,
                ..FinetuneConfig::default()
            },
        )?,
        Command::Synth { count, frames, size, r#static } => cmd_synth(&cfg, count, frames, size, r#static)?,
        Command::Selftest => return cmd_selftest(),
        Command::Convert { sequences } => cmd_convert(&cfg, &sequences)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
