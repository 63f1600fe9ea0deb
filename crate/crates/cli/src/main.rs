//! `tgpt` — generate, validate, train, track, evaluate, ablate.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tgpt_core::pipeline::{
    cmd_ablate, cmd_eval, cmd_gen, cmd_track, cmd_train, cmd_validate, ClipSize, PipelineError, RunConfig,
};

#[derive(Parser)]
#[command(name = "tgpt", about = "Text-guided surgical point tracking lab", version)]
struct Cli {
    /// Master seed (env TGPT_SEED overrides this flag when set).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON run-config file; flags override individual fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Text guidance: gt, pred, or none.
    #[arg(long, global = true)]
    text_mode: Option<String>,
    /// Clip length preset: short or long.
    #[arg(long, global = true)]
    clip_size: Option<String>,
    /// Adam steps for train/ablate.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Worker threads for clip-parallel stages.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/test suite.
    Gen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Parse and validate clip documents.
    Validate { paths: Vec<PathBuf> },
    /// Train a tracker on a clip directory.
    Train {
        #[arg(long)]
        clips: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Track clips with a trained checkpoint.
    Track {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        clips: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate predictions against ground truth.
    Eval {
        #[arg(long)]
        clips: PathBuf,
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the text x clip-size ablation grid.
    Ablate {
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|source| PipelineError::Io {
                path: path.clone(),
                source,
            })?;
            serde_json::from_slice(&bytes)
                .map_err(|e| PipelineError::Config(format!("bad config file {}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Ok(env_seed) = std::env::var("TGPT_SEED") {
        cfg.seed = env_seed
            .parse()
            .map_err(|_| PipelineError::Config(format!("TGPT_SEED must be an integer, got {env_seed:?}")))?;
    }
    if let Some(mode) = &cli.text_mode {
        cfg.text_mode = mode
            .parse()
            .map_err(PipelineError::Config)?;
    }
    if let Some(size) = &cli.clip_size {
        cfg.clip_size = match size.as_str() {
            "short" => ClipSize::Short,
            "long" => ClipSize::Long,
            other => {
                return Err(PipelineError::Config(format!(
                    "unknown clip size {other:?} (expected short|long)"
                )))
            }
        };
    }
    if let Some(steps) = cli.steps {
        cfg.steps = steps;
    }
    if let Some(workers) = cli.workers {
        cfg.workers = workers.max(1);
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<ExitCode, PipelineError> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Gen { out } => {
            let summary = cmd_gen(&cfg, out)?;
            println!(
                "generated {} train and {} test clips under {}",
                summary.train.len(),
                summary.test.len(),
                out.display()
            );
        }
        Command::Validate { paths } => {
            let results = cmd_validate(paths);
            let mut bad = 0usize;
            for (path, result) in &results {
                match result {
                    Ok(v) if v.is_empty() => println!("{}: ok", path.display()),
                    Ok(v) => {
                        bad += 1;
                        for violation in v {
                            println!(
                                "{}: {} (track {:?}, frame {:?})",
                                path.display(),
                                violation.code,
                                violation.track,
                                violation.frame
                            );
                        }
                    }
                    Err(e) => {
                        bad += 1;
                        println!("{}: error category={} detail={}", path.display(), e.category(), e);
                    }
                }
            }
            if bad > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Train { clips, out } => {
            let summary = cmd_train(&cfg, clips, out)?;
            println!(
                "trained {} steps: loss {:.4} -> {:.4}; checkpoint {}",
                summary.steps,
                summary.first_loss,
                summary.last_loss,
                summary.checkpoint.display()
            );
        }
        Command::Track { checkpoint, clips, out } => {
            let n = cmd_track(&cfg, checkpoint, clips, out)?;
            println!("tracked {n} clips into {}", out.display());
        }
        Command::Eval { clips, preds, out } => {
            let table = cmd_eval(clips, preds, out)?;
            println!(
                "evaluated {} clips: AJ {:.4}, delta_avg {:.4}, OA {:.4}, EPE {:.3}",
                table.mean.n_clips, table.mean.aj, table.mean.delta_avg, table.mean.oa, table.mean.epe
            );
        }
        Command::Ablate { out } => {
            let md = cmd_ablate(&cfg, out)?;
            print!("{md}");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error category={} detail={}", e.category(), e);
            ExitCode::FAILURE
        }
    }
}
