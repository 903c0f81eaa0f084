//! `malign`: generate synthetic data, train the moment-set model, evaluate it.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use moment_align::checkpoint::Checkpoint;
use moment_align::config::RunConfig;
use moment_align::pipeline::{self, Task, CHECKPOINT_FILE};
use moment_align::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "malign", version, about = "Moment-set video-language alignment at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic chunked dataset with a manifest.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train on a generated dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (defaults to `data_dir` from the config).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Resume from this checkpoint.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Score a checkpoint on the evaluation split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Checkpoint to evaluate (defaults to `<out>/checkpoint.malc`).
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_parser = parse_task)]
        task: Task,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory (the dataset for `generate`, run artifacts otherwise).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Threads for generation and evaluation; training is always single-threaded.
    #[arg(long, value_name = "N", default_value_t = 1)]
    workers: usize,
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl Common {
    fn load(&self, fallback: Option<RunConfig>) -> Result<RunConfig> {
        let mut cfg = match (&self.config, fallback) {
            (Some(path), _) => RunConfig::from_file(path)?,
            (None, Some(saved)) => saved,
            (None, None) => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

/// Prints a line, treating a closed pipe (`malign eval | head`) as success.
fn say(text: &str) -> Result<()> {
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Io {
            path: PathBuf::from("<stdout>"),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn path_string(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common, force } => {
            let mut cfg = common.load(None)?;
            if let Some(out) = &common.out {
                cfg.data_dir = path_string(out);
            }
            let dir = PathBuf::from(&cfg.data_dir);
            let manifest = pipeline::generate_dataset(&cfg, &dir, force, common.workers)?;
            say(&format!(
                "generated {} videos in {} chunks under {}",
                manifest.videos.len(),
                manifest.chunk_count(),
                dir.display()
            ))?;
        }
        Command::Train { common, data, checkpoint } => {
            let mut cfg = common.load(None)?;
            if let Some(out) = &common.out {
                cfg.out_dir = path_string(out);
            }
            if let Some(d) = &data {
                cfg.data_dir = path_string(d);
            }
            let summary = pipeline::train_model(
                &cfg,
                Path::new(&cfg.data_dir),
                Path::new(&cfg.out_dir),
                checkpoint.as_deref(),
            )?;
            let line = match (summary.initial_loss(), summary.final_loss()) {
                (Some(a), Some(b)) => format!(
                    "trained {} steps, loss {a:.6} -> {b:.6}; checkpoint {}",
                    summary.reports.len(),
                    summary.checkpoint.display()
                ),
                _ => format!("nothing left to train; checkpoint {}", summary.checkpoint.display()),
            };
            say(&line)?;
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            task,
        } => {
            let out = common.out.clone();
            let ck_path = match (&checkpoint, &out) {
                (Some(p), _) => p.clone(),
                (None, Some(o)) => o.join(CHECKPOINT_FILE),
                (None, None) => PathBuf::from(&RunConfig::default().out_dir).join(CHECKPOINT_FILE),
            };
            let saved = Checkpoint::<f64>::load(&ck_path)?.config;
            let mut cfg = common.load(Some(saved))?;
            if let Some(o) = &out {
                cfg.out_dir = path_string(o);
            }
            if let Some(d) = &data {
                cfg.data_dir = path_string(d);
            }
            let report = pipeline::evaluate(
                &cfg,
                Path::new(&cfg.data_dir),
                &ck_path,
                task,
                Path::new(&cfg.out_dir),
                common.workers,
            )?;
            say(&serde_json::to_string_pretty(&report)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {e}", e.category());
            ExitCode::from(2)
        }
    }
}
