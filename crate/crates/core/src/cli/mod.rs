//! Command-line driver: subcommands, run configuration and checkpoints.

mod checkpoint;
mod commands;
mod config;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use commands::{
    cmd_finetune, cmd_gradcam, cmd_preprocess, cmd_pretrain, cmd_stats, cmd_sweep, run_dir,
    PreprocessReport,
};
pub use config::{Method, Preset, RunConfig, KEYS};

use crate::error::{Error, Result};
use clap::{Parser, Subcommand};
use std::ffi::OsString;
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(
    name = "ctssl",
    version,
    about = "Self-supervised pre-training and fine-tuning for CT slices"
)]
pub struct Cli {
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured root seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 gives bit-reproducible runs.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Checkpoint to continue pre-training from.
    #[arg(long, global = true)]
    pub resume: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Convert HU PGMs / grayscale PNGs into a PNG dataset with manifest and stats.
    Preprocess,
    /// Self-supervised pre-training with the configured method.
    Pretrain,
    /// Fine-tune a classifier on the manifest's train split.
    Finetune,
    /// Dataset-reduction sweep over several pre-trained encoders.
    Sweep,
    /// Grad-CAM heatmaps and their correlation across checkpoints.
    Gradcam,
    /// Mean and standard deviation of the train split.
    Stats,
}

impl Cli {
    /// Loads the config file, applies overrides and resolves presets.
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{o}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(s) = self.seed {
            cfg.set("seed", &s.to_string())?;
        }
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn execute(&self) -> Result<()> {
        let cfg = self.run_config()?;
        if let Some(r) = &self.resume {
            if !r.exists() {
                return Err(Error::Config(format!(
                    "--resume: {} does not exist",
                    r.display()
                )));
            }
            if self.command != Command::Pretrain {
                return Err(Error::Config("--resume only applies to pretrain".into()));
            }
        }
        match self.command {
            Command::Preprocess => {
                std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
                let report = cmd_preprocess(&cfg, &self.out)?;
                println!("wrote {} images to {}", report.written, self.out.display());
                if !report.failed.is_empty() {
                    for (p, e) in &report.failed {
                        eprintln!("failed: {}: {e}", p.display());
                    }
                    return Err(Error::Validation(format!(
                        "{} input files could not be processed",
                        report.failed.len()
                    )));
                }
            }
            Command::Stats => {
                let s = cmd_stats(&cfg, &self.out)?;
                println!("mean {}\nstd {}", s.mean, s.std);
            }
            Command::Pretrain => {
                let dir = run_dir(&self.out, &cfg)?;
                let written = cmd_pretrain(&cfg, &dir, self.resume.as_deref())?;
                println!("{}", dir.display());
                for p in written {
                    println!("checkpoint {}", p.display());
                }
            }
            Command::Finetune => {
                let dir = run_dir(&self.out, &cfg)?;
                let row = cmd_finetune(&cfg, &dir)?;
                println!("{}", dir.display());
                println!(
                    "accuracy {:.4}±{:.4} auc {:.4}±{:.4} f1 {:.4}±{:.4}",
                    row.acc_mean, row.acc_std, row.auc_mean, row.auc_std, row.f1_mean, row.f1_std
                );
            }
            Command::Sweep => {
                let dir = run_dir(&self.out, &cfg)?;
                let rows = cmd_sweep(&cfg, &dir)?;
                println!("{}", dir.display());
                println!("{} rows", rows.len());
            }
            Command::Gradcam => {
                let dir = run_dir(&self.out, &cfg)?;
                let n = cmd_gradcam(&cfg, &dir)?;
                println!("{}", dir.display());
                println!("{n} heatmaps");
            }
        }
        Ok(())
    }
}

/// Exit code for an error: 2 for usage and configuration problems, else 1.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

/// Parses `args`, runs the command on a pool of `--threads` workers and
/// returns the process exit code.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start {} threads: {e}", cli.threads);
            return 1;
        }
    };
    match pool.install(|| cli.execute()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
