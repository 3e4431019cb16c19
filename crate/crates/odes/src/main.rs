//! `odes`: pretrain a source model, run seeded adaptation streams, build
//! reports, write synthetic volumes and serve the annotation API.
//!
//! Exit status is 0 on success, 2 for bad input or configuration and 1 for
//! anything else.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use odes_harness::experiment::{cmd_adapt, cmd_gen_data, cmd_pretrain};
use odes_harness::report::cmd_report;
use odes_harness::{under_output_root, ExperimentConfig, HarnessError};
use thiserror::Error;

#[derive(Parser)]
#[command(name = "odes", version, about = "Online domain adaptation with expert-in-the-loop active learning")]
struct Cli {
    /// More log output (-v debug, -vv trace). `RUST_LOG` takes precedence.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the segmentation network on the source domain.
    Pretrain(ConfigArgs),
    /// Run every configured seed through the target stream with the
    /// ground-truth annotator.
    Adapt(ConfigArgs),
    /// Build a CSV table and SVG plots from event logs or run directories.
    Report {
        /// Event log files or directories written by `adapt`; one
        /// configuration each.
        paths: Vec<PathBuf>,
        #[arg(short, long, default_value = "report")]
        out: PathBuf,
    },
    /// Serve the annotation API.
    Serve {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
    /// Write the synthetic source, held-out and target volumes to disk.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(short, long)]
        out: PathBuf,
        /// Run seed whose target cohort is written.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// A config file plus per-key overrides. Named flags are shorthands for the
/// matching `--set` keys; `--set` is applied last.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// JSON experiment config; missing keys keep their defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Set any config key, e.g. `--set adapt.patch_side=7`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    label: Option<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// odes, source_only, continuity_only or entropy_min.
    #[arg(long)]
    method: Option<String>,
    /// Image selection rate in percent.
    #[arg(short = 'K', long = "K")]
    k: Option<f64>,
    /// Annotation budget in percent of pixels.
    #[arg(short = 'b', long)]
    b: Option<f64>,
    /// pixel or patch.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    patch_side: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    /// kl, l1 or l2.
    #[arg(long)]
    metric: Option<String>,
    /// ripu, ent, sconf or random.
    #[arg(long)]
    strategy: Option<String>,
    /// proposed or random.
    #[arg(long)]
    pruning: Option<String>,
    /// constant or exp_decay.
    #[arg(long)]
    decay: Option<String>,
    #[arg(long)]
    cycles: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    source_dir: Option<PathBuf>,
    #[arg(long)]
    holdout_dir: Option<PathBuf>,
    #[arg(long)]
    target_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn overrides(&self) -> Vec<String> {
        let mut o = Vec::new();
        let mut push = |key: &str, v: Option<serde_json::Value>| {
            if let Some(v) = v {
                o.push(format!("{key}={v}"));
            }
        };
        let s = |v: &Option<String>| v.as_ref().map(|v| serde_json::json!(v));
        let p = |v: &Option<PathBuf>| v.as_ref().map(|v| serde_json::json!(v));
        let n = |v: Option<f64>| v.map(|v| serde_json::json!(v));
        let u = |v: Option<usize>| v.map(|v| serde_json::json!(v));
        push("label", s(&self.label));
        push("output_dir", p(&self.output_dir));
        push("checkpoint", p(&self.checkpoint));
        push("seeds", (!self.seeds.is_empty()).then(|| serde_json::json!(self.seeds)));
        push("adapt.method", s(&self.method));
        push("adapt.K", n(self.k));
        push("adapt.b", n(self.b));
        push("adapt.mode", s(&self.mode));
        push("adapt.patch_side", u(self.patch_side));
        push("adapt.lambda", n(self.lambda));
        push("adapt.lr", n(self.lr));
        push("adapt.metric", s(&self.metric));
        push("adapt.strategy", s(&self.strategy));
        push("adapt.pruning", s(&self.pruning));
        push("adapt.decay", s(&self.decay));
        push("adapt.cycles", u(self.cycles));
        push("train.epochs", u(self.epochs));
        push("stream.batch_size", u(self.batch_size));
        push("data.source_dir", p(&self.source_dir));
        push("data.holdout_dir", p(&self.holdout_dir));
        push("data.target_dir", p(&self.target_dir));
        o.extend(self.set.iter().cloned());
        o
    }

    fn resolve(&self) -> Result<ExperimentConfig, HarnessError> {
        let base = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        base.with_overrides(&self.overrides())
    }
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error("server: {0}")]
    Serve(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Harness(e) => e.exit_code() as u8,
            Self::Serve(_) => 1,
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Pretrain(args) => {
            let report = cmd_pretrain(&args.resolve()?)?;
            println!("checkpoint      {}", report.checkpoint.display());
            println!("source DSC      {:.4?}", report.source_dsc_per_class);
            println!(
                "mean (fg)       {:.4}{}",
                report.mean_dsc,
                if report.converged { "" } else { "  (below the convergence threshold)" }
            );
        }
        Command::Adapt(args) => {
            let (outcome, dir) = cmd_adapt(&args.resolve()?)?;
            print!("{}", outcome.summary.to_table());
            println!("logs            {}", dir.display());
        }
        Command::Report { paths, out } => {
            let out = under_output_root(&out);
            let report = cmd_report(&paths, &out)?;
            for r in &report.rows {
                println!(
                    "{:<20} {:<14} {:6.2} ± {:5.2}  ({} runs)",
                    r.configuration,
                    r.class,
                    100.0 * r.mean_dsc,
                    100.0 * r.std_dsc,
                    r.runs
                );
            }
            if report.skipped_lines > 0 {
                println!("skipped {} malformed log lines", report.skipped_lines);
            }
            for f in &report.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Serve { config, addr } => {
            let cfg = config.resolve()?;
            cfg.validate(true)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(odes_service::serve(addr, odes_service::AppState::new(cfg)))?;
        }
        Command::GenData { config, out, seed } => {
            let out = under_output_root(&out);
            let dirs = cmd_gen_data(&config.resolve()?, &out, seed)?;
            println!("wrote {} volumes under {}", dirs.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
