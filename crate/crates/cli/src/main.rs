//! `zsda`: pretrain the layout-conditioned denoiser, transfer source scenes
//! to target domains, adapt segmenters and compare runs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use clap::{Parser, Subcommand};

use zsda_core::config::{RunConfig, OUTPUT_ROOT_ENV};
use zsda_core::pipeline::{run_evaluate, run_pretrain, run_train, run_transfer};
use zsda_core::report::{render_report, RunMetrics, TrainMode};
use zsda_core::scene::Domain;
use zsda_core::transfer::Variant;

#[derive(Parser)]
#[command(name = "zsda", version, about = "Zero-shot domain adaptation on procedural driving scenes")]
struct Cli {
    /// Directory that relative `output_dir` values are resolved against.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV)]
    output_root: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the denoiser on the multi-domain corpus.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Transfer the source adaptation scenes to a target domain.
    Transfer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        domain: Domain,
        #[arg(long)]
        strength: Option<f64>,
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Train segmenters (one per seed, and per domain for adapted modes).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: TrainMode,
        /// Transfer variant whose datasets to train on.
        #[arg(long, default_value = "zodi")]
        variant: Variant,
        /// Target domains; all targets when omitted.
        #[arg(long = "domain")]
        domains: Vec<Domain>,
        #[arg(long)]
        label: Option<String>,
    },
    /// Score a segmenter checkpoint on held-out target renders.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "domain")]
        domains: Vec<Domain>,
    },
    /// Compare finished training runs.
    Report {
        /// Training directories or their metrics files.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write the table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &Path, root: Option<&Path>) -> Result<(RunConfig, PathBuf)> {
    let cfg = RunConfig::load(path)?;
    let run = cfg.output_path(root);
    Ok((cfg, run))
}

fn targets(domains: Vec<Domain>) -> Vec<Domain> {
    if domains.is_empty() {
        Domain::TARGETS.to_vec()
    } else {
        domains
    }
}

fn run(cli: Cli) -> Result<()> {
    let root = cli.output_root.as_deref();
    match cli.command {
        Command::Pretrain { config } => {
            let (cfg, run) = load_config(&config, root)?;
            let out = run_pretrain(&cfg, &run)?;
            let first = out.history.first().copied().unwrap_or(f64::NAN);
            let last = out.history.last().copied().unwrap_or(f64::NAN);
            println!("checkpoint {}", out.checkpoint.display());
            println!("sha256 {}", out.checksum);
            println!("loss {first:.4} -> {last:.4}");
        }
        Command::Transfer {
            config,
            domain,
            strength,
            variant,
        } => {
            let (cfg, run) = load_config(&config, root)?;
            let out = run_transfer(&cfg, &run, domain, strength, variant)?;
            println!(
                "{} pairs ({} strength {} variant {}) -> {}",
                out.manifest.count,
                domain,
                out.manifest.config.strength,
                out.manifest.config.variant,
                out.dir.display()
            );
        }
        Command::Train {
            config,
            mode,
            variant,
            domains,
            label,
        } => {
            let (cfg, run) = load_config(&config, root)?;
            let m = run_train(&cfg, &run, mode, variant, &targets(domains), label.as_deref())?;
            for (d, s) in &m.domains {
                println!("{d:<6} mIoU {:.4} ± {:.4}", s.mean, s.std);
            }
        }
        Command::Evaluate {
            config,
            checkpoint,
            domains,
        } => {
            let (cfg, _) = load_config(&config, root)?;
            for (d, v) in run_evaluate(&cfg, &checkpoint, &targets(domains))? {
                println!("{d:<6} mIoU {v:.4}");
            }
        }
        Command::Report { runs, out } => {
            let metrics = runs
                .iter()
                .map(|p| RunMetrics::load(p))
                .collect::<zsda_core::Result<Vec<_>>>()?;
            let table = render_report(&metrics)?;
            if let Some(path) = out {
                std::fs::write(&path, &table).map_err(|e| anyhow!("writing {}: {e}", path.display()))?;
            }
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Core errors already embed their causes in the message.
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
