use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use mapfuse::bench::{cmd_eval, cmd_generate, cmd_report, cmd_train, EvalRequest, ReportFormat, RunConfig};
use mapfuse::corruption::{parse_kind_list, parse_severity_list};

#[derive(Parser)]
#[command(name = "mapfuse", version, about = "Camera-LiDAR map fusion and sensor-corruption robustness benchmark")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Md,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a run configuration with default values.
    Config {
        #[arg(long)]
        out: PathBuf,
        /// Start from the recipe without modality dropout or augmentation.
        #[arg(long)]
        baseline: bool,
    },
    /// Generate synthetic scenes and a manifest of their hashes.
    Generate {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model on a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Probability of dropping one modality at a step.
        #[arg(long)]
        p_md: Option<f64>,
        /// Probability that the kept modality is LiDAR.
        #[arg(long)]
        p_l: Option<f64>,
        #[arg(long, value_enum)]
        augment: Option<Switch>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Evaluate a checkpoint on clean and corrupted data.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `all` or comma-separated corruption names.
        #[arg(long)]
        corruptions: Option<String>,
        /// Comma-separated levels in 1..=3.
        #[arg(long)]
        severities: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Model name recorded in the results.
        #[arg(long)]
        name: Option<String>,
        /// Supplies defaults for the corruption selection, seed and name.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print resilience tables for evaluation results.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "md")]
        format: Format,
        /// Also write a bar chart here.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Config { out, baseline } => {
            let cfg = if baseline { RunConfig::baseline() } else { RunConfig::default() };
            cfg.save(&out)?;
            println!("wrote {} (config hash {})", out.display(), cfg.hash());
        }
        Cmd::Generate { seed, count, out, config } => {
            let cfg = load_config(config.as_ref())?;
            let m = cmd_generate(seed, count, &out, &cfg)?;
            println!("wrote {} scenes to {}", m.scenes.len(), out.display());
        }
        Cmd::Train {
            data,
            config,
            out,
            p_md,
            p_l,
            augment,
            steps,
            seed,
            lr,
        } => {
            let mut cfg = load_config(config.as_ref())?;
            if let Some(p) = p_md {
                cfg.dropout.p_md = p;
            }
            if let Some(p) = p_l {
                cfg.dropout.p_l = p;
            }
            if let Some(a) = augment {
                cfg.augment.enabled = matches!(a, Switch::On);
            }
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(lr) = lr {
                cfg.train.optimizer.lr = lr;
            }
            let s = cmd_train(&data, &cfg, &out)?;
            let [both, lidar, camera] = s.mask_counts;
            println!(
                "wrote {} and {}; final loss {:.4}; masks both {both} lidar-only {lidar} camera-only {camera}",
                s.checkpoint.display(),
                s.log.display(),
                s.final_loss
            );
        }
        Cmd::Eval {
            ckpt,
            data,
            corruptions,
            severities,
            seed,
            out,
            name,
            config,
        } => {
            let cfg = config.as_ref().map(|p| load_config(Some(p))).transpose()?;
            let corruptions = match (corruptions, &cfg) {
                (Some(s), _) => parse_kind_list(&s)?,
                (None, Some(c)) => c.corruptions.clone(),
                (None, None) => parse_kind_list("all")?,
            };
            let severities = match (severities, &cfg) {
                (Some(s), _) => parse_severity_list(&s)?,
                (None, Some(c)) => c.severities.clone(),
                (None, None) => vec![1, 2, 3],
            };
            let req = EvalRequest {
                checkpoint: ckpt,
                data,
                corruptions,
                severities,
                seed: seed.or(cfg.as_ref().map(|c| c.eval_seed)).unwrap_or(0),
                name: name.or(cfg.map(|c| c.name)).unwrap_or_else(|| "mapfuse".into()),
            };
            let r = cmd_eval(&req, Some(&out))?;
            println!(
                "wrote {}: {} cells, clean mAP {:.2}, mRS {:.2}",
                out.display(),
                r.rows().len(),
                100.0 * r.report.grid.acc_clean,
                100.0 * r.report.m_rs
            );
        }
        Cmd::Report {
            input,
            baseline,
            format,
            svg,
        } => {
            let format = match format {
                Format::Csv => ReportFormat::Csv,
                Format::Md => ReportFormat::Md,
            };
            print!("{}", cmd_report(&input, baseline.as_deref(), format, svg.as_deref())?);
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
