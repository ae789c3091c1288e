mod commands;
mod config;
mod error;
mod setup;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Manifest;
use crate::config::Config;
use crate::error::{CliError, Result};

/// Functional hidden dynamic geostatistical models: simulation,
/// estimation, inference, kriging and validation.
#[derive(Debug, Parser)]
#[command(name = "fhdgm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    common: Common,
}

/// Options shared by every subcommand. Each one overrides a config key.
#[derive(Debug, Args)]
struct Common {
    /// Flat `section.key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Input CSV (`data.path`).
    #[arg(long, global = true)]
    data: Option<String>,
    /// Coordinate unit: deg, km or m (`data.unit`).
    #[arg(long, global = true)]
    unit: Option<String>,
    /// Functional domain as `lo,hi` (`data.domain`).
    #[arg(long, global = true)]
    domain: Option<String>,
    /// Output directory (`run.out`).
    #[arg(long, global = true)]
    out: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; falls back to FHDGM_WORKERS (`run.workers`).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Any other setting, as `key=value`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Args)]
struct PartitionArgs {
    /// Number of partitions (`partition.k`).
    #[arg(long)]
    k: Option<usize>,
    /// Size-balance penalty, required when k > 1 (`partition.lambda`).
    #[arg(long)]
    lambda: Option<f64>,
    /// Randomized restarts (`partition.trials`).
    #[arg(long)]
    trials: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a synthetic dataset from the `simulate.*` settings.
    Simulate {
        #[arg(long)]
        n_sites: Option<usize>,
        #[arg(long)]
        t_len: Option<usize>,
    },
    /// Balanced k-means partition of the sites.
    Partition {
        #[command(flatten)]
        part: PartitionArgs,
    },
    /// EM estimation, optionally with the parameter covariance.
    Fit {
        #[command(flatten)]
        part: PartitionArgs,
        /// Compute varcov.csv, chi2.csv and beta_bands.csv (`varcov.enabled`).
        #[arg(long)]
        varcov: bool,
        /// Truncation tolerance (`varcov.delta`).
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        max_iter: Option<usize>,
    },
    /// Fit without the listed sites and score kriging predictions at them.
    Validate {
        #[command(flatten)]
        part: PartitionArgs,
        /// Comma-separated site indices held out (`validate.val_sites`).
        #[arg(long)]
        val_sites: Option<String>,
        /// Number of equal bins over the domain (`validate.bins`).
        #[arg(long)]
        bins: Option<usize>,
        #[arg(long)]
        nn_size: Option<usize>,
    },
    /// Kriging on a grid or a list of targets.
    Krige {
        /// `lat0:lat1:step,lon0:lon1:step` (`krige.grid`).
        #[arg(long)]
        grid: Option<String>,
        /// CSV with coord_y, coord_x columns (`krige.targets`).
        #[arg(long)]
        targets: Option<String>,
        /// Comma-separated h values (`krige.h`).
        #[arg(long)]
        h: Option<String>,
        /// Comma-separated time indices (`krige.t`).
        #[arg(long)]
        t: Option<String>,
        #[arg(long)]
        nn_size: Option<usize>,
        #[arg(long)]
        block_size: Option<usize>,
        /// Skip the prediction variance (`krige.no_varcov`).
        #[arg(long)]
        no_varcov: bool,
        /// Long-format covariates at the targets (`krige.covariates`).
        #[arg(long)]
        covariates: Option<String>,
        /// Parameter table; defaults to params.csv in the output directory.
        #[arg(long)]
        params: Option<String>,
    },
    /// Print the estimates, standard errors and tests of a fit.
    Report,
}

fn set_opt<T: ToString>(cfg: &mut Config, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        cfg.set(key, v.to_string());
    }
}

fn set_partition(cfg: &mut Config, p: &PartitionArgs) {
    set_opt(cfg, "partition.k", &p.k);
    set_opt(cfg, "partition.lambda", &p.lambda);
    set_opt(cfg, "partition.trials", &p.trials);
}

/// Config file first, then `--set`, then dedicated flags.
fn effective_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for kv in &cli.common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim());
    }
    let c = &cli.common;
    set_opt(&mut cfg, "data.path", &c.data);
    set_opt(&mut cfg, "data.unit", &c.unit);
    set_opt(&mut cfg, "data.domain", &c.domain);
    set_opt(&mut cfg, "run.out", &c.out);
    set_opt(&mut cfg, "run.seed", &c.seed);
    set_opt(&mut cfg, "run.workers", &c.workers);
    match &cli.command {
        Command::Simulate { n_sites, t_len } => {
            set_opt(&mut cfg, "simulate.n_sites", n_sites);
            set_opt(&mut cfg, "simulate.t_len", t_len);
        }
        Command::Partition { part } => set_partition(&mut cfg, part),
        Command::Fit {
            part,
            varcov,
            delta,
            max_iter,
        } => {
            set_partition(&mut cfg, part);
            if *varcov {
                cfg.set("varcov.enabled", "true");
            }
            set_opt(&mut cfg, "varcov.delta", delta);
            set_opt(&mut cfg, "em.max_iterations", max_iter);
        }
        Command::Validate {
            part,
            val_sites,
            bins,
            nn_size,
        } => {
            set_partition(&mut cfg, part);
            set_opt(&mut cfg, "validate.val_sites", val_sites);
            set_opt(&mut cfg, "validate.bins", bins);
            set_opt(&mut cfg, "validate.nn_size", nn_size);
        }
        Command::Krige {
            grid,
            targets,
            h,
            t,
            nn_size,
            block_size,
            no_varcov,
            covariates,
            params,
        } => {
            set_opt(&mut cfg, "krige.grid", grid);
            set_opt(&mut cfg, "krige.targets", targets);
            set_opt(&mut cfg, "krige.h", h);
            set_opt(&mut cfg, "krige.t", t);
            set_opt(&mut cfg, "krige.nn_size", nn_size);
            set_opt(&mut cfg, "krige.block_size", block_size);
            if *no_varcov {
                cfg.set("krige.no_varcov", "true");
            }
            set_opt(&mut cfg, "krige.covariates", covariates);
            set_opt(&mut cfg, "krige.params", params);
        }
        Command::Report => {}
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = effective_config(cli)?;
    let name = match cli.command {
        Command::Simulate { .. } => "simulate",
        Command::Partition { .. } => "partition",
        Command::Fit { .. } => "fit",
        Command::Validate { .. } => "validate",
        Command::Krige { .. } => "krige",
        Command::Report => return commands::report_cmd(&cfg),
    };
    let mut manifest = Manifest::new(name);
    match cli.command {
        Command::Simulate { .. } => commands::simulate_cmd(&cfg, &mut manifest)?,
        Command::Partition { .. } => commands::partition_cmd(&cfg, &mut manifest)?,
        Command::Fit { .. } => commands::fit_cmd(&cfg, &mut manifest)?,
        Command::Validate { .. } => commands::validate_cmd(&cfg, &mut manifest)?,
        Command::Krige { .. } => commands::krige_cmd(&cfg, &mut manifest)?,
        Command::Report => unreachable!(),
    }
    manifest.write(&setup::out_dir(&cfg)?, &cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!(
                "error: {}",
                msg.lines()
                    .next()
                    .unwrap_or("invalid arguments")
                    .trim_start_matches("error: ")
            );
            return ExitCode::from(1);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
