//! Command-line front end for the planted-MDP Q-learning lab.
//!
//! Exit codes: 0 success, 1 verification or run failure, 2 usage error,
//! 3 training divergence.

mod artifacts;
mod commands;
mod config;
mod jsonio;

use clap::{Args, Parser, Subcommand};
use config::ExperimentConfig;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "dqlab", version, about = "Planted-MDP laboratory for deep Q-learning dynamics")]
struct Cli {
    /// Worker threads for independent runs (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// JSON configuration file; flags override individual keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

/// Per-key overrides, named after the configuration paths.
#[derive(Args, Clone, Default)]
struct Overrides {
    #[arg(long, global = true)]
    instance_state_feature_dim: Option<usize>,
    #[arg(long, global = true)]
    instance_num_states: Option<usize>,
    #[arg(long, global = true)]
    instance_num_actions: Option<usize>,
    #[arg(long, global = true)]
    instance_width: Option<usize>,
    #[arg(long, global = true)]
    instance_depth: Option<usize>,
    #[arg(long, global = true)]
    instance_gamma: Option<f64>,
    #[arg(long, global = true)]
    instance_deterministic: Option<bool>,
    #[arg(long, global = true)]
    instance_plant_seed: Option<u64>,

    #[arg(long, global = true)]
    train_outer: Option<usize>,
    #[arg(long, global = true)]
    train_inner: Option<usize>,
    #[arg(long, global = true)]
    train_eta: Option<f64>,
    #[arg(long, global = true)]
    train_beta: Option<f64>,
    #[arg(long, global = true)]
    train_buffer_size: Option<usize>,
    #[arg(long, global = true)]
    train_batch: Option<usize>,
    #[arg(long, global = true)]
    train_burn_in: Option<usize>,
    #[arg(long, global = true, value_parser = ["dqn", "ddqn"])]
    train_target_rule: Option<String>,
    #[arg(long, global = true, value_parser = ["iid", "sequential"])]
    train_sampling_mode: Option<String>,
    #[arg(long, global = true)]
    train_delta: Option<f64>,
    #[arg(long, global = true)]
    train_seed: Option<u64>,
    #[arg(long, global = true)]
    train_diagnostics: Option<bool>,

    #[arg(long, global = true, value_parser = ["fixed", "geometric", "theoretical-oracle", "theoretical-estimated"])]
    schedule_kind: Option<String>,
    #[arg(long, global = true)]
    schedule_eps0: Option<f64>,
    #[arg(long, global = true)]
    schedule_decay: Option<f64>,
    #[arg(long, global = true)]
    schedule_c_eps: Option<f64>,
    #[arg(long, global = true)]
    schedule_kappa: Option<f64>,
    #[arg(long, global = true)]
    schedule_c_max: Option<f64>,
    #[arg(long, global = true)]
    schedule_eps_min: Option<f64>,
    #[arg(long, global = true)]
    schedule_eps_max: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Plant an instance and write instance.json and wstar.json.
    Gen {
        /// Output directory.
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Train against planted instance files and write metrics.csv.
    Train {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long)]
        wstar: PathBuf,
        #[arg(long, default_value = "metrics.csv")]
        out: PathBuf,
    },
    /// Fan out runs over the configured axes and write aggregate.json.
    Sweep {
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Numerical verification of an instance; exit 1 on any failing check.
    Verify {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long)]
        wstar: PathBuf,
        #[arg(long, default_value = "verify.json")]
        out: PathBuf,
    },
    /// Fit decay rates and exponents from a metrics table.
    Analyze {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long, default_value = "analyze.json")]
        out: PathBuf,
    },
}

fn apply_overrides(cfg: &mut ExperimentConfig, o: &Overrides) {
    use dqlab_core::schedule::ScheduleKind;
    use dqlab_core::trainer::{InitMode, SamplingModeConfig, TargetRule};

    macro_rules! set {
        ($field:expr, $opt:expr) => {
            if let Some(v) = $opt {
                $field = v;
            }
        };
    }
    set!(cfg.instance.state_feature_dim, o.instance_state_feature_dim);
    set!(cfg.instance.num_states, o.instance_num_states);
    set!(cfg.instance.num_actions, o.instance_num_actions);
    set!(cfg.instance.width, o.instance_width);
    set!(cfg.instance.depth, o.instance_depth);
    set!(cfg.instance.gamma, o.instance_gamma);
    set!(cfg.instance.deterministic, o.instance_deterministic);
    set!(cfg.instance.plant_seed, o.instance_plant_seed);

    set!(cfg.train.outer, o.train_outer);
    set!(cfg.train.inner, o.train_inner);
    set!(cfg.train.eta, o.train_eta);
    set!(cfg.train.beta, o.train_beta);
    set!(cfg.train.buffer_size, o.train_buffer_size);
    set!(cfg.train.batch, o.train_batch);
    set!(cfg.train.burn_in, o.train_burn_in);
    set!(cfg.train.seed, o.train_seed);
    set!(cfg.train.diagnostics, o.train_diagnostics);
    if let Some(rule) = &o.train_target_rule {
        cfg.train.target_rule = if rule == "ddqn" { TargetRule::Ddqn } else { TargetRule::Dqn };
    }
    if let Some(mode) = &o.train_sampling_mode {
        cfg.train.sampling_mode = if mode == "sequential" {
            SamplingModeConfig::Sequential
        } else {
            SamplingModeConfig::Iid
        };
    }
    if let Some(delta) = o.train_delta {
        cfg.train.init = match cfg.train.init {
            InitMode::PlantedConditioned { cutoff, .. } => {
                InitMode::PlantedConditioned { delta, cutoff }
            }
            _ => InitMode::Planted { delta },
        };
    }

    if let Some(kind) = &o.schedule_kind {
        cfg.train.schedule.kind = match kind.as_str() {
            "fixed" => ScheduleKind::Fixed,
            "theoretical-oracle" => ScheduleKind::TheoreticalOracle,
            "theoretical-estimated" => ScheduleKind::TheoreticalEstimated,
            _ => ScheduleKind::Geometric,
        };
    }
    set!(cfg.train.schedule.eps0, o.schedule_eps0);
    set!(cfg.train.schedule.decay, o.schedule_decay);
    set!(cfg.train.schedule.c_eps, o.schedule_c_eps);
    set!(cfg.train.schedule.eps_min, o.schedule_eps_min);
    set!(cfg.train.schedule.eps_max, o.schedule_eps_max);
    if o.schedule_kappa.is_some() {
        cfg.train.schedule.kappa = o.schedule_kappa;
    }
    if o.schedule_c_max.is_some() {
        cfg.train.schedule.c_max = o.schedule_c_max;
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<u8> {
    let mut cfg = ExperimentConfig::load(cli.config.as_deref())?;
    apply_overrides(&mut cfg, &cli.overrides);
    if let Some(jobs) = cli.jobs.or(cfg.jobs) {
        configure_pool(jobs);
    }

    match cli.command {
        Command::Gen { out_dir } => {
            commands::gen::run(&cfg, &out_dir)?;
            Ok(0)
        }
        Command::Train { instance, wstar, out } => {
            let spec = artifacts::read_instance(&instance)?;
            let weights = artifacts::read_wstar(&wstar)?;
            let code = commands::train::run(&cfg, &spec, &weights, &out)?;
            Ok(code as u8)
        }
        Command::Sweep { out_dir } => {
            let code = commands::sweep::run(&cfg, &out_dir)?;
            Ok(code as u8)
        }
        Command::Verify { instance, wstar, out } => {
            let spec = artifacts::read_instance(&instance)?;
            let weights = artifacts::read_wstar(&wstar)?;
            let hash = jsonio::config_hash(&cfg.canonical_json());
            let code = commands::verify::run(&spec, &weights, &hash, &out)?;
            Ok(code as u8)
        }
        Command::Analyze { metrics, out } => {
            let hash = jsonio::config_hash(&cfg.canonical_json());
            commands::analyze::run(&metrics, &hash, &out)?;
            Ok(0)
        }
    }
}

#[cfg(feature = "parallel")]
fn configure_pool(jobs: usize) {
    let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
}

#[cfg(not(feature = "parallel"))]
fn configure_pool(_jobs: usize) {}
