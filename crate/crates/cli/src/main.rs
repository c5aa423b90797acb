use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use predictive_exit::dataset::SyntheticSpec;
use predictive_exit::harness::{fine_grained_positions, ExperimentConfig, PredictorParams, StrategyConfig};
use predictive_exit::pipeline::{self, Outcome};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "pexit", version, about = "Predictive early-exit experiments at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Caps the worker thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    l0: Option<usize>,
    #[arg(long, global = true)]
    tau: Option<usize>,
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long = "period-ms", global = true)]
    period_ms: Option<f64>,
    #[arg(long = "dvfs-table", global = true)]
    dvfs_table: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print the JSON report instead of the summary.
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset.
    GenData {
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        validation: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
    },
    /// Train the backbone.
    Train,
    /// Train the exit heads on a frozen backbone.
    TrainExits,
    /// Set each head's mean output on the training split.
    Calibrate,
    /// Run a strategy live on the test split and record its traces.
    Run {
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
    },
    /// Replay recorded traces under a strategy.
    Replay {
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        /// Trace file; defaults to the one `run` records.
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// Replay the predictive strategy over a range of L0.
    SweepL0 {
        #[arg(long, default_value_t = 1)]
        from: usize,
        /// Defaults to the last exit position.
        #[arg(long)]
        to: Option<usize>,
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// Tabulate ops and energy for every strategy.
    EnergyReport {
        #[arg(long)]
        traces: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StrategyArg {
    Classic,
    Hierarchical,
    FineGrained,
    Placement,
    Predictive,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    if let Some(n) = cli.common.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let json = cli.common.json;
    match cli.command {
        Command::GenData {
            train,
            validation,
            test,
        } => {
            let (out, seed) = gen_data_target(&cli.common)?;
            let defaults = SyntheticSpec::default();
            let spec = SyntheticSpec {
                train: train.unwrap_or(defaults.train),
                validation: validation.unwrap_or(defaults.validation),
                test: test.unwrap_or(defaults.test),
                ..defaults
            };
            report(pipeline::gen_data(&out, seed, &spec)?, json)
        }
        Command::Train => report(pipeline::train::<f32>(&config(&cli.common, None)?)?, json),
        Command::TrainExits => report(pipeline::train_exits::<f32>(&config(&cli.common, None)?)?, json),
        Command::Calibrate => report(pipeline::calibrate::<f32>(&config(&cli.common, None)?)?, json),
        Command::Run { strategy } => report(pipeline::run::<f32>(&config(&cli.common, strategy)?)?, json),
        Command::Replay { strategy, traces } => {
            let mut cfg = config(&cli.common, strategy)?;
            if traces.is_some() {
                cfg.traces = traces;
            }
            report(pipeline::replay_run::<f32>(&cfg)?, json)
        }
        Command::SweepL0 { from, to, traces } => {
            let mut cfg = config(&cli.common, None)?;
            if traces.is_some() {
                cfg.traces = traces;
            }
            let to = match to {
                Some(t) => t,
                None => {
                    predictive_exit::backbone::load_model::<f32>(&cfg.model)
                        .context("reading the backbone to find the last exit position")?
                        .0
                        .l_total()
                        - 1
                }
            };
            if from > to {
                bail!("empty L0 range {from}..={to}");
            }
            report(pipeline::sweep_l0::<f32>(&cfg, from..=to)?, json)
        }
        Command::EnergyReport { traces } => {
            let mut cfg = config(&cli.common, None)?;
            if traces.is_some() {
                cfg.traces = traces;
            }
            report(pipeline::energy_report::<f32>(&cfg)?, json)
        }
    }
}

fn report<R: Serialize>(outcome: Outcome<R>, json: bool) -> Result<()> {
    if json {
        println!("{}", serde_json::to_string_pretty(&outcome.report)?);
    } else {
        print!("{}", outcome.summary);
        println!("report: {}", outcome.report_path.display());
    }
    Ok(())
}

/// `gen-data` works without a config: `--out` and `--seed` suffice.
fn gen_data_target(common: &Common) -> Result<(PathBuf, u64)> {
    let cfg = match &common.config {
        Some(p) => Some(ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let out = match (&common.out, cfg.as_ref().and_then(|c| c.dataset.clone())) {
        (Some(out), _) => out.clone(),
        (None, Some(d)) => d,
        (None, None) => bail!("gen-data needs --out or a config with a dataset directory"),
    };
    let seed = common.seed.or(cfg.map(|c| c.seed)).unwrap_or(0);
    Ok((out, seed))
}

fn config(common: &Common, strategy: Option<StrategyArg>) -> Result<ExperimentConfig> {
    let path = common.config.as_deref().context("this command needs --config")?;
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    apply_overrides(&mut cfg, common, strategy, path)?;
    cfg.validate()?;
    Ok(cfg)
}

fn apply_overrides(
    cfg: &mut ExperimentConfig,
    common: &Common,
    strategy: Option<StrategyArg>,
    path: &Path,
) -> Result<()> {
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(b) = common.beta {
        cfg.beta = b;
    }
    if let Some(p) = common.period_ms {
        cfg.period_ms = p;
    }
    if let Some(t) = &common.dvfs_table {
        cfg.dvfs_table = Some(t.clone());
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    if common.l0.is_some() || common.tau.is_some() || common.k.is_some() {
        let p = cfg.predictor.get_or_insert(PredictorParams {
            l0: 1,
            tau: None,
            k: 3,
            filter: None,
            normalize_steps: false,
        });
        if let Some(l0) = common.l0 {
            p.l0 = l0;
        }
        if common.tau.is_some() {
            p.tau = common.tau;
        }
        if let Some(k) = common.k {
            p.k = k;
            p.filter = None;
        }
    }
    if let Some(s) = strategy {
        cfg.strategy = match s {
            StrategyArg::Classic => StrategyConfig::Classic,
            StrategyArg::Hierarchical => StrategyConfig::Hierarchical { positions: None },
            StrategyArg::FineGrained => {
                let (net, _) = predictive_exit::backbone::load_model::<f32>(&cfg.model)
                    .with_context(|| format!("reading the backbone named in {}", path.display()))?;
                StrategyConfig::Hierarchical {
                    positions: Some(fine_grained_positions(net.l_total())),
                }
            }
            StrategyArg::Placement => StrategyConfig::Placement {
                positions: None,
                max_exits: 3,
                accuracy_budget: 0.02,
            },
            StrategyArg::Predictive => StrategyConfig::Predictive,
        };
    }
    Ok(())
}
