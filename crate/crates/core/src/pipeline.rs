//! File-level commands: each reads artifacts named by an [`ExperimentConfig`],
//! writes its outputs and a JSON report under `output_dir`, and returns the
//! report together with a short human-readable summary.

use std::fmt::Write as _;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{load_model, reference_network, save_model, NetworkSpec, WeightStore};
use crate::dataset::{self, generate, load_split, save_dataset, DatasetManifest, LabeledDataset, Split, SyntheticSpec};
use crate::energy::{AnalyticPowerModel, DvfsLevel, DvfsTable};
use crate::error::{Error, Result};
use crate::exit_head::{load_heads, save_heads, HeadSet};
use crate::harness::trace::{load_traces, save_traces};
use crate::harness::{
    default_hierarchical_positions, expected_exit, fine_grained_positions, record_traces, replay, run_live,
    search_placement, EnergyContext, ExpectedExit, ExperimentConfig, PlacementResult, PredictorParams, RunContext,
    RunMetrics, RunResult, SampleResult, Strategy, StrategyConfig, TraceRecord,
};
use crate::scalar::Scalar;
use crate::trainer::{classifier_accuracy, head_accuracies, train_backbone, train_exit_heads};

pub const TEST_TRACES: &str = "test_traces.ndjson";
pub const VALIDATION_TRACES: &str = "validation_traces.ndjson";

/// Seeds for the independent random streams, all derived from one seed.
fn stream(seed: u64, k: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require(path: &Path, what: &str, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} not found at {}; {hint}", path.display())))
    }
}

fn dataset_dir(cfg: &ExperimentConfig) -> Result<&Path> {
    let dir = cfg
        .dataset
        .as_deref()
        .ok_or_else(|| Error::Config("the config names no dataset directory".into()))?;
    require(&dir.join(dataset::MANIFEST_FILE), "dataset", "run `gen-data` first")?;
    Ok(dir)
}

fn load_data<T: Scalar>(cfg: &ExperimentConfig, split: Split) -> Result<LabeledDataset<T>> {
    load_split(dataset_dir(cfg)?, split)
}

/// Output of every command: the machine-readable report and a summary.
#[derive(Clone, Debug)]
pub struct Outcome<R> {
    pub report: R,
    pub report_path: PathBuf,
    pub summary: String,
}

impl<R> Outcome<R> {
    fn new(report: R, report_path: PathBuf, summary: String) -> Self {
        Self {
            report,
            report_path,
            summary,
        }
    }
}

pub fn gen_data(out: &Path, seed: u64, spec: &SyntheticSpec) -> Result<Outcome<DatasetManifest>> {
    let splits = generate::<f32>(spec, seed)?;
    let manifest = save_dataset(out, &splits, Some(seed))?;
    let mut summary = format!("dataset written to {} (seed {seed})\n", out.display());
    for e in &manifest.splits {
        let _ = writeln!(
            summary,
            "  {:<10} {:>6} samples  sha256 {}",
            e.split.name(),
            e.count,
            &e.inputs_sha256[..16]
        );
    }
    Ok(Outcome::new(manifest, out.join(dataset::MANIFEST_FILE), summary))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub seed: u64,
    pub steps: usize,
    pub initial_probe_loss: f64,
    pub final_probe_loss: f64,
    pub validation_accuracy: f64,
    pub test_accuracy: f64,
    pub parameters: usize,
    pub fingerprint: String,
}

/// Trains the reference backbone on the training split.
pub fn train<T: Scalar>(cfg: &ExperimentConfig) -> Result<Outcome<TrainMetrics>> {
    let data = load_data::<T>(cfg, Split::Train)?;
    let net = reference_network();
    let mut rng = ChaCha8Rng::seed_from_u64(stream(cfg.seed, 1));
    let mut weights = WeightStore::<T>::init(&net, &mut rng);
    let report = train_backbone(&net, &mut weights, &data, &cfg.training.backbone(stream(cfg.seed, 2)))?;
    save_model(&cfg.model, &net, &weights)?;
    let metrics = TrainMetrics {
        seed: cfg.seed,
        steps: report.steps,
        initial_probe_loss: report.initial_probe_loss,
        final_probe_loss: report.final_probe_loss,
        validation_accuracy: classifier_accuracy(&net, &weights, &load_data(cfg, Split::Validation)?)?,
        test_accuracy: classifier_accuracy(&net, &weights, &load_data(cfg, Split::Test)?)?,
        parameters: weights.num_params(),
        fingerprint: weights.fingerprint(),
    };
    let path = cfg.output_dir.join("train_metrics.json");
    write_json(&path, &metrics)?;
    let summary = format!(
        "backbone: {} steps, probe loss {:.4} -> {:.4}, validation accuracy {:.2}%, test accuracy {:.2}%\nmodel written to {}\n",
        metrics.steps,
        metrics.initial_probe_loss,
        metrics.final_probe_loss,
        100.0 * metrics.validation_accuracy,
        100.0 * metrics.test_accuracy,
        cfg.model.display()
    );
    Ok(Outcome::new(metrics, path, summary))
}

fn load_backbone<T: Scalar>(cfg: &ExperimentConfig) -> Result<(NetworkSpec, WeightStore<T>)> {
    require(&cfg.model, "trained backbone", "run `train` first")?;
    load_model(&cfg.model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadMetrics {
    pub seed: u64,
    pub steps: usize,
    pub initial_probe_loss: Vec<f64>,
    pub final_probe_loss: Vec<f64>,
    /// Per head position, test-split accuracy of the head's argmax.
    pub test_accuracy: Vec<f64>,
    pub backbone_fingerprint: String,
}

/// Trains one exit head per exit position with the backbone frozen.
pub fn train_exits<T: Scalar>(cfg: &ExperimentConfig) -> Result<Outcome<HeadMetrics>> {
    let (net, weights) = load_backbone::<T>(cfg)?;
    let data = load_data::<T>(cfg, Split::Train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream(cfg.seed, 3));
    let mut heads = HeadSet::init(&net, cfg.training.head, &mut rng)?;
    let report = train_exit_heads(
        &net,
        &weights,
        &mut heads,
        &data,
        &cfg.training.heads(stream(cfg.seed, 4)),
    )?;
    save_heads(&cfg.heads, &heads)?;
    let test = load_data(cfg, Split::Test)?;
    let metrics = HeadMetrics {
        seed: cfg.seed,
        steps: report.steps,
        initial_probe_loss: report.initial_probe_loss,
        final_probe_loss: report.final_probe_loss,
        test_accuracy: head_accuracies(&net, &weights, &heads, &test)?,
        backbone_fingerprint: report.backbone_fingerprint,
    };
    let path = cfg.output_dir.join("train_exits_metrics.json");
    write_json(&path, &metrics)?;
    let mut summary = format!("exit heads: {} steps\n", metrics.steps);
    for (p, acc) in metrics.test_accuracy.iter().enumerate() {
        let _ = writeln!(
            summary,
            "  position {:>2}: probe loss {:.4} -> {:.4}, test accuracy {:.2}%",
            p + 1,
            metrics.initial_probe_loss[p],
            metrics.final_probe_loss[p],
            100.0 * acc
        );
    }
    let _ = writeln!(summary, "heads written to {} (uncalibrated)", cfg.heads.display());
    Ok(Outcome::new(metrics, path, summary))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub split: Split,
    pub samples: usize,
    /// Per exit position, then the classifier.
    pub mu: Vec<f64>,
}

/// Sets every head's `mu` from the training split.
pub fn calibrate<T: Scalar>(cfg: &ExperimentConfig) -> Result<Outcome<CalibrationReport>> {
    let (net, weights) = load_backbone::<T>(cfg)?;
    require(&cfg.heads, "exit heads", "run `train-exits` first")?;
    let mut heads = load_heads::<T>(&cfg.heads)?;
    let data = load_data::<T>(cfg, Split::Train)?;
    let mu = heads.calibrate(&net, &weights, &data.inputs)?;
    save_heads(&cfg.heads, &heads)?;
    let report = CalibrationReport {
        split: Split::Train,
        samples: data.len(),
        mu: mu.iter().map(|m| m.widen()).collect(),
    };
    let path = cfg.output_dir.join("calibration.json");
    write_json(&path, &report)?;
    let mut summary = format!("calibrated on {} training samples\n  mu:", report.samples);
    for m in &report.mu {
        let _ = write!(summary, " {m:.6}");
    }
    summary.push('\n');
    Ok(Outcome::new(report, path, summary))
}

struct Artifacts<T> {
    net: NetworkSpec,
    weights: WeightStore<T>,
    heads: HeadSet<T>,
}

fn load_artifacts<T: Scalar>(cfg: &ExperimentConfig) -> Result<Artifacts<T>> {
    let (net, weights) = load_backbone::<T>(cfg)?;
    require(&cfg.heads, "exit heads", "run `train-exits` first")?;
    let heads = load_heads::<T>(&cfg.heads)?;
    if !heads.is_calibrated() {
        return Err(Error::Config(format!(
            "heads at {} are not calibrated; run `calibrate` first",
            cfg.heads.display()
        )));
    }
    heads.validate(&net)?;
    Ok(Artifacts { net, weights, heads })
}

pub fn dvfs_table(cfg: &ExperimentConfig) -> Result<DvfsTable> {
    match &cfg.dvfs_table {
        Some(p) => DvfsTable::from_csv_path(p),
        None => Ok(DvfsTable::gv100()),
    }
}

pub fn energy_context(cfg: &ExperimentConfig, classic_ops: u64) -> Result<EnergyContext> {
    let mut ctx = EnergyContext::calibrated(dvfs_table(cfg)?, cfg.period_ms / 1000.0, classic_ops)?;
    ctx.switch_joules = cfg.switch_joules;
    Ok(ctx)
}

fn predictor_params(cfg: &ExperimentConfig) -> Result<&PredictorParams> {
    cfg.predictor
        .as_ref()
        .ok_or_else(|| Error::Config("the predictive strategy needs a `predictor` section".into()))
}

/// Builds the run context for `strategy`; placement searches on
/// `validation` when no positions are configured.
fn context<T: Scalar>(
    cfg: &ExperimentConfig,
    strategy: &StrategyConfig,
    base: RunContext<T>,
    validation: impl FnOnce() -> Result<Vec<TraceRecord<T>>>,
) -> Result<(RunContext<T>, Option<PlacementResult>)> {
    let l_total = base.l_total();
    let (strategy, placement) = match strategy {
        StrategyConfig::Classic => (Strategy::Classic, None),
        StrategyConfig::Hierarchical { positions } => (
            Strategy::Hierarchical(
                positions
                    .clone()
                    .unwrap_or_else(|| default_hierarchical_positions(l_total)),
            ),
            None,
        ),
        StrategyConfig::Placement { positions: Some(p), .. } => (Strategy::Placement(p.clone()), None),
        StrategyConfig::Placement {
            positions: None,
            max_exits,
            accuracy_budget,
        } => {
            let traces = validation()?;
            let found = search_placement(
                &traces,
                &base,
                &fine_grained_positions(l_total),
                *max_exits,
                *accuracy_budget,
            )?;
            (Strategy::Placement(found.positions.clone()), Some(found))
        }
        StrategyConfig::Predictive => (
            Strategy::Predictive(predictor_params(cfg)?.to_config(cfg.beta, l_total)?),
            None,
        ),
    };
    strategy.validate(l_total)?;
    Ok((RunContext { strategy, ..base }, placement))
}

fn base_context<T: Scalar>(
    cfg: &ExperimentConfig,
    num_classes: usize,
    mu: Vec<T>,
    head_ops: Vec<u64>,
    classic_ops: u64,
) -> Result<RunContext<T>> {
    RunContext::new(
        Strategy::Classic,
        T::narrow(cfg.beta),
        num_classes,
        mu,
        head_ops,
        energy_context(cfg, classic_ops)?,
    )
}

/// Validation traces from the output directory, recording them first if needed.
fn validation_traces<T: Scalar>(
    cfg: &ExperimentConfig,
    artifacts: Option<&Artifacts<T>>,
) -> Result<Vec<TraceRecord<T>>> {
    let path = cfg.output_dir.join(VALIDATION_TRACES);
    if path.exists() {
        return load_traces(&path);
    }
    let loaded;
    let a = match artifacts {
        Some(a) => a,
        None => {
            loaded = load_artifacts::<T>(cfg)?;
            &loaded
        }
    };
    let data = load_data::<T>(cfg, Split::Validation)?;
    let traces = record_traces(&a.net, &a.weights, &a.heads, &data.inputs, &data.labels)?;
    save_traces(&path, &traces)?;
    Ok(traces)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub strategy: String,
    /// `strategy`, or `fine-grained` for hierarchical on every position.
    pub label: String,
    /// `live` or `replay`.
    pub mode: String,
    pub beta: f64,
    pub l_total: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub positions: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predictor: Option<PredictorParams>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub placement: Option<PlacementResult>,
    pub period_ms: f64,
    pub metrics: RunMetrics,
    pub expected_exit: ExpectedExit,
}

impl RunReport {
    fn new<T: Scalar>(
        mode: &str,
        cfg: &ExperimentConfig,
        ctx: &RunContext<T>,
        placement: Option<PlacementResult>,
        run: &RunResult,
    ) -> Result<Self> {
        let positions = match &ctx.strategy {
            Strategy::Hierarchical(p) | Strategy::Placement(p) => Some(p.clone()),
            _ => None,
        };
        let predictor = match &ctx.strategy {
            Strategy::Predictive(_) => cfg.predictor.clone(),
            _ => None,
        };
        let label = match &ctx.strategy {
            Strategy::Hierarchical(p) if *p == fine_grained_positions(run.l_total) => "fine-grained".to_string(),
            _ => run.strategy.clone(),
        };
        Ok(Self {
            strategy: run.strategy.clone(),
            label,
            mode: mode.into(),
            beta: cfg.beta,
            l_total: run.l_total,
            positions,
            predictor,
            placement,
            period_ms: cfg.period_ms,
            metrics: run.metrics.clone(),
            expected_exit: expected_exit(run)?,
        })
    }

    pub fn summary(&self) -> String {
        let m = &self.metrics;
        let mut s = format!(
            "{} ({}), beta {}, {} samples\n",
            self.label, self.mode, self.beta, m.samples
        );
        if let Some(p) = &self.positions {
            let _ = writeln!(s, "  exit positions     {p:?}");
        }
        if let Some(p) = &self.predictor {
            let _ = writeln!(s, "  L0 {}  tau {:?}  K {}", p.l0, p.tau, p.k);
        }
        let _ = writeln!(s, "  accuracy           {:.2}%", 100.0 * m.accuracy);
        let _ = writeln!(s, "  normalized ops     {:.2}%", 100.0 * m.normalized_ops);
        let _ = writeln!(s, "  normalized energy  {:.2}%", 100.0 * m.normalized_energy);
        match m.prediction_accuracy {
            Some(a) => {
                let _ = writeln!(s, "  prediction acc.    {:.2}%", 100.0 * a);
            }
            None => {
                let _ = writeln!(s, "  prediction acc.    n/a");
            }
        }
        let _ = writeln!(s, "  expected exit L_e  {:.3}", m.expected_exit);
        let _ = writeln!(s, "  heads per sample   {:.3}", m.mean_heads_executed);
        if m.overrun_samples > 0 {
            let _ = writeln!(s, "  deadline overruns  {}", m.overrun_samples);
        }
        s
    }
}

fn write_run(cfg: &ExperimentConfig, report: RunReport, samples: &[SampleResult]) -> Result<Outcome<RunReport>> {
    let stem = format!("{}_{}", report.mode, report.label);
    let log = cfg.output_dir.join(format!("{stem}_samples.ndjson"));
    create_dir(&cfg.output_dir)?;
    let mut text = String::new();
    for s in samples {
        text.push_str(&serde_json::to_string(s)?);
        text.push('\n');
    }
    std::fs::write(&log, text).map_err(|e| Error::io(&log, e))?;
    let path = cfg.output_dir.join(format!("{stem}_report.json"));
    write_json(&path, &report)?;
    let summary = report.summary();
    Ok(Outcome::new(report, path, summary))
}

/// Runs the configured strategy live over the test split and records the
/// test traces alongside the report.
pub fn run<T: Scalar>(cfg: &ExperimentConfig) -> Result<Outcome<RunReport>> {
    let a = load_artifacts::<T>(cfg)?;
    let test = load_data::<T>(cfg, Split::Test)?;
    let base = base_context(
        cfg,
        a.heads.num_classes,
        a.heads.mu_by_position()?,
        a.heads.head_ops(&a.net)?,
        a.net.total_ops(),
    )?;
    let (ctx, placement) = context(cfg, &cfg.strategy, base, || validation_traces(cfg, Some(&a)))?;
    let result = run_live(&ctx, &a.net, &a.weights, &a.heads, &test.inputs, &test.labels)?;
    let traces = record_traces(&a.net, &a.weights, &a.heads, &test.inputs, &test.labels)?;
    save_traces(&cfg.output_dir.join(TEST_TRACES), &traces)?;
    info!("{} live run over {} samples", result.strategy, result.samples.len());
    let report = RunReport::new("live", cfg, &ctx, placement, &result)?;
    write_run(cfg, report, &result.samples)
}

fn traces_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.traces.clone().unwrap_or_else(|| cfg.output_dir.join(TEST_TRACES))
}

/// Loads traces and the per-position `mu` and head costs needed to replay them.
fn replay_inputs<T: Scalar>(cfg: &ExperimentConfig) -> Result<(Vec<TraceRecord<T>>, RunContext<T>)> {
    let path = traces_path(cfg);
    require(&path, "traces", "run `run` first or set `traces`")?;
    let traces = load_traces::<T>(&path)?;
    let (l_total, n_c) = crate::harness::trace::validate_traces(&traces)?;
    require(
        &cfg.heads,
        "exit heads",
        "replay needs the calibrated heads for mu and head costs",
    )?;
    let heads = load_heads::<T>(&cfg.heads)?;
    if heads.l_total() != l_total || heads.num_classes != n_c {
        return Err(Error::Config(format!(
            "trace has {l_total} positions and {n_c} classes, heads have {} and {}",
            heads.l_total(),
            heads.num_classes
        )));
    }
    let (net, _) = load_backbone::<T>(cfg)?;
    let head_ops = heads.head_ops(&net)?;
    let classic_ops = traces[0].cumulative_ops[l_total - 1];
    let base = base_context(cfg, n_c, heads.mu_by_position()?, head_ops, classic_ops)?;
    Ok((traces, base))
}

/// Replays recorded traces under the configured strategy.
pub fn replay_run<T: Scalar>(cfg: &ExperimentConfig) -> Result<Outcome<RunReport>> {
    let (traces, base) = replay_inputs::<T>(cfg)?;
    let (ctx, placement) = context(cfg, &cfg.strategy, base, || validation_traces(cfg, None))?;
    let result = replay(&ctx, &traces)?;
    let report = RunReport::new("replay", cfg, &ctx, placement, &result)?;
    write_run(cfg, report, &result.samples)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub l0: usize,
    pub prediction_accuracy: Option<f64>,
    pub normalized_ops: f64,
    pub normalized_energy: f64,
    pub accuracy: f64,
    pub expected_exit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub beta: f64,
    pub classic_accuracy: f64,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// Lowest-ops row whose accuracy is within `budget` of classic; ties go
    /// to the smaller `L0`.
    pub fn best(&self, budget: f64) -> Option<&SweepRow> {
        self.rows
            .iter()
            .filter(|r| r.accuracy + 1e-12 >= self.classic_accuracy - budget)
            .min_by(|a, b| a.normalized_ops.total_cmp(&b.normalized_ops).then(a.l0.cmp(&b.l0)))
    }
}

/// Replays the predictive strategy at each `L0` in `range` over `traces`.
pub fn sweep_traces<T: Scalar>(
    params: &PredictorParams,
    base: &RunContext<T>,
    traces: &[TraceRecord<T>],
    range: RangeInclusive<usize>,
) -> Result<SweepReport> {
    if range.is_empty() {
        return Err(Error::Config("empty L0 range".into()));
    }
    let l_total = base.l_total();
    let beta = base.beta.widen();
    let classic = replay(
        &RunContext {
            strategy: Strategy::Classic,
            ..base.clone()
        },
        traces,
    )?;
    let mut rows = Vec::new();
    for l0 in range {
        let p = PredictorParams { l0, ..params.clone() };
        let ctx = RunContext {
            strategy: Strategy::Predictive(p.to_config(beta, l_total)?),
            ..base.clone()
        };
        let m = replay(&ctx, traces)?.metrics;
        rows.push(SweepRow {
            l0,
            prediction_accuracy: m.prediction_accuracy,
            normalized_ops: m.normalized_ops,
            normalized_energy: m.normalized_energy,
            accuracy: m.accuracy,
            expected_exit: m.expected_exit,
        });
    }
    Ok(SweepReport {
        beta,
        classic_accuracy: classic.metrics.accuracy,
        rows,
    })
}

pub fn sweep_l0<T: Scalar>(cfg: &ExperimentConfig, range: RangeInclusive<usize>) -> Result<Outcome<SweepReport>> {
    let (traces, base) = replay_inputs::<T>(cfg)?;
    let defaults = PredictorParams {
        l0: 1,
        tau: None,
        k: 3,
        filter: None,
        normalize_steps: false,
    };
    let params = cfg.predictor.clone().unwrap_or(defaults);
    let mut report = sweep_traces(&params, &base, &traces, range)?;
    report.beta = cfg.beta;
    let path = cfg.output_dir.join("sweep_l0.json");
    write_json(&path, &report)?;
    let mut s = format!(
        "L0 sweep, beta {}, classic accuracy {:.2}%\n",
        report.beta,
        100.0 * report.classic_accuracy
    );
    let _ = writeln!(
        s,
        "  {:>3}  {:>10}  {:>8}  {:>8}  {:>8}  {:>6}",
        "L0", "pred.acc", "ops", "energy", "acc", "L_e"
    );
    for r in &report.rows {
        let pa = r
            .prediction_accuracy
            .map_or("n/a".to_string(), |a| format!("{:.2}%", 100.0 * a));
        let _ = writeln!(
            s,
            "  {:>3}  {:>10}  {:>7.2}%  {:>7.2}%  {:>7.2}%  {:>6.3}",
            r.l0,
            pa,
            100.0 * r.normalized_ops,
            100.0 * r.normalized_energy,
            100.0 * r.accuracy,
            r.expected_exit
        );
    }
    Ok(Outcome::new(report, path, s))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyRow {
    pub strategy: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub positions: Option<Vec<usize>>,
    pub accuracy: f64,
    pub normalized_ops: f64,
    pub normalized_energy: f64,
    pub joules_per_sample: f64,
    pub overrun_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReportDoc {
    pub beta: f64,
    pub period_ms: f64,
    pub classic_joules_per_sample: f64,
    pub levels: Vec<DvfsLevel>,
    /// Largest relative error of the fitted analytic power model on the table.
    pub analytic_fit_max_error: Option<f64>,
    pub rows: Vec<EnergyRow>,
}

/// Replays every strategy over the recorded traces and tabulates energy.
pub fn energy_report<T: Scalar>(cfg: &ExperimentConfig) -> Result<Outcome<EnergyReportDoc>> {
    let (traces, base) = replay_inputs::<T>(cfg)?;
    let mut strategies = vec![
        StrategyConfig::Classic,
        StrategyConfig::Hierarchical { positions: None },
        StrategyConfig::Hierarchical {
            positions: Some(fine_grained_positions(base.l_total())),
        },
    ];
    let placement = match &cfg.strategy {
        s @ StrategyConfig::Placement { .. } => s.clone(),
        _ => StrategyConfig::Placement {
            positions: None,
            max_exits: 3,
            accuracy_budget: 0.02,
        },
    };
    strategies.push(placement);
    if cfg.predictor.is_some() {
        strategies.push(StrategyConfig::Predictive);
    }
    let mut rows = Vec::new();
    for s in &strategies {
        let (ctx, _) = context(cfg, s, base.clone(), || validation_traces(cfg, None))?;
        let run = replay(&ctx, &traces)?;
        let positions = match &ctx.strategy {
            Strategy::Hierarchical(p) | Strategy::Placement(p) => Some(p.clone()),
            _ => None,
        };
        let name = match s {
            StrategyConfig::Hierarchical { positions: Some(_) } => "fine-grained".to_string(),
            _ => run.strategy.clone(),
        };
        let m = &run.metrics;
        rows.push(EnergyRow {
            strategy: name,
            positions,
            accuracy: m.accuracy,
            normalized_ops: m.normalized_ops,
            normalized_energy: m.normalized_energy,
            joules_per_sample: m.total_joules / m.samples as f64,
            overrun_samples: m.overrun_samples,
        });
    }
    let table = &base.energy.table;
    let fit = AnalyticPowerModel::fit(table).ok().map(|model| {
        table
            .levels()
            .iter()
            .map(|l| (model.power(l.frequency, true) - l.active_power).abs() / l.active_power)
            .fold(0.0, f64::max)
    });
    let doc = EnergyReportDoc {
        beta: cfg.beta,
        period_ms: cfg.period_ms,
        classic_joules_per_sample: base.energy.classic_joules(),
        levels: table.levels().to_vec(),
        analytic_fit_max_error: fit,
        rows,
    };
    let path = cfg.output_dir.join("energy_report.json");
    write_json(&path, &doc)?;
    let mut s = format!(
        "energy over {} samples, period {} ms, classic {:.4} J/sample\n",
        traces.len(),
        doc.period_ms,
        doc.classic_joules_per_sample
    );
    let _ = writeln!(
        s,
        "  {:<13} {:>8} {:>8} {:>8} {:>10}",
        "strategy", "acc", "ops", "energy", "J/sample"
    );
    for r in &doc.rows {
        let _ = writeln!(
            s,
            "  {:<13} {:>7.2}% {:>7.2}% {:>7.2}% {:>10.5}",
            r.strategy,
            100.0 * r.accuracy,
            100.0 * r.normalized_ops,
            100.0 * r.normalized_energy,
            r.joules_per_sample
        );
    }
    if let Some(e) = doc.analytic_fit_max_error {
        let _ = writeln!(s, "  analytic power fit: max error {:.2}%", 100.0 * e);
    }
    Ok(Outcome::new(doc, path, s))
}
