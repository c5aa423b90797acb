//! Exit strategies over live models or recorded traces, with op and energy
//! accounting.

mod analysis;
mod config;
mod placement;
pub mod trace;

pub use analysis::{expected_exit, export_exit_scatter, write_scatter_csv, ExpectedExit, ScatterMetric, ScatterRow};
pub use config::{ExperimentConfig, PredictorParams, StrategyConfig, TrainingParams};
pub use placement::{search_placement, PlacementResult};
pub use trace::TraceRecord;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Forward, NetworkSpec, WeightStore};
use crate::energy::{self, DvfsLevel, DvfsTable, EnergyReport, Tail};
use crate::error::{Error, Result};
use crate::exit_head::{decide, exit_forward, HeadSet};
use crate::predictor::{predict, PredictorConfig};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum Strategy<T> {
    Classic,
    /// Checks the heads at these positions in order.
    Hierarchical(Vec<usize>),
    /// Same run-time rule as hierarchical, with searched positions.
    Placement(Vec<usize>),
    Predictive(PredictorConfig<T>),
}

impl<T: Scalar> Strategy<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Classic => "classic",
            Strategy::Hierarchical(_) => "hierarchical",
            Strategy::Placement(_) => "placement",
            Strategy::Predictive(_) => "predictive",
        }
    }

    pub fn validate(&self, l_total: usize) -> Result<()> {
        match self {
            Strategy::Classic => Ok(()),
            Strategy::Hierarchical(p) | Strategy::Placement(p) => validate_positions(p, l_total),
            Strategy::Predictive(cfg) => cfg.validate(l_total),
        }
    }
}

fn validate_positions(positions: &[usize], l_total: usize) -> Result<()> {
    if positions.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("strategy", "exit positions must be strictly increasing"));
    }
    if let Some(&p) = positions.iter().find(|&&p| p == 0 || p >= l_total) {
        return Err(Error::invalid(
            "strategy",
            format!("exit position {p} outside 1..{l_total}"),
        ));
    }
    Ok(())
}

/// Positions nearest a quarter, half and three quarters of the depth.
pub fn default_hierarchical_positions(l_total: usize) -> Vec<usize> {
    let mut out: Vec<usize> = [0.25, 0.5, 0.75]
        .iter()
        .map(|q| ((l_total as f64 * q).round() as usize).clamp(1, l_total.saturating_sub(1).max(1)))
        .filter(|&p| p < l_total)
        .collect();
    out.dedup();
    out
}

/// Every head position: the fine-grained always-check baseline.
pub fn fine_grained_positions(l_total: usize) -> Vec<usize> {
    (1..l_total).collect()
}

/// Timing and power context shared by every sample of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyContext {
    pub table: DvfsTable,
    /// Inference period `T` in seconds.
    pub period: f64,
    /// Ops per GHz-second.
    pub throughput: f64,
    pub switch_joules: f64,
}

impl EnergyContext {
    /// Calibrates throughput so `classic_ops` at the top level takes exactly `period`.
    pub fn calibrated(table: DvfsTable, period: f64, classic_ops: u64) -> Result<Self> {
        let throughput = energy::calibrate_throughput(classic_ops, table.highest().frequency, period)?;
        Ok(Self {
            table,
            period,
            throughput,
            switch_joules: 0.0,
        })
    }

    pub fn classic_joules(&self) -> f64 {
        self.period * self.table.highest().active_power
    }
}

/// One exit check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    pub position: usize,
    pub alpha: f64,
    /// `alpha > 1`, or the forced exit at the last position.
    pub exited: bool,
    pub forced: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub sample_id: u64,
    pub true_label: usize,
    pub exit_layer: usize,
    pub predicted_class: usize,
    pub correct: bool,
    pub ops_executed: u64,
    pub backbone_ops: u64,
    pub head_ops: u64,
    pub predictor_ops: u64,
    pub heads_executed: usize,
    /// Number of predictor calls.
    pub predictions_made: usize,
    /// Exited at the first predicted position.
    pub prediction_hit: bool,
    pub first_predicted: Option<usize>,
    pub visits: Vec<Visit>,
    /// Output at the first visited position, when logging is on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_output: Option<Vec<f64>>,
    pub energy: EnergyReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub samples: usize,
    pub accuracy: f64,
    /// Total ops over `samples * classic ops`.
    pub normalized_ops: f64,
    pub normalized_energy: f64,
    /// Hits over samples with at least one prediction; `None` if there were none.
    pub prediction_accuracy: Option<f64>,
    pub expected_exit: f64,
    /// Fraction of all samples whose `j`-th exit check failed.
    pub failure_rates: Vec<f64>,
    pub mean_heads_executed: f64,
    pub mean_predictions: f64,
    pub total_ops: u64,
    pub classic_ops: u64,
    pub total_joules: f64,
    pub classic_joules: f64,
    pub overrun_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub strategy: String,
    pub beta: f64,
    pub l_total: usize,
    pub samples: Vec<SampleResult>,
    pub metrics: RunMetrics,
}

impl RunResult {
    pub fn new(
        strategy: &str,
        beta: f64,
        l_total: usize,
        samples: Vec<SampleResult>,
        classic_ops: u64,
        classic_joules: f64,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("run", "no samples"));
        }
        let n = samples.len() as f64;
        let total_ops: u64 = samples.iter().map(|s| s.ops_executed).sum();
        let total_joules: f64 = samples.iter().map(|s| s.energy.total_joules).sum();
        let predicted: Vec<&SampleResult> = samples.iter().filter(|s| s.predictions_made > 0).collect();
        let max_checks = samples.iter().map(|s| s.visits.len()).max().unwrap_or(0);
        let failure_rates = (0..max_checks.saturating_sub(1))
            .map(|j| samples.iter().filter(|s| s.visits.len() > j + 1).count() as f64 / n)
            .collect();
        let metrics = RunMetrics {
            samples: samples.len(),
            accuracy: samples.iter().filter(|s| s.correct).count() as f64 / n,
            normalized_ops: total_ops as f64 / (n * classic_ops as f64),
            normalized_energy: total_joules / (n * classic_joules),
            prediction_accuracy: (!predicted.is_empty())
                .then(|| predicted.iter().filter(|s| s.prediction_hit).count() as f64 / predicted.len() as f64),
            expected_exit: samples.iter().map(|s| s.exit_layer as f64).sum::<f64>() / n,
            failure_rates,
            mean_heads_executed: samples.iter().map(|s| s.heads_executed as f64).sum::<f64>() / n,
            mean_predictions: samples.iter().map(|s| s.predictions_made as f64).sum::<f64>() / n,
            total_ops,
            classic_ops,
            total_joules,
            classic_joules,
            overrun_samples: samples.iter().filter(|s| s.energy.overrun > 0.0).count(),
        };
        Ok(Self {
            strategy: strategy.to_string(),
            beta,
            l_total,
            samples,
            metrics,
        })
    }
}

/// Where exit-position outputs come from.
pub trait HeadSource<T> {
    /// Head output at `position`, or the classifier softmax at `L_total`.
    /// Positions must be requested in increasing order.
    fn output(&mut self, position: usize) -> Result<Tensor<T>>;
}

/// Runs the backbone incrementally, evaluating only the requested heads.
pub struct LiveSource<'a, T> {
    net: &'a NetworkSpec,
    heads: &'a HeadSet<T>,
    forward: Option<Forward<'a, T>>,
    executed_ops: u64,
}

impl<'a, T: Scalar> LiveSource<'a, T> {
    pub fn new(
        net: &'a NetworkSpec,
        weights: &'a WeightStore<T>,
        heads: &'a HeadSet<T>,
        input: Tensor<T>,
    ) -> Result<Self> {
        Ok(Self {
            net,
            heads,
            forward: Some(Forward::new(net, weights, input)?),
            executed_ops: 0,
        })
    }

    /// Backbone MACs actually executed so far.
    pub fn executed_ops(&self) -> u64 {
        self.forward.as_ref().map_or(self.executed_ops, Forward::ops)
    }
}

impl<T: Scalar> HeadSource<T> for LiveSource<'_, T> {
    fn output(&mut self, position: usize) -> Result<Tensor<T>> {
        let l_total = self.net.l_total();
        let fwd = self
            .forward
            .as_mut()
            .ok_or_else(|| Error::invalid("live run", "classifier already evaluated"))?;
        if position < l_total {
            let head = self
                .heads
                .head(position)
                .ok_or_else(|| Error::invalid("live run", format!("no head at position {position}")))?;
            let y = fwd.advance_to(position)?;
            exit_forward(head, y)
        } else {
            let (logits, ops) = self.forward.take().unwrap().finish_with_ops()?;
            self.executed_ops = ops;
            tensor::softmax(&logits)
        }
    }
}

/// Serves outputs from a recorded trace.
pub struct ReplaySource<'a, T> {
    record: &'a TraceRecord<T>,
}

impl<'a, T> ReplaySource<'a, T> {
    pub fn new(record: &'a TraceRecord<T>) -> Self {
        Self { record }
    }
}

impl<T: Scalar> HeadSource<T> for ReplaySource<'_, T> {
    fn output(&mut self, position: usize) -> Result<Tensor<T>> {
        let g = self
            .record
            .head_outputs
            .get(position.wrapping_sub(1))
            .ok_or_else(|| Error::format("trace", format!("no output for position {position}")))?;
        Tensor::vector(g.clone())
    }
}

/// Everything the decision engine needs besides the outputs themselves.
#[derive(Clone, Debug)]
pub struct RunContext<T> {
    pub strategy: Strategy<T>,
    pub beta: T,
    /// `mu` per position `1..=L_total`.
    pub mu: Vec<T>,
    /// Head cost per position (zero at `L_total`).
    pub head_ops: Vec<u64>,
    pub energy: EnergyContext,
    pub num_classes: usize,
    pub log_outputs: bool,
}

impl<T: Scalar> RunContext<T> {
    pub fn new(
        strategy: Strategy<T>,
        beta: T,
        num_classes: usize,
        mu: Vec<T>,
        head_ops: Vec<u64>,
        energy: EnergyContext,
    ) -> Result<Self> {
        let l_total = mu.len();
        if head_ops.len() != l_total {
            return Err(Error::invalid(
                "run",
                format!("{} head op counts for {l_total} positions", head_ops.len()),
            ));
        }
        if !(beta > T::zero()) {
            return Err(Error::invalid("run", "beta must be positive"));
        }
        strategy.validate(l_total)?;
        Ok(Self {
            strategy,
            beta,
            mu,
            head_ops,
            energy,
            num_classes,
            log_outputs: false,
        })
    }

    pub fn for_heads(
        strategy: Strategy<T>,
        beta: T,
        net: &NetworkSpec,
        heads: &HeadSet<T>,
        energy: EnergyContext,
    ) -> Result<Self> {
        heads.validate(net)?;
        Self::new(
            strategy,
            beta,
            heads.num_classes,
            heads.mu_by_position()?,
            heads.head_ops(net)?,
            energy,
        )
    }

    pub fn l_total(&self) -> usize {
        self.mu.len()
    }
}

/// Accumulates ops into DVFS phases.
struct Clock<'a> {
    ctx: &'a EnergyContext,
    phases: Vec<(f64, &'a DvfsLevel)>,
    level: &'a DvfsLevel,
    ops: u64,
}

impl<'a> Clock<'a> {
    fn new(ctx: &'a EnergyContext) -> Self {
        Self {
            ctx,
            phases: Vec::new(),
            level: ctx.table.highest(),
            ops: 0,
        }
    }

    fn charge(&mut self, ops: u64) {
        self.ops += ops;
    }

    fn elapsed(&self) -> f64 {
        self.phases.iter().map(|p| p.0).sum::<f64>() + energy::latency(self.ops, self.level, self.ctx.throughput)
    }

    fn switch_to(&mut self, level: &'a DvfsLevel) {
        self.flush();
        self.level = level;
    }

    fn flush(&mut self) {
        if self.ops > 0 || self.phases.is_empty() {
            self.phases
                .push((energy::latency(self.ops, self.level, self.ctx.throughput), self.level));
        }
        self.ops = 0;
    }

    fn finish(mut self, tail: Tail<'_>) -> Result<EnergyReport> {
        self.flush();
        energy::energy_schedule(&self.phases, self.ctx.period, tail, self.ctx.switch_joules)
    }
}

struct Walk<'a, T, S> {
    ctx: &'a RunContext<T>,
    source: S,
    cumulative: &'a [u64],
    clock: Clock<'a>,
    position: usize,
    visits: Vec<Visit>,
    head_ops: u64,
    heads_executed: usize,
    first_output: Option<Vec<f64>>,
    class: usize,
}

impl<'a, T: Scalar, S: HeadSource<T>> Walk<'a, T, S> {
    fn backbone_to(&self, position: usize) -> u64 {
        let before = match self.position {
            0 => 0,
            p => self.cumulative[p - 1],
        };
        self.cumulative[position - 1] - before
    }

    /// Runs the backbone to `position` and checks the exit there.
    fn visit(&mut self, position: usize) -> Result<(bool, Tensor<T>)> {
        let l_total = self.ctx.l_total();
        if position <= self.position || position > l_total {
            return Err(Error::invalid(
                "run",
                format!("cannot move from {} to {position}", self.position),
            ));
        }
        self.clock.charge(self.backbone_to(position));
        self.position = position;
        let g = self.source.output(position)?;
        if g.len() != self.ctx.num_classes {
            return Err(Error::shape("run", "output length", self.ctx.num_classes, g.len()));
        }
        let d = decide(g.data(), self.ctx.mu[position - 1], self.ctx.beta)?;
        let forced = position == l_total;
        if !forced {
            self.clock.charge(self.ctx.head_ops[position - 1]);
            self.head_ops += self.ctx.head_ops[position - 1];
            self.heads_executed += 1;
        }
        if self.ctx.log_outputs && self.first_output.is_none() {
            self.first_output = Some(g.data().iter().map(|v| v.widen()).collect());
        }
        let exited = forced || d.exited;
        self.visits.push(Visit {
            position,
            alpha: d.alpha.widen(),
            exited,
            forced,
        });
        self.class = d.predicted_class;
        Ok((exited, g))
    }
}

/// Frequency for the next predicted segment: the proportional rule, raised
/// if needed so the segment still fits in the time left.
fn segment_level(
    ctx: &EnergyContext,
    zeta: usize,
    position: usize,
    l_total: usize,
    segment_ops: u64,
    elapsed: f64,
) -> Result<&DvfsLevel> {
    let f_high = ctx.table.highest().frequency;
    let proportional = energy::f_middle(zeta, position, l_total, f_high)?;
    let remaining = ctx.period - elapsed;
    let required = if remaining > 0.0 {
        segment_ops as f64 / (ctx.throughput * remaining)
    } else {
        f64::INFINITY
    };
    energy::select_level(proportional.max(required).min(f_high), &ctx.table)
}

/// Applies the strategy to one sample.
pub fn run_sample<T: Scalar, S: HeadSource<T>>(
    ctx: &RunContext<T>,
    source: S,
    cumulative_ops: &[u64],
    sample_id: u64,
    true_label: usize,
) -> Result<SampleResult> {
    let l_total = ctx.l_total();
    if cumulative_ops.len() != l_total {
        return Err(Error::invalid(
            "run",
            format!("{} op counts for {l_total} positions", cumulative_ops.len()),
        ));
    }
    let mut w = Walk {
        ctx,
        source,
        cumulative: cumulative_ops,
        clock: Clock::new(&ctx.energy),
        position: 0,
        visits: Vec::new(),
        head_ops: 0,
        heads_executed: 0,
        first_output: None,
        class: 0,
    };
    let mut predictor_ops = 0u64;
    let mut predictions_made = 0usize;
    let mut first_predicted = None;
    let tail = match &ctx.strategy {
        Strategy::Classic => {
            w.visit(l_total)?;
            Tail::HoldActive
        }
        Strategy::Hierarchical(positions) | Strategy::Placement(positions) => {
            let mut done = false;
            for &p in positions {
                if w.visit(p)?.0 {
                    done = true;
                    break;
                }
            }
            if !done {
                w.visit(l_total)?;
            }
            Tail::Idle(ctx.energy.table.lowest())
        }
        Strategy::Predictive(cfg) => {
            let (mut exited, mut g) = w.visit(cfg.l0)?;
            while !exited {
                let position = w.position;
                let step_cfg = PredictorConfig {
                    l0: position,
                    tau: cfg.tau.min(l_total - position),
                    ..cfg.clone()
                };
                let p = predict(&g, &step_cfg, &ctx.mu)?;
                predictor_ops += p.ops;
                predictions_made += 1;
                w.clock.charge(p.ops);
                let target = position + p.zeta;
                first_predicted.get_or_insert(target);
                let segment_ops = cumulative_ops[target - 1] - cumulative_ops[position - 1]
                    + if target < l_total { ctx.head_ops[target - 1] } else { 0 };
                let level = segment_level(&ctx.energy, p.zeta, position, l_total, segment_ops, w.clock.elapsed())?;
                w.clock.switch_to(level);
                (exited, g) = w.visit(target)?;
            }
            if predictions_made == 0 {
                Tail::Idle(ctx.energy.table.lowest())
            } else {
                Tail::HoldActive
            }
        }
    };
    let exit_layer = w.position;
    let backbone_ops = cumulative_ops[exit_layer - 1];
    let energy = w.clock.finish(tail)?;
    Ok(SampleResult {
        sample_id,
        true_label,
        exit_layer,
        predicted_class: w.class,
        correct: w.class == true_label,
        ops_executed: backbone_ops + w.head_ops + predictor_ops,
        backbone_ops,
        head_ops: w.head_ops,
        predictor_ops,
        heads_executed: w.heads_executed,
        predictions_made,
        prediction_hit: first_predicted == Some(exit_layer),
        first_predicted,
        visits: w.visits,
        first_output: w.first_output,
        energy,
    })
}

/// Runs the strategy live over `inputs`, in parallel over samples.
pub fn run_live<T: Scalar>(
    ctx: &RunContext<T>,
    net: &NetworkSpec,
    weights: &WeightStore<T>,
    heads: &HeadSet<T>,
    inputs: &[Tensor<T>],
    labels: &[usize],
) -> Result<RunResult> {
    if inputs.len() != labels.len() {
        return Err(Error::invalid("run", "inputs and labels differ in length"));
    }
    if ctx.l_total() != net.l_total() {
        return Err(Error::Config("run context does not match the network".into()));
    }
    let cumulative = net.op_counts();
    let samples = inputs
        .par_iter()
        .zip(labels.par_iter())
        .enumerate()
        .map(|(i, (x, &label))| {
            let mut source = LiveSource::new(net, weights, heads, x.clone())?;
            let result = run_sample(ctx, &mut source, &cumulative, i as u64, label)?;
            let executed = source.executed_ops();
            if executed != result.backbone_ops {
                return Err(Error::invalid(
                    "run",
                    format!(
                        "sample {i}: backbone executed {executed} ops, accounted {}",
                        result.backbone_ops
                    ),
                ));
            }
            Ok(result)
        })
        .collect::<Result<Vec<_>>>()?;
    RunResult::new(
        ctx.strategy.name(),
        ctx.beta.widen(),
        net.l_total(),
        samples,
        net.total_ops(),
        ctx.energy.classic_joules(),
    )
}

/// Same decisions as [`run_live`], driven by recorded outputs.
pub fn replay<T: Scalar>(ctx: &RunContext<T>, traces: &[TraceRecord<T>]) -> Result<RunResult> {
    let (l_total, n_c) = trace::validate_traces(traces)?;
    if l_total != ctx.l_total() || n_c != ctx.num_classes {
        return Err(Error::Config(format!(
            "trace has {l_total} positions and {n_c} classes, run expects {} and {}",
            ctx.l_total(),
            ctx.num_classes
        )));
    }
    let samples = traces
        .par_iter()
        .map(|r| run_sample(ctx, ReplaySource::new(r), &r.cumulative_ops, r.sample_id, r.true_label))
        .collect::<Result<Vec<_>>>()?;
    let classic_ops = traces[0].cumulative_ops[l_total - 1];
    RunResult::new(
        ctx.strategy.name(),
        ctx.beta.widen(),
        l_total,
        samples,
        classic_ops,
        ctx.energy.classic_joules(),
    )
}

/// Evaluates every head and the classifier on each input.
pub fn record_traces<T: Scalar>(
    net: &NetworkSpec,
    weights: &WeightStore<T>,
    heads: &HeadSet<T>,
    inputs: &[Tensor<T>],
    labels: &[usize],
) -> Result<Vec<TraceRecord<T>>> {
    if inputs.len() != labels.len() {
        return Err(Error::invalid("record", "inputs and labels differ in length"));
    }
    heads.validate(net)?;
    let cumulative = net.op_counts();
    inputs
        .par_iter()
        .zip(labels.par_iter())
        .enumerate()
        .map(|(i, (x, &label))| {
            let mut source = LiveSource::new(net, weights, heads, x.clone())?;
            let head_outputs = (1..=net.l_total())
                .map(|p| source.output(p).map(Tensor::into_data))
                .collect::<Result<Vec<_>>>()?;
            Ok(TraceRecord {
                sample_id: i as u64,
                true_label: label,
                head_outputs,
                cumulative_ops: cumulative.clone(),
            })
        })
        .collect()
}

impl<T: Scalar, S: HeadSource<T>> HeadSource<T> for &mut S {
    fn output(&mut self, position: usize) -> Result<Tensor<T>> {
        (**self).output(position)
    }
}
