//! DVFS level tables, frequency selection and piecewise energy accounting.
//!
//! Frequencies are in GHz, powers in watts, durations in seconds and
//! energies in joules.

mod analytic;

pub use analytic::{analytic_power, AnalyticPowerModel, VoltageMap};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const TIME_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DvfsLevel {
    #[serde(rename = "frequency_ghz")]
    pub frequency: f64,
    #[serde(rename = "voltage_v", default, deserialize_with = "csv::invalid_option")]
    pub voltage: Option<f64>,
    #[serde(rename = "active_w")]
    pub active_power: f64,
    #[serde(rename = "idle_w")]
    pub idle_power: f64,
}

impl DvfsLevel {
    pub fn new(frequency: f64, active_power: f64, idle_power: f64) -> Result<Self> {
        let level = Self {
            frequency,
            voltage: None,
            active_power,
            idle_power,
        };
        level.validate()?;
        Ok(level)
    }

    fn validate(&self) -> Result<()> {
        if !(self.frequency > 0.0) || !self.frequency.is_finite() {
            return Err(Error::invalid(
                "dvfs level",
                format!("frequency {} must be positive", self.frequency),
            ));
        }
        if !(self.idle_power >= 0.0) || !(self.active_power >= self.idle_power) || !self.active_power.is_finite() {
            return Err(Error::invalid(
                "dvfs level",
                format!(
                    "at {} GHz need active {} >= idle {} >= 0",
                    self.frequency, self.active_power, self.idle_power
                ),
            ));
        }
        if let Some(v) = self.voltage {
            if !(v > 0.0) {
                return Err(Error::invalid("dvfs level", format!("voltage {v} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DvfsTable {
    levels: Vec<DvfsLevel>,
}

const GV100_CSV: &str = include_str!("../../../../fixtures/gv100.csv");

impl DvfsTable {
    pub fn new(levels: Vec<DvfsLevel>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::invalid("dvfs table", "no levels"));
        }
        for l in &levels {
            l.validate()?;
        }
        for pair in levels.windows(2) {
            if !(pair[1].frequency > pair[0].frequency) {
                return Err(Error::invalid(
                    "dvfs table",
                    format!("frequencies not strictly increasing at {} GHz", pair[1].frequency),
                ));
            }
            if pair[1].active_power < pair[0].active_power {
                return Err(Error::invalid(
                    "dvfs table",
                    format!("active power decreases at {} GHz", pair[1].frequency),
                ));
            }
        }
        Ok(Self { levels })
    }

    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let levels = rdr.deserialize().collect::<std::result::Result<Vec<DvfsLevel>, _>>()?;
        Self::new(levels)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(file)
    }

    /// Measured Quadro GV100 powers, 0.60 to 1.45 GHz.
    pub fn gv100() -> Self {
        Self::from_csv_reader(GV100_CSV.as_bytes()).expect("bundled GV100 table is valid")
    }

    pub fn levels(&self) -> &[DvfsLevel] {
        &self.levels
    }

    pub fn lowest(&self) -> &DvfsLevel {
        &self.levels[0]
    }

    pub fn highest(&self) -> &DvfsLevel {
        self.levels.last().expect("non-empty table")
    }

    /// Exact-frequency lookup (to within 1e-9 GHz).
    pub fn level(&self, frequency: f64) -> Option<&DvfsLevel> {
        self.levels.iter().find(|l| (l.frequency - frequency).abs() < 1e-9)
    }

    pub fn select_level(&self, f_target: f64) -> Result<&DvfsLevel> {
        select_level(f_target, self)
    }
}

/// `zeta / (l_total - l0) * f_high`: the frequency at which the predicted
/// remaining layers just fill the rest of the period.
pub fn f_middle(zeta: usize, l0: usize, l_total: usize, f_high: f64) -> Result<f64> {
    if l0 >= l_total || zeta == 0 || zeta > l_total - l0 {
        return Err(Error::invalid(
            "f_middle",
            format!("zeta {zeta} outside 1..={}", l_total.saturating_sub(l0)),
        ));
    }
    Ok(zeta as f64 / (l_total - l0) as f64 * f_high)
}

/// Lowest level whose frequency is at least `f_target`.
pub fn select_level(f_target: f64, table: &DvfsTable) -> Result<&DvfsLevel> {
    if f_target.is_nan() {
        return Err(Error::invalid("select_level", "target frequency is NaN"));
    }
    table.levels.iter().find(|l| l.frequency >= f_target).ok_or_else(|| {
        Error::invalid(
            "select_level",
            format!(
                "target {f_target} GHz exceeds table maximum {} GHz",
                table.highest().frequency
            ),
        )
    })
}

/// Seconds to execute `ops` at `level`, with `throughput` in ops per GHz-second.
pub fn latency(ops: u64, level: &DvfsLevel, throughput: f64) -> f64 {
    ops as f64 / (throughput * level.frequency)
}

/// Throughput that makes `total_ops` at `f_high` take exactly `period`.
pub fn calibrate_throughput(total_ops: u64, f_high: f64, period: f64) -> Result<f64> {
    if total_ops == 0 || !(f_high > 0.0) || !(period > 0.0) {
        return Err(Error::invalid(
            "calibrate_throughput",
            "ops, frequency and period must be positive",
        ));
    }
    Ok(total_ops as f64 / (f_high * period))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PowerState {
    Active,
    Idle,
    /// Zero-length voltage/frequency transition.
    Switch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub duration: f64,
    pub frequency: f64,
    pub state: PowerState,
    pub joules: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub total_joules: f64,
    pub segments: Vec<Segment>,
    pub t_active: f64,
    pub t_idle: f64,
    /// The inference period `T`.
    pub deadline: f64,
    /// Active time past `T`; segment durations sum to `deadline + overrun`.
    pub overrun: f64,
}

impl EnergyReport {
    pub fn elapsed(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }
}

/// What the processor does between the last active phase and `T`.
#[derive(Clone, Copy, Debug)]
pub enum Tail<'a> {
    /// Drop to `level` and idle.
    Idle(&'a DvfsLevel),
    /// Stay at the last phase's level, charged at active power.
    HoldActive,
}

/// Integrates a sequence of active phases followed by `tail` up to `period`.
///
/// Each frequency change between consecutive phases (and into an idle tail at
/// a different level) costs `switch_joules`.
pub fn energy_schedule(
    phases: &[(f64, &DvfsLevel)],
    period: f64,
    tail: Tail<'_>,
    switch_joules: f64,
) -> Result<EnergyReport> {
    const OP: &str = "energy_schedule";
    if !(period >= 0.0) || !period.is_finite() {
        return Err(Error::invalid(OP, format!("period {period} must be non-negative")));
    }
    if !(switch_joules >= 0.0) {
        return Err(Error::invalid(OP, "switch penalty must be non-negative"));
    }
    let mut segments = Vec::with_capacity(phases.len() + 2);
    let mut current: Option<f64> = None;
    let push_switch = |segments: &mut Vec<Segment>, current: &mut Option<f64>, f: f64| {
        if let Some(prev) = *current {
            if (prev - f).abs() > 1e-12 && switch_joules > 0.0 {
                segments.push(Segment {
                    duration: 0.0,
                    frequency: f,
                    state: PowerState::Switch,
                    joules: switch_joules,
                });
            }
        }
        *current = Some(f);
    };
    let mut t_active = 0.0;
    for &(duration, level) in phases {
        if !(duration >= 0.0) || !duration.is_finite() {
            return Err(Error::invalid(
                OP,
                format!("phase duration {duration} must be non-negative"),
            ));
        }
        push_switch(&mut segments, &mut current, level.frequency);
        segments.push(Segment {
            duration,
            frequency: level.frequency,
            state: PowerState::Active,
            joules: duration * level.active_power,
        });
        t_active += duration;
    }
    let remaining = period - t_active;
    let overrun = if remaining < -TIME_EPS { -remaining } else { 0.0 };
    let mut t_idle = 0.0;
    if remaining > 0.0 {
        match tail {
            Tail::Idle(low) => {
                push_switch(&mut segments, &mut current, low.frequency);
                segments.push(Segment {
                    duration: remaining,
                    frequency: low.frequency,
                    state: PowerState::Idle,
                    joules: remaining * low.idle_power,
                });
                t_idle = remaining;
            }
            Tail::HoldActive => {
                let (_, last) = phases
                    .last()
                    .ok_or_else(|| Error::invalid(OP, "holding active needs at least one phase"))?;
                match segments.last_mut() {
                    Some(seg) if seg.state == PowerState::Active => {
                        seg.duration += remaining;
                        seg.joules += remaining * last.active_power;
                    }
                    _ => unreachable!("last segment of a non-empty phase list is active"),
                }
                t_active += remaining;
            }
        }
    }
    let total_joules = segments.iter().map(|s| s.joules).sum();
    Ok(EnergyReport {
        total_joules,
        segments,
        t_active,
        t_idle,
        deadline: period,
        overrun,
    })
}

fn check_split(op: &'static str, t: f64, period: f64) -> Result<()> {
    if !(t >= 0.0) || t > period {
        return Err(Error::invalid(op, format!("time {t} must lie in [0, {period}]")));
    }
    Ok(())
}

/// Full period at `high`.
pub fn energy_classic(period: f64, high: &DvfsLevel) -> Result<EnergyReport> {
    energy_schedule(&[(period, high)], period, Tail::HoldActive, 0.0)
}

/// Active at `high` until `t_exit`, then idle at `low` until `period`.
pub fn energy_exit_then_idle(t_exit: f64, period: f64, high: &DvfsLevel, low: &DvfsLevel) -> Result<EnergyReport> {
    check_split("energy_exit_then_idle", t_exit, period)?;
    energy_schedule(&[(t_exit, high)], period, Tail::Idle(low), 0.0)
}

/// Active at `high` until `t_l0`, then active at `middle` until `period`.
pub fn energy_predictive(t_l0: f64, period: f64, high: &DvfsLevel, middle: &DvfsLevel) -> Result<EnergyReport> {
    check_split("energy_predictive", t_l0, period)?;
    energy_schedule(&[(t_l0, high), (period - t_l0, middle)], period, Tail::HoldActive, 0.0)
}
