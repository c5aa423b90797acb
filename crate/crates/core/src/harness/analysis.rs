use serde::{Deserialize, Serialize};

use super::RunResult;
use crate::error::{Error, Result};
use crate::trainer::cross_entropy;

/// Mean exit position and its decomposition into the first check plus the
/// failed checks times the mean step taken after each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpectedExit {
    pub empirical: f64,
    /// Mean position of the first exit check (`L0` for predictive runs).
    pub start: f64,
    /// `failure_mass[j]`: fraction of samples whose check `j` failed.
    pub failure_mass: Vec<f64>,
    /// Mean step taken after failed check `j`.
    pub mean_steps: Vec<f64>,
    pub decomposition: f64,
}

pub fn expected_exit(result: &RunResult) -> Result<ExpectedExit> {
    let samples = &result.samples;
    if samples.is_empty() {
        return Err(Error::invalid("expected_exit", "empty result"));
    }
    let n = samples.len() as f64;
    let empirical = samples.iter().map(|s| s.exit_layer as f64).sum::<f64>() / n;
    let start = samples
        .iter()
        .map(|s| s.visits.first().map_or(s.exit_layer, |v| v.position) as f64)
        .sum::<f64>()
        / n;
    let attempts = samples
        .iter()
        .map(|s| s.visits.len())
        .max()
        .unwrap_or(0)
        .saturating_sub(1);
    let mut failure_mass = Vec::with_capacity(attempts);
    let mut mean_steps = Vec::with_capacity(attempts);
    for j in 0..attempts {
        let steps: Vec<f64> = samples
            .iter()
            .filter(|s| s.visits.len() > j + 1)
            .map(|s| (s.visits[j + 1].position - s.visits[j].position) as f64)
            .collect();
        failure_mass.push(steps.len() as f64 / n);
        mean_steps.push(steps.iter().sum::<f64>() / steps.len() as f64);
    }
    let decomposition = start + failure_mass.iter().zip(&mean_steps).map(|(p, m)| p * m).sum::<f64>();
    Ok(ExpectedExit {
        empirical,
        start,
        failure_mass,
        mean_steps,
        decomposition,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScatterMetric {
    WeightRatio,
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub sample_id: u64,
    /// Metric at the first checked position.
    pub value: f64,
    pub exit_layer: usize,
}

/// One row per sample pairing the first-check metric with the actual exit.
pub fn export_exit_scatter(result: &RunResult, metric: ScatterMetric) -> Result<Vec<ScatterRow>> {
    result
        .samples
        .iter()
        .map(|s| {
            let value = match metric {
                ScatterMetric::WeightRatio => s
                    .visits
                    .first()
                    .map(|v| v.alpha)
                    .ok_or_else(|| Error::invalid("scatter", "sample has no exit checks"))?,
                ScatterMetric::CrossEntropy => {
                    let q = s
                        .first_output
                        .as_ref()
                        .ok_or_else(|| Error::invalid("scatter", "output logging was disabled for this run"))?;
                    cross_entropy(q, s.true_label)?
                }
            };
            Ok(ScatterRow {
                sample_id: s.sample_id,
                value,
                exit_layer: s.exit_layer,
            })
        })
        .collect()
}

/// Writes `sample_id,value,exit_layer` rows.
pub fn write_scatter_csv<W: std::io::Write>(out: W, rows: &[ScatterRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<scatter>", e))
}
