use serde::{Deserialize, Serialize};

use super::DvfsTable;
use crate::error::{Error, Result};

/// Supply voltage assumed at the lowest table frequency when a table carries
/// no voltages. Only the ratio across the table matters to the fit.
const NOMINAL_V_MIN: f64 = 0.65;

/// Piecewise-linear frequency (GHz) to voltage (V) map, clamped at both ends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoltageMap {
    points: Vec<(f64, f64)>,
}

impl VoltageMap {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("voltage map", "no points"));
        }
        if points.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::invalid("voltage map", "frequencies must be strictly increasing"));
        }
        if points.iter().any(|&(_, v)| !(v >= 0.0)) {
            return Err(Error::invalid("voltage map", "voltages must be non-negative"));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn voltage(&self, frequency: f64) -> f64 {
        let p = &self.points;
        if frequency <= p[0].0 {
            return p[0].1;
        }
        for w in p.windows(2) {
            let ((f0, v0), (f1, v1)) = (w[0], w[1]);
            if frequency <= f1 {
                return v0 + (frequency - f0) / (f1 - f0) * (v1 - v0);
            }
        }
        p[p.len() - 1].1
    }
}

/// `P = C V^2 f + V N_tr I_static + P_const` (active) or the last two terms (idle).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticPowerModel {
    /// Switched capacitance in farads.
    pub c: f64,
    pub n_tr: f64,
    /// Leakage current per gate in amperes.
    pub i_static: f64,
    pub p_const: f64,
    pub voltage_of_frequency: VoltageMap,
}

/// Power in watts at `voltage` and `frequency` (GHz).
pub fn analytic_power(voltage: f64, frequency: f64, model: &AnalyticPowerModel, active: bool) -> f64 {
    let stat = voltage * model.n_tr * model.i_static + model.p_const;
    if active {
        model.c * voltage * voltage * frequency * 1e9 + stat
    } else {
        stat
    }
}

impl AnalyticPowerModel {
    pub fn validate(&self) -> Result<()> {
        if [self.c, self.n_tr, self.i_static, self.p_const]
            .iter()
            .any(|&x| !(x >= 0.0))
        {
            return Err(Error::invalid("power model", "parameters must be non-negative"));
        }
        Ok(())
    }

    pub fn power(&self, frequency: f64, active: bool) -> f64 {
        analytic_power(self.voltage_of_frequency.voltage(frequency), frequency, self, active)
    }

    /// Non-negative least-squares fit to a table's active and idle powers,
    /// minimising relative error.
    ///
    /// Table voltages are used when every level has one. Otherwise the map
    /// is linear from `NOMINAL_V_MIN` and its slope is picked by grid search.
    /// `N_tr` is fixed at 1, so `i_static` carries the total leakage current.
    pub fn fit(table: &DvfsTable) -> Result<Self> {
        let levels = table.levels();
        let given: Option<Vec<(f64, f64)>> = levels.iter().map(|l| l.voltage.map(|v| (l.frequency, v))).collect();
        let candidates: Vec<VoltageMap> = match given {
            Some(points) => vec![VoltageMap::new(points)?],
            None if levels.len() == 1 => vec![VoltageMap::new(vec![(levels[0].frequency, NOMINAL_V_MIN)])?],
            None => {
                let (f0, f1) = (table.lowest().frequency, table.highest().frequency);
                (0..=200)
                    .map(|i| {
                        let ratio = 1.0 + i as f64 * 0.01;
                        VoltageMap::new(vec![(f0, NOMINAL_V_MIN), (f1, NOMINAL_V_MIN * ratio)])
                    })
                    .collect::<Result<_>>()?
            }
        };
        let mut best: Option<(f64, Self)> = None;
        for map in candidates {
            let mut rows = Vec::with_capacity(levels.len() * 2);
            for l in levels {
                let v = map.voltage(l.frequency);
                if l.active_power > 0.0 {
                    let s = 1.0 / l.active_power;
                    rows.push([v * v * l.frequency * 1e9 * s, v * s, s]);
                }
                if l.idle_power > 0.0 {
                    let s = 1.0 / l.idle_power;
                    rows.push([0.0, v * s, s]);
                }
            }
            let Some((residual, x)) = nnls3(&rows) else { continue };
            if best.as_ref().is_none_or(|(r, _)| residual < *r) {
                best = Some((
                    residual,
                    Self {
                        c: x[0],
                        n_tr: 1.0,
                        i_static: x[1],
                        p_const: x[2],
                        voltage_of_frequency: map,
                    },
                ));
            }
        }
        best.map(|(_, m)| m)
            .ok_or_else(|| Error::invalid("power model fit", "no feasible fit"))
    }
}

/// Minimises `sum (row . x - 1)^2` over `x >= 0` by solving every support set.
fn nnls3(rows: &[[f64; 3]]) -> Option<(f64, [f64; 3])> {
    let mut best: Option<(f64, [f64; 3])> = None;
    for mask in 1u8..8 {
        let idx: Vec<usize> = (0..3).filter(|i| mask & (1 << i) != 0).collect();
        let n = idx.len();
        let mut a = vec![vec![0.0; n + 1]; n];
        for r in rows {
            for (i, &p) in idx.iter().enumerate() {
                for (j, &q) in idx.iter().enumerate() {
                    a[i][j] += r[p] * r[q];
                }
                a[i][n] += r[p];
            }
        }
        let Some(sol) = solve(a) else { continue };
        if sol.iter().any(|&s| s < 0.0) {
            continue;
        }
        let mut x = [0.0; 3];
        for (&i, s) in idx.iter().zip(sol) {
            x[i] = s;
        }
        let residual: f64 = rows
            .iter()
            .map(|r| {
                let e = r[0] * x[0] + r[1] * x[1] + r[2] * x[2] - 1.0;
                e * e
            })
            .sum();
        if best.is_none_or(|(b, _)| residual < b) {
            best = Some((residual, x));
        }
    }
    best
}

/// Gaussian elimination with partial pivoting on an augmented matrix.
fn solve(mut a: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    let n = a.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            let pivot_row = a[col].clone();
            for (x, p) in a[row][col..].iter_mut().zip(&pivot_row[col..]) {
                *x -= factor * p;
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (a[row][n] - s) / a[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}
