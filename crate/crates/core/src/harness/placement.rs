use log::warn;
use serde::{Deserialize, Serialize};

use super::{replay, RunContext, Strategy, TraceRecord};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::argmax;

const MAX_CANDIDATES: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementResult {
    pub positions: Vec<usize>,
    pub mean_ops: f64,
    pub accuracy: f64,
    pub classic_accuracy: f64,
    pub subsets_evaluated: usize,
}

/// Exhaustive search for the exit subset with the lowest mean ops whose
/// accuracy stays within `accuracy_budget` of classic on `traces`.
///
/// Ties go to fewer exits, then earlier positions. The empty subset
/// (classic) is always feasible and is returned with a warning when nothing
/// else qualifies.
pub fn search_placement<T: Scalar>(
    traces: &[TraceRecord<T>],
    ctx: &RunContext<T>,
    candidates: &[usize],
    max_exits: usize,
    accuracy_budget: f64,
) -> Result<PlacementResult> {
    if traces.is_empty() {
        return Err(Error::invalid("placement", "no validation traces"));
    }
    let mut cands = candidates.to_vec();
    cands.sort_unstable();
    cands.dedup();
    if cands.len() > MAX_CANDIDATES {
        return Err(Error::invalid(
            "placement",
            format!("{} candidates exceed {MAX_CANDIDATES}", cands.len()),
        ));
    }
    let l_total = ctx.l_total();
    let classic_correct = traces
        .iter()
        .filter(|r| r.head_outputs.last().is_some_and(|g| argmax(g) == r.true_label))
        .count();
    let n = traces.len() as f64;
    let classic_accuracy = classic_correct as f64 / n;
    let mut best: Option<(u64, Vec<usize>, f64)> = None;
    let mut evaluated = 0;
    for mask in 0u32..(1 << cands.len()) {
        if mask.count_ones() as usize > max_exits {
            continue;
        }
        let subset: Vec<usize> = cands
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, &p)| p)
            .collect();
        let run_ctx = RunContext {
            strategy: Strategy::Placement(subset.clone()),
            ..ctx.clone()
        };
        run_ctx.strategy.validate(l_total)?;
        let run = replay(&run_ctx, traces)?;
        evaluated += 1;
        if run.metrics.accuracy + 1e-12 < classic_accuracy - accuracy_budget {
            continue;
        }
        let total = run.metrics.total_ops;
        let better = match &best {
            None => true,
            Some((b_ops, b_set, _)) => (total, subset.len(), &subset) < (*b_ops, b_set.len(), b_set),
        };
        if better {
            best = Some((total, subset, run.metrics.accuracy));
        }
    }
    let (total, positions, accuracy) = best.expect("empty subset is always feasible");
    if positions.is_empty() {
        warn!("placement search found no feasible exit subset; falling back to classic");
    }
    Ok(PlacementResult {
        positions,
        mean_ops: total as f64 / n,
        accuracy,
        classic_accuracy,
        subsets_evaluated: evaluated,
    })
}
