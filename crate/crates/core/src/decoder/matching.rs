use serde::{Deserialize, Serialize};

use super::PredInstance;
use crate::error::{Error, Result};
use crate::mapcore::{chamfer_distance, MapScene};

/// Pair cost `alpha * chamfer + beta * (-log p(gt class))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchCost {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for MatchCost {
    fn default() -> Self {
        MatchCost { alpha: 1.0, beta: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `assignment[i]` is the query matched to ground-truth instance `i`.
    pub assignment: Vec<usize>,
    pub total_cost: f64,
    pub pair_costs: Vec<f64>,
}

impl MatchResult {
    /// Queries not assigned to any ground truth, ascending.
    pub fn unmatched(&self, n: usize) -> Vec<usize> {
        let mut used = vec![false; n];
        self.assignment.iter().for_each(|&j| used[j] = true);
        (0..n).filter(|j| !used[*j]).collect()
    }
}

/// Minimum-cost assignment of every row to a distinct column for an
/// `m x n` cost matrix with `m <= n` (shortest augmenting paths with
/// potentials, `O(m^2 n)`).
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let m = cost.len();
    if m == 0 {
        return Ok(Vec::new());
    }
    let n = cost[0].len();
    if cost.iter().any(|r| r.len() != n) {
        return Err(Error::invalid("ragged cost matrix"));
    }
    if m > n {
        return Err(Error::invalid(format!("{m} ground-truth instances but only {n} queries")));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::invalid("non-finite matching cost"));
    }
    // 1-based with a virtual column 0, following the classic formulation.
    let mut u = vec![0.0; m + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=m {
        col_row[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_row[j0] = col_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; m];
    for j in 1..=n {
        if col_row[j] != 0 {
            assignment[col_row[j] - 1] = j - 1;
        }
    }
    Ok(assignment)
}

pub fn cost_matrix(preds: &[PredInstance], gt: &MapScene, cost: &MatchCost) -> Result<Vec<Vec<f64>>> {
    gt.instances
        .iter()
        .map(|inst| {
            preds
                .iter()
                .map(|p| {
                    let lse = crate::ndgrad::log_sum_exp(&p.class_logits);
                    let nll = lse - p.class_logits[inst.class_id.index()];
                    Ok(cost.alpha * chamfer_distance(&p.points, &inst.points)? + cost.beta * nll)
                })
                .collect()
        })
        .collect()
}

/// Optimal injective assignment of ground-truth instances to predictions.
pub fn hungarian_match(preds: &[PredInstance], gt: &MapScene, cost: &MatchCost) -> Result<MatchResult> {
    if gt.instances.len() > preds.len() {
        return Err(Error::invalid(format!(
            "{} ground-truth instances but only {} predictions",
            gt.instances.len(),
            preds.len()
        )));
    }
    let c = cost_matrix(preds, gt, cost)?;
    let assignment = hungarian(&c)?;
    let pair_costs: Vec<f64> = assignment.iter().enumerate().map(|(i, &j)| c[i][j]).collect();
    Ok(MatchResult { total_cost: pair_costs.iter().sum(), assignment, pair_costs })
}
