use indexmap::IndexMap;
use serde::Serialize;

use super::ScoreTable;
use crate::error::{Error, Result};
use crate::masking::{weighted_sparsity, Allocation};

/// Slack when comparing the achieved global sparsity against the target.
pub const BUDGET_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Promotion {
    pub layer: String,
    pub from: f64,
    pub to: f64,
    pub q: f64,
    /// Global sparsity after this promotion.
    pub global: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GreedyTrace {
    pub allocation: Allocation,
    pub promotions: Vec<Promotion>,
}

/// Greedy budgeted allocation; see [`greedy_trace`].
pub fn greedy_allocate(
    scores: &ScoreTable,
    counts: &IndexMap<String, usize>,
    target: f64,
) -> Result<Allocation> {
    Ok(greedy_trace(scores, counts, target)?.allocation)
}

/// Starts every layer at the lowest grid value and repeatedly promotes the
/// layer with the smallest score increase per additionally pruned parameter,
/// `q = Δg / (Δs · n)`, until the global sparsity reaches `target`. Equal
/// `q` goes to the earlier layer of the table. Increments may be negative.
pub fn greedy_trace(
    scores: &ScoreTable,
    counts: &IndexMap<String, usize>,
    target: f64,
) -> Result<GreedyTrace> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(Error::InvalidSparsity(target));
    }
    let grid = &scores.grid;
    let k_max = grid.len() - 1;
    let layers: Vec<&String> = scores.g.keys().collect();
    let n: Vec<usize> = layers
        .iter()
        .map(|l| match counts.get(*l) {
            Some(&c) if c > 0 => Ok(c),
            Some(_) => Err(Error::Config(format!(
                "layer `{l}` has no prunable parameters"
            ))),
            None => Err(Error::UnknownLayer((*l).clone())),
        })
        .collect::<Result<_>>()?;
    let global = |k: &[usize]| {
        let pairs: Vec<(usize, f64)> = k.iter().zip(&n).map(|(&ki, &ni)| (ni, grid[ki])).collect();
        weighted_sparsity(&pairs)
    };

    let achievable = grid[k_max];
    if target > achievable + BUDGET_TOL {
        return Err(Error::Infeasible { target, achievable });
    }

    let mut k = vec![0usize; layers.len()];
    let mut current = global(&k);
    let mut promotions = Vec::new();
    while current < target - BUDGET_TOL {
        let mut best: Option<(usize, f64)> = None;
        for (i, layer) in layers.iter().enumerate() {
            if k[i] == k_max {
                continue;
            }
            let g = &scores.g[*layer];
            let q = (g[k[i] + 1] - g[k[i]]) / ((grid[k[i] + 1] - grid[k[i]]) * n[i] as f64);
            if best.is_none_or(|(_, bq)| q.total_cmp(&bq).is_lt()) {
                best = Some((i, q));
            }
        }
        let (i, q) = best.expect("feasible target leaves a promotable layer");
        let from = grid[k[i]];
        k[i] += 1;
        current = global(&k);
        promotions.push(Promotion {
            layer: layers[i].clone(),
            from,
            to: grid[k[i]],
            q,
            global: current,
        });
    }
    let allocation = Allocation::new(
        layers
            .iter()
            .zip(&k)
            .map(|(l, &ki)| ((*l).clone(), grid[ki]))
            .collect(),
    )?;
    Ok(GreedyTrace {
        allocation,
        promotions,
    })
}
