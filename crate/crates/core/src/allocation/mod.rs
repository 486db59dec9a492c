//! Layerwise sparsity allocation under a global budget.

mod erk;
mod greedy;
mod lamp;

pub use erk::{erk_allocate, erk_with_fixed, projection_forced_erk, ErkConfig, ErkResult};
pub use greedy::{greedy_allocate, greedy_trace, GreedyTrace, Promotion, BUDGET_TOL};
pub use lamp::{lamp_allocate, lamp_scores};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{validate_grid, DiagnosticCurves, DiagnosticPoint};
use crate::error::{Error, Result};
use crate::masking::{check_sparsity, Allocation};

/// Which diagnostic quantity a score table holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    RawShift,
    RepairResidual,
    Rr,
}

impl ScoreSource {
    pub fn of(self, p: &DiagnosticPoint) -> f64 {
        match self {
            ScoreSource::RawShift => p.d_raw,
            ScoreSource::RepairResidual => p.d_repair,
            ScoreSource::Rr => p.rr,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScoreSource::RawShift => "raw_shift",
            ScoreSource::RepairResidual => "repair_residual",
            ScoreSource::Rr => "rr",
        }
    }
}

/// `g(ℓ, s)` for every layer over a shared grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub source: ScoreSource,
    pub grid: Vec<f64>,
    /// Per layer, one score per grid value. Layer order is the tie-break order.
    pub g: IndexMap<String, Vec<f64>>,
}

impl ScoreTable {
    pub fn new(source: ScoreSource, grid: Vec<f64>, g: IndexMap<String, Vec<f64>>) -> Result<Self> {
        validate_grid(&grid)?;
        if g.is_empty() {
            return Err(Error::Empty("score table"));
        }
        for (layer, row) in &g {
            if row.len() != grid.len() {
                return Err(Error::Config(format!(
                    "layer `{layer}` has {} scores for a grid of {}",
                    row.len(),
                    grid.len()
                )));
            }
        }
        Ok(Self { source, grid, g })
    }

    /// Table over `layers` × `curves.grid`.
    pub fn from_curves(
        curves: &DiagnosticCurves,
        source: ScoreSource,
        layers: &[String],
    ) -> Result<Self> {
        let mut g = IndexMap::new();
        for layer in layers {
            let row = curves
                .grid
                .iter()
                .map(|&s| {
                    curves.point(layer, s).map(|p| source.of(p)).ok_or_else(|| {
                        Error::MissingGridPoint {
                            layer: layer.clone(),
                            s,
                        }
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            g.insert(layer.clone(), row);
        }
        Self::new(source, curves.grid.clone(), g)
    }
}

/// `s_ℓ = S` for every layer.
pub fn uniform_allocate(prunable: &[String], target: f64) -> Result<Allocation> {
    check_sparsity(target)?;
    Allocation::new(prunable.iter().map(|l| (l.clone(), target)).collect())
}

/// Mean RR over layers, `J = (1/L) Σ_ℓ R_ℓ(s_ℓ)`, by exact lookup.
pub fn allocation_objective(alloc: &Allocation, curves: &DiagnosticCurves) -> Result<f64> {
    if alloc.is_empty() {
        return Err(Error::Empty("allocation"));
    }
    let mut sum = 0.0;
    for (layer, s) in alloc.iter() {
        let p = curves
            .point(layer, s)
            .ok_or_else(|| Error::MissingGridPoint {
                layer: layer.to_string(),
                s,
            })?;
        sum += p.rr;
    }
    Ok(sum / alloc.len() as f64)
}

/// Parameter-weighted mean sparsity of the layers not in `exclude`.
pub fn mean_sparsity_excluding(
    alloc: &Allocation,
    counts: &IndexMap<String, usize>,
    exclude: &[String],
) -> Result<f64> {
    let mut pruned = 0.0;
    let mut total = 0usize;
    for (layer, s) in alloc
        .iter()
        .filter(|(l, _)| !exclude.iter().any(|e| e == l))
    {
        let n = *counts
            .get(layer)
            .ok_or_else(|| Error::UnknownLayer(layer.to_string()))?;
        pruned += n as f64 * s;
        total += n;
    }
    if total == 0 {
        return Err(Error::Empty("layer selection"));
    }
    Ok(pruned / total as f64)
}
