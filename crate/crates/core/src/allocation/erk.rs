use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::arch::ShapeMap;
use crate::error::{Error, Result};
use crate::masking::Allocation;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErkConfig {
    pub cap: f64,
    pub floor: f64,
}

impl Default for ErkConfig {
    fn default() -> Self {
        Self {
            cap: 1.0,
            floor: 0.025,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErkResult {
    pub scale: f64,
    /// `scale · raw` with the final scale, before clamping. Forced layers
    /// are absent.
    pub uncapped_density: IndexMap<String, f64>,
    pub capped_density: IndexMap<String, f64>,
    pub sparsity: IndexMap<String, f64>,
}

impl ErkResult {
    pub fn allocation(&self) -> Allocation {
        Allocation {
            entries: self.sparsity.clone(),
        }
    }
}

fn raw_score(shape: &[usize; 4]) -> f64 {
    let [o, i, kh, kw] = shape.map(|v| v as f64);
    (i + o + kh + kw) / (i * o * kh * kw)
}

/// ERK densities with cap and floor, hitting the global density budget
/// `(1 − S) · Σ n` exactly.
///
/// Densities are `clamp(scale · raw, floor, cap)`. The total is a
/// nondecreasing piecewise-linear function of `scale`, so the scale is found
/// exactly by walking its breakpoints; this is the fixed point of the usual
/// loop that pins capped layers and re-solves the rest.
pub fn erk_allocate(shapes: &ShapeMap, target: f64, cfg: ErkConfig) -> Result<ErkResult> {
    erk_with_fixed(shapes, &IndexMap::new(), target, cfg)
}

/// ERK over the layers not in `fixed`, which keep their given sparsity.
pub fn erk_with_fixed(
    shapes: &ShapeMap,
    fixed: &IndexMap<String, f64>,
    target: f64,
    cfg: ErkConfig,
) -> Result<ErkResult> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::InvalidSparsity(target));
    }
    if !(cfg.floor >= 0.0 && cfg.floor <= cfg.cap && cfg.cap <= 1.0) {
        return Err(Error::Config(format!(
            "invalid ERK bounds floor={} cap={}",
            cfg.floor, cfg.cap
        )));
    }
    for (l, &s) in fixed {
        if !shapes.contains_key(l) {
            return Err(Error::UnknownLayer(l.clone()));
        }
        crate::masking::check_sparsity(s)?;
    }
    if shapes.is_empty() {
        return Err(Error::Empty("layer shapes"));
    }
    let count = |s: &[usize; 4]| s.iter().product::<usize>() as f64;
    let total: f64 = shapes.values().map(count).sum();
    let forced: f64 = fixed
        .iter()
        .map(|(l, s)| count(&shapes[l]) * (1.0 - s))
        .sum();
    let budget = (1.0 - target) * total - forced;

    let free: Vec<(&String, f64, f64)> = shapes
        .iter()
        .filter(|(l, _)| !fixed.contains_key(*l))
        .map(|(l, s)| (l, count(s), raw_score(s)))
        .collect();
    let lo: f64 = free.iter().map(|(_, n, _)| n * cfg.floor).sum();
    let hi: f64 = free.iter().map(|(_, n, _)| n * cfg.cap).sum();
    if free.is_empty() || budget < lo * (1.0 - 1e-12) || budget > hi * (1.0 + 1e-12) {
        return Err(Error::Infeasible {
            target,
            achievable: if budget < lo {
                1.0 - (lo + forced) / total
            } else {
                1.0 - (hi + forced) / total
            },
        });
    }

    let scale = solve_scale(&free, budget, cfg);
    let mut out = ErkResult {
        scale,
        uncapped_density: IndexMap::new(),
        capped_density: IndexMap::new(),
        sparsity: IndexMap::new(),
    };
    for (l, _) in shapes {
        if let Some(&s) = fixed.get(l) {
            out.capped_density.insert(l.clone(), 1.0 - s);
            out.sparsity.insert(l.clone(), s);
        } else {
            let raw = raw_score(&shapes[l]);
            let d = (scale * raw).clamp(cfg.floor, cfg.cap);
            out.uncapped_density.insert(l.clone(), scale * raw);
            out.capped_density.insert(l.clone(), d);
            out.sparsity.insert(l.clone(), 1.0 - d);
        }
    }
    Ok(out)
}

/// Smallest scale with `Σ n · clamp(scale · raw, floor, cap) = budget`.
fn solve_scale(free: &[(&String, f64, f64)], budget: f64, cfg: ErkConfig) -> f64 {
    let mut points: Vec<f64> = free
        .iter()
        .flat_map(|&(_, _, r)| [cfg.floor / r, cfg.cap / r])
        .collect();
    points.sort_by(f64::total_cmp);
    let total_at = |scale: f64| -> f64 {
        free.iter()
            .map(|&(_, n, r)| n * (scale * r).clamp(cfg.floor, cfg.cap))
            .sum()
    };
    // on each segment the total is `fixed + scale · slope`
    let mut prev = 0.0;
    for &bp in &points {
        if total_at(bp) >= budget {
            let (mut fixed, mut slope) = (0.0, 0.0);
            let mid = 0.5 * (prev + bp);
            for &(_, n, r) in free {
                let d = mid * r;
                if d <= cfg.floor {
                    fixed += n * cfg.floor;
                } else if d >= cfg.cap {
                    fixed += n * cfg.cap;
                } else {
                    slope += n * r;
                }
            }
            return if slope > 0.0 {
                ((budget - fixed) / slope).clamp(prev, bp)
            } else {
                bp
            };
        }
        prev = bp;
    }
    prev
}

/// ERK with the `projection` layers pinned at `proj_s`; the remaining
/// density budget goes to the other layers so the global target still holds.
pub fn projection_forced_erk(
    shapes: &ShapeMap,
    projection: &[String],
    proj_s: f64,
    target: f64,
    cfg: ErkConfig,
) -> Result<ErkResult> {
    let fixed = projection.iter().map(|l| (l.clone(), proj_s)).collect();
    erk_with_fixed(shapes, &fixed, target, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{counts_of, resnet18_shapes};
    use crate::masking::global_sparsity;

    #[test]
    fn identical_shapes_are_uniform() {
        let shapes: ShapeMap = (0..4).map(|i| (format!("l{i}"), [16, 16, 3, 3])).collect();
        let r = erk_allocate(&shapes, 0.8, ErkConfig::default()).unwrap();
        for s in r.sparsity.values() {
            assert!((s - 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn budget_is_met() {
        let shapes = resnet18_shapes();
        let r = erk_allocate(&shapes, 0.9, ErkConfig::default()).unwrap();
        let s = global_sparsity(&r.allocation(), &counts_of(&shapes)).unwrap();
        assert!((s - 0.9).abs() < 1e-9);
        assert!(r
            .capped_density
            .values()
            .all(|&d| (0.025..=1.0).contains(&d)));
    }

    #[test]
    fn infeasible_budget() {
        let shapes: ShapeMap = [("a".to_string(), [4, 4, 3, 3])].into_iter().collect();
        assert!(matches!(
            erk_allocate(&shapes, 0.99, ErkConfig::default()),
            Err(Error::Infeasible { .. })
        ));
        assert!(erk_allocate(&shapes, 1.0, ErkConfig::default()).is_err());
    }

    #[test]
    fn forced_equal_to_target_on_uniform_shapes() {
        let shapes: ShapeMap = (0..3).map(|i| (format!("l{i}"), [8, 8, 3, 3])).collect();
        let r = projection_forced_erk(&shapes, &["l1".to_string()], 0.7, 0.7, ErkConfig::default())
            .unwrap();
        assert!(r.sparsity.values().all(|s| (s - 0.7).abs() < 1e-12));
        assert!(!r.uncapped_density.contains_key("l1"));
    }
}
