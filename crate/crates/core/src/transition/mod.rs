//! Calibration-only transition detection and rank correlation.
//!
//! Every input is derived from diagnostic curves and allocations; no
//! evaluation data or accuracies are involved.

mod rank;

pub use rank::{kendall, rank_correlation, spearman, RankCorrResult};

use serde::{Deserialize, Serialize};

use crate::allocation::allocation_objective;
use crate::diagnostics::DiagnosticCurves;
use crate::error::{Error, Result};
use crate::masking::Allocation;

/// `G = J_RR(ERK) − J_RR(RR)`.
pub fn rr_objective_gap(j_erk: f64, j_rr: f64) -> f64 {
    j_erk - j_rr
}

/// `clip((j_s − j_low) / (j_high − j_low + ε), 0, 1)`.
pub fn repair_stress(j_s: f64, j_low: f64, j_high: f64, epsilon: f64) -> f64 {
    ((j_s - j_low) / (j_high - j_low + epsilon)).clamp(0.0, 1.0)
}

pub fn cts_score(g: f64, t: f64) -> f64 {
    g * t
}

/// Centered three-point moving average; the two ends average the two
/// points available to them.
pub fn smooth3(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(n - 1);
            values[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

/// Inclusive index range into the target series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval {
    pub start: usize,
    pub end: usize,
}

impl Interval {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, i: usize) -> bool {
        (self.start..=self.end).contains(&i)
    }

    pub fn covers(&self, other: &Interval) -> bool {
        self.start <= other.start && other.end <= self.end
    }
}

/// `(B, threshold)` or `None` when nothing rises above the anchor level.
fn threshold(smoothed: &[f64], anchors: &[usize], alpha: f64) -> Result<Option<(f64, f64)>> {
    if smoothed.is_empty() {
        return Err(Error::Empty("CTS series"));
    }
    if anchors.is_empty() {
        return Err(Error::Empty("anchor index list"));
    }
    if let Some(&a) = anchors.iter().find(|&&a| a >= smoothed.len()) {
        return Err(Error::Config(format!(
            "anchor index {a} outside a series of {}",
            smoothed.len()
        )));
    }
    let b = anchors
        .iter()
        .map(|&a| smoothed[a])
        .fold(f64::NEG_INFINITY, f64::max);
    let max = smoothed.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max <= b {
        return Ok(None);
    }
    Ok(Some((b, b + alpha * (max - b))))
}

fn runs_above(smoothed: &[f64], thr: f64) -> Vec<Interval> {
    let mut runs = Vec::new();
    let mut start = None;
    for (i, &v) in smoothed.iter().enumerate() {
        match (v >= thr, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push(Interval {
                    start: s,
                    end: i - 1,
                });
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push(Interval {
            start: s,
            end: smoothed.len() - 1,
        });
    }
    runs
}

/// Longest run, later (higher-sparsity) run on equal length.
fn longest(runs: &[Interval]) -> Option<Interval> {
    runs.iter().copied().fold(None, |best, r| match best {
        Some(b) if b.len() > r.len() => Some(b),
        _ => Some(r),
    })
}

/// Longest contiguous run with `smoothed ≥ B + α (max − B)`, where `B` is
/// the largest smoothed value at the anchor indices. `None` when the series
/// never exceeds `B`.
pub fn detect_core(smoothed: &[f64], anchors: &[usize], alpha: f64) -> Result<Option<Interval>> {
    Ok(threshold(smoothed, anchors, alpha)?
        .and_then(|(_, thr)| longest(&runs_above(smoothed, thr))))
}

/// The core rule with a less selective threshold fraction.
pub fn detect_broad_band(
    smoothed: &[f64],
    anchors: &[usize],
    alpha_broad: f64,
) -> Result<Option<Interval>> {
    detect_core(smoothed, anchors, alpha_broad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CtsConfig {
    pub s_low: f64,
    pub s_high: f64,
    /// Sparsities whose smoothed scores set the baseline `B`; `s_low` is
    /// always included.
    pub extra_low_anchors: Vec<f64>,
    pub alpha: f64,
    pub alpha_broad: f64,
    pub epsilon: f64,
}

impl Default for CtsConfig {
    fn default() -> Self {
        Self {
            s_low: 0.90,
            s_high: 0.975,
            extra_low_anchors: Vec::new(),
            alpha: 0.7,
            alpha_broad: 0.3,
            epsilon: 1e-8,
        }
    }
}

/// Interval as sparsity bounds, for reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub start: usize,
    pub end: usize,
    pub s_start: f64,
    pub s_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtsProfile {
    pub sparsities: Vec<f64>,
    pub j_rr_rr: Vec<f64>,
    pub j_rr_erk: Vec<f64>,
    pub g: Vec<f64>,
    pub t: Vec<f64>,
    pub cts: Vec<f64>,
    pub cts_smoothed: Vec<f64>,
    /// Targets actually used as anchors (nearest available).
    pub s_low: f64,
    pub s_high: f64,
    pub alpha: f64,
    pub alpha_broad: f64,
    pub broad_band: Option<Band>,
    pub core: Option<Band>,
    pub warnings: Vec<String>,
}

fn nearest(sparsities: &[f64], s: f64) -> usize {
    let mut best = 0;
    for (i, &v) in sparsities.iter().enumerate() {
        if (v - s).abs() < (sparsities[best] - s).abs() {
            best = i;
        }
    }
    best
}

/// Full detector over targets sorted by sparsity.
pub fn cts_profile(
    sparsities: &[f64],
    j_rr_rr: &[f64],
    j_rr_erk: &[f64],
    cfg: &CtsConfig,
) -> Result<CtsProfile> {
    let n = sparsities.len();
    if n == 0 {
        return Err(Error::Empty("target list"));
    }
    if j_rr_rr.len() != n || j_rr_erk.len() != n {
        return Err(Error::Config(
            "objective series differ in length from the targets".into(),
        ));
    }
    if sparsities.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("targets must be strictly increasing".into()));
    }
    let mut warnings = Vec::new();
    let mut anchor = |s: f64, what: &str| {
        let i = nearest(sparsities, s);
        if (sparsities[i] - s).abs() > 1e-9 {
            let msg = format!(
                "{what} anchor {s} not evaluated; using nearest target {}",
                sparsities[i]
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
        i
    };
    let low = anchor(cfg.s_low, "low");
    let high = anchor(cfg.s_high, "high");
    let mut low_set = vec![low];
    for &s in &cfg.extra_low_anchors {
        low_set.push(anchor(s, "extra low"));
    }

    let g: Vec<f64> = j_rr_erk
        .iter()
        .zip(j_rr_rr)
        .map(|(&e, &r)| rr_objective_gap(e, r))
        .collect();
    let t: Vec<f64> = j_rr_rr
        .iter()
        .map(|&j| repair_stress(j, j_rr_rr[low], j_rr_rr[high], cfg.epsilon))
        .collect();
    let cts: Vec<f64> = g.iter().zip(&t).map(|(&g, &t)| cts_score(g, t)).collect();
    let smoothed = smooth3(&cts);
    let core = detect_core(&smoothed, &low_set, cfg.alpha)?;
    let mut broad = detect_broad_band(&smoothed, &low_set, cfg.alpha_broad)?;
    if let (Some(c), Some(b)) = (core, broad) {
        if cfg.alpha_broad <= cfg.alpha && !b.covers(&c) {
            // keep the band nested around the core
            let (_, thr) =
                threshold(&smoothed, &low_set, cfg.alpha_broad)?.expect("core implies a threshold");
            broad = runs_above(&smoothed, thr)
                .into_iter()
                .find(|r| r.covers(&c));
        }
    }
    let band = |iv: Option<Interval>| {
        iv.map(|i| Band {
            start: i.start,
            end: i.end,
            s_start: sparsities[i.start],
            s_end: sparsities[i.end],
        })
    };
    Ok(CtsProfile {
        sparsities: sparsities.to_vec(),
        j_rr_rr: j_rr_rr.to_vec(),
        j_rr_erk: j_rr_erk.to_vec(),
        g,
        t,
        cts,
        cts_smoothed: smoothed,
        s_low: sparsities[low],
        s_high: sparsities[high],
        alpha: cfg.alpha,
        alpha_broad: cfg.alpha_broad,
        broad_band: band(broad),
        core: band(core),
        warnings,
    })
}

/// One target sparsity with the RR and ERK allocations built for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetAllocations {
    pub sparsity: f64,
    pub rr: Allocation,
    pub erk: Allocation,
}

/// Input of `detect-transition`: curves holding every (layer, s_ℓ) used by
/// the allocations, and the per-target allocations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionInput {
    pub curves: DiagnosticCurves,
    pub targets: Vec<TargetAllocations>,
}

pub fn detect_transition(input: &TransitionInput, cfg: &CtsConfig) -> Result<CtsProfile> {
    let mut targets: Vec<&TargetAllocations> = input.targets.iter().collect();
    targets.sort_by(|a, b| a.sparsity.total_cmp(&b.sparsity));
    let s: Vec<f64> = targets.iter().map(|t| t.sparsity).collect();
    let rr = targets
        .iter()
        .map(|t| allocation_objective(&t.rr, &input.curves))
        .collect::<Result<Vec<_>>>()?;
    let erk = targets
        .iter()
        .map(|t| allocation_objective(&t.erk, &input.curves))
        .collect::<Result<Vec<_>>>()?;
    cts_profile(&s, &rr, &erk, cfg)
}

/// CSV rows `sparsity,G,T,CTS,smoothed,in_band,in_core`.
pub fn profile_csv(p: &CtsProfile) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "sparsity", "G", "T", "CTS", "smoothed", "in_band", "in_core",
    ])?;
    let inside = |b: &Option<Band>, i: usize| b.is_some_and(|b| (b.start..=b.end).contains(&i));
    for i in 0..p.sparsities.len() {
        w.write_record([
            p.sparsities[i].to_string(),
            p.g[i].to_string(),
            p.t[i].to_string(),
            p.cts[i].to_string(),
            p.cts_smoothed[i].to_string(),
            inside(&p.broad_band, i).to_string(),
            inside(&p.core, i).to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
