//! Raw pruning shift, post-repair residual and their ratio per
//! (layer, sparsity), measured on single-layer diagnostic models.

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calib::CalibrationSet;
use crate::error::{Error, Result};
use crate::masking::{check_sparsity, magnitude_mask, masked_conv, Allocation};
use crate::net::forward::RunOptions;
use crate::net::{NetworkSpec, Op, Overlay};
use crate::repair::{recal_overlay, repair_scales, scale_conv, RepairConfig, RepairScales};
use crate::tensor::{channel_layout, channel_stats_many, ChannelStats, Tensor};

pub const DEFAULT_GRID: [f64; 7] = [0.70, 0.80, 0.85, 0.90, 0.925, 0.95, 0.975];

/// Grid values and allocation entries closer than this are the same point.
pub const GRID_TOL: f64 = 1e-9;

/// Per-sample distortions of a batch, summed: `(Σ_samples d, samples)`.
fn distortion_sum(a: &Tensor, b: &Tensor, epsilon: f64) -> Result<(f64, usize)> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            node: "distortion".into(),
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let (c, spatial) = channel_layout(a)?;
    let n = a.len() / (c * spatial);
    let mut total = 0.0;
    for i in 0..n {
        let mut sample = 0.0;
        for ch in 0..c {
            let off = (i * c + ch) * spatial;
            let (mut num, mut den) = (0.0f64, 0.0f64);
            for (&x, &y) in a.data()[off..off + spatial]
                .iter()
                .zip(&b.data()[off..off + spatial])
            {
                let (x, y) = (x as f64, y as f64);
                num += (x - y) * (x - y);
                den += x * x;
            }
            sample += num / (den + epsilon);
        }
        total += sample / c as f64;
    }
    Ok((total, n))
}

/// Normalized channelwise distance `(1/C) Σ_c ‖a_c − b_c‖² / (‖a_c‖² + ε)`.
///
/// Accepts a single `[C, H, W]` activation or a batch `[N, C, H, W]`, in
/// which case per-sample distances are averaged. `a` is the reference.
pub fn distortion(a: &Tensor, b: &Tensor, epsilon: f64) -> Result<f64> {
    if a.ndim() == 3 && a.shape() == b.shape() {
        let mut shape = vec![1];
        shape.extend_from_slice(a.shape());
        let a1 = Tensor::new(shape.clone(), a.data().to_vec())?;
        let b1 = Tensor::new(shape, b.data().to_vec())?;
        return distortion(&a1, &b1, epsilon);
    }
    let (sum, n) = distortion_sum(a, b, epsilon)?;
    Ok(sum / n as f64)
}

/// Mean distortion over a calibration set given per-batch activations.
fn mean_distortion(refs: &[Tensor], acts: &[Tensor], epsilon: f64) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for (a, b) in refs.iter().zip(acts) {
        let (s, n) = distortion_sum(a, b, epsilon)?;
        total += s;
        count += n;
    }
    Ok(total / count as f64)
}

/// `(d_repair + ε) / (d_raw + ε)`.
pub fn rr_ratio(d_repair: f64, d_raw: f64, epsilon: f64) -> f64 {
    (d_repair + epsilon) / (d_raw + epsilon)
}

/// Where activations are compared.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapPoint {
    /// Convolution output, before BatchNorm.
    #[default]
    PostConv,
    /// Output of the BatchNorm fed by the conv, after recalibration.
    PostBn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticPoint {
    pub layer: String,
    pub s: f64,
    pub d_raw: f64,
    pub d_repair: f64,
    pub rr: f64,
}

/// Diagnostic records over prunable layers × grid, plus any off-grid points
/// added for specific allocations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticCurves {
    pub grid: Vec<f64>,
    pub calib_id: String,
    pub points: Vec<DiagnosticPoint>,
}

impl DiagnosticCurves {
    pub fn point(&self, layer: &str, s: f64) -> Option<&DiagnosticPoint> {
        self.points
            .iter()
            .find(|p| p.layer == layer && (p.s - s).abs() <= GRID_TOL)
    }

    /// Layer names in first-appearance order.
    pub fn layers(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for p in &self.points {
            if !out.contains(&p.layer.as_str()) {
                out.push(&p.layer);
            }
        }
        out
    }

    /// Inserts `p`, replacing an existing record at the same (layer, s).
    pub fn insert(&mut self, p: DiagnosticPoint) {
        match self
            .points
            .iter_mut()
            .find(|q| q.layer == p.layer && (q.s - p.s).abs() <= GRID_TOL)
        {
            Some(q) => *q = p,
            None => self.points.push(p),
        }
    }

    /// Checks the grid and that every (layer, grid value) pair is present.
    pub fn validate(&self, layers: &[String]) -> Result<()> {
        validate_grid(&self.grid)?;
        for layer in layers {
            for &s in &self.grid {
                if self.point(layer, s).is_none() {
                    return Err(Error::MissingGridPoint {
                        layer: layer.clone(),
                        s,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Empty("sparsity grid"));
    }
    for &s in grid {
        check_sparsity(s)?;
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(format!(
            "grid {grid:?} is not strictly increasing"
        )));
    }
    Ok(())
}

/// Everything measured for one diagnostic model.
#[derive(Debug, Clone)]
pub struct PointDetail {
    pub point: DiagnosticPoint,
    pub scales: RepairScales,
    pub pruned_stats: ChannelStats,
}

/// Evaluates single-layer diagnostic models against a shared dense network.
///
/// Each diagnostic model is an overlay on the dense net: only the probed
/// conv is replaced. Dense activations, dense statistics and the BN state of
/// the dense net recalibrated on the stream are computed once. With the
/// post-conv tap this is exact: BatchNorm nodes before the probed layer in
/// topological order cannot see its pruning, so their recalibrated state is
/// the dense one.
///
/// The raw shift is measured against the dense net as given. The repair
/// residual is measured against the dense net after the same BN
/// recalibration, so recalibration drift in layers the probe cannot reach
/// cancels and an unpruned layer scores exactly zero.
pub struct DiagnosticEngine<'a> {
    net: &'a NetworkSpec,
    calib: &'a CalibrationSet,
    stream: Vec<Tensor>,
    cfg: RepairConfig,
    tap: TapPoint,
    /// Activations at each layer's compare node, one per calibration batch.
    dense_taps: IndexMap<String, Vec<Tensor>>,
    /// Same, with the dense net's BN recalibrated on the stream.
    recal_taps: IndexMap<String, Vec<Tensor>>,
    dense_stats: IndexMap<String, ChannelStats>,
    dense_recal: Overlay,
}

impl<'a> DiagnosticEngine<'a> {
    pub fn new(
        net: &'a NetworkSpec,
        calib: &'a CalibrationSet,
        stream: Vec<Tensor>,
        cfg: &RepairConfig,
        tap: TapPoint,
    ) -> Result<Self> {
        cfg.validate()?;
        if stream.is_empty() {
            return Err(Error::Empty("BN recalibration stream"));
        }
        let layers: Vec<&str> = net.prunable().iter().map(String::as_str).collect();
        if layers.is_empty() {
            return Err(Error::Empty("prunable layer list"));
        }
        let mut taps: Vec<&str> = layers.clone();
        if tap == TapPoint::PostBn {
            for l in &layers {
                taps.push(net.bn_after(l).ok_or_else(|| {
                    Error::Config(format!("layer `{l}` has no BatchNorm to tap"))
                })?);
            }
        }
        let mut conv_acts: IndexMap<String, Vec<Tensor>> = IndexMap::new();
        let mut dense_taps: IndexMap<String, Vec<Tensor>> = IndexMap::new();
        for batch in calib.batches() {
            let mut r = net.run(batch, &taps, RunOptions::default())?;
            for l in &layers {
                let t = r.tapped.remove(*l).expect("tapped");
                let compare = match tap {
                    TapPoint::PostConv => t.clone(),
                    TapPoint::PostBn => r.tapped[net.bn_after(l).expect("checked")].clone(),
                };
                conv_acts.entry(l.to_string()).or_default().push(t);
                dense_taps.entry(l.to_string()).or_default().push(compare);
            }
        }
        let dense_stats = conv_acts
            .iter()
            .map(|(k, v)| Ok((k.clone(), channel_stats_many(v)?)))
            .collect::<Result<_>>()?;
        let dense_recal = recal_overlay(net, &Overlay::default(), &stream, cfg.bn_momentum, None)?;
        let compare: Vec<&str> = match tap {
            TapPoint::PostConv => layers.clone(),
            TapPoint::PostBn => taps[layers.len()..].to_vec(),
        };
        let mut recal_taps: IndexMap<String, Vec<Tensor>> = IndexMap::new();
        for batch in calib.batches() {
            let r = net.run(
                batch,
                &compare,
                RunOptions {
                    overlay: Some(&dense_recal),
                    ..Default::default()
                },
            )?;
            for (l, node) in layers.iter().zip(&compare) {
                recal_taps
                    .entry(l.to_string())
                    .or_default()
                    .push(r.tapped[*node].clone());
            }
        }
        Ok(Self {
            net,
            calib,
            stream,
            cfg: cfg.clone(),
            tap,
            dense_taps,
            recal_taps,
            dense_stats,
            dense_recal,
        })
    }

    pub fn net(&self) -> &NetworkSpec {
        self.net
    }

    pub fn config(&self) -> &RepairConfig {
        &self.cfg
    }

    pub fn dense_stats(&self, layer: &str) -> Option<&ChannelStats> {
        self.dense_stats.get(layer)
    }

    fn compare_node<'b>(&'b self, layer: &'b str) -> &'b str {
        match self.tap {
            TapPoint::PostConv => layer,
            TapPoint::PostBn => self.net.bn_after(layer).expect("checked at construction"),
        }
    }

    /// Raw shift only; no repair is run.
    pub fn raw_shift(&self, layer: &str, s: f64) -> Result<f64> {
        let (overlay, _) = self.masked(layer, s)?;
        let (acts, _) = self.measure(layer, &overlay)?;
        mean_distortion(&self.dense_taps[layer], &acts, self.cfg.epsilon)
    }

    pub fn point(&self, layer: &str, s: f64) -> Result<DiagnosticPoint> {
        Ok(self.point_detail(layer, s)?.point)
    }

    pub fn point_detail(&self, layer: &str, s: f64) -> Result<PointDetail> {
        let eps = self.cfg.epsilon;
        let (masked_overlay, masked) = self.masked(layer, s)?;
        let (raw_acts, conv_acts) = self.measure(layer, &masked_overlay)?;
        let d_raw = mean_distortion(&self.dense_taps[layer], &raw_acts, eps)?;
        let pruned_stats = channel_stats_many(&conv_acts)?;
        let scales = repair_scales(layer, &self.dense_stats[layer], &pruned_stats, &self.cfg)?;
        let mut repaired = Overlay::default();
        repaired.insert(
            layer,
            Op::Conv2d(scale_conv(&masked, &scales, self.cfg.scale_bias)?),
        );
        let overlay = match self.tap {
            TapPoint::PostConv => self.dense_recal.merged(&repaired),
            TapPoint::PostBn => recal_overlay(
                self.net,
                &repaired,
                &self.stream,
                self.cfg.bn_momentum,
                Some(self.compare_node(layer)),
            )?,
        };
        let (rep_acts, _) = self.measure(layer, &overlay)?;
        let d_repair = mean_distortion(&self.recal_taps[layer], &rep_acts, eps)?;
        Ok(PointDetail {
            point: DiagnosticPoint {
                layer: layer.to_string(),
                s,
                d_raw,
                d_repair,
                rr: rr_ratio(d_repair, d_raw, eps),
            },
            scales,
            pruned_stats,
        })
    }

    fn masked(&self, layer: &str, s: f64) -> Result<(Overlay, crate::net::Conv2d)> {
        if !self.net.prunable().iter().any(|p| p == layer) {
            return Err(Error::UnknownLayer(layer.to_string()));
        }
        let conv = self.net.conv(layer)?;
        let mask = magnitude_mask(layer, &conv.weight, s)?;
        let masked = masked_conv(conv, &mask)?;
        let mut overlay = Overlay::default();
        overlay.insert(layer, Op::Conv2d(masked.clone()));
        Ok((overlay, masked))
    }

    /// Activations at the compare node and at the conv, per calibration batch.
    fn measure(&self, layer: &str, overlay: &Overlay) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let node = self.compare_node(layer);
        let taps: Vec<&str> = if node == layer {
            vec![layer]
        } else {
            vec![layer, node]
        };
        let mut cmp = Vec::new();
        let mut conv = Vec::new();
        for batch in self.calib.batches() {
            let mut r = self.net.run(
                batch,
                &taps,
                RunOptions {
                    overlay: Some(overlay),
                    stop_after: Some(node),
                    ..Default::default()
                },
            )?;
            let c = r.tapped.remove(layer).expect("tapped");
            cmp.push(if node == layer {
                c.clone()
            } else {
                r.tapped.remove(node).expect("tapped")
            });
            conv.push(c);
        }
        Ok((cmp, conv))
    }

    /// Points for every (layer, s) pair, evaluated in parallel; the result
    /// order is `layers × values` regardless of scheduling.
    pub fn points(&self, pairs: &[(String, f64)]) -> Result<Vec<DiagnosticPoint>> {
        pairs.par_iter().map(|(l, s)| self.point(l, *s)).collect()
    }

    /// Complete curves over all prunable layers × `grid`.
    pub fn curves(&self, grid: &[f64]) -> Result<DiagnosticCurves> {
        validate_grid(grid)?;
        let pairs: Vec<(String, f64)> = self
            .net
            .prunable()
            .iter()
            .flat_map(|l| grid.iter().map(move |&s| (l.clone(), s)))
            .collect();
        Ok(DiagnosticCurves {
            grid: grid.to_vec(),
            calib_id: self.calib.id().to_string(),
            points: self.points(&pairs)?,
        })
    }

    /// Adds any (layer, s_ℓ) of `alloc` missing from `curves`. Returns the
    /// number of points computed.
    pub fn fill_allocation(
        &self,
        curves: &mut DiagnosticCurves,
        alloc: &Allocation,
    ) -> Result<usize> {
        let missing: Vec<(String, f64)> = alloc
            .iter()
            .filter(|(l, s)| curves.point(l, *s).is_none())
            .map(|(l, s)| (l.to_string(), s))
            .collect();
        for p in self.points(&missing)? {
            curves.insert(p);
        }
        Ok(missing.len())
    }
}

/// Curves for `net` over `grid` with the post-conv tap.
pub fn build_curves(
    net: &NetworkSpec,
    grid: &[f64],
    calib: &CalibrationSet,
    stream: Vec<Tensor>,
    cfg: &RepairConfig,
) -> Result<DiagnosticCurves> {
    DiagnosticEngine::new(net, calib, stream, cfg, TapPoint::PostConv)?.curves(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distortion_examples() {
        let a = Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap();
        let z = Tensor::zeros(vec![1, 1, 2]);
        assert_eq!(distortion(&a, &a, 1e-8).unwrap(), 0.0);
        assert!((distortion(&a, &z, 1e-12).unwrap() - 1.0).abs() < 1e-9);
        let b = a.scaled(2.0);
        assert!((distortion(&a, &b, 1e-12).unwrap() - 1.0).abs() < 1e-9);
        assert!(distortion(&a, &Tensor::zeros(vec![1, 2, 1]), 1e-8).is_err());
    }

    #[test]
    fn distortion_averages_channels_and_samples() {
        // sample 0: channel distances 1 and 0; sample 1: both 0
        let a = Tensor::new(vec![2, 2, 1], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2, 2, 1], vec![0.0, 1.0, 1.0, 1.0]).unwrap();
        assert!((distortion(&a, &b, 1e-12).unwrap() - 0.25).abs() < 1e-9);
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(rr_ratio(0.3, 0.3, 1e-8), 1.0);
        assert!((rr_ratio(0.0, 1.0, 1e-8) - 1e-8).abs() < 1e-15);
        assert!((rr_ratio(0.2, 0.5, 1e-14) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn grid_validation() {
        assert!(validate_grid(&DEFAULT_GRID).is_ok());
        assert!(validate_grid(&[0.9, 0.8]).is_err());
        assert!(validate_grid(&[0.5, 0.5]).is_err());
        assert!(validate_grid(&[]).is_err());
        assert!(validate_grid(&[1.2]).is_err());
    }

    #[test]
    fn curves_lookup_and_insert() {
        let mut c = DiagnosticCurves {
            grid: vec![0.5],
            calib_id: "x".into(),
            points: vec![],
        };
        assert!(c.validate(&["a".into()]).is_err());
        let p = DiagnosticPoint {
            layer: "a".into(),
            s: 0.5,
            d_raw: 1.0,
            d_repair: 0.5,
            rr: 0.5,
        };
        c.insert(p.clone());
        c.insert(p);
        assert_eq!(c.points.len(), 1);
        assert!(c.validate(&["a".into()]).is_ok());
        assert!(c.point("a", 0.5 + 1e-12).is_some());
        let back = DiagnosticCurves::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
