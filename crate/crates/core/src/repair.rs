//! CR+BN: shrinkage-stabilized channelwise variance matching followed by
//! BatchNorm running-statistics recalibration.

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{mask_overlay, MaskSet};
use crate::net::forward::RunOptions;
use crate::net::{Conv2d, NetworkSpec, Op, Overlay};
use crate::tensor::{channel_stats_many, ChannelStats, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RepairConfig {
    pub epsilon: f64,
    pub bn_batches: usize,
    pub bn_batch_size: usize,
    pub bn_momentum: f64,
    /// Replaces the median-variance estimate of τ for every layer.
    pub tau_override: Option<f64>,
    /// Scale conv biases together with their filters.
    pub scale_bias: bool,
}

impl Default for RepairConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-8,
            bn_batches: 20,
            bn_batch_size: 128,
            bn_momentum: 0.1,
            tau_override: None,
            scale_bias: true,
        }
    }
}

impl RepairConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad("epsilon must be positive");
        }
        if self.bn_batches == 0 || self.bn_batch_size == 0 {
            return bad("BN recalibration needs at least one non-empty batch");
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return bad("bn_momentum must lie in (0, 1]");
        }
        if matches!(self.tau_override, Some(t) if t.is_nan() || t < 0.0) {
            return bad("tau_override must be nonnegative");
        }
        Ok(())
    }
}

/// Per-channel repair quantities for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairScales {
    pub layer: String,
    pub gamma: Vec<f64>,
    pub lambda: Vec<f64>,
    pub r: Vec<f64>,
    pub tau: f64,
}

/// Plain variance-matching multiplier `sqrt((vd + ε) / (vp + ε))`.
pub fn direct_scale(var_dense: f64, var_pruned: f64, epsilon: f64) -> f64 {
    ((var_dense + epsilon) / (var_pruned + epsilon)).sqrt()
}

/// Returns `(γ, λ, r)`: the log-variance correction `r` attenuated by the
/// reliability weight `λ = vp / (vp + τ)`. A collapsed channel (`vp = 0`)
/// gets `λ = 0` and is left untouched, including when `τ = 0`.
pub fn shrinkage_scale(var_dense: f64, var_pruned: f64, tau: f64, epsilon: f64) -> (f64, f64, f64) {
    let r = (var_dense + epsilon).ln() - (var_pruned + epsilon).ln();
    let denom = var_pruned + tau;
    let lambda = if denom > 0.0 { var_pruned / denom } else { 0.0 };
    ((0.5 * lambda * r).exp(), lambda, r)
}

/// Median of the layer's post-pruning channel variances.
pub fn estimate_tau(pruned_vars: &[f64]) -> Result<f64> {
    if pruned_vars.is_empty() {
        return Err(Error::Empty("channel variance list"));
    }
    let mut v = pruned_vars.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Ok(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

/// Scales for one layer from its dense and pruned channel statistics.
pub fn repair_scales(
    layer: &str,
    dense: &ChannelStats,
    pruned: &ChannelStats,
    cfg: &RepairConfig,
) -> Result<RepairScales> {
    if dense.var.len() != pruned.var.len() {
        return Err(Error::ShapeMismatch {
            node: layer.to_string(),
            detail: format!(
                "{} dense vs {} pruned channels",
                dense.var.len(),
                pruned.var.len()
            ),
        });
    }
    let tau = match cfg.tau_override {
        Some(t) => t,
        None => estimate_tau(&pruned.var)?,
    };
    let mut out = RepairScales {
        layer: layer.to_string(),
        gamma: Vec::with_capacity(dense.var.len()),
        lambda: Vec::with_capacity(dense.var.len()),
        r: Vec::with_capacity(dense.var.len()),
        tau,
    };
    for (&vd, &vp) in dense.var.iter().zip(&pruned.var) {
        let (g, l, r) = shrinkage_scale(vd, vp, tau, cfg.epsilon);
        out.gamma.push(g);
        out.lambda.push(l);
        out.r.push(r);
    }
    Ok(out)
}

/// Multiplies each output filter (and optionally its bias) by `γ_c`.
pub fn scale_conv(conv: &Conv2d, scales: &RepairScales, scale_bias: bool) -> Result<Conv2d> {
    if scales.gamma.len() != conv.out_ch {
        return Err(Error::ShapeMismatch {
            node: scales.layer.clone(),
            detail: format!(
                "{} scales for {} output channels",
                scales.gamma.len(),
                conv.out_ch
            ),
        });
    }
    let mut out = conv.clone();
    let per_filter = conv.in_ch * conv.kh * conv.kw;
    for (filter, &g) in out
        .weight
        .data_mut()
        .chunks_exact_mut(per_filter)
        .zip(&scales.gamma)
    {
        filter.iter_mut().for_each(|w| *w = (*w as f64 * g) as f32);
    }
    if scale_bias {
        if let Some(bias) = &mut out.bias {
            bias.iter_mut()
                .zip(&scales.gamma)
                .for_each(|(b, &g)| *b = (*b as f64 * g) as f32);
        }
    }
    Ok(out)
}

/// Channel statistics at each of `layers` pooled over `calib`.
pub(crate) fn collect_stats(
    net: &NetworkSpec,
    overlay: Option<&Overlay>,
    layers: &[&str],
    calib: &[Tensor],
) -> Result<IndexMap<String, ChannelStats>> {
    if calib.is_empty() {
        return Err(Error::Empty("calibration set"));
    }
    let stop = layers
        .iter()
        .max_by_key(|l| net.node_index(l).unwrap_or(usize::MAX))
        .copied();
    let mut acts: IndexMap<String, Vec<Tensor>> =
        layers.iter().map(|l| (l.to_string(), Vec::new())).collect();
    for batch in calib {
        let r = net.run(
            batch,
            layers,
            RunOptions {
                overlay,
                stop_after: stop,
                ..Default::default()
            },
        )?;
        for (name, t) in r.tapped {
            acts[&name].push(t);
        }
    }
    acts.into_iter()
        .map(|(k, v)| Ok((k, channel_stats_many(&v)?)))
        .collect()
}

/// Repair overlay for `masks`, layer by layer in topological order. Pruned
/// statistics of each layer are measured with every earlier layer already
/// repaired.
pub(crate) fn repair_overlay(
    net: &NetworkSpec,
    masks: &MaskSet,
    calib: &[Tensor],
    dense: &IndexMap<String, ChannelStats>,
    cfg: &RepairConfig,
) -> Result<(Overlay, IndexMap<String, RepairScales>)> {
    let mut overlay = mask_overlay(net, masks)?;
    let mut order: Vec<&String> = masks.keys().collect();
    order.sort_by_key(|l| net.node_index(l));
    let mut scales = IndexMap::new();
    for layer in order {
        let pruned = collect_stats(net, Some(&overlay), &[layer], calib)?;
        let d = dense
            .get(layer)
            .ok_or_else(|| Error::Config(format!("no dense statistics for `{layer}`")))?;
        let sc = repair_scales(layer, d, &pruned[layer.as_str()], cfg)?;
        let masked = match overlay.get(layer) {
            Some(Op::Conv2d(c)) => c.clone(),
            _ => unreachable!("mask overlay holds a conv for every masked layer"),
        };
        overlay.insert(layer, Op::Conv2d(scale_conv(&masked, &sc, cfg.scale_bias)?));
        scales.insert(layer.clone(), sc);
    }
    Ok((overlay, scales))
}

/// Folds batch statistics from `stream` into every BatchNorm reached
/// (up to `stop_after`), returning `base` extended with the updated nodes.
///
/// Batches are independent in batch-statistics mode, so they are evaluated
/// in parallel and folded in stream order.
pub(crate) fn recal_overlay(
    net: &NetworkSpec,
    base: &Overlay,
    stream: &[Tensor],
    momentum: f64,
    stop_after: Option<&str>,
) -> Result<Overlay> {
    if stream.is_empty() {
        return Err(Error::Empty("BN recalibration stream"));
    }
    let per_batch: Vec<_> = stream
        .par_iter()
        .map(|b| {
            net.run(
                b,
                &[],
                RunOptions {
                    overlay: Some(base),
                    batch_stats: true,
                    stop_after,
                    need_output: stop_after.is_none(),
                },
            )
            .map(|r| r.bn_stats)
        })
        .collect::<Result<_>>()?;
    let mut updated: IndexMap<String, crate::net::BatchNorm> = IndexMap::new();
    for stats in per_batch {
        for st in stats {
            let bn = match updated.get_mut(&st.node) {
                Some(bn) => bn,
                None => {
                    let Some(Op::BatchNorm(bn)) = base.op(net, &st.node) else {
                        unreachable!("batch stats come from BatchNorm nodes")
                    };
                    updated.entry(st.node.clone()).or_insert_with(|| bn.clone())
                }
            };
            let ema = |run: &mut f32, b: f64| {
                *run = ((1.0 - momentum) * *run as f64 + momentum * b) as f32
            };
            bn.running_mean
                .iter_mut()
                .zip(&st.mean)
                .for_each(|(r, &b)| ema(r, b));
            bn.running_var
                .iter_mut()
                .zip(&st.var)
                .for_each(|(r, &b)| ema(r, b));
        }
    }
    let mut out = base.clone();
    for (name, bn) in updated {
        out.insert(&name, Op::BatchNorm(bn));
    }
    Ok(out)
}

/// Re-estimates BatchNorm running statistics by exponential moving average
/// over `stream`, which must hold exactly `cfg.bn_batches` batches.
pub fn bn_recalibrate(
    net: &NetworkSpec,
    stream: &[Tensor],
    cfg: &RepairConfig,
) -> Result<NetworkSpec> {
    cfg.validate()?;
    check_stream(stream, cfg)?;
    recal_overlay(net, &Overlay::default(), stream, cfg.bn_momentum, None)?.materialize(net)
}

fn check_stream(stream: &[Tensor], cfg: &RepairConfig) -> Result<()> {
    if stream.is_empty() {
        return Err(Error::Empty("BN recalibration stream"));
    }
    if stream.len() != cfg.bn_batches {
        return Err(Error::Config(format!(
            "BN stream has {} batches, config expects {}",
            stream.len(),
            cfg.bn_batches
        )));
    }
    Ok(())
}

/// Rescales every masked layer; dense statistics come from the unmasked net.
pub fn channelwise_repair(
    net: &NetworkSpec,
    masks: &MaskSet,
    calib: &[Tensor],
    cfg: &RepairConfig,
) -> Result<(NetworkSpec, IndexMap<String, RepairScales>)> {
    cfg.validate()?;
    let layers: Vec<&str> = masks.keys().map(String::as_str).collect();
    let dense = if layers.is_empty() {
        IndexMap::new()
    } else {
        collect_stats(net, None, &layers, calib)?
    };
    let (overlay, scales) = repair_overlay(net, masks, calib, &dense, cfg)?;
    Ok((overlay.materialize(net)?, scales))
}

/// A masked network after CR+BN.
#[derive(Debug, Clone)]
pub struct Repaired {
    pub net: NetworkSpec,
    pub scales: IndexMap<String, RepairScales>,
}

/// Channelwise repair on `calib`, then BN recalibration on `stream`.
pub fn cr_bn(
    net: &NetworkSpec,
    masks: &MaskSet,
    calib: &[Tensor],
    stream: &[Tensor],
    cfg: &RepairConfig,
) -> Result<Repaired> {
    cfg.validate()?;
    check_stream(stream, cfg)?;
    let layers: Vec<&str> = masks.keys().map(String::as_str).collect();
    let dense = if layers.is_empty() {
        IndexMap::new()
    } else {
        collect_stats(net, None, &layers, calib)?
    };
    let (overlay, scales) = repair_overlay(net, masks, calib, &dense, cfg)?;
    let overlay = recal_overlay(net, &overlay, stream, cfg.bn_momentum, None)?;
    Ok(Repaired {
        net: overlay.materialize(net)?,
        scales,
    })
}

/// BN recalibration of a masked net without channelwise rescaling.
pub fn bn_only(
    net: &NetworkSpec,
    masks: &MaskSet,
    stream: &[Tensor],
    cfg: &RepairConfig,
) -> Result<NetworkSpec> {
    cfg.validate()?;
    check_stream(stream, cfg)?;
    let overlay = mask_overlay(net, masks)?;
    recal_overlay(net, &overlay, stream, cfg.bn_momentum, None)?.materialize(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::magnitude_mask;
    use crate::net::{BatchNorm, LayerNode, INPUT};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(
            shape,
            (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        )
        .unwrap()
    }

    fn conv(weight: Tensor, bias: Option<Vec<f32>>) -> Conv2d {
        let s = weight.shape().to_vec();
        Conv2d {
            out_ch: s[0],
            in_ch: s[1],
            kh: s[2],
            kw: s[3],
            stride: 1,
            padding: 1,
            weight,
            bias,
        }
    }

    fn linear_conv_net(seed: u64) -> NetworkSpec {
        let c = conv(
            random_tensor(vec![4, 3, 3, 3], seed),
            Some(vec![0.1, -0.2, 0.3, 0.0]),
        );
        NetworkSpec::new(
            vec![LayerNode::new("conv", Op::Conv2d(c), &[INPUT])],
            vec![3, 6, 6],
            vec!["conv".into()],
            None,
        )
        .unwrap()
    }

    fn conv_bn_net(seed: u64) -> NetworkSpec {
        let c1 = conv(random_tensor(vec![4, 3, 3, 3], seed), None);
        let c2 = conv(random_tensor(vec![4, 4, 3, 3], seed + 1), None);
        let nodes = vec![
            LayerNode::new("c1", Op::Conv2d(c1), &[INPUT]),
            LayerNode::new("bn1", Op::BatchNorm(BatchNorm::identity(4)), &["c1"]),
            LayerNode::new("relu", Op::Relu, &["bn1"]),
            LayerNode::new("c2", Op::Conv2d(c2), &["relu"]),
            LayerNode::new("bn2", Op::BatchNorm(BatchNorm::identity(4)), &["c2"]),
        ];
        NetworkSpec::new(nodes, vec![3, 6, 6], vec!["c1".into(), "c2".into()], None).unwrap()
    }

    fn calib(seed: u64) -> Vec<Tensor> {
        vec![
            random_tensor(vec![8, 3, 6, 6], seed),
            random_tensor(vec![8, 3, 6, 6], seed + 100),
        ]
    }

    #[test]
    fn direct_scale_examples() {
        assert_eq!(direct_scale(2.5, 2.5, 1e-8), 1.0);
        assert!((direct_scale(4.0, 1.0, 1e-12) - 2.0).abs() < 1e-9);
        assert!((direct_scale(1.0, 0.0, 1e-8) - 1e4).abs() < 1e-3);
    }

    #[test]
    fn shrinkage_examples() {
        let (g, l, r) = shrinkage_scale(4.0, 1.0, 1.0, 1e-12);
        assert!((l - 0.5).abs() < 1e-12);
        assert!((r - 4f64.ln()).abs() < 1e-9);
        assert!((g - 2f64.sqrt()).abs() < 1e-9);
        assert_eq!(
            shrinkage_scale(1.0, 0.0, 0.5, 1e-8),
            (1.0, 0.0, shrinkage_scale(1.0, 0.0, 0.5, 1e-8).2)
        );
        assert_eq!(shrinkage_scale(1.0, 0.0, 0.0, 1e-8).0, 1.0);
        let (g, _, _) = shrinkage_scale(3.0, 0.7, 0.0, 1e-8);
        assert!((g - direct_scale(3.0, 0.7, 1e-8)).abs() < 1e-12);
    }

    #[test]
    fn tau_median() {
        assert_eq!(estimate_tau(&[0.0, 1.0, 4.0]).unwrap(), 1.0);
        assert_eq!(estimate_tau(&[2.0; 5]).unwrap(), 2.0);
        assert_eq!(estimate_tau(&[0.0; 3]).unwrap(), 0.0);
        assert_eq!(estimate_tau(&[4.0, 1.0, 3.0, 0.0]).unwrap(), 2.0);
        assert!(estimate_tau(&[]).is_err());
    }

    #[test]
    fn no_mask_means_unit_scales() {
        let net = linear_conv_net(1);
        let mut masks = MaskSet::new();
        masks.insert(
            "conv".into(),
            magnitude_mask("conv", &net.conv("conv").unwrap().weight, 0.0).unwrap(),
        );
        let (out, scales) =
            channelwise_repair(&net, &masks, &calib(2), &RepairConfig::default()).unwrap();
        assert!(scales["conv"].gamma.iter().all(|&g| g == 1.0));
        assert_eq!(out, net);
    }

    #[test]
    fn variance_matching_with_zero_tau() {
        let net = linear_conv_net(3);
        let data = calib(4);
        let mut masks = MaskSet::new();
        masks.insert(
            "conv".into(),
            magnitude_mask("conv", &net.conv("conv").unwrap().weight, 0.5).unwrap(),
        );
        let cfg = RepairConfig {
            tau_override: Some(0.0),
            ..Default::default()
        };
        let (repaired, _) = channelwise_repair(&net, &masks, &data, &cfg).unwrap();
        let dense = collect_stats(&net, None, &["conv"], &data).unwrap();
        let after = collect_stats(&repaired, None, &["conv"], &data).unwrap();
        for (vd, va) in dense["conv"].var.iter().zip(&after["conv"].var) {
            assert!((vd - va).abs() <= 1e-4 * vd, "{vd} vs {va}");
        }
        // pruned weights stay zero
        let m = &masks["conv"];
        for (w, &b) in repaired
            .conv("conv")
            .unwrap()
            .weight
            .data()
            .iter()
            .zip(m.bits())
        {
            if b == 0 {
                assert_eq!(*w, 0.0);
            }
        }
    }

    #[test]
    fn fully_pruned_channel_keeps_bias() {
        let net = linear_conv_net(5);
        let w = &net.conv("conv").unwrap().weight;
        let per = 27;
        let mut bits = vec![1u8; w.len()];
        bits[..per].iter_mut().for_each(|b| *b = 0);
        let mut masks = MaskSet::new();
        masks.insert(
            "conv".into(),
            crate::masking::Mask::new("conv", w.shape().to_vec(), bits).unwrap(),
        );
        let data = calib(6);
        let (repaired, scales) =
            channelwise_repair(&net, &masks, &data, &RepairConfig::default()).unwrap();
        assert_eq!(scales["conv"].gamma[0], 1.0);
        assert_eq!(scales["conv"].lambda[0], 0.0);
        let out = repaired.forward(&data[0], &["conv"]).unwrap();
        let plane = &out.tapped["conv"].data()[..36];
        assert!(plane.iter().all(|&v| v == 0.1));
    }

    #[test]
    fn ema_closed_form() {
        // every batch has identical per-channel statistics
        let mut bn = BatchNorm::identity(2);
        bn.running_mean = vec![0.0, 0.0];
        let nodes = vec![LayerNode::new("bn", Op::BatchNorm(bn), &[INPUT])];
        let net = NetworkSpec::new(nodes, vec![2, 2, 2], vec![], None).unwrap();
        let batch = Tensor::new(
            vec![2, 2, 2, 2],
            vec![
                1.0, 3.0, 1.0, 3.0, 0.0, 0.0, 0.0, 0.0, 1.0, 3.0, 1.0, 3.0, 4.0, 4.0, 4.0, 4.0,
            ],
        )
        .unwrap();
        // channel 0: {1,3} mean 2 var 1; channel 1: {0,4} mean 2 var 4
        let n = 20;
        let cfg = RepairConfig {
            bn_batches: n,
            ..Default::default()
        };
        let out = bn_recalibrate(&net, &vec![batch.clone(); n], &cfg).unwrap();
        let Op::BatchNorm(bn) = &out.node("bn").unwrap().op else {
            panic!()
        };
        let f = 1.0 - 0.9f64.powi(n as i32);
        for (got, want) in bn.running_mean.iter().zip([2.0 * f, 2.0 * f]) {
            assert!((*got as f64 - want).abs() < 1e-5);
        }
        // running_var starts at 1
        for (got, want) in bn.running_var.iter().zip([1.0 - f + f, 1.0 - f + 4.0 * f]) {
            assert!((*got as f64 - want).abs() < 1e-5);
        }

        let one = RepairConfig {
            bn_batches: 1,
            bn_momentum: 1.0,
            ..Default::default()
        };
        let out = bn_recalibrate(&net, &[batch], &one).unwrap();
        let Op::BatchNorm(bn) = &out.node("bn").unwrap().op else {
            panic!()
        };
        assert_eq!(bn.running_mean, vec![2.0, 2.0]);
        assert_eq!(bn.running_var, vec![1.0, 4.0]);
    }

    #[test]
    fn stream_length_is_checked() {
        let net = conv_bn_net(7);
        let cfg = RepairConfig {
            bn_batches: 3,
            ..Default::default()
        };
        assert!(bn_recalibrate(&net, &calib(1), &cfg).is_err());
        assert!(bn_recalibrate(&net, &[], &cfg).is_err());
    }

    #[test]
    fn cr_bn_preserves_mask_and_differs_from_bn_only() {
        let net = conv_bn_net(9);
        let data = calib(10);
        let stream = calib(11);
        let cfg = RepairConfig {
            bn_batches: 2,
            ..Default::default()
        };
        let mut masks = MaskSet::new();
        for l in ["c1", "c2"] {
            masks.insert(
                l.into(),
                magnitude_mask(l, &net.conv(l).unwrap().weight, 0.8).unwrap(),
            );
        }
        let rep = cr_bn(&net, &masks, &data, &stream, &cfg).unwrap();
        for (l, m) in &masks {
            for (w, &b) in rep.net.conv(l).unwrap().weight.data().iter().zip(m.bits()) {
                assert!(b == 1 || *w == 0.0);
            }
        }
        assert!(rep
            .scales
            .values()
            .any(|s| s.gamma.iter().any(|&g| g != 1.0)));
        let bn = bn_only(&net, &masks, &stream, &cfg).unwrap();
        assert_ne!(bn, rep.net);
        // recalibration saw the rescaled weights
        let (cr, _) = channelwise_repair(&net, &masks, &data, &cfg).unwrap();
        assert_eq!(bn_recalibrate(&cr, &stream, &cfg).unwrap(), rep.net);
    }

    #[test]
    fn empty_masks_only_refresh_bn() {
        let net = conv_bn_net(12);
        let cfg = RepairConfig {
            bn_batches: 2,
            ..Default::default()
        };
        let stream = calib(13);
        let rep = cr_bn(&net, &MaskSet::new(), &calib(14), &stream, &cfg).unwrap();
        assert_eq!(rep.net, bn_recalibrate(&net, &stream, &cfg).unwrap());
        assert!(rep.scales.is_empty());
    }

    #[test]
    fn scales_serialize() {
        let s = RepairScales {
            layer: "c".into(),
            gamma: vec![1.5],
            lambda: vec![0.5],
            r: vec![0.2],
            tau: 0.1,
        };
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<RepairScales>(&json).unwrap(), s);
    }
}
