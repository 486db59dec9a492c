//! Unstructured magnitude masks and global sparsity accounting.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::container::{Container, TensorData};
use crate::error::{Error, Result};
use crate::net::{Conv2d, NetworkSpec, Op, Overlay};
use crate::tensor::Tensor;

/// Binary keep-mask over one layer's weight tensor (1 = kept, 0 = pruned).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub layer: String,
    shape: Vec<usize>,
    bits: Vec<u8>,
}

impl Mask {
    pub fn new(layer: impl Into<String>, shape: Vec<usize>, bits: Vec<u8>) -> Result<Self> {
        let layer = layer.into();
        if shape.iter().product::<usize>() != bits.len() {
            return Err(Error::ShapeMismatch {
                node: layer,
                detail: format!("mask of {} bits cannot have shape {shape:?}", bits.len()),
            });
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidNode {
                node: layer,
                detail: "mask bits must be 0 or 1".into(),
            });
        }
        Ok(Self { layer, shape, bits })
    }

    pub fn ones(layer: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            layer: layer.into(),
            shape,
            bits: vec![1; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn zeros(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 0).count()
    }

    pub fn kept(&self) -> usize {
        self.len() - self.zeros()
    }

    pub fn sparsity(&self) -> f64 {
        self.zeros() as f64 / self.len() as f64
    }

    /// Zeroes the masked entries of `weight`.
    pub fn apply(&self, weight: &mut Tensor) -> Result<()> {
        if weight.shape() != self.shape.as_slice() {
            return Err(Error::ShapeMismatch {
                node: self.layer.clone(),
                detail: format!(
                    "mask shape {:?} != weight shape {:?}",
                    self.shape,
                    weight.shape()
                ),
            });
        }
        for (w, &b) in weight.data_mut().iter_mut().zip(&self.bits) {
            if b == 0 {
                *w = 0.0;
            }
        }
        Ok(())
    }
}

/// Masks keyed by layer name, in prunable order.
pub type MaskSet = IndexMap<String, Mask>;

/// Per-layer sparsity assignment, serialized as `{layer: sparsity}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Allocation {
    pub entries: IndexMap<String, f64>,
}

impl Allocation {
    pub fn new(entries: IndexMap<String, f64>) -> Result<Self> {
        for &s in entries.values() {
            check_sparsity(s)?;
        }
        Ok(Self { entries })
    }

    pub fn get(&self, layer: &str) -> Option<f64> {
        self.entries.get(layer).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.entries.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Checks that every prunable layer of `net` is present exactly once.
    pub fn validate_for(&self, net: &NetworkSpec) -> Result<()> {
        for layer in self.entries.keys() {
            if !net.prunable().contains(layer) {
                return Err(Error::UnknownLayer(layer.clone()));
            }
        }
        if let Some(missing) = net
            .prunable()
            .iter()
            .find(|p| !self.entries.contains_key(*p))
        {
            return Err(Error::Config(format!(
                "allocation has no entry for `{missing}`"
            )));
        }
        Ok(())
    }

    /// Realized per-layer sparsities of a mask set.
    pub fn from_masks(masks: &MaskSet) -> Self {
        Self {
            entries: masks
                .iter()
                .map(|(k, m)| (k.clone(), m.sparsity()))
                .collect(),
        }
    }
}

pub(crate) fn check_sparsity(s: f64) -> Result<()> {
    if (0.0..=1.0).contains(&s) {
        Ok(())
    } else {
        Err(Error::InvalidSparsity(s))
    }
}

/// `floor(s · n)`, with a relative guard of 1e-12 so products such as
/// `0.29 · 100 = 28.999…` land on the intended integer.
pub fn prune_count(s: f64, n: usize) -> usize {
    let x = s * n as f64;
    ((x * (1.0 + 1e-12)).floor() as usize).min(n)
}

/// Prunes the `floor(s · n)` smallest-magnitude weights; ties go to the
/// lower flat index first.
pub fn magnitude_mask(layer: &str, weight: &Tensor, s: f64) -> Result<Mask> {
    check_sparsity(s)?;
    let data = weight.data();
    let k = prune_count(s, data.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&a, &b| data[a].abs().total_cmp(&data[b].abs()));
    let mut bits = vec![1u8; data.len()];
    for &i in &order[..k] {
        bits[i] = 0;
    }
    Mask::new(layer, weight.shape().to_vec(), bits)
}

/// One magnitude threshold over all prunable layers pooled together.
///
/// Exactly `floor(S · Σ n_ℓ)` weights are removed. Ties are broken by
/// prunable-layer order, then flat index.
pub fn global_magnitude_mask(net: &NetworkSpec, target: f64) -> Result<MaskSet> {
    check_sparsity(target)?;
    let layers: Vec<(&String, &Conv2d)> = net
        .prunable()
        .iter()
        .map(|p| net.conv(p).map(|c| (p, c)))
        .collect::<Result<_>>()?;
    let mut pool: Vec<(f32, usize, usize)> = Vec::new();
    for (li, (_, conv)) in layers.iter().enumerate() {
        pool.extend(
            conv.weight
                .data()
                .iter()
                .enumerate()
                .map(|(i, w)| (w.abs(), li, i)),
        );
    }
    let k = prune_count(target, pool.len());
    pool.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut bits: Vec<Vec<u8>> = layers
        .iter()
        .map(|(_, c)| vec![1u8; c.param_count()])
        .collect();
    for &(_, li, i) in &pool[..k] {
        bits[li][i] = 0;
    }
    layers
        .iter()
        .zip(bits)
        .map(|((name, conv), b)| {
            Ok((
                (*name).clone(),
                Mask::new(name.as_str(), conv.weight.shape().to_vec(), b)?,
            ))
        })
        .collect()
}

/// Magnitude masks realizing a per-layer allocation.
pub fn masks_for_allocation(net: &NetworkSpec, alloc: &Allocation) -> Result<MaskSet> {
    alloc
        .iter()
        .map(|(layer, s)| {
            let conv = net.conv(layer)?;
            Ok((layer.to_string(), magnitude_mask(layer, &conv.weight, s)?))
        })
        .collect()
}

/// Conv with masked weights zeroed.
pub(crate) fn masked_conv(conv: &Conv2d, mask: &Mask) -> Result<Conv2d> {
    let mut out = conv.clone();
    mask.apply(&mut out.weight)?;
    Ok(out)
}

/// Overlay replacing every masked layer with its masked weights.
pub(crate) fn mask_overlay(net: &NetworkSpec, masks: &MaskSet) -> Result<Overlay> {
    let mut overlay = Overlay::default();
    for (layer, mask) in masks {
        if !net.prunable().contains(layer) {
            return Err(Error::UnknownLayer(layer.clone()));
        }
        overlay.insert(layer, Op::Conv2d(masked_conv(net.conv(layer)?, mask)?));
    }
    Ok(overlay)
}

/// Copy of `net` with masked weights zeroed; `net` is left untouched.
pub fn apply_masks(net: &NetworkSpec, masks: &MaskSet) -> Result<NetworkSpec> {
    mask_overlay(net, masks)?.materialize(net)
}

/// Achieved global sparsity `Σ n_ℓ s_ℓ / Σ n_ℓ`.
pub fn global_sparsity(alloc: &Allocation, counts: &IndexMap<String, usize>) -> Result<f64> {
    if alloc.is_empty() {
        return Err(Error::Empty("allocation"));
    }
    let pairs = alloc
        .iter()
        .map(|(layer, s)| {
            let n = *counts
                .get(layer)
                .ok_or_else(|| Error::UnknownLayer(layer.to_string()))?;
            if n == 0 {
                return Err(Error::Config(format!(
                    "layer `{layer}` has no prunable parameters"
                )));
            }
            Ok((n, s))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(weighted_sparsity(&pairs))
}

/// `Σ n s / Σ n`, evaluated as `s_0 + Σ n (s − s_0) / Σ n` so equal
/// sparsities give back exactly that sparsity.
pub(crate) fn weighted_sparsity(pairs: &[(usize, f64)]) -> f64 {
    let s0 = pairs[0].1;
    let total: usize = pairs.iter().map(|p| p.0).sum();
    let dev: f64 = pairs.iter().map(|&(n, s)| n as f64 * (s - s0)).sum();
    s0 + dev / total as f64
}

/// Fraction of zeros across a mask set.
pub fn mask_sparsity(masks: &MaskSet) -> f64 {
    let zeros: usize = masks.values().map(Mask::zeros).sum();
    let total: usize = masks.values().map(Mask::len).sum();
    if total == 0 {
        0.0
    } else {
        zeros as f64 / total as f64
    }
}

/// Adds masks to a container as `u8` tensors named `mask/<layer>`.
pub fn masks_into_container(masks: &MaskSet, c: &mut Container) {
    for (layer, m) in masks {
        c.tensors.insert(
            format!("mask/{layer}"),
            TensorData::U8 {
                shape: m.shape.clone(),
                data: m.bits.clone(),
            },
        );
    }
}

pub fn masks_from_container(c: &Container) -> Result<MaskSet> {
    let mut out = MaskSet::new();
    for (name, t) in &c.tensors {
        if let Some(layer) = name.strip_prefix("mask/") {
            match t {
                TensorData::U8 { shape, data } => {
                    out.insert(
                        layer.to_string(),
                        Mask::new(layer, shape.clone(), data.clone())?,
                    );
                }
                TensorData::F32(_) => {
                    return Err(Error::PayloadMismatch {
                        name: name.clone(),
                        detail: "masks are stored as u8".into(),
                    })
                }
            }
        }
    }
    Ok(out)
}
