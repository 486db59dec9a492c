//! Dense row-major `f32` tensors and per-channel activation statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense N-dimensional array of `f32`, row-major with the outermost dim first.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidTensor(format!(
                "dims must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Elementwise scalar multiple.
    pub fn scaled(&self, alpha: f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows `[start, end)` of the leading (batch) dimension.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Tensor> {
        let n = *self.shape.first().ok_or(Error::Empty("tensor"))?;
        if start >= end || end > n {
            return Err(Error::InvalidTensor(format!(
                "batch slice {start}..{end} out of range for batch {n}"
            )));
        }
        let row: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor {
            shape,
            data: self.data[start * row..end * row].to_vec(),
        })
    }

    /// Concatenates tensors along the leading dimension.
    pub fn concat_batch(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::Empty("tensor list"))?;
        let tail = &first.shape[1..];
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::InvalidTensor(format!(
                    "cannot concatenate {:?} with {:?}",
                    p.shape, first.shape
                )));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Ok(Tensor { shape, data })
    }
}

/// Per-channel mean and population variance of an activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Samples per channel (batch × spatial positions).
    pub count: usize,
}

/// Per-channel statistics of a `[N, C, H, W]` or `[N, C]` activation.
pub fn channel_stats(activation: &Tensor) -> Result<ChannelStats> {
    channel_stats_many(std::slice::from_ref(activation))
}

/// Per-channel statistics pooled over several batches of the same layout.
///
/// Two passes in `f64`: mean first, then the centred sum of squares.
pub fn channel_stats_many(batches: &[Tensor]) -> Result<ChannelStats> {
    let first = batches.first().ok_or(Error::Empty("activation batch"))?;
    let (channels, spatial) = channel_layout(first)?;
    let mut count = 0usize;
    let mut sum = vec![0.0f64; channels];
    for t in batches {
        let (c, hw) = channel_layout(t)?;
        if c != channels || hw != spatial {
            return Err(Error::InvalidTensor(format!(
                "inconsistent activation layouts {:?} and {:?}",
                first.shape(),
                t.shape()
            )));
        }
        for (i, plane) in t.data().chunks_exact(hw).enumerate() {
            sum[i % c] += plane.iter().map(|&v| v as f64).sum::<f64>();
        }
        count += t.shape()[0] * hw;
    }
    if count == 0 {
        return Err(Error::Empty("activation batch"));
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0.0f64; channels];
    for t in batches {
        for (i, plane) in t.data().chunks_exact(spatial).enumerate() {
            let m = mean[i % channels];
            sq[i % channels] += plane
                .iter()
                .map(|&v| {
                    let d = v as f64 - m;
                    d * d
                })
                .sum::<f64>();
        }
    }
    let var = sq.iter().map(|s| s / count as f64).collect();
    Ok(ChannelStats { mean, var, count })
}

/// `(channels, spatial size)` for `[N, C, H, W]` or `[N, C]` tensors.
pub(crate) fn channel_layout(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [_, c, h, w] => Ok((*c, h * w)),
        [_, c] => Ok((*c, 1)),
        other => Err(Error::InvalidTensor(format!(
            "expected [N, C, H, W] or [N, C] activation, got {other:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_shape_data_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn constant_tensor_stats() {
        let t = Tensor::full(vec![2, 3, 2, 2], 3.0);
        let s = channel_stats(&t).unwrap();
        assert_eq!(s.mean, vec![3.0; 3]);
        assert_eq!(s.var, vec![0.0; 3]);
        assert_eq!(s.count, 8);
    }

    #[test]
    fn two_value_channel() {
        let t = Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        let s = channel_stats(&t).unwrap();
        assert_eq!(s.mean, vec![2.0]);
        assert_eq!(s.var, vec![1.0]);
    }

    #[test]
    fn symmetric_channels_match() {
        // channel 1 is a copy of channel 0
        let plane = [0.5f32, -1.0, 2.0, 4.0];
        let mut data = Vec::new();
        for _ in 0..3 {
            data.extend_from_slice(&plane);
            data.extend_from_slice(&plane);
        }
        let t = Tensor::new(vec![3, 2, 2, 2], data).unwrap();
        let s = channel_stats(&t).unwrap();
        assert_eq!(s.mean[0], s.mean[1]);
        assert_eq!(s.var[0], s.var[1]);
    }

    #[test]
    fn pooled_batches_equal_concatenation() {
        let a = Tensor::new(vec![1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(
            vec![2, 2, 1, 2],
            vec![5.0, 6.0, 7.0, 8.0, 9.0, 0.0, 1.0, 2.0],
        )
        .unwrap();
        let pooled = channel_stats_many(&[a.clone(), b.clone()]).unwrap();
        let cat = channel_stats(&Tensor::concat_batch(&[a, b]).unwrap()).unwrap();
        assert_eq!(pooled, cat);
    }

    #[test]
    fn bad_layout_is_rejected() {
        let t = Tensor::zeros(vec![4]);
        assert!(channel_stats(&t).is_err());
        assert!(channel_stats_many(&[]).is_err());
    }
}
