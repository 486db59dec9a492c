use std::collections::BTreeMap;

use super::{kernels, NetworkSpec, Op, Overlay, INPUT};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Final output plus the raw activation of every tapped node.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub output: Tensor,
    pub tapped: BTreeMap<String, Tensor>,
}

/// Batch statistics observed at one BatchNorm node in training mode.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub node: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct RunOptions<'a> {
    pub overlay: Option<&'a Overlay>,
    /// Normalize with batch statistics and report them (BN recalibration).
    pub batch_stats: bool,
    /// Stop once this node and all taps have been computed.
    pub stop_after: Option<&'a str>,
    pub need_output: bool,
}

#[derive(Debug, Default)]
pub(crate) struct RunResult {
    pub output: Option<Tensor>,
    pub tapped: BTreeMap<String, Tensor>,
    pub bn_stats: Vec<BnBatchStats>,
}

impl NetworkSpec {
    /// Runs the network on `batch` (`[N, ..input_shape]`), returning the final
    /// output and the activation of each node named in `taps`.
    ///
    /// A tapped Conv2d yields the convolution output before any following
    /// BatchNorm or ReLU.
    pub fn forward(&self, batch: &Tensor, taps: &[&str]) -> Result<ForwardOutput> {
        self.forward_with(None, batch, taps)
    }

    /// Like [`forward`](Self::forward), with parameter replacements applied.
    pub fn forward_with(
        &self,
        overlay: Option<&Overlay>,
        batch: &Tensor,
        taps: &[&str],
    ) -> Result<ForwardOutput> {
        let r = self.run(
            batch,
            taps,
            RunOptions {
                overlay,
                need_output: true,
                ..Default::default()
            },
        )?;
        Ok(ForwardOutput {
            output: r.output.expect("output requested"),
            tapped: r.tapped,
        })
    }

    pub(crate) fn run(
        &self,
        batch: &Tensor,
        taps: &[&str],
        opts: RunOptions<'_>,
    ) -> Result<RunResult> {
        if batch.ndim() != self.input_shape.len() + 1 || batch.shape()[1..] != self.input_shape[..]
        {
            return Err(Error::ShapeMismatch {
                node: INPUT.to_string(),
                detail: format!(
                    "batch shape {:?} does not match input shape {:?}",
                    batch.shape(),
                    self.input_shape
                ),
            });
        }
        let mut tap_idx = Vec::with_capacity(taps.len());
        for t in taps {
            tap_idx.push(
                self.node_index(t)
                    .ok_or_else(|| Error::UnknownLayer(t.to_string()))?,
            );
        }
        let last = self.nodes.len() - 1;
        let mut end = tap_idx.iter().copied().max().unwrap_or(0);
        if let Some(stop) = opts.stop_after {
            end = end.max(
                self.node_index(stop)
                    .ok_or_else(|| Error::UnknownLayer(stop.to_string()))?,
            );
        }
        if opts.need_output || (taps.is_empty() && opts.stop_after.is_none()) {
            end = last;
        }

        // index of the last node (within 0..=end) reading each node's output
        let mut last_use = vec![0usize; end + 1];
        for (i, node) in self.nodes[..=end].iter().enumerate() {
            for inp in &node.inputs {
                if inp != INPUT {
                    last_use[self.index[inp]] = i;
                }
            }
        }

        let mut values: Vec<Option<Tensor>> = vec![None; end + 1];
        let mut result = RunResult::default();
        for i in 0..=end {
            let node = &self.nodes[i];
            let op = opts
                .overlay
                .and_then(|o| o.get(&node.name))
                .unwrap_or(&node.op);
            let fetch = |name: &String| -> &Tensor {
                if name == INPUT {
                    batch
                } else {
                    values[self.index[name]]
                        .as_ref()
                        .expect("input computed before use")
                }
            };
            let x = fetch(&node.inputs[0]);
            let check = |ok: bool, what: &str| -> Result<()> {
                if ok {
                    Ok(())
                } else {
                    Err(Error::ShapeMismatch {
                        node: node.name.clone(),
                        detail: format!("{what}, got input {:?}", x.shape()),
                    })
                }
            };
            let y = match op {
                Op::Conv2d(c) => {
                    check(
                        x.ndim() == 4
                            && x.shape()[1] == c.in_ch
                            && x.shape()[2] + 2 * c.padding >= c.kh
                            && x.shape()[3] + 2 * c.padding >= c.kw,
                        "Conv2d input mismatch",
                    )?;
                    kernels::conv2d(x, c)
                }
                Op::BatchNorm(bn) => {
                    check(
                        (x.ndim() == 4 || x.ndim() == 2) && x.shape()[1] == bn.channels(),
                        "BatchNorm channel mismatch",
                    )?;
                    if opts.batch_stats {
                        let (y, mean, var) = kernels::batch_norm_batch_stats(x, bn)?;
                        result.bn_stats.push(BnBatchStats {
                            node: node.name.clone(),
                            mean,
                            var,
                        });
                        y
                    } else {
                        kernels::batch_norm(x, bn)
                    }
                }
                Op::Relu => kernels::relu(x.clone()),
                Op::MaxPool(p) => {
                    check(
                        x.ndim() == 4
                            && x.shape()[2] + 2 * p.padding >= p.kernel
                            && x.shape()[3] + 2 * p.padding >= p.kernel,
                        "MaxPool input mismatch",
                    )?;
                    kernels::max_pool(x, p)
                }
                Op::GlobalAvgPool => {
                    check(x.ndim() == 4, "GlobalAvgPool expects [N, C, H, W]")?;
                    kernels::global_avg_pool(x)
                }
                Op::Linear(l) => {
                    check(
                        x.len() == x.shape()[0] * l.in_features,
                        "Linear feature mismatch",
                    )?;
                    kernels::linear(x, l)
                }
                Op::Add => {
                    let b = fetch(&node.inputs[1]);
                    check(x.shape() == b.shape(), "Add operands differ")?;
                    kernels::add(x, b)
                }
            };
            if !y.all_finite() {
                log::debug!("non-finite activation at node `{}`", node.name);
            }
            if tap_idx.contains(&i) {
                result.tapped.insert(node.name.clone(), y.clone());
            }
            // release inputs whose last consumer was this node
            for inp in &node.inputs {
                if inp != INPUT {
                    let j = self.index[inp];
                    if last_use[j] == i {
                        values[j] = None;
                    }
                }
            }
            if i == end {
                if opts.need_output && end == last {
                    result.output = Some(y);
                }
                break;
            }
            values[i] = Some(y);
        }
        Ok(result)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{BatchNorm, Conv2d, LayerNode, Linear, MaxPool};
    use super::*;

    fn single_conv(
        weight: Tensor,
        stride: usize,
        padding: usize,
        bias: Option<Vec<f32>>,
    ) -> NetworkSpec {
        let s = weight.shape().to_vec();
        let op = Op::Conv2d(Conv2d {
            out_ch: s[0],
            in_ch: s[1],
            kh: s[2],
            kw: s[3],
            stride,
            padding,
            weight,
            bias,
        });
        NetworkSpec::new(
            vec![LayerNode::new("conv", op, &[INPUT])],
            vec![s[1], 4, 4],
            vec!["conv".into()],
            None,
        )
        .unwrap()
    }

    #[test]
    fn identity_one_by_one_conv() {
        let mut w = Tensor::zeros(vec![2, 2, 1, 1]);
        w.data_mut()[0] = 1.0;
        w.data_mut()[3] = 1.0;
        let net = single_conv(w, 1, 0, None);
        let x = Tensor::new(vec![1, 2, 4, 4], (0..32).map(|v| v as f32 - 7.5).collect()).unwrap();
        assert_eq!(net.forward(&x, &[]).unwrap().output, x);
    }

    #[test]
    fn all_ones_three_by_three() {
        // hand convolution: 9 inside, 6 on edges, 4 at corners
        let net = single_conv(Tensor::full(vec![1, 1, 3, 3], 1.0), 1, 1, None);
        let out = net
            .forward(&Tensor::full(vec![1, 1, 4, 4], 1.0), &[])
            .unwrap()
            .output;
        #[rustfmt::skip]
        let expected = [
            4.0, 6.0, 6.0, 4.0,
            6.0, 9.0, 9.0, 6.0,
            6.0, 9.0, 9.0, 6.0,
            4.0, 6.0, 6.0, 4.0,
        ];
        assert_eq!(out.data(), &expected);
    }

    #[test]
    fn strided_conv_with_bias() {
        let net = single_conv(Tensor::full(vec![1, 1, 3, 3], 1.0), 2, 1, Some(vec![0.5]));
        let out = net
            .forward(&Tensor::full(vec![1, 1, 4, 4], 1.0), &[])
            .unwrap()
            .output;
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert_eq!(out.data(), &[4.5, 6.5, 6.5, 9.5]);
    }

    #[test]
    fn identity_batch_norm() {
        let nodes = vec![LayerNode::new(
            "bn",
            Op::BatchNorm(BatchNorm::identity(2)),
            &[INPUT],
        )];
        let net = NetworkSpec::new(nodes, vec![2, 3, 3], vec![], None).unwrap();
        let x = Tensor::new(
            vec![1, 2, 3, 3],
            (0..18).map(|v| v as f32 * 0.3 - 2.0).collect(),
        )
        .unwrap();
        assert_eq!(net.forward(&x, &[]).unwrap().output, x);
    }

    #[test]
    fn pool_linear_and_taps() {
        let nodes = vec![
            LayerNode::new(
                "conv",
                Op::Conv2d(Conv2d {
                    out_ch: 1,
                    in_ch: 1,
                    kh: 1,
                    kw: 1,
                    stride: 1,
                    padding: 0,
                    weight: Tensor::full(vec![1, 1, 1, 1], -1.0),
                    bias: None,
                }),
                &[INPUT],
            ),
            LayerNode::new("relu", Op::Relu, &["conv"]),
            LayerNode::new(
                "pool",
                Op::MaxPool(MaxPool {
                    kernel: 2,
                    stride: 2,
                    padding: 0,
                }),
                &["relu"],
            ),
            LayerNode::new("gap", Op::GlobalAvgPool, &["pool"]),
            LayerNode::new(
                "fc",
                Op::Linear(Linear {
                    in_features: 1,
                    out_features: 2,
                    weight: Tensor::new(vec![2, 1], vec![1.0, -2.0]).unwrap(),
                    bias: Some(vec![0.0, 1.0]),
                }),
                &["gap"],
            ),
        ];
        let net = NetworkSpec::new(nodes, vec![1, 4, 4], vec![], None).unwrap();
        let x = Tensor::new(vec![1, 1, 4, 4], (0..16).map(|v| -(v as f32)).collect()).unwrap();
        let out = net.forward(&x, &["conv", "pool"]).unwrap();
        assert_eq!(out.tapped["conv"].data()[5], 5.0);
        // max over 2x2 windows of 0..16 laid out row-major
        assert_eq!(out.tapped["pool"].data(), &[5.0, 7.0, 13.0, 15.0]);
        assert_eq!(out.output.data(), &[10.0, -19.0]);
    }

    #[test]
    fn wrong_batch_shape_is_reported() {
        let net = single_conv(Tensor::full(vec![1, 1, 3, 3], 1.0), 1, 1, None);
        let err = net
            .forward(&Tensor::zeros(vec![1, 2, 4, 4]), &[])
            .unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
        assert!(net
            .forward(&Tensor::zeros(vec![1, 1, 4, 4]), &["nope"])
            .is_err());
    }
}
