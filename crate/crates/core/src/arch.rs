//! Reference architectures and seeded toy networks.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{BatchNorm, Conv2d, LayerNode, Linear, MaxPool, NetworkSpec, Op, Overlay, INPUT};
use crate::repair::recal_overlay;
use crate::tensor::Tensor;

pub type ShapeMap = IndexMap<String, [usize; 4]>;

/// Prunable conv shapes `[out, in, kh, kw]` of a basic-block ResNet with the
/// stem excluded, in module order (`conv1`, `conv2`, `downsample.0`).
pub fn resnet_shapes(blocks: &[usize], channels: &[usize], stem_channels: usize) -> ShapeMap {
    let mut out = ShapeMap::new();
    let mut in_ch = stem_channels;
    for (k, (&nb, &ch)) in blocks.iter().zip(channels).enumerate() {
        for b in 0..nb {
            let prefix = format!("layer{}.{b}", k + 1);
            out.insert(format!("{prefix}.conv1"), [ch, in_ch, 3, 3]);
            out.insert(format!("{prefix}.conv2"), [ch, ch, 3, 3]);
            if b == 0 && in_ch != ch {
                out.insert(format!("{prefix}.downsample.0"), [ch, in_ch, 1, 1]);
            }
            in_ch = ch;
        }
    }
    out
}

pub fn resnet18_shapes() -> ShapeMap {
    resnet_shapes(&[2, 2, 2, 2], &[64, 128, 256, 512], 64)
}

pub fn resnet34_shapes() -> ShapeMap {
    resnet_shapes(&[3, 4, 6, 3], &[64, 128, 256, 512], 64)
}

/// VGG16-BN feature convs named by their index in the feature stack, with
/// `features.0` (the first conv) excluded.
pub fn vgg16_bn_shapes() -> ShapeMap {
    const CFG: [usize; 18] = [
        64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0,
    ];
    let mut out = ShapeMap::new();
    let mut idx = 0;
    let mut in_ch = 3;
    for &c in &CFG {
        if c == 0 {
            idx += 1;
            continue;
        }
        if idx > 0 {
            out.insert(format!("features.{idx}"), [c, in_ch, 3, 3]);
        }
        in_ch = c;
        idx += 3;
    }
    out
}

pub fn counts_of(shapes: &ShapeMap) -> IndexMap<String, usize> {
    shapes
        .iter()
        .map(|(k, s)| (k.clone(), s.iter().product()))
        .collect()
}

/// Layers whose name marks them as residual projection (downsample) convs.
pub fn projection_layers<'a>(names: impl IntoIterator<Item = &'a String>) -> Vec<String> {
    names
        .into_iter()
        .filter(|n| n.contains("downsample"))
        .cloned()
        .collect()
}

/// Shape of a generated residual toy network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyNetSpec {
    /// Residual blocks per stage.
    pub blocks: usize,
    /// Output channels per stage; later stages halve the resolution.
    pub channels: Vec<usize>,
    /// Use 1×1 projection shortcuts when a stage changes shape. Without
    /// them all stages must share one width and keep stride 1.
    pub with_projections: bool,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    /// Images in the seeded batch that initializes BatchNorm statistics.
    pub init_images: usize,
}

impl Default for ToyNetSpec {
    fn default() -> Self {
        Self {
            blocks: 1,
            channels: vec![8, 16],
            with_projections: true,
            input_shape: [3, 12, 12],
            num_classes: 10,
            init_images: 64,
        }
    }
}

struct Builder {
    rng: ChaCha8Rng,
    nodes: Vec<LayerNode>,
    prunable: Vec<String>,
}

impl Builder {
    fn conv(
        &mut self,
        name: &str,
        input: &str,
        shape: [usize; 4],
        stride: usize,
        prunable: bool,
    ) -> String {
        let [o, i, kh, kw] = shape;
        let std = (2.0 / (i * kh * kw) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..o * i * kh * kw)
            .map(|_| normal.sample(&mut self.rng) as f32)
            .collect();
        let conv = Conv2d {
            out_ch: o,
            in_ch: i,
            kh,
            kw,
            stride,
            padding: kh / 2,
            weight: Tensor::new(shape.to_vec(), data).expect("conv shape"),
            bias: None,
        };
        self.nodes
            .push(LayerNode::new(name, Op::Conv2d(conv), &[input]));
        if prunable {
            self.prunable.push(name.to_string());
        }
        name.to_string()
    }

    fn bn(&mut self, name: &str, input: &str, channels: usize) -> String {
        let mut bn = BatchNorm::identity(channels);
        bn.eps = 1e-5;
        for c in 0..channels {
            bn.gamma[c] = self.rng.random_range(0.6f32..1.4);
            bn.beta[c] = self.rng.random_range(-0.2f32..0.2);
        }
        self.nodes
            .push(LayerNode::new(name, Op::BatchNorm(bn), &[input]));
        name.to_string()
    }

    fn push(&mut self, name: &str, op: Op, inputs: &[&str]) -> String {
        self.nodes.push(LayerNode::new(name, op, inputs));
        name.to_string()
    }

    fn linear(&mut self, name: &str, input: &str, inf: usize, outf: usize) -> String {
        let bound = 1.0 / (inf as f32).sqrt();
        let w = (0..inf * outf)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        let b = (0..outf)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        let op = Op::Linear(Linear {
            in_features: inf,
            out_features: outf,
            weight: Tensor::new(vec![outf, inf], w).expect("linear shape"),
            bias: Some(b),
        });
        self.push(name, op, &[input])
    }
}

/// Seeded random-weight residual CNN with a dense stem conv `conv1`,
/// ResNet-style block naming, global pooling and a linear head. BatchNorm
/// running statistics are set from one batch-statistics pass over a seeded
/// Gaussian batch, so the dense net is self-consistent on that distribution.
pub fn gen_toynet(seed: u64, spec: &ToyNetSpec) -> Result<NetworkSpec> {
    if spec.channels.is_empty() || spec.blocks == 0 {
        return Err(Error::Config(
            "toy net needs at least one stage and one block".into(),
        ));
    }
    if !spec.with_projections && spec.channels.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::Config(
            "stages of different width need projection shortcuts".into(),
        ));
    }
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        nodes: Vec::new(),
        prunable: Vec::new(),
    };
    let [in_c, _, _] = spec.input_shape;
    let stem = spec.channels[0];
    b.conv("conv1", INPUT, [stem, in_c, 3, 3], 1, false);
    b.bn("bn1", "conv1", stem);
    let mut x = b.push("relu", Op::Relu, &["bn1"]);
    let mut in_ch = stem;
    for (k, &ch) in spec.channels.iter().enumerate() {
        for blk in 0..spec.blocks {
            let p = format!("layer{}.{blk}", k + 1);
            let stride = if blk == 0 && k > 0 && spec.with_projections {
                2
            } else {
                1
            };
            let c1 = b.conv(&format!("{p}.conv1"), &x, [ch, in_ch, 3, 3], stride, true);
            let n1 = b.bn(&format!("{p}.bn1"), &c1, ch);
            let r1 = b.push(&format!("{p}.relu1"), Op::Relu, &[&n1]);
            let c2 = b.conv(&format!("{p}.conv2"), &r1, [ch, ch, 3, 3], 1, true);
            let n2 = b.bn(&format!("{p}.bn2"), &c2, ch);
            let shortcut = if stride != 1 || in_ch != ch {
                let d = b.conv(
                    &format!("{p}.downsample.0"),
                    &x,
                    [ch, in_ch, 1, 1],
                    stride,
                    true,
                );
                b.bn(&format!("{p}.downsample.1"), &d, ch)
            } else {
                x.clone()
            };
            let sum = b.push(&format!("{p}.add"), Op::Add, &[&n2, &shortcut]);
            x = b.push(&format!("{p}.relu2"), Op::Relu, &[&sum]);
            in_ch = ch;
        }
    }
    let gap = b.push("avgpool", Op::GlobalAvgPool, &[&x]);
    b.linear("fc", &gap, in_ch, spec.num_classes);
    let net = NetworkSpec::new(
        b.nodes,
        spec.input_shape.to_vec(),
        b.prunable,
        Some("conv1".into()),
    )?;
    init_bn(net, seed, spec.init_images)
}

/// Seeded VGG-style toy: conv-BN-ReLU stages separated by max pooling.
/// `stages[k]` lists the conv widths of stage `k`.
pub fn gen_toy_vgg(
    seed: u64,
    stages: &[Vec<usize>],
    input_shape: [usize; 3],
    num_classes: usize,
) -> Result<NetworkSpec> {
    if stages.iter().all(|s| s.is_empty()) {
        return Err(Error::Config("VGG toy needs at least one conv".into()));
    }
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        nodes: Vec::new(),
        prunable: Vec::new(),
    };
    let mut x = INPUT.to_string();
    let mut in_ch = input_shape[0];
    let mut idx = 0;
    let mut first = None;
    for stage in stages {
        for &c in stage {
            let name = format!("features.{idx}");
            let prunable = first.is_some();
            b.conv(&name, &x, [c, in_ch, 3, 3], 1, prunable);
            first.get_or_insert_with(|| name.clone());
            b.bn(&format!("features.{}", idx + 1), &name, c);
            x = b.push(
                &format!("features.{}", idx + 2),
                Op::Relu,
                &[&format!("features.{}", idx + 1)],
            );
            in_ch = c;
            idx += 3;
        }
        let pool = MaxPool {
            kernel: 2,
            stride: 2,
            padding: 0,
        };
        x = b.push(&format!("features.{idx}"), Op::MaxPool(pool), &[&x]);
        idx += 1;
    }
    let gap = b.push("avgpool", Op::GlobalAvgPool, &[&x]);
    b.linear("classifier", &gap, in_ch, num_classes);
    let net = NetworkSpec::new(b.nodes, input_shape.to_vec(), b.prunable, first)?;
    init_bn(net, seed, 64)
}

fn init_bn(net: NetworkSpec, seed: u64, images: usize) -> Result<NetworkSpec> {
    let batch = gaussian_images(seed ^ 0x5eed_ba7c, images, net.input_shape())?;
    recal_overlay(&net, &Overlay::default(), &[batch], 1.0, None)?.materialize(&net)
}

/// `n` seeded standard-normal images of `input_shape`.
pub fn gaussian_images(seed: u64, n: usize, input_shape: &[usize]) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = vec![n];
    shape.extend_from_slice(input_shape);
    let len: usize = shape.iter().product();
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    Tensor::new(shape, (0..len).map(|_| normal.sample(&mut rng)).collect())
}

/// Seeded Gaussian calibration batches (`batches` × `batch_size` images).
pub fn gaussian_calibration(
    seed: u64,
    batches: usize,
    batch_size: usize,
    input_shape: &[usize],
) -> Result<Vec<Tensor>> {
    (0..batches)
        .map(|i| {
            gaussian_images(
                seed.wrapping_add(i as u64 * 0x9e37_79b9),
                batch_size,
                input_shape,
            )
        })
        .collect()
}
