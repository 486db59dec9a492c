//! Network graph, layer parameters and the inference engine.

pub(crate) mod forward;
mod kernels;

use std::collections::HashMap;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use forward::{BnBatchStats, ForwardOutput};

/// Name under which nodes refer to the network input.
pub const INPUT: &str = "input";

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub out_ch: usize,
    pub in_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out_ch, in_ch, kh, kw]`
    pub weight: Tensor,
    pub bias: Option<Vec<f32>>,
}

impl Conv2d {
    /// Prunable parameter count (biases excluded).
    pub fn param_count(&self) -> usize {
        self.out_ch * self.in_ch * self.kh * self.kw
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch, self.kh, self.kw]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
    pub momentum: f32,
}

impl BatchNorm {
    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Inference-mode identity: unit scale, zero shift, unit running variance.
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 0.0,
            momentum: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out_features, in_features]`
    pub weight: Tensor,
    pub bias: Option<Vec<f32>>,
}

/// Operation and parameters of a layer node.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Conv2d(Conv2d),
    BatchNorm(BatchNorm),
    Relu,
    MaxPool(MaxPool),
    GlobalAvgPool,
    Linear(Linear),
    Add,
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Conv2d(_) => "Conv2d",
            Op::BatchNorm(_) => "BatchNorm",
            Op::Relu => "ReLU",
            Op::MaxPool(_) => "MaxPool",
            Op::GlobalAvgPool => "GlobalAvgPool",
            Op::Linear(_) => "Linear",
            Op::Add => "Add",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Op::Add => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<String>,
}

impl LayerNode {
    pub fn new(name: impl Into<String>, op: Op, inputs: &[&str]) -> Self {
        Self {
            name: name.into(),
            op,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// A validated, topologically ordered layer graph.
///
/// Immutable once built; parameter edits go through [`Overlay`] or
/// [`NetworkSpec::with_op`], which return new values.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    nodes: Vec<LayerNode>,
    input_shape: Vec<usize>,
    prunable: Vec<String>,
    first_conv: Option<String>,
    index: HashMap<String, usize>,
}

impl NetworkSpec {
    /// Validates and topologically sorts `nodes`.
    ///
    /// `input_shape` excludes the batch dimension. The last node in
    /// topological order is the network output.
    pub fn new(
        nodes: Vec<LayerNode>,
        input_shape: Vec<usize>,
        prunable: Vec<String>,
        first_conv: Option<String>,
    ) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Empty("node list"));
        }
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Config(format!(
                "invalid input shape {input_shape:?}"
            )));
        }
        let nodes = topo_sort(nodes)?;
        let index: HashMap<String, usize> = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.name.clone(), i))
            .collect();
        for node in &nodes {
            check_params(node)?;
        }
        for name in &prunable {
            match index.get(name).map(|&i| &nodes[i].op) {
                Some(Op::Conv2d(_)) => {}
                Some(_) => {
                    return Err(Error::InvalidNode {
                        node: name.clone(),
                        detail: "only Conv2d layers are prunable".into(),
                    })
                }
                None => return Err(Error::UnknownLayer(name.clone())),
            }
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = prunable.iter().find(|p| !seen.insert(p.as_str())) {
            return Err(Error::InvalidNode {
                node: dup.clone(),
                detail: "listed twice as prunable".into(),
            });
        }
        if let Some(first) = &first_conv {
            match index.get(first).map(|&i| &nodes[i].op) {
                Some(Op::Conv2d(_)) => {}
                Some(_) => {
                    return Err(Error::InvalidNode {
                        node: first.clone(),
                        detail: "first_conv must be a Conv2d".into(),
                    })
                }
                None => return Err(Error::UnknownLayer(first.clone())),
            }
            if prunable.contains(first) {
                return Err(Error::InvalidNode {
                    node: first.clone(),
                    detail: "first_conv is kept dense and cannot be prunable".into(),
                });
            }
        }
        let net = Self {
            nodes,
            input_shape,
            prunable,
            first_conv,
            index,
        };
        net.infer_shapes()?;
        Ok(net)
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn prunable(&self) -> &[String] {
        &self.prunable
    }

    pub fn first_conv(&self) -> Option<&str> {
        self.first_conv.as_deref()
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn node(&self, name: &str) -> Option<&LayerNode> {
        self.node_index(name).map(|i| &self.nodes[i])
    }

    pub fn conv(&self, name: &str) -> Result<&Conv2d> {
        match self.node(name).map(|n| &n.op) {
            Some(Op::Conv2d(c)) => Ok(c),
            Some(_) => Err(Error::InvalidNode {
                node: name.to_string(),
                detail: "not a Conv2d".into(),
            }),
            None => Err(Error::UnknownLayer(name.to_string())),
        }
    }

    /// `n_ℓ` for every prunable layer, in prunable order.
    pub fn prunable_counts(&self) -> IndexMap<String, usize> {
        self.prunable
            .iter()
            .map(|p| {
                (
                    p.clone(),
                    self.conv(p).map(Conv2d::param_count).unwrap_or(0),
                )
            })
            .collect()
    }

    /// `[out, in, kh, kw]` for every prunable layer, in prunable order.
    pub fn prunable_shapes(&self) -> IndexMap<String, [usize; 4]> {
        self.prunable
            .iter()
            .filter_map(|p| self.conv(p).ok().map(|c| (p.clone(), c.shape())))
            .collect()
    }

    /// The BatchNorm node fed directly and only by `conv`, if any.
    pub fn bn_after(&self, conv: &str) -> Option<&str> {
        self.nodes
            .iter()
            .find(|n| {
                matches!(n.op, Op::BatchNorm(_)) && n.inputs.len() == 1 && n.inputs[0] == conv
            })
            .map(|n| n.name.as_str())
    }

    /// Copy of the network with one node's parameters replaced.
    pub fn with_op(&self, name: &str, op: Op) -> Result<NetworkSpec> {
        let mut overlay = Overlay::default();
        overlay.insert(name, op);
        overlay.materialize(self)
    }

    /// Output shape (without batch dim) of every node, in node order.
    pub fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        self.infer_shapes_with(None)
    }

    pub(crate) fn infer_shapes_with(&self, overlay: Option<&Overlay>) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let op = overlay.and_then(|o| o.get(&node.name)).unwrap_or(&node.op);
            let ins: Vec<&[usize]> = node
                .inputs
                .iter()
                .map(|i| {
                    if i == INPUT {
                        self.input_shape.as_slice()
                    } else {
                        shapes[self.index[i]].as_slice()
                    }
                })
                .collect();
            let shape = kernels::output_shape(&node.name, op, &ins)?;
            shapes.push(shape);
        }
        Ok(shapes)
    }
}

/// Parameter replacements layered over a shared [`NetworkSpec`].
///
/// Lets a diagnostic model differ from the dense network in a handful of
/// nodes without copying every weight.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overlay {
    ops: HashMap<String, Op>,
}

impl Overlay {
    pub fn insert(&mut self, name: &str, op: Op) {
        self.ops.insert(name.to_string(), op);
    }

    pub fn get(&self, name: &str) -> Option<&Op> {
        self.ops.get(name)
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Entries of `other` take precedence.
    pub fn merged(&self, other: &Overlay) -> Overlay {
        let mut ops = self.ops.clone();
        for (k, v) in &other.ops {
            ops.insert(k.clone(), v.clone());
        }
        Overlay { ops }
    }

    /// The effective op for `name` given the base network.
    pub fn op<'a>(&'a self, net: &'a NetworkSpec, name: &str) -> Option<&'a Op> {
        self.ops.get(name).or_else(|| net.node(name).map(|n| &n.op))
    }

    /// Builds a standalone network with every replacement applied.
    pub fn materialize(&self, net: &NetworkSpec) -> Result<NetworkSpec> {
        let mut out = net.clone();
        for (name, op) in &self.ops {
            let idx = net
                .node_index(name)
                .ok_or_else(|| Error::UnknownLayer(name.clone()))?;
            if out.nodes[idx].op.kind() != op.kind() {
                return Err(Error::InvalidNode {
                    node: name.clone(),
                    detail: format!(
                        "cannot replace {} with {}",
                        out.nodes[idx].op.kind(),
                        op.kind()
                    ),
                });
            }
            out.nodes[idx].op = op.clone();
            check_params(&out.nodes[idx])?;
        }
        out.infer_shapes()?;
        Ok(out)
    }
}

fn check_params(node: &LayerNode) -> Result<()> {
    let bad = |detail: String| Error::InvalidNode {
        node: node.name.clone(),
        detail,
    };
    if node.inputs.len() != node.op.arity() {
        return Err(bad(format!(
            "{} expects {} input(s), got {}",
            node.op.kind(),
            node.op.arity(),
            node.inputs.len()
        )));
    }
    match &node.op {
        Op::Conv2d(c) => {
            if c.weight.shape() != c.shape() {
                return Err(Error::ShapeMismatch {
                    node: node.name.clone(),
                    detail: format!(
                        "weight shape {:?} != [out_ch, in_ch, kh, kw] = {:?}",
                        c.weight.shape(),
                        c.shape()
                    ),
                });
            }
            if c.stride == 0 {
                return Err(bad("stride must be positive".into()));
            }
            if c.bias.as_ref().is_some_and(|b| b.len() != c.out_ch) {
                return Err(Error::ShapeMismatch {
                    node: node.name.clone(),
                    detail: "bias length != out_ch".into(),
                });
            }
        }
        Op::BatchNorm(bn) => {
            let c = bn.gamma.len();
            if c == 0
                || bn.beta.len() != c
                || bn.running_mean.len() != c
                || bn.running_var.len() != c
            {
                return Err(Error::ShapeMismatch {
                    node: node.name.clone(),
                    detail: "BatchNorm parameter lengths differ".into(),
                });
            }
            if bn.running_var.iter().any(|v| v.is_nan() || *v < 0.0) {
                return Err(bad("running_var must be nonnegative".into()));
            }
            if !(bn.momentum > 0.0 && bn.momentum <= 1.0) || bn.eps.is_nan() || bn.eps < 0.0 {
                return Err(bad("momentum must be in (0, 1] and eps nonnegative".into()));
            }
        }
        Op::MaxPool(p) => {
            if p.kernel == 0 || p.stride == 0 {
                return Err(bad("pool kernel and stride must be positive".into()));
            }
        }
        Op::Linear(l) => {
            if l.weight.shape() != [l.out_features, l.in_features] {
                return Err(Error::ShapeMismatch {
                    node: node.name.clone(),
                    detail: format!(
                        "weight shape {:?} != [{}, {}]",
                        l.weight.shape(),
                        l.out_features,
                        l.in_features
                    ),
                });
            }
            if l.bias.as_ref().is_some_and(|b| b.len() != l.out_features) {
                return Err(Error::ShapeMismatch {
                    node: node.name.clone(),
                    detail: "bias length != out_features".into(),
                });
            }
        }
        Op::Relu | Op::GlobalAvgPool | Op::Add => {}
    }
    Ok(())
}

/// Kahn's algorithm, preferring the given order among ready nodes.
fn topo_sort(nodes: Vec<LayerNode>) -> Result<Vec<LayerNode>> {
    let mut pos: HashMap<&str, usize> = HashMap::new();
    for (i, n) in nodes.iter().enumerate() {
        if n.name == INPUT {
            return Err(Error::InvalidNode {
                node: n.name.clone(),
                detail: format!("`{INPUT}` is reserved"),
            });
        }
        if pos.insert(n.name.as_str(), i).is_some() {
            return Err(Error::InvalidNode {
                node: n.name.clone(),
                detail: "duplicate node name".into(),
            });
        }
    }
    let mut indegree = vec![0usize; nodes.len()];
    let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
    for (i, n) in nodes.iter().enumerate() {
        for inp in &n.inputs {
            if inp == INPUT {
                continue;
            }
            let &j = pos
                .get(inp.as_str())
                .ok_or_else(|| Error::DanglingReference {
                    node: n.name.clone(),
                    input: inp.clone(),
                })?;
            indegree[i] += 1;
            consumers[j].push(i);
        }
    }
    let mut ready: std::collections::BTreeSet<usize> =
        (0..nodes.len()).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &c in &consumers[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.insert(c);
            }
        }
    }
    if order.len() != nodes.len() {
        let stuck = (0..nodes.len()).find(|i| !order.contains(i)).unwrap_or(0);
        return Err(Error::InvalidNode {
            node: nodes[stuck].name.clone(),
            detail: "graph contains a cycle".into(),
        });
    }
    let mut slots: Vec<Option<LayerNode>> = nodes.into_iter().map(Some).collect();
    Ok(order
        .into_iter()
        .map(|i| slots[i].take().unwrap())
        .collect())
}
