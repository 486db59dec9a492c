//! SPNR container: networks, calibration batches and masks on disk.
//!
//! Layout (little-endian):
//!
//! ```text
//! 0..4    magic "SPNR"
//! 4..8    version (u32) = 1
//! 8..16   header byte length (u64)
//! ..      UTF-8 JSON header: node list + tensor manifest
//! ..      payload: tensors concatenated in manifest order
//! ```
//!
//! `f32` tensors are IEEE-754 little-endian; masks are stored as `u8`.
//! Calibration sets use tensors named `batch/<i>`, masks `mask/<layer>`.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{BatchNorm, Conv2d, LayerNode, Linear, MaxPool, NetworkSpec, Op};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SPNR";
pub const VERSION: u32 = 1;

const KNOWN_KINDS: [&str; 7] = [
    "Conv2d",
    "BatchNorm",
    "ReLU",
    "MaxPool",
    "GlobalAvgPool",
    "Linear",
    "Add",
];

/// Raw tensor payload of a container entry.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Tensor),
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl TensorData {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::U8 { shape, .. } => shape,
        }
    }

    fn dtype(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::U8 { .. } => "u8",
        }
    }

    fn byte_len(&self) -> usize {
        match self {
            TensorData::F32(t) => 4 * t.len(),
            TensorData::U8 { data, .. } => data.len(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
    dtype: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    input_shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    nodes: Vec<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    prunable: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    first_conv: Option<String>,
    tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    meta: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NodeHeader {
    name: String,
    inputs: Vec<String>,
    #[serde(flatten)]
    params: NodeParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind")]
enum NodeParams {
    Conv2d {
        out_ch: usize,
        in_ch: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
        weight: String,
        bias: Option<String>,
    },
    BatchNorm {
        gamma: String,
        beta: String,
        running_mean: String,
        running_var: String,
        eps: f32,
        momentum: f32,
    },
    #[serde(rename = "ReLU")]
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    GlobalAvgPool,
    Linear {
        in_features: usize,
        out_features: usize,
        weight: String,
        bias: Option<String>,
    },
    Add,
}

/// A parsed SPNR file: optional network description plus named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub input_shape: Vec<usize>,
    pub nodes: Vec<serde_json::Value>,
    pub prunable: Vec<String>,
    pub first_conv: Option<String>,
    pub tensors: IndexMap<String, TensorData>,
    pub meta: serde_json::Map<String, serde_json::Value>,
}

impl Container {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header_err = |detail: String| Error::PayloadMismatch {
            name: "<header>".into(),
            detail,
        };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < 16 {
            return Err(header_err(format!(
                "file is {} bytes, shorter than the fixed prefix",
                bytes.len()
            )));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let header_end = 16u64
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| header_err(format!("header length {header_len} exceeds file size")))?
            as usize;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])?;
        let payload = &bytes[header_end..];

        let mut tensors = IndexMap::new();
        let mut expected_end = 0u64;
        for entry in &header.tensors {
            let mismatch = |detail: String| Error::PayloadMismatch {
                name: entry.name.clone(),
                detail,
            };
            let elems: usize = entry.shape.iter().product();
            let width = match entry.dtype.as_str() {
                "f32" => 4,
                "u8" => 1,
                other => return Err(mismatch(format!("unsupported dtype `{other}`"))),
            };
            if entry.length != (elems * width) as u64 {
                return Err(mismatch(format!(
                    "byte length {} != {} for shape {:?}",
                    entry.length,
                    elems * width,
                    entry.shape
                )));
            }
            let end = entry
                .offset
                .checked_add(entry.length)
                .filter(|&e| e <= payload.len() as u64)
                .ok_or_else(|| mismatch("extends past end of payload".into()))?;
            expected_end = expected_end.max(end);
            let raw = &payload[entry.offset as usize..end as usize];
            let data = match width {
                4 => {
                    let values = raw
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                        .collect();
                    TensorData::F32(
                        Tensor::new(entry.shape.clone(), values)
                            .map_err(|e| mismatch(e.to_string()))?,
                    )
                }
                _ => TensorData::U8 {
                    shape: entry.shape.clone(),
                    data: raw.to_vec(),
                },
            };
            if tensors.insert(entry.name.clone(), data).is_some() {
                return Err(mismatch("duplicate tensor name".into()));
            }
        }
        if expected_end != payload.len() as u64 {
            return Err(header_err(format!(
                "payload is {} bytes but the manifest covers {expected_end}",
                payload.len()
            )));
        }
        Ok(Self {
            input_shape: header.input_shape,
            nodes: header.nodes,
            prunable: header.prunable,
            first_conv: header.first_conv,
            tensors,
            meta: header.meta,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let length = t.byte_len() as u64;
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                length,
                dtype: t.dtype().to_string(),
            });
            offset += length;
        }
        let header = Header {
            input_shape: self.input_shape.clone(),
            nodes: self.nodes.clone(),
            prunable: self.prunable.clone(),
            first_conv: self.first_conv.clone(),
            tensors: entries,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            match t {
                TensorData::F32(t) => t
                    .data()
                    .iter()
                    .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                TensorData::U8 { data, .. } => out.extend_from_slice(data),
            }
        }
        Ok(out)
    }

    pub fn f32(&self, name: &str) -> Result<&Tensor> {
        match self.tensors.get(name) {
            Some(TensorData::F32(t)) => Ok(t),
            Some(_) => Err(Error::PayloadMismatch {
                name: name.into(),
                detail: "expected dtype f32".into(),
            }),
            None => Err(Error::PayloadMismatch {
                name: name.into(),
                detail: "tensor missing from manifest".into(),
            }),
        }
    }

    /// Tensors named `<prefix><i>`, ordered by the integer suffix.
    pub fn indexed_f32(&self, prefix: &str) -> Result<Vec<Tensor>> {
        let mut found: Vec<(usize, &Tensor)> = Vec::new();
        for (name, t) in &self.tensors {
            if let Some(idx) = name.strip_prefix(prefix) {
                let i: usize = idx.parse().map_err(|_| Error::PayloadMismatch {
                    name: name.clone(),
                    detail: format!("expected `{prefix}<index>`"),
                })?;
                match t {
                    TensorData::F32(t) => found.push((i, t)),
                    TensorData::U8 { .. } => {
                        return Err(Error::PayloadMismatch {
                            name: name.clone(),
                            detail: "expected dtype f32".into(),
                        })
                    }
                }
            }
        }
        found.sort_by_key(|(i, _)| *i);
        Ok(found.into_iter().map(|(_, t)| t.clone()).collect())
    }

    /// Stores `batches` as `<prefix>0`, `<prefix>1`, ...
    pub fn push_indexed(&mut self, prefix: &str, batches: &[Tensor]) {
        for (i, b) in batches.iter().enumerate() {
            self.tensors
                .insert(format!("{prefix}{i}"), TensorData::F32(b.clone()));
        }
    }
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let file_name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{file_name}.tmp{}", std::process::id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a network from an SPNR file.
pub fn load_container(path: impl AsRef<Path>) -> Result<NetworkSpec> {
    network_from_container(&Container::read(path)?)
}

/// Writes a network to an SPNR file.
pub fn save_network(net: &NetworkSpec, path: impl AsRef<Path>) -> Result<()> {
    network_to_container(net)?.write(path)
}

pub fn network_from_container(c: &Container) -> Result<NetworkSpec> {
    if c.nodes.is_empty() {
        return Err(Error::Empty("container holds no network nodes"));
    }
    let mut nodes = Vec::with_capacity(c.nodes.len());
    for value in &c.nodes {
        let name = value
            .get("name")
            .and_then(|v| v.as_str())
            .unwrap_or("<unnamed>")
            .to_string();
        let kind = value
            .get("kind")
            .and_then(|v| v.as_str())
            .unwrap_or("<missing>");
        if !KNOWN_KINDS.contains(&kind) {
            return Err(Error::UnknownKind {
                node: name,
                kind: kind.to_string(),
            });
        }
        let header: NodeHeader =
            serde_json::from_value(value.clone()).map_err(|e| Error::InvalidNode {
                node: name.clone(),
                detail: e.to_string(),
            })?;
        let vector = |t: &str| -> Result<Vec<f32>> { Ok(c.f32(t)?.data().to_vec()) };
        let op = match header.params {
            NodeParams::Conv2d {
                out_ch,
                in_ch,
                kh,
                kw,
                stride,
                padding,
                weight,
                bias,
            } => Op::Conv2d(Conv2d {
                out_ch,
                in_ch,
                kh,
                kw,
                stride,
                padding,
                weight: c.f32(&weight)?.clone(),
                bias: bias.as_deref().map(vector).transpose()?,
            }),
            NodeParams::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                eps,
                momentum,
            } => Op::BatchNorm(BatchNorm {
                gamma: vector(&gamma)?,
                beta: vector(&beta)?,
                running_mean: vector(&running_mean)?,
                running_var: vector(&running_var)?,
                eps,
                momentum,
            }),
            NodeParams::Relu => Op::Relu,
            NodeParams::MaxPool {
                kernel,
                stride,
                padding,
            } => Op::MaxPool(MaxPool {
                kernel,
                stride,
                padding,
            }),
            NodeParams::GlobalAvgPool => Op::GlobalAvgPool,
            NodeParams::Linear {
                in_features,
                out_features,
                weight,
                bias,
            } => Op::Linear(Linear {
                in_features,
                out_features,
                weight: c.f32(&weight)?.clone(),
                bias: bias.as_deref().map(vector).transpose()?,
            }),
            NodeParams::Add => Op::Add,
        };
        nodes.push(LayerNode {
            name: header.name,
            op,
            inputs: header.inputs,
        });
    }
    NetworkSpec::new(
        nodes,
        c.input_shape.clone(),
        c.prunable.clone(),
        c.first_conv.clone(),
    )
}

pub fn network_to_container(net: &NetworkSpec) -> Result<Container> {
    let mut c = Container {
        input_shape: net.input_shape().to_vec(),
        prunable: net.prunable().to_vec(),
        first_conv: net.first_conv().map(str::to_string),
        ..Default::default()
    };
    let mut put = |name: String, t: Tensor| -> String {
        c.tensors.insert(name.clone(), TensorData::F32(t));
        name
    };
    let vec_tensor = |v: &[f32]| Tensor::new(vec![v.len()], v.to_vec());
    let mut headers = Vec::with_capacity(net.nodes().len());
    for node in net.nodes() {
        let n = &node.name;
        let params = match &node.op {
            Op::Conv2d(conv) => NodeParams::Conv2d {
                out_ch: conv.out_ch,
                in_ch: conv.in_ch,
                kh: conv.kh,
                kw: conv.kw,
                stride: conv.stride,
                padding: conv.padding,
                weight: put(format!("{n}.weight"), conv.weight.clone()),
                bias: match &conv.bias {
                    Some(b) => Some(put(format!("{n}.bias"), vec_tensor(b)?)),
                    None => None,
                },
            },
            Op::BatchNorm(bn) => NodeParams::BatchNorm {
                gamma: put(format!("{n}.gamma"), vec_tensor(&bn.gamma)?),
                beta: put(format!("{n}.beta"), vec_tensor(&bn.beta)?),
                running_mean: put(format!("{n}.running_mean"), vec_tensor(&bn.running_mean)?),
                running_var: put(format!("{n}.running_var"), vec_tensor(&bn.running_var)?),
                eps: bn.eps,
                momentum: bn.momentum,
            },
            Op::Relu => NodeParams::Relu,
            Op::MaxPool(p) => NodeParams::MaxPool {
                kernel: p.kernel,
                stride: p.stride,
                padding: p.padding,
            },
            Op::GlobalAvgPool => NodeParams::GlobalAvgPool,
            Op::Linear(l) => NodeParams::Linear {
                in_features: l.in_features,
                out_features: l.out_features,
                weight: put(format!("{n}.weight"), l.weight.clone()),
                bias: match &l.bias {
                    Some(b) => Some(put(format!("{n}.bias"), vec_tensor(b)?)),
                    None => None,
                },
            },
            Op::Add => NodeParams::Add,
        };
        headers.push(serde_json::to_value(NodeHeader {
            name: n.clone(),
            inputs: node.inputs.clone(),
            params,
        })?);
    }
    c.nodes = headers;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::INPUT;

    fn identity_net() -> NetworkSpec {
        let op = Op::Conv2d(Conv2d {
            out_ch: 1,
            in_ch: 1,
            kh: 1,
            kw: 1,
            stride: 1,
            padding: 0,
            weight: Tensor::full(vec![1, 1, 1, 1], 1.0),
            bias: None,
        });
        NetworkSpec::new(
            vec![LayerNode::new("conv", op, &[INPUT])],
            vec![1, 2, 2],
            vec!["conv".into()],
            None,
        )
        .unwrap()
    }

    #[test]
    fn identity_container_loads() {
        let bytes = network_to_container(&identity_net())
            .unwrap()
            .to_bytes()
            .unwrap();
        let net = network_from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(net.prunable(), &["conv".to_string()]);
        assert_eq!(net, identity_net());
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut bytes = network_to_container(&identity_net())
            .unwrap()
            .to_bytes()
            .unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Container::from_bytes(&bad), Err(Error::BadMagic)));
        bytes[4] = 2;
        assert!(matches!(
            Container::from_bytes(&bytes),
            Err(Error::UnsupportedVersion(2))
        ));
    }

    #[test]
    fn payload_length_mismatch() {
        let c = network_to_container(&identity_net()).unwrap();
        let mut bytes = c.to_bytes().unwrap();
        // drop the last weight byte: manifest length no longer covered
        bytes.pop();
        assert!(matches!(
            Container::from_bytes(&bytes),
            Err(Error::PayloadMismatch { .. })
        ));

        // manifest claims a length that disagrees with the shape
        let good = c.to_bytes().unwrap();
        let header_len = u64::from_le_bytes(good[8..16].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&good[16..16 + header_len]).unwrap();
        let patched = header.replace("\"length\":4", "\"length\":8");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(patched.len() as u64).to_le_bytes());
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&[0u8; 8]);
        let err = Container::from_bytes(&out).unwrap_err();
        assert!(err.to_string().contains("payload mismatch"), "{err}");
    }

    #[test]
    fn unknown_kind_names_node() {
        let mut c = network_to_container(&identity_net()).unwrap();
        c.nodes[0]["kind"] = "Conv3d".into();
        let err = network_from_container(&c).unwrap_err();
        assert!(matches!(err, Error::UnknownKind { ref node, .. } if node == "conv"));
    }

    #[test]
    fn indexed_batches_sort_numerically() {
        let mut c = Container::default();
        let batches: Vec<Tensor> = (0..12)
            .map(|i| Tensor::full(vec![1, 1], i as f32))
            .collect();
        c.push_indexed("batch/", &batches);
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.indexed_f32("batch/").unwrap(), batches);
    }
}
