use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("bad magic: expected \"SPNR\"")]
    BadMagic,

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),

    #[error("payload mismatch for tensor `{name}`: {detail}")]
    PayloadMismatch { name: String, detail: String },

    #[error("shape mismatch at node `{node}`: {detail}")]
    ShapeMismatch { node: String, detail: String },

    #[error("node `{node}` references unknown input `{input}`")]
    DanglingReference { node: String, input: String },

    #[error("node `{node}` has unknown layer kind `{kind}`")]
    UnknownKind { node: String, kind: String },

    #[error("invalid node `{node}`: {detail}")]
    InvalidNode { node: String, detail: String },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("sparsity {0} outside [0, 1]")]
    InvalidSparsity(f64),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("infeasible target sparsity {target}: at most {achievable} is reachable")]
    Infeasible { target: f64, achievable: f64 },

    #[error("no diagnostic point for layer `{layer}` at sparsity {s}")]
    MissingGridPoint { layer: String, s: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
