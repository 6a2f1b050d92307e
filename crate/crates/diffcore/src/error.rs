use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("tensor data length {got} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, got: usize },
    #[error("tensor shape {0:?} has a zero-sized dimension")]
    ZeroDim(Vec<usize>),
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("{op}: index {index} out of range for {bound} rows")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("non-finite gradient produced by the backward rule of `{op}` (node {node})")]
    NonFiniteGradient { op: &'static str, node: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),
    #[error("unknown primitive `{0}`")]
    UnknownOp(String),
    #[error("empty parameter set")]
    EmptyParameterSet,
    #[error("node {0} does not belong to this graph")]
    UnknownNode(usize),
}

pub type Result<T, E = DiffError> = std::result::Result<T, E>;
