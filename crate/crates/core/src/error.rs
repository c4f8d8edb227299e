use thiserror::Error;

/// Errors raised by kernels, generators and file formats in this crate.
#[derive(Debug, Error)]
pub enum AttnError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{op}: non-finite value in row {row}")]
    NonFinite { op: &'static str, row: usize },

    #[error("cross-attention over an empty memory (zero keys)")]
    EmptyMemory,

    #[error("pooling window {l_w}x{l_h} does not tile a {w}x{h} grid")]
    PoolingSpec {
        w: usize,
        h: usize,
        l_w: usize,
        l_h: usize,
    },

    #[error("pooling window {l_w}x{l_h} does not divide {n} spatial tokens")]
    PoolingTokens { n: usize, l_w: usize, l_h: usize },

    #[error("cannot split {queries} queries and {keys} keys into {segments} equal segments")]
    Segmentation {
        queries: usize,
        keys: usize,
        segments: usize,
    },

    #[error("linear attention normalizer is not positive for query row {row}")]
    DegenerateQuery { row: usize },

    #[error("locality is undefined for a grid with {tokens} token(s)")]
    UndefinedLocality { tokens: usize },

    #[error("invalid memory bank: {0}")]
    InvalidBank(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AttnError>;
