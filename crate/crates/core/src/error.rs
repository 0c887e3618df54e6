use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value at index {index} in {what}")]
    NonFinite { what: String, index: usize },

    #[error("matrix is not positive definite: pivot {pivot} is {value}")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("bad magic: expected \"MUMO\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("file truncated while reading {tensor}")]
    Truncated { tensor: String },

    #[error("{0} trailing bytes after the last section")]
    TrailingBytes(usize),

    #[error("invalid vocab section: {0}")]
    Vocab(String),

    #[error("token id {id} at position {pos} is outside the vocabulary of {vocab}")]
    UnknownToken { id: u32, pos: usize, vocab: usize },

    #[error("sequence of {len} tokens exceeds max_seq {max_seq}")]
    SequenceTooLong { len: usize, max_seq: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("no calibration statistics for layer {0}")]
    MissingStats(String),

    #[error("layer {layer}: {source}")]
    Layer {
        layer: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn in_layer(self, layer: impl Into<String>) -> Self {
        Error::Layer {
            layer: layer.into(),
            source: Box::new(self),
        }
    }
}
