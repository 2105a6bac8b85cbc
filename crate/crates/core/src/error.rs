//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("empty cloud: {0}")]
    EmptyCloud(&'static str),

    #[error("metric undefined: {0}")]
    Metric(&'static str),

    #[error("no patch with id ({0}, {1})")]
    PatchLookup(i32, i32),

    #[error("descriptor needs at least 3 points, got {0}")]
    Descriptor(usize),

    #[error("similarity undefined: descriptor has zero variance")]
    ZeroVariance,

    #[error("degenerate geometry: {0}")]
    Geometry(&'static str),

    #[error("no points survived filtering: {0}")]
    EmptyResult(&'static str),

    #[error("boundary extraction needs at least {needed} points, got {got}")]
    Boundary { needed: usize, got: usize },

    #[error("no grid cell reached the minimum point count")]
    Grid,

    #[error("cannot fuse an empty transform set")]
    Fusion,

    #[error("pipeline produced no patch transforms")]
    Pipeline(Box<crate::report::StageCounts>),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }
}
