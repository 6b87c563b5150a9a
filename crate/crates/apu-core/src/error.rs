use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolchain.
#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in `{path}` at line {line}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("unknown layer variant `{variant}` at layer index {index}")]
    UnknownVariant { variant: String, index: usize },

    #[error(
        "shape mismatch: layer `{producer}` outputs {produced:?} but layer `{consumer}` \
         expects input {expected:?}"
    )]
    ShapeMismatch {
        producer: String,
        produced: Vec<usize>,
        consumer: String,
        expected: Vec<usize>,
    },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid quantization spec: {0}")]
    InvalidQuant(String),

    #[error("mask error: {0}")]
    Mask(String),

    #[error("weights violate mask at {count} position(s); first offenders (row, col): {first:?}")]
    MaskViolation {
        count: usize,
        first: Vec<(usize, usize)>,
    },

    #[error(
        "block {block} is {rows}x{cols} but the PE holds {pe_rows}x{pe_cols}; \
         re-prune with more blocks so each block fits a single PE"
    )]
    BlockCapacity {
        block: usize,
        rows: usize,
        cols: usize,
        pe_rows: usize,
        pe_cols: usize,
    },

    #[error("invalid routing demand: {0}")]
    Demand(String),

    #[error("mapping error: {0}")]
    Mapping(String),

    #[error("simulation fault at cycle {cycle}: {message}")]
    SimFault { cycle: u64, message: String },

    #[error("checksum mismatch for `{path}`: manifest records {expected}, file hashes to {actual}")]
    Checksum {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("invalid accelerator config: {0}")]
    Config(String),

    #[error("training diverged: loss became non-finite at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("cost model error: {0}")]
    Cost(String),

    #[error("file format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
