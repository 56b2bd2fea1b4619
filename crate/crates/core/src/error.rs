//! Error type shared by every stage of the pipeline.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible for the attempted operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A tensor with the wrong rank or dimension was supplied.
    #[error("bad shape in {op}: {detail} (got {shape:?})")]
    BadShape {
        op: &'static str,
        detail: String,
        shape: Vec<usize>,
    },

    /// Sample coordinate outside the feature map.
    #[error("sample point ({x}, {y}) outside map bounds [0, {max_x}] x [0, {max_y}]")]
    OutOfRange { x: f32, y: f32, max_x: f32, max_y: f32 },

    /// A region of interest collapsed to zero width or height.
    #[error("degenerate box ({x1}, {y1}, {x2}, {y2}): zero width or height")]
    DegenerateBox { x1: f32, y1: f32, x2: f32, y2: f32 },

    /// More patches than the positional table can address.
    #[error("patch capacity exceeded: {given} patches > max {max}")]
    PatchCapacity { given: usize, max: usize },

    /// Weight file violates the RXW1 layout.
    #[error("weight file format error at byte {offset}: {reason}")]
    WeightFormat { offset: u64, reason: String },

    /// Lexicon file problem; `line` is 1-based.
    #[error("lexicon error at line {line}: {reason}")]
    LexiconFormat { line: usize, reason: String },
    #[error("image format error in {path}: {reason}")]
    ImageFormat { path: String, reason: String },

    /// Invalid configuration value.
    #[error("configuration error: {0}")]
    Config(String),

    /// CER is undefined for an empty reference string.
    #[error("empty reference string at pair {index}")]
    EmptyReference { index: usize },

    /// Before/after CER pairs do not share the same references.
    #[error("misaligned references at pair {index}: {before:?} vs {after:?}")]
    MisalignedReferences {
        index: usize,
        before: String,
        after: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
