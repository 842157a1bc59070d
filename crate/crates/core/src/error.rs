use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("sample has no annotated boxes")]
    NoBoxes,

    #[error("invalid box ({x0},{y0},{x1},{y1}): {reason}")]
    InvalidBox {
        x0: u32,
        y0: u32,
        x1: u32,
        y1: u32,
        reason: &'static str,
    },

    #[error("label {0} is not covered by the merge mapping")]
    UnmappedLabel(u32),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch at layer {layer} ({kind}): expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        layer: usize,
        kind: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(usize),

    #[error("backward called without a forward cache")]
    MissingCache,

    #[error("label {label} out of range for {categories} categories")]
    LabelOutOfRange { label: u32, categories: usize },

    #[error("k = {k} exceeds category count {categories}")]
    KTooLarge { k: usize, categories: usize },

    #[error("image {width}x{height} is smaller than crop {crop}x{crop}")]
    ImageTooSmall { width: u32, height: u32, crop: u32 },

    #[error("category spaces differ: {0} vs {1}")]
    CategoryMismatch(usize, usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("position {pos:?} is outside the {rows}x{cols} map of layer {layer}")]
    PositionOutOfRange {
        layer: usize,
        pos: (usize, usize),
        rows: usize,
        cols: usize,
    },

    #[error("cannot read image for {source_id}: {message}")]
    UnreadableImage { source_id: String, message: String },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("malformed record in {path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("study: {0}")]
    Study(#[from] crate::study::StudyError),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Process exit status for this failure class. 2 is left to argument
    /// parsing.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::KTooLarge { .. } => 3,
            Self::Io(_) => 4,
            Self::Json(_)
            | Self::Record { .. }
            | Self::Checkpoint(_)
            | Self::Image(_)
            | Self::UnreadableImage { .. } => 5,
            Self::NoBoxes
            | Self::InvalidBox { .. }
            | Self::UnmappedLabel(_)
            | Self::ShapeMismatch { .. }
            | Self::LabelOutOfRange { .. }
            | Self::ImageTooSmall { .. }
            | Self::CategoryMismatch(..)
            | Self::Empty(_)
            | Self::PositionOutOfRange { .. } => 6,
            Self::NonFiniteGradient(_) | Self::MissingCache => 7,
            Self::Study(_) => 8,
            Self::Stage { source, .. } => source.exit_code(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
