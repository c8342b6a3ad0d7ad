use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = EmtError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum EmtError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged (non-finite loss) at {context}")]
    Diverged { context: String },

    #[error("delta for chunk {chunk} expects parent hash {expected:016x}, got {found:016x} (wrong chain order?)")]
    HashMismatch { chunk: u32, expected: u64, found: u64 },

    #[error("coordinate {index} changed outside the gradient mask")]
    MaskViolation { index: usize },

    #[error("coordinate {index} out of range for {len} parameters")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("frame {frame} ({height}x{width}) is smaller than the {patch}x{patch} patch")]
    FrameTooSmall {
        frame: usize,
        height: usize,
        width: usize,
        patch: usize,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<EmtError>,
    },
}

impl EmtError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        EmtError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        EmtError::InvalidArgument(msg.into())
    }

    /// Innermost error, skipping any context wrappers.
    pub fn root(&self) -> &EmtError {
        match self {
            EmtError::Context { source, .. } => source.root(),
            other => other,
        }
    }
}

pub(crate) trait ResultExt<T> {
    fn context<C: Into<String>>(self, ctx: impl FnOnce() -> C) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn context<C: Into<String>>(self, ctx: impl FnOnce() -> C) -> Result<T> {
        self.map_err(|e| EmtError::Context {
            context: ctx().into(),
            source: Box::new(e),
        })
    }
}
