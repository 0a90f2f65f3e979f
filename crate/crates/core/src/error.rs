use std::io;

use thiserror::Error;

/// Errors raised by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("degenerate mask: softmax row {row} has no finite entry")]
    DegenerateMask { row: usize },

    #[error("contract error: {0}")]
    Contract(String),

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("format error in field `{field}`: {message}")]
    Format { field: &'static str, message: String },

    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("spectral coverage error: {0}")]
    SpectralCoverage(String),

    #[error("precondition error: {0}")]
    Precondition(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("assignment error: {0}")]
    Assignment(String),

    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    /// An error raised inside one stage of the detector pipeline.
    #[error("{module}: {source}")]
    Stage { module: &'static str, source: Box<Error> },

    #[error("training aborted: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// The innermost error, skipping stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}

/// Attaches a pipeline stage name to an error.
pub trait StageContext<T> {
    fn stage(self, module: &'static str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, module: &'static str) -> Result<T> {
        self.map_err(|e| match e {
            e @ Error::Stage { .. } => e,
            e => Error::Stage { module, source: Box::new(e) },
        })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}

pub(crate) fn param_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Parameter(msg.into()))
}
