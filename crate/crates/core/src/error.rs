use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("state error: {0}")]
    State(String),

    #[error("degenerate actnorm scale {value:e} in channel {channel} (|s| must be >= 1e-6)")]
    DegenerateScale { channel: usize, value: f64 },

    #[error("singular 1x1 convolution weight (|det| = {det:e}, need > 1e-8)")]
    SingularMatrix { det: f64 },

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("non-finite {component} loss ({value})")]
    NonFinite { component: &'static str, value: f64 },

    #[error(
        "training diverged at step {step}: non-finite {component} loss ({value}); last good checkpoint: {}",
        last_checkpoint.as_ref().map_or("none".to_string(), |p| p.display().to_string())
    )]
    Diverged {
        step: u64,
        component: &'static str,
        value: f64,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("load error for {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("checkpoint version mismatch in {path}: found {found:?}, this build reads {expected}")]
    Version {
        path: PathBuf,
        found: String,
        expected: u32,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("config error in {path}: {reason}")]
    Config { path: PathBuf, reason: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("image error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("io error for {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short stable name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::State(_) => "state",
            Error::DegenerateScale { .. } => "degenerate_scale",
            Error::SingularMatrix { .. } => "singular_matrix",
            Error::Parameter(_) => "parameter",
            Error::NonFinite { .. } => "non_finite",
            Error::Diverged { .. } => "diverged",
            Error::Load { .. } => "load",
            Error::Version { .. } => "version",
            Error::Dataset(_) => "dataset",
            Error::Config { .. } => "config",
            Error::InsufficientData(_) => "insufficient_data",
            Error::Image { .. } => "image",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
