use thiserror::Error;

/// Errors raised by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("integral diverges: {0}")]
    Divergent(String),

    #[error("singular evaluation: {0}")]
    Singular(String),

    #[error("grid has {cells} cells, above the cap of {cap}")]
    GridTooLarge { cells: usize, cap: usize },

    #[error("covariance factorization failed: clipped spectral mass {distortion:.3e} exceeds 1% of the trace")]
    Factorization { distortion: f64 },

    #[error("particle population {count} exceeds the cap of {cap} at t = {time}")]
    PopulationCap { count: usize, cap: usize, time: f64 },

    #[error("explicit scheme unstable: dt = {dt} exceeds the limit {limit}")]
    Cfl { dt: f64, limit: f64 },

    #[error("solver overflow at t = {time}: {detail}")]
    Overflow { time: f64, detail: String },

    #[error("mesh mismatch: {0}")]
    MeshMismatch(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn param(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
