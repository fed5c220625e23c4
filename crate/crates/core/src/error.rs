use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("capacity exceeded: {what} needs {needed} but the limit is {limit}")]
    Capacity {
        what: String,
        needed: u128,
        limit: u128,
    },

    #[error("boundary condition admits no feasible extension")]
    InfeasibleBoundary,

    #[error("region mismatch: {0}")]
    RegionMismatch(String),

    #[error("window too small: {0}")]
    WindowTooSmall(String),

    #[error("no coalescence within horizon {horizon} (largest remaining set size {max_set})")]
    NoCoalescence { horizon: u32, max_set: u32 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name: name.to_string(),
        reason: reason.into(),
    }
}
