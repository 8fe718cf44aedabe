use std::io;

use thiserror::Error;

/// Errors raised by the matching, post-processing and file-format layers.
#[derive(Debug, Error)]
pub enum Error {
    /// A file or byte stream does not follow its declared layout.
    #[error("format error: {0}")]
    Format(String),
    /// Two inputs disagree on their tensor profile (d, h, w) or dimensions.
    #[error("profile mismatch: {0}")]
    ProfileMismatch(String),
    /// An operation was invoked with arguments outside its contract.
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn precondition<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Precondition(msg.into()))
}

pub(crate) fn profile_mismatch<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::ProfileMismatch(msg.into()))
}
