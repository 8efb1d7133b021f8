use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated payload while reading {0}")]
    Truncated(&'static str),

    #[error("corrupt payload: {0}")]
    Corrupt(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("model is frozen")]
    Frozen,

    #[error("model is not frozen")]
    NotFrozen,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("code {code} does not fit in {bits} bits")]
    TokenTooWide { code: u32, bits: u32 },

    #[error("{levels} tokens of {bits} bits exceed 64 bits")]
    PackOverflow { levels: usize, bits: u32 },

    #[error("unsupported n-gram order {0} (only 1 and 2 are supported)")]
    UnsupportedNgram(usize),

    #[error("unknown item {0}")]
    UnknownItem(u32),

    #[error("no eligible items on day {0}")]
    NoEligibleItems(u32),

    #[error("mismatched seeds across configurations")]
    SeedMismatch,
}

impl Error {
    /// True for failures caused by non-finite arithmetic rather than bad input or I/O.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }

    /// True for failures reading or writing files, including malformed payloads.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io(_)
                | Error::BadMagic { .. }
                | Error::VersionMismatch { .. }
                | Error::Truncated(_)
                | Error::Corrupt(_)
        )
    }
}
