use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("record {id}: dimension mismatch (expected n={expected}, found n={found})")]
    RecordDimension {
        id: u64,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value encountered")]
    NonFinite,

    #[error("matrix is singular to working precision")]
    Singular,

    #[error("no matrix met rcond >= {min_rcond} after {attempts} draws")]
    Conditioning { attempts: usize, min_rcond: f64 },

    #[error("permutation is not a bijection")]
    NotABijection,

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("truncated file: needed {needed} bytes, {available} available")]
    Truncated { needed: u64, available: u64 },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("oracle refused: {0}")]
    OracleRefused(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// True for errors caused by malformed or inconsistent data rather than
    /// bad caller arguments.
    pub fn is_integrity(&self) -> bool {
        matches!(
            self,
            Error::BadMagic { .. }
                | Error::UnsupportedVersion(_)
                | Error::Truncated { .. }
                | Error::Corrupt(_)
                | Error::NotABijection
                | Error::NonFinite
                | Error::DimensionMismatch { .. }
                | Error::RecordDimension { .. }
        )
    }
}
