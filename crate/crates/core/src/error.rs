use alloc::string::String;
use core::fmt;

/// Errors raised by the core crate.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    Shape(String),
    /// An argument is outside its admissible range.
    InvalidArgument(String),
    /// A forward computation produced NaN or infinity.
    NonFinite(String),
    /// The model configuration is inconsistent with the input.
    Profile(String),
    /// Input data violates an invariant (labels out of range, empty dataset, ...).
    Data(String),
    /// Stage ordering or mode violation (e.g. decoding outside stage 1).
    Stage(String),
    /// Byte container errors.
    Format(FormatError),
}

/// Decoding failures of the binary containers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FormatError {
    BadMagic,
    UnsupportedVersion(u16),
    ChecksumMismatch { stored: u32, computed: u32 },
    Truncated,
    Invalid(String),
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FormatError::BadMagic => write!(f, "bad magic"),
            FormatError::UnsupportedVersion(v) => write!(f, "unsupported version {v}"),
            FormatError::ChecksumMismatch { stored, computed } => {
                write!(f, "CRC mismatch: stored {stored:08x}, computed {computed:08x}")
            }
            FormatError::Truncated => write!(f, "truncated input"),
            FormatError::Invalid(m) => write!(f, "invalid content: {m}"),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape mismatch: {m}"),
            Error::InvalidArgument(m) => write!(f, "invalid argument: {m}"),
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
            Error::Profile(m) => write!(f, "profile mismatch: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Stage(m) => write!(f, "stage error: {m}"),
            Error::Format(e) => write!(f, "format error: {e}"),
        }
    }
}

impl core::error::Error for Error {}
impl core::error::Error for FormatError {}

impl From<FormatError> for Error {
    fn from(e: FormatError) -> Self {
        Error::Format(e)
    }
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(alloc::format!($($arg)*)) };
}
macro_rules! arg_err {
    ($($arg:tt)*) => { $crate::error::Error::InvalidArgument(alloc::format!($($arg)*)) };
}
pub(crate) use arg_err;
pub(crate) use shape_err;
