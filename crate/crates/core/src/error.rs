//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid radio parameter: {0}")]
    InvalidParameter(String),
    #[error("symbol value {alpha} out of range for sf {sf}")]
    SymbolOutOfRange { alpha: u32, sf: u8 },
    #[error("waveform length {got} does not match expected {expected}")]
    WaveformLength { got: usize, expected: usize },
    #[error("requested window [{start}, {end}) outside waveform of {len} samples")]
    WindowOutOfRange { start: usize, end: usize, len: usize },
    #[error("frame too short: {got} bytes, minimum {min}")]
    FrameTooShort { got: usize, min: usize },
    #[error("frame field invalid: {0}")]
    FrameField(String),
    #[error("message integrity check failed")]
    BadMic,
    #[error("unknown frame type byte {0:#04x}")]
    UnknownFrameKind(u8),
    #[error("scenario config invalid: {0}")]
    Config(String),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
