use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    #[error("non-finite value in {what} at frame {frame}")]
    NonFinite { what: &'static str, frame: usize },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("malformed WAV header: {0}")]
    WavHeader(String),

    #[error("unsupported WAV encoding: format tag {format}, {bits} bits per sample")]
    WavEncoding { format: u16, bits: u16 },

    #[error("unsupported WAV sample rate {0} Hz (expected 16000)")]
    WavRate(u32),

    #[error("unsupported WAV channel count {0} (expected mono)")]
    WavChannels(u16),

    #[error("window-sum underflow at output sample {0}")]
    WindowUnderflow(usize),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Error {
    Error::Invalid {
        op,
        msg: msg.into(),
    }
}

pub(crate) fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
