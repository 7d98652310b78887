use thiserror::Error;

/// Errors raised by the numeric kernels, the model, the trace codec and the selectors.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,
    #[error("invalid kernel: {0} (must be odd and >= 1)")]
    InvalidKernel(usize),
    #[error("k exceeds length: k={k}, len={len}")]
    KExceedsLength { k: usize, len: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("window exceeds sequence: ws={ws}, seq_len={seq_len}")]
    WindowExceedsSequence { ws: usize, seq_len: usize },
    #[error("context overflow: position {position} >= max_seq {max_seq}")]
    ContextOverflow { position: usize, max_seq: usize },
    #[error("token {token} out of vocabulary ({vocab})")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("not a trace file")]
    NotATrace,
    #[error("truncated")]
    Truncated,
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
    #[error("unknown profile: {0}")]
    UnknownProfile(String),

    #[error("sink exceeds budget: sink={sink}, ws={ws}, wt={wt}")]
    SinkExceedsBudget { sink: usize, ws: usize, wt: usize },
    #[error("invalid pyramid: {0}")]
    InvalidPyramid(String),
    #[error("plan/cache mismatch: {0}")]
    PlanCacheMismatch(String),
    #[error("degenerate trace: all pooled scores are zero")]
    DegenerateTrace,

    #[error("trace has no needle")]
    NoNeedle,
    #[error("incompatible traces: {0}")]
    IncompatibleTraces(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad input data rather than bad arguments or bugs.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::NotATrace
                | Error::Truncated
                | Error::MalformedTrace(_)
                | Error::DegenerateTrace
                | Error::NoNeedle
                | Error::IncompatibleTraces(_)
                | Error::PlanCacheMismatch(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
