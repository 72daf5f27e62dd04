use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("sampling rate {sample_rate_hz} Hz violates the Nyquist rule for content up to {max_signal_hz} Hz (need >= {})", 2.0 * max_signal_hz)]
    NyquistViolation {
        max_signal_hz: f64,
        sample_rate_hz: f64,
    },

    #[error("mismatched list lengths: {left} frequencies vs {right} amplitudes")]
    LengthMismatch { left: usize, right: usize },

    #[error("FFT input length {0} is not a power of two")]
    NonPowerOfTwo(usize),

    #[error("signal of {samples} samples is shorter than one {window}-sample window")]
    SignalTooShort { samples: usize, window: usize },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("target needs at least {needed} frames but only {got} are available")]
    InfeasibleTarget { needed: usize, got: usize },

    #[error("brute-force instance too large: T={frames}, K={labels} (limits T<=8, K<=4)")]
    InstanceTooLarge { frames: usize, labels: usize },

    #[error("no path collapses to the target (probability zero)")]
    ImpossibleTarget,

    #[error("symbol {0:?} is not in the alphabet")]
    OutOfVocabulary(char),

    #[error("label index {index} out of range for alphabet of {len} symbols")]
    LabelOutOfRange { index: usize, len: usize },

    #[error("empty reference: error rate denominator undefined")]
    EmptyReference,

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("character {ch:?} needs a tone at {freq_hz} Hz, above the 4 kHz speech budget")]
    FrequencyBudget { ch: char, freq_hz: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("utterance {id:?}: {reason}")]
    BadUtterance { id: String, reason: String },

    #[error("training diverged (non-finite loss) at epoch {epoch}, utterance {utterance:?}")]
    Diverged { epoch: usize, utterance: String },

    #[error("unsupported checkpoint format_version {0}")]
    FormatVersion(u32),

    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn malformed(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Malformed {
            what,
            detail: detail.into(),
        }
    }

    pub(crate) fn shape(context: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.into(),
            got: got.into(),
        }
    }
}
