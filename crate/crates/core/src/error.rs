use numkit::NumError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error(transparent)]
    Num(#[from] NumError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("token {token} is outside the vocabulary (size {size})")]
    TokenOutOfVocab { token: u32, size: usize },

    #[error("sequence of length {len} exceeds the model context of {max}")]
    LengthOverflow { len: usize, max: usize },

    #[error("expected a {expected} model, found {found}")]
    RoleMismatch { expected: String, found: String },

    #[error("value model must be frozen before it can supply advantages")]
    NotFrozen,

    #[error("model is frozen and cannot be updated")]
    Frozen,

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("enumeration would exceed the cap of {cap} items")]
    CapExceeded { cap: usize },

    #[error("MDP does not terminate and discount is 1")]
    NonTerminating,

    #[error("no convergence after {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("occupancy system is singular")]
    Singular,

    #[error("conflicting preference: response is both chosen and rejected for the same prompt")]
    PreferenceConflict,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed record: {0}")]
    Json(#[from] serde_json::Error),
}

impl LabError {
    /// True for errors caused by non-finite numbers or a blown-up loss.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            LabError::Divergence(_) | LabError::Num(NumError::NonFinite { .. })
        )
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
