use std::fmt;

/// Errors produced anywhere in the audit pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("arity {k} exceeds the enumeration cap of {cap}")]
    ArityTooLarge { k: usize, cap: usize },

    #[error("oracle failed on coalition {coalition:?}: {source}")]
    Oracle {
        coalition: Vec<usize>,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("coalition design is rank deficient (rank {rank} of {expected}); indistinguishable players: {}", fmt_groups(.indistinguishable))]
    RankDeficient {
        rank: usize,
        expected: usize,
        indistinguishable: Vec<Vec<usize>>,
    },

    #[error("the {0} coalition was not evaluated")]
    MissingAnchor(Anchor),

    #[error("Monte-Carlo sample {sample} failed after {attempts} attempts: {source}")]
    McExhausted {
        sample: usize,
        attempts: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("integration steps must be at least 1, got {0}")]
    InvalidSteps(usize),

    #[error("unknown special token: {0}")]
    UnknownSpecialToken(String),

    #[error("degenerate denominator {0:e}")]
    DegenerateDenominator(f64),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("authentication error: {0}")]
    Auth(String),

    #[error("token alignment error: {0}")]
    Alignment(String),

    #[error("generation produced no tokens")]
    EmptyGeneration,

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("zero variance: {0}")]
    ZeroVariance(&'static str),

    #[error("insufficient data: need at least {required}, found {found}")]
    InsufficientData { required: usize, found: usize },

    #[error("invalid persistence {0}; must lie in (0, 1)")]
    InvalidPersistence(f64),

    #[error("scorer failed at mask level {level}: {source}")]
    Scorer {
        level: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("template error: {0}")]
    Template(String),

    #[error("schema validation failed: {0}")]
    Schema(String),

    #[error("weight file error: {0}")]
    Weights(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures that a retry might resolve.
    pub fn is_transient(&self) -> bool {
        matches!(self, Error::Transport(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Anchor {
    Empty,
    Full,
}

impl fmt::Display for Anchor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Anchor::Empty => f.write_str("empty"),
            Anchor::Full => f.write_str("full"),
        }
    }
}

fn fmt_groups(groups: &[Vec<usize>]) -> String {
    if groups.is_empty() {
        return "none identified".to_string();
    }
    groups
        .iter()
        .map(|g| format!("{g:?}"))
        .collect::<Vec<_>>()
        .join(", ")
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
