use thiserror::Error;

/// Errors produced by the distribution algebra, the OBRS solver and the
/// correction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("a categorical distribution needs at least 2 entries, got {0}")]
    TooFewEntries(usize),

    #[error("negative mass {value} at token {index}")]
    NegativeMass { index: usize, value: f64 },

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("total mass is zero")]
    ZeroMass,

    #[error("vocabulary size mismatch: {left} vs {right}")]
    VocabMismatch { left: usize, right: usize },

    #[error("divergence undefined: target has mass {p} at token {index} where the reference has none")]
    SupportViolation { index: usize, p: f64 },

    #[error("k = {k} out of range for vocabulary of size {vocab}")]
    KOutOfRange { k: usize, vocab: usize },

    #[error("invalid parameter `{name}` = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },

    #[error("acceptance rate underflowed to zero (no overlap between target and proposal)")]
    ZUnderflow,

    #[error("budget {0} outside (0, 1]")]
    BudgetOutOfRange(f64),

    #[error("budget {budget} is unreachable; the largest achievable acceptance rate is {max}")]
    BudgetInfeasible { budget: f64, max: f64 },

    #[error("expected {expected:.3e} proposals exceeds the cap of {cap:.3e}")]
    ProposalCapExceeded { expected: f64, cap: f64 },

    #[error("duplicate token id {0} in top-k list")]
    DuplicateToken(usize),

    #[error("top-k list is not sorted by descending log-prob (ties by ascending id) at position {0}")]
    UnsortedTopK(usize),

    #[error("top-k list mass {0} exceeds 1")]
    TopKMassExceeded(f64),

    #[error("empty batch")]
    EmptyBatch,

    #[error("every token in the batch was masked")]
    AllMasked,

    #[error("group {group} has {size} member(s); at least 2 are required")]
    GroupTooSmall { group: usize, size: usize },

    #[error("length mismatch for {what}: expected {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("oracle supports vocabularies up to {max} tokens, got {size}")]
    OracleTooLarge { size: usize, max: usize },

    #[error("no feasible acceptance rule for budget {0}")]
    OracleInfeasible(f64),

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("record {index}: {message}")]
    InvalidRecord { index: usize, message: String },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("environment variable {name} = `{value}` is not an unsigned integer")]
    InvalidEnv { name: &'static str, value: String },

    #[error("{}: {source}", path.display())]
    File {
        path: std::path::PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn file_error(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::File {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn check_finite(what: &'static str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { what, index }),
        None => Ok(()),
    }
}
