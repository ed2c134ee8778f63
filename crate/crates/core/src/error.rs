use thiserror::Error;

/// Errors raised by the attack engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum AscError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("contract violation: {0}")]
    ContractViolation(String),
    #[error("degenerate target: {0}")]
    DegenerateTarget(String),
    #[error("degenerate prior: {0}")]
    DegeneratePrior(String),
    #[error("missing prior: {0}")]
    MissingPrior(String),
    #[error("oracle capability: {0}")]
    Capability(String),
    #[error("numeric failure at step {step}: {detail}")]
    NumericFailure { step: usize, detail: String },
    #[error("combinatorial blowup: {subsets} subsets exceeds limit {limit}")]
    CombinatorialBlowup { subsets: u128, limit: u64 },
    #[error("transport: {0}")]
    Transport(String),
    #[error("timed out after {0} ms waiting for oracle response")]
    Timeout(u64),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("remote error {code}: {message}")]
    Remote { code: u32, message: String },
    #[error("decode: {0}")]
    Decode(String),
}

impl AscError {
    /// True for failures that come from an oracle or its transport rather than
    /// from invalid caller input.
    pub fn is_oracle_failure(&self) -> bool {
        matches!(
            self,
            AscError::Capability(_)
                | AscError::Transport(_)
                | AscError::Timeout(_)
                | AscError::Protocol(_)
                | AscError::Remote { .. }
                | AscError::NumericFailure { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, AscError>;
