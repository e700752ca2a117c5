use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the core engine.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("non-finite value in {op}")]
    NonFinite { op: &'static str },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("budget {capacity} infeasible for {layers} layers: feasible range is [{min}, {max}]")]
    BudgetInfeasible {
        capacity: u32,
        layers: usize,
        min: u32,
        max: u32,
    },
    #[error("training diverged during {stage} at epoch {epoch}, step {step}")]
    Diverged {
        stage: &'static str,
        epoch: usize,
        step: usize,
    },
    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
