use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid gain distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },
    #[error("set of size {size} exceeds cap {cap}")]
    SizeCap { size: u128, cap: u128 },
    #[error("time index {t} out of range (length {len})")]
    TimeOutOfRange { t: usize, len: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("matrix is singular")]
    Singular,
    #[error("degenerate distribution: {0}")]
    Degenerate(String),
    #[error("enumeration of {points} points exceeds budget {budget}")]
    BudgetExceeded { points: u128, budget: u128 },
    #[error("block was erased")]
    ErasedBlock,
    #[error("insufficient grid: {0}")]
    InsufficientGrid(String),
    #[error("unknown scheme `{0}`")]
    UnknownScheme(String),
    #[error("tuple lies outside the degrees-of-freedom region")]
    OutsideRegion,
    #[error("symbol {value} outside alphabet [-{bound}, {bound}]")]
    SymbolOutOfAlphabet { value: i64, bound: i64 },
    #[error("channel realization has {available} steps, {required} required")]
    ChannelTooShort { required: usize, available: usize },
}

impl Error {
    pub(crate) fn param(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field,
            reason: reason.into(),
        }
    }
}
