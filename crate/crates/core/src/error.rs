use alloc::string::String;

/// Errors produced by the core engine, model and data generator.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("box {index} lies entirely outside the feature map")]
    BoxOutside { index: usize },
    #[error("layout overflow: {0}")]
    Layout(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("incompatible data: {0}")]
    Incompatible(String),
    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Diverged {
        epoch: usize,
        step: usize,
        reason: String,
    },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! bail {
    ($variant:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$variant(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
