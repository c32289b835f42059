use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Tensor extents incompatible with the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A caller broke an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),
    /// Invalid hyperparameters.
    #[error("configuration error: {0}")]
    Config(String),
    /// NaN or infinity produced where finite values are required.
    #[error("numerical error: {0}")]
    NonFinite(String),
}

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
