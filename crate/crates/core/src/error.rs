use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A configuration value violates its documented invariant.
    #[error("configuration error: {0}")]
    Config(String),
    /// An argument violates an operation's precondition (shape, range, ...).
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("pairing error: identity {identity} variation {variation}: {reason}")]
    Pairing {
        identity: u32,
        variation: u32,
        reason: String,
    },
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("weight load error: {0}")]
    Load(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("checkpoint incompatible: {0}")]
    Incompatible(String),
}

macro_rules! contract {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::Error::Contract(alloc::format!($($arg)+)));
        }
    };
}
pub(crate) use contract;
