use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Invalid dimensions, model parameters or schedules.
    Config(String),
    /// Input data that violates a documented invariant (non-PSD covariance,
    /// negative rates, infeasible policy).
    Data(String),
    /// Shape mismatch between arguments.
    Contract(String),
    /// A factorization or solve failed.
    Numerical(String),
    /// An iterative solver hit its iteration cap.
    NotConverged { iterations: usize, residual: f64 },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Data(msg) => write!(f, "invalid data: {msg}"),
            Error::Contract(msg) => write!(f, "shape mismatch: {msg}"),
            Error::Numerical(msg) => write!(f, "numerical failure: {msg}"),
            Error::NotConverged { iterations, residual } => write!(
                f,
                "solver did not converge after {iterations} iterations (residual {residual:.3e})"
            ),
        }
    }
}

impl core::error::Error for Error {}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err($crate::error::Error::$variant(alloc::format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
