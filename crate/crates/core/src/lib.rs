//! Randomized channel-sparsifying hybrid precoding (RCSHP) for FDD massive MIMO.
//!
//! The crate covers the full statistics-to-policy pipeline:
//!
//! * [`channel`]: per-user covariance synthesis (geometry and COST-2100 style
//!   cluster models) and seeded channel / estimation-noise realizations.
//! * [`estimation`]: common pilots, closed-loop pilot observations and the
//!   LMMSE estimate of every user's effective channel.
//! * [`precoding`]: phase-only analog precoders, the duality-based digital
//!   precoder and the RZF baseline.
//! * [`rate`] and [`utility`]: instantaneous / Monte-Carlo rates through the
//!   estimate-then-precode pipeline and the utility family (sum rate, PFS,
//!   alpha-fair).
//! * [`jacobian`]: analytic gradients of the instantaneous rates with respect
//!   to the phases and powers of each control state, plus a central-difference
//!   oracle.
//! * [`ssca`]: the stochastic successive convex approximation optimizer over
//!   randomized control policies.
//!
//! The crate is `no_std` and only needs an allocator. All randomness goes
//! through explicit seeds (see [`rng`]).

#![no_std]
#![warn(missing_debug_implementations)]
#![allow(clippy::needless_range_loop)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod channel;
pub mod dims;
pub mod error;
pub mod estimation;
pub mod jacobian;
pub mod linalg;
pub mod precoding;
pub mod rate;
pub mod rng;
pub mod ssca;
pub mod utility;

pub use crate::channel::{ChannelSample, ChannelSampler, ChannelStats};
pub use crate::dims::SystemDims;
pub use crate::error::{Error, Result};
pub use crate::estimation::{EffectiveChannelEstimate, PilotMatrix};
pub use crate::precoding::{ControlPolicy, ControlVariable, DigitalPrecoder};
pub use crate::rate::{CsiMode, Pipeline, PrecoderKind, RateVector};
pub use crate::utility::UtilitySpec;
pub use num_complex::Complex64;

/// Complex matrix type used throughout the crate.
pub type CMatrix = nalgebra::DMatrix<num_complex::Complex64>;
/// Complex column vector.
pub type CVector = nalgebra::DVector<num_complex::Complex64>;
/// Real matrix.
pub type RMatrix = nalgebra::DMatrix<f64>;
