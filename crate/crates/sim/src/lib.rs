//! Experiment harness for the `rcshp-core` optimizer: TOML configuration,
//! seeded sweeps over pilot counts or SNR, baseline schemes on common
//! evaluation samples, energy efficiency and CSV/JSON/trace output.

pub mod config;
pub mod energy;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod output;

pub use crate::config::{ExperimentConfig, Profile, Scheme, SweepAxis};
pub use crate::energy::PowerModel;
pub use crate::error::{Result, SimError};
pub use crate::harness::{run_experiment, ExperimentRecord, RunOutput};
