//! Experiment configuration: a TOML document laid over a built-in profile.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rcshp_core::channel::{Cost2100ModelParams, GeometryModelParams};
use rcshp_core::ssca::StepSchedule;
use rcshp_core::{CsiMode, SystemDims, UtilitySpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::energy::PowerModel;
use crate::error::{Result, SimError};

/// Built-in parameter sets. `desk` runs in seconds to minutes; `paper` uses
/// the full array size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Profile {
    #[default]
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ChannelModel {
    Geometry(GeometryModelParams),
    Cost2100(Cost2100ModelParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    None,
    /// Values are pilot counts `T_p`.
    Pilots,
    /// Values are SNR in dB; `P_max = 10^(snr / 10)` with unit noise.
    Snr,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::None => "none",
            SweepAxis::Pilots => "pilots",
            SweepAxis::Snr => "snr",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub axis: SweepAxis,
    /// Ignored when `axis = "none"`.
    #[serde(default)]
    pub values: Vec<f64>,
}

/// Precoding schemes evaluated at every sweep point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Optimized randomized policy under the configured CSI mode.
    Rcshp,
    /// Optimized and evaluated with the true effective channel.
    PerfectCsiRcshp,
    /// One state: eigen-beam phases, equal power, duality precoder.
    DualityEqualPower,
    /// One state: eigen-beam phases, equal power, RZF with `alpha = K / P_max`.
    RzfEqualPower,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [
        Scheme::Rcshp,
        Scheme::PerfectCsiRcshp,
        Scheme::DualityEqualPower,
        Scheme::RzfEqualPower,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Rcshp => "rcshp",
            Scheme::PerfectCsiRcshp => "perfect_csi_rcshp",
            Scheme::DualityEqualPower => "duality_equal_power",
            Scheme::RzfEqualPower => "rzf_equal_power",
        }
    }

    pub fn is_optimized(self) -> bool {
        matches!(self, Scheme::Rcshp | Scheme::PerfectCsiRcshp)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = String;

    /// Accepts the full names and the short forms `rzf`, `perfect` and
    /// `duality`.
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "rcshp" => Scheme::Rcshp,
            "perfect" | "perfect_csi_rcshp" => Scheme::PerfectCsiRcshp,
            "duality" | "duality_equal_power" => Scheme::DualityEqualPower,
            "rzf" | "rzf_equal_power" => Scheme::RzfEqualPower,
            other => {
                return Err(format!(
                    "unknown scheme {other:?}; expected rcshp, rzf, perfect or duality"
                ))
            }
        })
    }
}

/// Statistics, optimizer and evaluation streams are independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    /// Channel statistics, pilots and the initial policy.
    pub stats: u64,
    /// Optimizer batches and its held-out trace samples.
    pub optimizer: u64,
    /// Final evaluation samples shared by all schemes.
    pub evaluation: u64,
}

impl Seeds {
    /// `base`, `base + 1`, `base + 2`.
    pub fn from_base(base: u64) -> Self {
        Seeds {
            stats: base,
            optimizer: base.wrapping_add(1),
            evaluation: base.wrapping_add(2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub iterations: usize,
    /// Channel and noise draws per iteration.
    pub batch_size: usize,
    /// Held-out utility is recorded in the trace every this many iterations
    /// (0 disables it).
    pub trace_every: usize,
    pub trace_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub csi_mode: CsiMode,
    pub schemes: Vec<Scheme>,
    /// Held-out Monte-Carlo samples for the reported metrics.
    pub n_eval_samples: usize,
    /// Slots per coherence block of the statistics, for the slot-level
    /// policy replay.
    pub slots_per_block: usize,
    /// Scale reported rates by `(T - T_p) / T`.
    pub pilot_overhead: bool,
    pub dims: SystemDims,
    pub channel: ChannelModel,
    pub utility: UtilitySpec,
    pub schedule: StepSchedule,
    pub optimizer: OptimizerConfig,
    pub sweep: Sweep,
    pub seeds: Seeds,
    pub power_model: PowerModel,
}

/// Schedule used by both profiles (see the README for how it was chosen).
pub fn tuned_schedule() -> StepSchedule {
    StepSchedule {
        rho_exponent: 0.9,
        gamma_exponent: 1.0,
        tau_q: 1.0,
        tau_gamma: 0.1,
        wrap_phases: false,
    }
}

impl ExperimentConfig {
    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => ExperimentConfig {
                name: "desk".into(),
                csi_mode: CsiMode::Estimated,
                schemes: Scheme::ALL.to_vec(),
                n_eval_samples: 2000,
                slots_per_block: 200,
                pilot_overhead: false,
                dims: SystemDims {
                    antennas: 16,
                    rf_chains: 4,
                    users: 4,
                    pilots: 4,
                    states: 2,
                    slot_symbols: 20,
                    max_power: 10.0,
                },
                channel: ChannelModel::Geometry(GeometryModelParams::default()),
                utility: UtilitySpec::SumRate,
                schedule: tuned_schedule(),
                optimizer: OptimizerConfig {
                    iterations: 50,
                    batch_size: 9,
                    trace_every: 10,
                    trace_samples: 200,
                },
                sweep: Sweep {
                    axis: SweepAxis::Pilots,
                    values: default_sweep_values(SweepAxis::Pilots, 4),
                },
                seeds: Seeds::from_base(1),
                power_model: PowerModel::default(),
            },
            Profile::Paper => ExperimentConfig {
                name: "paper".into(),
                dims: SystemDims {
                    antennas: 64,
                    rf_chains: 8,
                    users: 8,
                    pilots: 8,
                    states: 4,
                    slot_symbols: 20,
                    max_power: 10.0,
                },
                optimizer: OptimizerConfig {
                    iterations: 100,
                    batch_size: 9,
                    trace_every: 10,
                    trace_samples: 200,
                },
                sweep: Sweep {
                    axis: SweepAxis::Pilots,
                    values: default_sweep_values(SweepAxis::Pilots, 8),
                },
                ..ExperimentConfig::profile(Profile::Desk)
            }
            .renamed("paper"),
        }
    }

    fn renamed(mut self, name: &str) -> Self {
        self.name = name.into();
        self
    }

    /// The profile with the TOML file at `path` laid over it, validated.
    pub fn load(path: Option<&Path>, profile: Profile) -> Result<Self> {
        let base = ExperimentConfig::profile(profile);
        let Some(path) = path else {
            base.validate()?;
            return Ok(base);
        };
        let text = std::fs::read_to_string(path).map_err(SimError::io(path))?;
        Self::overlay(base, &text).map_err(|source| match source {
            OverlayError::Toml(source) => SimError::Toml {
                path: path.to_path_buf(),
                source,
            },
            OverlayError::Sim(e) => e,
        })
    }

    /// `base` with every key present in `text` replaced.
    pub fn from_toml_over(base: ExperimentConfig, text: &str) -> Result<Self> {
        Self::overlay(base, text).map_err(|e| match e {
            OverlayError::Toml(source) => SimError::Config(source.to_string()),
            OverlayError::Sim(e) => e,
        })
    }

    fn overlay(base: ExperimentConfig, text: &str) -> Result<Self, OverlayError> {
        let overlay: toml::Table = toml::from_str(text).map_err(OverlayError::Toml)?;
        let mut merged = toml::Table::try_from(&base).map_err(|e| OverlayError::Sim(e.into()))?;
        merge_tables(&mut merged, overlay);
        let config: ExperimentConfig = toml::Value::Table(merged).try_into().map_err(OverlayError::Toml)?;
        config.validate().map_err(OverlayError::Sim)?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// SHA-256 of the canonical TOML serialization, hex encoded.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SimError::Config(msg));
        self.dims.validate()?;
        match &self.channel {
            ChannelModel::Geometry(p) => p.validate()?,
            ChannelModel::Cost2100(p) => p.validate()?,
        }
        self.utility.validate()?;
        self.schedule.validate()?;
        if let Err(msg) = self.power_model.validate() {
            return bad(msg);
        }
        if self.optimizer.batch_size == 0 {
            return bad("optimizer.batch_size must be at least one".into());
        }
        if self.optimizer.trace_every > 0 && self.optimizer.trace_samples == 0 {
            return bad("optimizer.trace_samples must be positive when trace_every > 0".into());
        }
        if self.n_eval_samples < 2 {
            return bad(format!(
                "n_eval_samples must be at least 2, got {}",
                self.n_eval_samples
            ));
        }
        if self.slots_per_block == 0 {
            return bad("slots_per_block must be at least one".into());
        }
        if self.schemes.is_empty() {
            return bad("at least one scheme is required".into());
        }
        for (i, s) in self.schemes.iter().enumerate() {
            if self.schemes[..i].contains(s) {
                return bad(format!("scheme {s} listed twice"));
            }
        }
        for seed in [self.seeds.stats, self.seeds.optimizer, self.seeds.evaluation] {
            if seed > i64::MAX as u64 {
                return bad(format!("seed {seed} does not fit a TOML integer"));
            }
        }
        for v in self.sweep_values() {
            let dims = self.dims_at(v)?;
            if self.pilot_overhead && dims.pilots > dims.slot_symbols {
                return bad(format!(
                    "{} pilots exceed the {} symbols of a slot",
                    dims.pilots, dims.slot_symbols
                ));
            }
        }
        if self.sweep.axis != SweepAxis::None && self.sweep.values.is_empty() {
            return bad(format!("{} sweep has no values", self.sweep.axis.as_str()));
        }
        Ok(())
    }

    /// The sweep values, or the single base point for `axis = "none"`.
    pub fn sweep_values(&self) -> Vec<f64> {
        match self.sweep.axis {
            SweepAxis::None => vec![0.0],
            _ => self.sweep.values.clone(),
        }
    }

    /// System dimensions at one sweep value.
    pub fn dims_at(&self, value: f64) -> Result<SystemDims> {
        let mut dims = self.dims;
        match self.sweep.axis {
            SweepAxis::None => {}
            SweepAxis::Pilots => {
                if !(value >= 1.0 && value.fract() == 0.0 && value <= u32::MAX as f64) {
                    return Err(SimError::Config(format!(
                        "pilot counts must be positive integers, got {value}"
                    )));
                }
                dims.pilots = value as usize;
            }
            SweepAxis::Snr => {
                if !value.is_finite() {
                    return Err(SimError::Config(format!("SNR values must be finite, got {value}")));
                }
                dims.max_power = 10f64.powf(value / 10.0);
            }
        }
        dims.validate()?;
        Ok(dims)
    }

    /// Switches the sweep axis, taking default values unless the axis is
    /// unchanged.
    pub fn set_sweep_axis(&mut self, axis: SweepAxis) {
        if axis != self.sweep.axis {
            self.sweep = Sweep {
                axis,
                values: default_sweep_values(axis, self.dims.rf_chains),
            };
        }
    }

    pub fn set_scheme(&mut self, scheme: Scheme) {
        self.schemes = vec![scheme];
    }
}

/// Pilots `2..=2S`; SNR `0..=30` dB in steps of 5.
pub fn default_sweep_values(axis: SweepAxis, rf_chains: usize) -> Vec<f64> {
    match axis {
        SweepAxis::None => Vec::new(),
        SweepAxis::Pilots => (2..=2 * rf_chains).map(|t| t as f64).collect(),
        SweepAxis::Snr => (0..=6).map(|i| 5.0 * i as f64).collect(),
    }
}

enum OverlayError {
    Toml(toml::de::Error),
    Sim(SimError),
}

/// Recursive merge; a table whose `model` or `kind` tag changes is replaced
/// whole, since its other keys belong to a different variant.
fn merge_tables(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if !tag_changed(b, &o) => merge_tables(b, o),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

fn tag_changed(base: &toml::Table, overlay: &toml::Table) -> bool {
    ["model", "kind"]
        .iter()
        .any(|tag| matches!((base.get(*tag), overlay.get(*tag)), (Some(a), Some(b)) if a != b))
}
