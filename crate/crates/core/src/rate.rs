//! Achievable rates through the estimate-then-precode pipeline.
//!
//! For one channel draw the BS builds `F`, estimates the effective channels
//! (or uses them exactly), computes the digital precoder from the estimate
//! and the powers, and user `k` gets
//!
//! ```text
//! r_k = log2(1 + p_k |h_k^H F g_k|^2 / (sum_{i != k} p_i |h_k^H F g_i|^2 + 1))
//! ```
//!
//! with the true channel in the SINR.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::LN_2;
use core::ops::Deref;

use crate::channel::{ChannelSample, ChannelSampler, ChannelStats};
use crate::error::{ensure, Result};
use crate::estimation::{estimate_with, lmmse_filters, observe_pilots_scaled, LmmseFilter, PilotMatrix};
use crate::precoding::{duality_directions, normalize_columns, rzf_digital_precoder, ControlPolicy, ControlVariable};
use crate::CMatrix;
#[allow(unused_imports)]
use num_traits::Float;

/// Which effective channel the digital precoder sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum CsiMode {
    /// LMMSE estimate from the pilot observations.
    Estimated,
    /// The true `H F`.
    Perfect,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum PrecoderKind {
    Duality,
    Rzf { alpha: f64 },
}

/// Per-user rates in bits per channel use.
#[derive(Debug, Clone, PartialEq)]
pub struct RateVector(pub Vec<f64>);

impl RateVector {
    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for RateVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// SINR rates from the cross gains `c = H F G` (`c[k, i] = h_k^H F g_i`).
pub fn sinr_rates(c: &CMatrix, power: &[f64]) -> Vec<f64> {
    let k_users = c.nrows();
    (0..k_users)
        .map(|k| {
            let mut interference = 1.0;
            for i in 0..c.ncols() {
                if i != k {
                    interference += power[i] * c[(k, i)].norm_sqr();
                }
            }
            let signal = power[k] * c[(k, k)].norm_sqr();
            ((interference + signal).ln() - interference.ln()) / LN_2
        })
        .collect()
}

/// Statistics, pilots and evaluation settings shared by every draw.
#[derive(Debug, Clone, Copy)]
pub struct Pipeline<'a> {
    pub stats: &'a ChannelStats,
    pub pilots: &'a PilotMatrix,
    pub csi: CsiMode,
    pub precoder: PrecoderKind,
    /// Variance of the pilot noise; observations scale `N` by its root.
    pub noise_var: f64,
}

impl<'a> Pipeline<'a> {
    /// Estimated CSI, duality precoder, unit noise.
    pub fn new(stats: &'a ChannelStats, pilots: &'a PilotMatrix) -> Self {
        Pipeline {
            stats,
            pilots,
            csi: CsiMode::Estimated,
            precoder: PrecoderKind::Duality,
            noise_var: 1.0,
        }
    }

    pub fn with_csi(mut self, csi: CsiMode) -> Self {
        self.csi = csi;
        self
    }

    pub fn with_precoder(mut self, precoder: PrecoderKind) -> Self {
        self.precoder = precoder;
        self
    }

    pub fn with_noise_var(mut self, noise_var: f64) -> Self {
        self.noise_var = noise_var;
        self
    }

    /// Builds everything that depends on the control variable only.
    pub fn prepare(&self, gamma: &ControlVariable) -> Result<PreparedControl<'a>> {
        let dims = self.stats.dims();
        ensure!(
            self.pilots.rf_chains() == dims.rf_chains,
            Contract,
            "pilots have {} streams, system has {} RF chains",
            self.pilots.rf_chains(),
            dims.rf_chains
        );
        ensure!(
            gamma.power.len() == dims.users,
            Contract,
            "{} powers for {} users",
            gamma.power.len(),
            dims.users
        );
        let f = gamma.analog(dims)?;
        let filters = match self.csi {
            CsiMode::Estimated => Some(lmmse_filters(self.stats, &f, self.pilots, self.noise_var)?),
            CsiMode::Perfect => None,
        };
        Ok(PreparedControl {
            pipeline: *self,
            f,
            power: gamma.power.clone(),
            filters,
        })
    }

    pub fn rates(&self, gamma: &ControlVariable, sample: &ChannelSample) -> Result<RateVector> {
        self.prepare(gamma)?.rates(sample)
    }
}

/// A control variable bound to a pipeline, ready for many channel draws.
#[derive(Debug, Clone)]
pub struct PreparedControl<'a> {
    pipeline: Pipeline<'a>,
    pub f: CMatrix,
    pub power: Vec<f64>,
    filters: Option<Vec<LmmseFilter>>,
}

impl PreparedControl<'_> {
    pub fn filters(&self) -> Option<&[LmmseFilter]> {
        self.filters.as_deref()
    }

    /// The effective channel the precoder is built from (`K x S`).
    pub fn channel_estimate(&self, sample: &ChannelSample) -> Result<CMatrix> {
        match &self.filters {
            None => Ok(&sample.h * &self.f),
            Some(filters) => {
                let pilots = self.pipeline.pilots;
                let y = observe_pilots_scaled(sample, &self.f, pilots, self.pipeline.noise_var.sqrt())?;
                Ok(estimate_with(filters, pilots, &y)?.h)
            }
        }
    }

    /// Digital precoder with `||F g_k|| = 1`. For the duality rule, users
    /// with zero power keep their limiting direction; it does not affect any
    /// rate.
    pub fn digital_precoder(&self, h_hat: &CMatrix) -> Result<CMatrix> {
        match self.pipeline.precoder {
            PrecoderKind::Duality => {
                let d = duality_directions(h_hat, &self.power)?;
                Ok(normalize_columns(&d, &self.f).0)
            }
            PrecoderKind::Rzf { alpha } => Ok(rzf_digital_precoder(h_hat, alpha, &self.f)?.g),
        }
    }

    pub fn rates(&self, sample: &ChannelSample) -> Result<RateVector> {
        let h_hat = self.channel_estimate(sample)?;
        let g = self.digital_precoder(&h_hat)?;
        let c = &sample.h * (&self.f * g);
        Ok(RateVector(sinr_rates(&c, &self.power)))
    }
}

/// Shorthand for [`Pipeline::rates`].
pub fn instantaneous_rates(
    gamma: &ControlVariable,
    sample: &ChannelSample,
    stats: &ChannelStats,
    pilots: &PilotMatrix,
    csi: CsiMode,
) -> Result<RateVector> {
    Pipeline::new(stats, pilots).with_csi(csi).rates(gamma, sample)
}

/// Sample averages of the rates under a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloRates {
    /// `sum_l q_l mean_i r(l; i)`.
    pub mean: RateVector,
    /// Standard error of `mean`, per user.
    pub std_error: Vec<f64>,
    /// Standard error of the sum rate.
    pub sum_rate_std_error: f64,
    /// Mean rate vector of each state on the same draws.
    pub per_state: Vec<RateVector>,
    pub samples: usize,
}

/// Average rates of `policy` over `samples`, reusing the draws for every
/// state.
pub fn average_rates(
    policy: &ControlPolicy,
    pipeline: &Pipeline<'_>,
    samples: &[ChannelSample],
) -> Result<MonteCarloRates> {
    ensure!(!samples.is_empty(), Config, "need at least one channel sample");
    ensure!(
        policy.q.len() == policy.gammas.len(),
        Contract,
        "policy has {} states but {} probabilities",
        policy.gammas.len(),
        policy.q.len()
    );
    let users = pipeline.stats.dims().users;
    let states = policy.states();
    let prepared = policy
        .gammas
        .iter()
        .map(|g| pipeline.prepare(g))
        .collect::<Result<Vec<_>>>()?;
    let mut state_sums = vec![vec![0.0; users]; states];
    let mut mix_sum = vec![0.0; users];
    let mut mix_sq = vec![0.0; users];
    let (mut total_sum, mut total_sq) = (0.0, 0.0);
    for sample in samples {
        let mut mix = vec![0.0; users];
        for (l, prep) in prepared.iter().enumerate() {
            let r = prep.rates(sample)?;
            for k in 0..users {
                state_sums[l][k] += r[k];
                mix[k] += policy.q[l] * r[k];
            }
        }
        let total: f64 = mix.iter().sum();
        total_sum += total;
        total_sq += total * total;
        for k in 0..users {
            mix_sum[k] += mix[k];
            mix_sq[k] += mix[k] * mix[k];
        }
    }
    let n = samples.len() as f64;
    let per_state: Vec<RateVector> = state_sums
        .into_iter()
        .map(|s| RateVector(s.into_iter().map(|x| x / n).collect()))
        .collect();
    let mean = (0..users)
        .map(|k| (0..states).map(|l| policy.q[l] * per_state[l][k]).sum())
        .collect();
    let std_error = (0..users).map(|k| standard_error(mix_sum[k], mix_sq[k], n)).collect();
    Ok(MonteCarloRates {
        mean: RateVector(mean),
        std_error,
        sum_rate_std_error: standard_error(total_sum, total_sq, n),
        per_state,
        samples: samples.len(),
    })
}

fn standard_error(sum: f64, sum_sq: f64, n: f64) -> f64 {
    if n < 2.0 {
        return 0.0;
    }
    let mean = sum / n;
    let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
    (var / n).sqrt()
}

/// Draws `n_samples` channels from `seed` and averages as in
/// [`average_rates`].
pub fn monte_carlo_average_rates(
    policy: &ControlPolicy,
    pipeline: &Pipeline<'_>,
    n_samples: usize,
    seed: u64,
) -> Result<MonteCarloRates> {
    let samples = ChannelSampler::new(pipeline.stats)?.draw_batch(n_samples, seed);
    average_rates(policy, pipeline, &samples)
}
