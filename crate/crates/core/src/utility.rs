//! Network utilities of the average user rates.

use alloc::vec::Vec;

use crate::error::{ensure, Result};
#[allow(unused_imports)]
use num_traits::Float;

/// Concave, nondecreasing utility of the average rate vector.
///
/// `epsilon` keeps the logarithmic and alpha-fair forms finite with a
/// Lipschitz gradient at zero rate. Natural logarithms throughout.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum UtilitySpec {
    SumRate,
    /// `sum_k ln(r_k + epsilon)`.
    ProportionalFairness {
        epsilon: f64,
    },
    /// `sum_k ((r_k + epsilon)^(1 - alpha) - 1) / (1 - alpha)`; the
    /// logarithmic form at `alpha = 1` and `sum_k (r_k + epsilon)` at
    /// `alpha = 0`.
    AlphaFair {
        alpha: f64,
        epsilon: f64,
    },
}

impl UtilitySpec {
    /// Configuration check: guards must be strictly positive.
    pub fn validate(&self) -> Result<()> {
        match *self {
            UtilitySpec::SumRate => {}
            UtilitySpec::ProportionalFairness { epsilon } => {
                ensure!(
                    epsilon > 0.0 && epsilon.is_finite(),
                    Config,
                    "PFS epsilon must be positive, got {epsilon}"
                );
            }
            UtilitySpec::AlphaFair { alpha, epsilon } => {
                ensure!(
                    alpha >= 0.0 && alpha.is_finite(),
                    Config,
                    "alpha must be nonnegative, got {alpha}"
                );
                ensure!(
                    epsilon.is_finite() && (epsilon > 0.0 || (alpha == 0.0 && epsilon == 0.0)),
                    Config,
                    "alpha-fair epsilon must be positive for alpha > 0, got {epsilon}"
                );
            }
        }
        Ok(())
    }

    pub fn value(&self, rates: &[f64]) -> Result<f64> {
        check_rates(rates)?;
        Ok(match *self {
            UtilitySpec::SumRate => rates.iter().sum(),
            UtilitySpec::ProportionalFairness { epsilon } => rates.iter().map(|r| (r + epsilon).ln()).sum(),
            UtilitySpec::AlphaFair { alpha, epsilon } => {
                if alpha == 0.0 {
                    rates.iter().map(|r| r + epsilon).sum()
                } else if alpha == 1.0 {
                    rates.iter().map(|r| (r + epsilon).ln()).sum()
                } else {
                    rates
                        .iter()
                        .map(|r| ((r + epsilon).powf(1.0 - alpha) - 1.0) / (1.0 - alpha))
                        .sum()
                }
            }
        })
    }

    /// `dU / dr_k`.
    pub fn gradient(&self, rates: &[f64]) -> Result<Vec<f64>> {
        check_rates(rates)?;
        Ok(match *self {
            UtilitySpec::SumRate => alloc::vec![1.0; rates.len()],
            UtilitySpec::ProportionalFairness { epsilon } => rates.iter().map(|r| 1.0 / (r + epsilon)).collect(),
            UtilitySpec::AlphaFair { alpha, epsilon } => {
                if alpha == 0.0 {
                    alloc::vec![1.0; rates.len()]
                } else {
                    rates.iter().map(|r| (r + epsilon).powf(-alpha)).collect()
                }
            }
        })
    }
}

fn check_rates(rates: &[f64]) -> Result<()> {
    for (k, &r) in rates.iter().enumerate() {
        ensure!(
            r >= 0.0 && r.is_finite(),
            Data,
            "rate {k} is {r}; rates must be finite and nonnegative"
        );
    }
    Ok(())
}
