//! Base-station power consumption and energy efficiency.

use serde::{Deserialize, Serialize};

/// Device powers in milliwatts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerModel {
    /// Per phase shifter.
    pub p_ps: f64,
    /// Per RF chain: low-noise amplifier, RF chain, converter.
    pub p_lna: f64,
    pub p_rf: f64,
    pub p_adc: f64,
    /// Baseband power per RF chain.
    pub xi: f64,
    /// Static baseband power.
    pub varsigma: f64,
    /// Milliwatts per unit of the linear power budget; the transmit power
    /// is `max_power * tx_mw_per_unit`.
    pub tx_mw_per_unit: f64,
}

impl Default for PowerModel {
    fn default() -> Self {
        PowerModel {
            p_ps: 6.6,
            p_lna: 20.0,
            p_rf: 120.0,
            p_adc: 240.0,
            xi: 10.0,
            varsigma: 136.0,
            tx_mw_per_unit: 1.0,
        }
    }
}

impl PowerModel {
    pub fn validate(&self) -> Result<(), String> {
        let fields = [
            ("p_ps", self.p_ps),
            ("p_lna", self.p_lna),
            ("p_rf", self.p_rf),
            ("p_adc", self.p_adc),
            ("xi", self.xi),
            ("varsigma", self.varsigma),
            ("tx_mw_per_unit", self.tx_mw_per_unit),
        ];
        for (name, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!(
                    "power model field {name} must be finite and nonnegative, got {v}"
                ));
            }
        }
        Ok(())
    }

    /// Baseband precoder power `S xi + varsigma`.
    pub fn baseband_mw(&self, rf_chains: usize) -> f64 {
        rf_chains as f64 * self.xi + self.varsigma
    }

    /// `M S P_PS + S (P_LNA + P_RF + P_ADC) + P_BB + P_TX`, in mW.
    pub fn total_mw(&self, antennas: usize, rf_chains: usize, p_tx_mw: f64) -> f64 {
        let s = rf_chains as f64;
        (antennas as f64) * s * self.p_ps
            + s * (self.p_lna + self.p_rf + self.p_adc)
            + self.baseband_mw(rf_chains)
            + p_tx_mw
    }

    pub fn transmit_mw(&self, max_power: f64) -> f64 {
        max_power * self.tx_mw_per_unit
    }

    /// Sum rate per watt of total consumption.
    pub fn energy_efficiency(&self, sum_rate: f64, antennas: usize, rf_chains: usize, p_tx_mw: f64) -> f64 {
        if sum_rate == 0.0 {
            return 0.0;
        }
        sum_rate / (self.total_mw(antennas, rf_chains, p_tx_mw) / 1000.0)
    }
}
