use crate::error::{ensure, Result};

/// Antenna, RF-chain, user, pilot and state counts plus the power budget.
///
/// Every matrix shape in the crate derives from these numbers: the analog
/// precoder is `antennas x rf_chains`, channels are `users x antennas`, the
/// pilot matrix is `pilots x rf_chains`, and a policy has `states` control
/// variables.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SystemDims {
    pub antennas: usize,
    pub rf_chains: usize,
    pub users: usize,
    pub pilots: usize,
    pub states: usize,
    /// Symbols per time slot, used for pilot-overhead accounting.
    pub slot_symbols: usize,
    /// Total transmit power budget (linear, noise normalized to one).
    pub max_power: f64,
}

impl SystemDims {
    pub fn new(
        antennas: usize,
        rf_chains: usize,
        users: usize,
        pilots: usize,
        states: usize,
        slot_symbols: usize,
        max_power: f64,
    ) -> Result<Self> {
        let dims = SystemDims {
            antennas,
            rf_chains,
            users,
            pilots,
            states,
            slot_symbols,
            max_power,
        };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.antennas >= 1
                && self.rf_chains >= 1
                && self.users >= 1
                && self.pilots >= 1
                && self.states >= 1
                && self.slot_symbols >= 1,
            Config,
            "all counts must be at least one: {self:?}"
        );
        ensure!(
            self.rf_chains <= self.antennas,
            Config,
            "rf_chains ({}) exceeds antennas ({})",
            self.rf_chains,
            self.antennas
        );
        ensure!(
            self.max_power.is_finite() && self.max_power > 0.0,
            Config,
            "max_power must be positive, got {}",
            self.max_power
        );
        Ok(())
    }

    /// Number of phases in one analog precoder (`M * S`).
    pub fn phase_len(&self) -> usize {
        self.antennas * self.rf_chains
    }

    /// Length of one control variable `[theta; p]`.
    pub fn control_len(&self) -> usize {
        self.phase_len() + self.users
    }

    /// Length of the stacked control vector over all states.
    pub fn policy_len(&self) -> usize {
        self.states * self.control_len()
    }

    pub fn with_pilots(mut self, pilots: usize) -> Self {
        self.pilots = pilots;
        self
    }

    pub fn with_max_power(mut self, max_power: f64) -> Self {
        self.max_power = max_power;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_more_chains_than_antennas() {
        assert!(SystemDims::new(4, 5, 2, 2, 1, 20, 1.0).is_err());
        assert!(SystemDims::new(4, 4, 2, 2, 1, 20, 1.0).is_ok());
    }

    #[test]
    fn rejects_zero_counts_and_bad_power() {
        assert!(SystemDims::new(4, 2, 0, 2, 1, 20, 1.0).is_err());
        assert!(SystemDims::new(4, 2, 2, 2, 0, 20, 1.0).is_err());
        assert!(SystemDims::new(4, 2, 2, 2, 1, 20, 0.0).is_err());
        assert!(SystemDims::new(4, 2, 2, 2, 1, 20, f64::NAN).is_err());
    }

    #[test]
    fn lengths() {
        let d = SystemDims::new(8, 3, 4, 2, 2, 20, 1.0).unwrap();
        assert_eq!(d.phase_len(), 24);
        assert_eq!(d.control_len(), 28);
        assert_eq!(d.policy_len(), 56);
    }
}
