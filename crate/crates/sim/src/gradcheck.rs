//! Analytic rate Jacobians against central finite differences on small
//! random instances.

use rand::Rng;
use rayon::prelude::*;
use rcshp_core::channel::{build_geometry_stats, ChannelSampler, GeometryModelParams};
use rcshp_core::estimation::generate_pilots;
use rcshp_core::jacobian::{finite_difference_jacobian, rate_jacobian, rates_of_control, GradientError};
use rcshp_core::precoding::ControlVariable;
use rcshp_core::rng::{derive_seed, seeded};
use rcshp_core::{CsiMode, Pipeline, SystemDims};

use crate::error::Result;

pub const RELATIVE_TOLERANCE: f64 = 1e-4;
/// Entries with `|fd| < 1e-3` are compared in absolute terms.
pub const ABSOLUTE_TOLERANCE: f64 = 1e-7;
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckCase {
    pub antennas: usize,
    pub rf_chains: usize,
    pub users: usize,
    pub pilots: usize,
    pub seed: u64,
    pub csi: CsiMode,
    pub error: GradientError,
}

impl GradcheckCase {
    pub fn passed(&self) -> bool {
        self.error.within(RELATIVE_TOLERANCE, ABSOLUTE_TOLERANCE)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub cases: Vec<GradcheckCase>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        !self.cases.is_empty() && self.cases.iter().all(GradcheckCase::passed)
    }

    pub fn worst_relative(&self) -> f64 {
        self.cases.iter().map(|c| c.error.max_relative).fold(0.0, f64::max)
    }

    pub fn worst_absolute(&self) -> f64 {
        self.cases
            .iter()
            .map(|c| c.error.max_absolute_small)
            .fold(0.0, f64::max)
    }
}

/// Instance `i` cycles through `M in {4, 8}`, `K in {2, 3}`,
/// `T_p in {2, 3}` with `S = 2`, random phases and powers in `[0.2, 3.2]`.
/// Every second block of eight instances uses perfect CSI.
pub fn check_instance(i: usize, seed: u64) -> Result<GradcheckCase> {
    let antennas = [4, 8][i % 2];
    let users = [2, 3][(i / 2) % 2];
    let pilots = [2, 3][(i / 4) % 2];
    let rf_chains = 2;
    let csi = if (i / 8) % 2 == 1 {
        CsiMode::Perfect
    } else {
        CsiMode::Estimated
    };
    let seed = derive_seed(seed, i as u64);
    let dims = SystemDims::new(antennas, rf_chains, users, pilots, 1, 20, 10.0)?;
    let params = GeometryModelParams {
        paths: 4,
        ..GeometryModelParams::default()
    };
    let stats = build_geometry_stats(dims, &params, seed)?;
    let pilot_matrix = generate_pilots(pilots, rf_chains, dims.max_power, derive_seed(seed, 1))?;
    let mut rng = seeded(derive_seed(seed, 2));
    let theta = (0..dims.phase_len())
        .map(|_| rng.random::<f64>() * std::f64::consts::TAU)
        .collect();
    let power = (0..users).map(|_| 0.2 + 3.0 * rng.random::<f64>()).collect();
    let gamma = ControlVariable::new(theta, power);
    let sample = ChannelSampler::new(&stats)?.draw_indexed(derive_seed(seed, 3), 0);

    let pipeline = Pipeline::new(&stats, &pilot_matrix).with_csi(csi);
    let analytic = rate_jacobian(&pipeline, &gamma, &sample)?.stacked();
    let fd = finite_difference_jacobian(rates_of_control(&pipeline, &sample), &gamma.to_vec(), FD_STEP)?;
    Ok(GradcheckCase {
        antennas,
        rf_chains,
        users,
        pilots,
        seed,
        csi,
        error: GradientError::compare(&analytic, &fd)?,
    })
}

pub fn run_gradcheck(instances: usize, seed: u64) -> Result<GradcheckReport> {
    let cases = (0..instances)
        .into_par_iter()
        .map(|i| check_instance(i, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport { cases })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let report = run_gradcheck(8, 5).unwrap();
        assert_eq!(report.cases.len(), 8);
        assert!(report.passed(), "{:?}", report.cases);
        let shapes: std::collections::HashSet<_> =
            report.cases.iter().map(|c| (c.antennas, c.users, c.pilots)).collect();
        assert_eq!(shapes.len(), 8);
    }

    #[test]
    fn empty_report_does_not_pass() {
        assert!(!GradcheckReport { cases: vec![] }.passed());
    }
}
