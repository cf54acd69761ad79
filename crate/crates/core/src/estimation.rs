//! Common downlink pilots and LMMSE estimation of the effective channels.
//!
//! With analog precoder `F` the user sees the `S`-dimensional effective
//! channel `h~_k = F^H h_k`. During training the BS sends `T_p` pilot symbols
//! (rows of `Psi`) and user `k` observes
//!
//! ```text
//! y_k = Psi conj(h~_k) + n_k
//! ```
//!
//! which it feeds back unquantized. The BS knows `C~_k = F^H C_k F` and forms
//!
//! ```text
//! h^_k = C~_k Psi^T (conj(Psi) C~_k Psi^T + s2 I)^-1 conj(y_k)
//! ```

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;
use nalgebra::{Cholesky, Dyn};
use num_complex::Complex64;

use crate::channel::{ChannelSample, ChannelStats};
use crate::error::{ensure, Error, Result};
use crate::linalg::hermitian_part;
use crate::rng::{complex_normal, seeded};
use crate::{CMatrix, CVector};
#[allow(unused_imports)]
use num_traits::Float;

/// Pilot symbols, one row per training slot (`T_p x S`).
///
/// Keeps the thin QR factors `conj(Psi) = U R` (`U` is `T_p x r`, `R` is
/// `r x S`, `r = min(T_p, S)`), which the estimator uses to avoid inverting
/// the rank-deficient part of the observation covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotMatrix {
    psi: CMatrix,
    per_symbol_power: f64,
    basis: CMatrix,
    r: CMatrix,
}

impl PilotMatrix {
    /// Wraps `psi`, checking that every row carries `per_symbol_power`.
    pub fn new(psi: CMatrix, per_symbol_power: f64) -> Result<Self> {
        ensure!(
            per_symbol_power.is_finite() && per_symbol_power > 0.0,
            Config,
            "pilot power must be positive, got {per_symbol_power}"
        );
        for (t, row) in psi.row_iter().enumerate() {
            let power = row.norm_squared();
            ensure!(
                (power - per_symbol_power).abs() <= 1e-9 * per_symbol_power,
                Data,
                "pilot row {t} has power {power}, expected {per_symbol_power}"
            );
        }
        let qr = psi.conjugate().qr();
        let (basis, r) = (qr.q(), qr.r());
        Ok(PilotMatrix {
            psi,
            per_symbol_power,
            basis,
            r,
        })
    }

    pub fn psi(&self) -> &CMatrix {
        &self.psi
    }

    pub fn per_symbol_power(&self) -> f64 {
        self.per_symbol_power
    }

    pub fn pilots(&self) -> usize {
        self.psi.nrows()
    }

    pub fn rf_chains(&self) -> usize {
        self.psi.ncols()
    }

    /// The first `rows` pilot symbols.
    pub fn truncated(&self, rows: usize) -> Result<Self> {
        ensure!(
            rows >= 1 && rows <= self.pilots(),
            Contract,
            "cannot keep {rows} of {} pilot rows",
            self.pilots()
        );
        PilotMatrix::new(self.psi.rows(0, rows).into_owned(), self.per_symbol_power)
    }
}

/// Pilots for `pilots` symbols over `rf_chains` streams, every row at
/// `power`.
///
/// With at least as many symbols as streams the columns start orthonormal
/// (QR of a seeded Gaussian matrix) before the rows are rescaled, so the
/// result has full column rank. With fewer symbols the rows are the first
/// rows of the unitary DFT matrix.
pub fn generate_pilots(pilots: usize, rf_chains: usize, power: f64, seed: u64) -> Result<PilotMatrix> {
    ensure!(
        pilots >= 1 && rf_chains >= 1,
        Config,
        "pilot matrix needs positive dimensions, got {pilots}x{rf_chains}"
    );
    let mut psi = if pilots >= rf_chains {
        let mut rng = seeded(seed);
        let g = CMatrix::from_fn(pilots, rf_chains, |_, _| complex_normal(&mut rng));
        g.qr().q()
    } else {
        let s = rf_chains as f64;
        CMatrix::from_fn(pilots, rf_chains, |t, n| {
            Complex64::from_polar(1.0 / s.sqrt(), -2.0 * PI * (t * n) as f64 / s)
        })
    };
    for mut row in psi.row_iter_mut() {
        let norm = row.norm();
        ensure!(norm > 0.0, Numerical, "degenerate pilot row");
        row *= Complex64::from(power.sqrt() / norm);
    }
    PilotMatrix::new(psi, power)
}

/// `Y = (H F) Psi^T + N`, so row `k` is `y_k^T`.
pub fn observe_pilots(sample: &ChannelSample, f: &CMatrix, pilots: &PilotMatrix) -> Result<CMatrix> {
    observe_pilots_scaled(sample, f, pilots, 1.0)
}

/// As [`observe_pilots`] with the noise multiplied by `noise_std`.
pub fn observe_pilots_scaled(
    sample: &ChannelSample,
    f: &CMatrix,
    pilots: &PilotMatrix,
    noise_std: f64,
) -> Result<CMatrix> {
    ensure!(
        f.nrows() == sample.h.ncols() && f.ncols() == pilots.rf_chains(),
        Contract,
        "analog precoder is {}x{}, channel has {} antennas and pilots {} streams",
        f.nrows(),
        f.ncols(),
        sample.h.ncols(),
        pilots.rf_chains()
    );
    ensure!(
        sample.noise.ncols() == pilots.pilots() && sample.noise.nrows() == sample.h.nrows(),
        Contract,
        "noise is {}x{}, expected {}x{}",
        sample.noise.nrows(),
        sample.noise.ncols(),
        sample.h.nrows(),
        pilots.pilots()
    );
    let h_eff = &sample.h * f;
    Ok(h_eff * pilots.psi().transpose() + sample.noise.scale(noise_std))
}

/// `F^H C F`.
pub fn effective_covariance(c: &CMatrix, f: &CMatrix) -> CMatrix {
    hermitian_part(&(f.adjoint() * c * f))
}

/// The Wiener filter of one user for a fixed analog precoder.
///
/// With `conj(Psi) = U R` the observation covariance is
/// `Q = U (R C~ R^H) U^H + s2 I`, and `Psi^T Q^-1 = R^H M^-1 U^H` with
/// `M = R C~ R^H + s2 I`, so only the `r x r` matrix `M` is factorized.
#[derive(Debug, Clone)]
pub struct LmmseFilter {
    /// `C~ = F^H C F`.
    pub c_eff: CMatrix,
    /// `W = C~ Psi^T Q^-1`.
    pub gain: CMatrix,
    inner: Cholesky<Complex64, Dyn>,
    basis: CMatrix,
    r: CMatrix,
}

impl LmmseFilter {
    pub fn new(c_eff: CMatrix, pilots: &PilotMatrix, noise_var: f64) -> Result<Self> {
        ensure!(
            noise_var >= 0.0 && noise_var.is_finite(),
            Config,
            "noise variance must be nonnegative, got {noise_var}"
        );
        let r = &pilots.r;
        let dim = r.nrows();
        let m = r * &c_eff * r.adjoint() + CMatrix::identity(dim, dim).scale(noise_var);
        let inner = hermitian_part(&m).cholesky().ok_or_else(|| {
            Error::Numerical(format!(
                "LMMSE inner matrix ({dim}x{dim}) is singular at noise variance {noise_var}; \
                 the pilots do not excite the effective covariance"
            ))
        })?;
        // W = C~ R^H M^-1 U^H
        let cr = &c_eff * r.adjoint();
        let gain = inner.solve(&cr.adjoint()).adjoint() * pilots.basis.adjoint();
        Ok(LmmseFilter {
            c_eff,
            gain,
            inner,
            basis: pilots.basis.clone(),
            r: r.clone(),
        })
    }

    /// `W z`, where `z = conj(y)`.
    pub fn apply(&self, z: &CVector) -> CVector {
        &self.gain * z
    }

    /// `Psi^T Q^-1 z`.
    pub fn pilot_response(&self, z: &CVector) -> CVector {
        self.r.adjoint() * self.inner.solve(&(self.basis.adjoint() * z))
    }

    /// Posterior error covariance trace `tr(C~ - W conj(Psi) C~)`.
    pub fn mse(&self, pilots: &PilotMatrix) -> f64 {
        let post = &self.c_eff - &self.gain * pilots.psi().conjugate() * &self.c_eff;
        post.trace().re.max(0.0)
    }
}

/// One filter per user.
pub fn lmmse_filters(
    stats: &ChannelStats,
    f: &CMatrix,
    pilots: &PilotMatrix,
    noise_var: f64,
) -> Result<Vec<LmmseFilter>> {
    ensure!(
        f.nrows() == stats.dims().antennas && f.ncols() == pilots.rf_chains(),
        Contract,
        "analog precoder is {}x{}, expected {}x{}",
        f.nrows(),
        f.ncols(),
        stats.dims().antennas,
        pilots.rf_chains()
    );
    stats
        .covariances()
        .iter()
        .map(|c| LmmseFilter::new(effective_covariance(c, f), pilots, noise_var))
        .collect()
}

/// Estimated effective channels, stacked like `H F`.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveChannelEstimate {
    /// `K x S`; row `k` is `h^_k^H`.
    pub h: CMatrix,
    /// Posterior MSE `tr(E[(h~ - h^)(h~ - h^)^H])` per user.
    pub mse: Vec<f64>,
}

impl EffectiveChannelEstimate {
    pub fn user(&self, k: usize) -> CVector {
        self.h.row(k).adjoint()
    }
}

/// LMMSE estimate of every user's effective channel from observations `y`
/// (`K x T_p`, row `k` is `y_k^T`).
pub fn lmmse_estimate(
    stats: &ChannelStats,
    f: &CMatrix,
    pilots: &PilotMatrix,
    y: &CMatrix,
    noise_var: f64,
) -> Result<EffectiveChannelEstimate> {
    let filters = lmmse_filters(stats, f, pilots, noise_var)?;
    estimate_with(&filters, pilots, y)
}

/// Applies precomputed filters to observations.
pub fn estimate_with(filters: &[LmmseFilter], pilots: &PilotMatrix, y: &CMatrix) -> Result<EffectiveChannelEstimate> {
    ensure!(
        y.nrows() == filters.len() && y.ncols() == pilots.pilots(),
        Contract,
        "observations are {}x{}, expected {}x{}",
        y.nrows(),
        y.ncols(),
        filters.len(),
        pilots.pilots()
    );
    let s = pilots.rf_chains();
    let mut h = CMatrix::zeros(filters.len(), s);
    for (k, filter) in filters.iter().enumerate() {
        let z = y.row(k).adjoint();
        let est = filter.apply(&z);
        for n in 0..s {
            h[(k, n)] = est[n].conj();
        }
    }
    let mse = filters.iter().map(|w| w.mse(pilots)).collect();
    Ok(EffectiveChannelEstimate { h, mse })
}

/// Least-squares estimate `pinv(conj(Psi)) conj(y_k)`, for comparison.
pub fn least_squares_estimate(pilots: &PilotMatrix, y: &CMatrix) -> Result<CMatrix> {
    let a = pilots.psi().conjugate();
    let pinv = a
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::Numerical(format!("pilot pseudo-inverse failed: {e}")))?;
    let z = y.adjoint();
    Ok((pinv * z).adjoint())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ChannelSampler;
    use crate::dims::SystemDims;
    use crate::precoding::analog_from_phases;
    use rand::Rng;

    fn random_stats(m: usize, s: usize, k: usize, tp: usize, seed: u64) -> ChannelStats {
        let dims = SystemDims::new(m, s, k, tp, 1, 20, 1.0).unwrap();
        let mut rng = seeded(seed);
        let covs = (0..k)
            .map(|_| {
                let a = CMatrix::from_fn(m, m, |_, _| complex_normal(&mut rng));
                (&a * a.adjoint()).unscale(m as f64)
            })
            .collect();
        ChannelStats::new(dims, covs).unwrap()
    }

    fn random_analog(m: usize, s: usize, seed: u64) -> CMatrix {
        let mut rng = seeded(seed);
        let theta: Vec<f64> = (0..m * s)
            .map(|_| rng.random::<f64>() * core::f64::consts::TAU)
            .collect();
        analog_from_phases(&theta, m, s).unwrap()
    }

    #[test]
    fn pilot_examples() {
        let p = generate_pilots(2, 2, 2.0, 1).unwrap();
        for row in p.psi().row_iter() {
            assert!((row.norm_squared() - 2.0).abs() < 1e-12);
        }
        let p = generate_pilots(4, 2, 3.0, 2).unwrap();
        let gram = p.psi().adjoint() * p.psi();
        let (vals, _) = crate::linalg::hermitian_eigen(&gram);
        assert!(vals[1] > 1e-6);
        assert_eq!(generate_pilots(4, 2, 3.0, 2).unwrap(), p);
        let short = generate_pilots(2, 4, 5.0, 0).unwrap();
        assert!((short.psi()[(1, 1)] - Complex64::from_polar(5f64.sqrt() / 2.0, -PI / 2.0)).norm() < 1e-12);
        for row in short.psi().row_iter() {
            assert!((row.norm_squared() - 5.0).abs() < 1e-12);
        }
        assert!(PilotMatrix::new(CMatrix::from_element(1, 1, Complex64::new(2.0, 0.0)), 1.0).is_err());
    }

    #[test]
    fn observation_examples() {
        let stats = random_stats(4, 2, 2, 3, 3);
        let f = random_analog(4, 2, 4);
        let pilots = generate_pilots(3, 2, 2.0, 5).unwrap();
        let sample = ChannelSampler::new(&stats).unwrap().draw_indexed(6, 0);
        let y = observe_pilots(&sample, &f, &pilots).unwrap();
        for k in 0..2 {
            for t in 0..3 {
                let mut acc = sample.noise[(k, t)];
                for n in 0..2 {
                    let mut ht = Complex64::new(0.0, 0.0);
                    for m in 0..4 {
                        ht += f[(m, n)].conj() * sample.h[(k, m)].conj();
                    }
                    acc += pilots.psi()[(t, n)] * ht.conj();
                }
                assert!((y[(k, t)] - acc).norm() < 1e-12);
            }
        }
        let zero = ChannelSample {
            h: CMatrix::zeros(2, 4),
            noise: sample.noise.clone(),
        };
        assert_eq!(observe_pilots(&zero, &f, &pilots).unwrap(), sample.noise);
        let bad = generate_pilots(2, 2, 1.0, 0).unwrap();
        assert!(observe_pilots(&sample, &f, &bad).is_err());
    }

    #[test]
    fn noiseless_scalar_observation() {
        let psi = Complex64::from_polar(1.5, 0.3);
        let pilots = PilotMatrix::new(CMatrix::from_element(1, 1, psi), 2.25).unwrap();
        let f = CMatrix::from_fn(3, 1, |m, _| Complex64::from_polar(1.0 / 3f64.sqrt(), m as f64));
        let h = CMatrix::from_fn(1, 3, |_, m| Complex64::new(m as f64, 1.0));
        let sample = ChannelSample {
            h: h.clone(),
            noise: CMatrix::zeros(1, 1),
        };
        let y = observe_pilots(&sample, &f, &pilots).unwrap();
        let h_eff = (f.adjoint() * h.adjoint())[(0, 0)];
        assert!((y[(0, 0)] - psi * h_eff.conj()).norm() < 1e-14);
    }

    #[test]
    fn zero_prior_gives_zero_estimate() {
        let dims = SystemDims::new(4, 2, 1, 2, 1, 20, 1.0).unwrap();
        let stats = ChannelStats::new(dims, alloc::vec![CMatrix::zeros(4, 4)]).unwrap();
        let f = random_analog(4, 2, 1);
        let pilots = generate_pilots(2, 2, 1.0, 2).unwrap();
        let y = CMatrix::from_element(1, 2, Complex64::new(0.4, -1.0));
        let est = lmmse_estimate(&stats, &f, &pilots, &y, 1.0).unwrap();
        assert!(est.h.iter().all(|z| z.norm() == 0.0));
        assert!(lmmse_estimate(&stats, &f, &pilots, &y, 0.0).is_err());
    }

    #[test]
    fn vanishing_noise_recovers_channel() {
        for seed in 0..10 {
            let stats = random_stats(8, 3, 2, 4, 10 + seed);
            let f = random_analog(8, 3, 20 + seed);
            let pilots = generate_pilots(4, 3, 10.0, 30 + seed).unwrap();
            let sample = ChannelSampler::new(&stats).unwrap().draw_indexed(40 + seed, 0);
            let noise_var: f64 = 1e-12;
            let y = observe_pilots_scaled(&sample, &f, &pilots, noise_var.sqrt()).unwrap();
            let est = lmmse_estimate(&stats, &f, &pilots, &y, noise_var).unwrap();
            let truth = &sample.h * &f;
            assert!((&est.h - &truth).norm() <= 1e-6 * truth.norm());
        }
    }

    #[test]
    fn linear_in_observations() {
        let stats = random_stats(4, 2, 3, 3, 50);
        let f = random_analog(4, 2, 51);
        let pilots = generate_pilots(3, 2, 1.0, 52).unwrap();
        let sample = ChannelSampler::new(&stats).unwrap().draw_indexed(53, 0);
        let y = observe_pilots(&sample, &f, &pilots).unwrap();
        let a = lmmse_estimate(&stats, &f, &pilots, &y, 1.0).unwrap();
        let b = lmmse_estimate(&stats, &f, &pilots, &y.scale(-2.5), 1.0).unwrap();
        assert!((a.h.scale(-2.5) - b.h).norm() < 1e-12 * a.h.norm());
    }

    #[test]
    fn nested_pilots_reduce_mse() {
        let stats = random_stats(8, 3, 3, 6, 60);
        let f = random_analog(8, 3, 61);
        let full = generate_pilots(6, 3, 2.0, 62).unwrap();
        for k in 0..3 {
            let c_eff = effective_covariance(stats.covariance(k), &f);
            let mut last = f64::INFINITY;
            for rows in 1..=6 {
                let p = full.truncated(rows).unwrap();
                let mse = LmmseFilter::new(c_eff.clone(), &p, 1.0).unwrap().mse(&p);
                assert!(mse <= last + 1e-12);
                last = mse;
            }
        }
    }

    #[test]
    fn beats_least_squares_and_is_orthogonal() {
        let stats = random_stats(4, 2, 1, 2, 70);
        let f = random_analog(4, 2, 71);
        let pilots = generate_pilots(2, 2, 1.0, 72).unwrap();
        let sampler = ChannelSampler::new(&stats).unwrap();
        let filters = lmmse_filters(&stats, &f, &pilots, 1.0).unwrap();
        let n = 100_000;
        let (mut mse_lmmse, mut mse_ls) = (0.0, 0.0);
        let mut cross = CMatrix::zeros(2, 2);
        for i in 0..n {
            let sample = sampler.draw_indexed(73, i);
            let truth = (&sample.h * &f).row(0).adjoint();
            let y = observe_pilots(&sample, &f, &pilots).unwrap();
            let est = estimate_with(&filters, &pilots, &y).unwrap().user(0);
            let ls = least_squares_estimate(&pilots, &y).unwrap().row(0).adjoint();
            mse_lmmse += (&truth - &est).norm_squared();
            mse_ls += (&truth - &ls).norm_squared();
            cross += (&truth - &est) * y.row(0).conjugate();
        }
        assert!(mse_lmmse <= mse_ls);
        let c_eff = effective_covariance(stats.covariance(0), &f);
        assert!((cross / Complex64::from(n as f64)).norm() <= 0.05 * c_eff.trace().re.sqrt());
        let analytic = filters[0].mse(&pilots);
        assert!((mse_lmmse / n as f64 - analytic).abs() <= 0.05 * analytic);
    }
}
