//! Analog and digital precoders and the control variables that drive them.
//!
//! A control variable `(theta, p)` fixes the phase-only analog precoder `F`
//! and the per-user powers. The digital stage is either the duality precoder
//!
//! ```text
//! G = (H^H P H + I)^-1 H^H P Lambda^1/2
//! ```
//!
//! (the MMSE receiver of the virtual uplink) or regularized zero forcing.
//! Both normalize columns so that `||F g_k|| = 1`; user `k` then radiates
//! exactly `p_k`.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::TAU;
use num_complex::Complex64;

use crate::dims::SystemDims;
use crate::error::{ensure, Result};
use crate::linalg::cholesky;
use crate::CMatrix;
#[allow(unused_imports)]
use num_traits::Float;

/// Columns whose unnormalized norm falls below this are treated as zero.
pub const NORM_FLOOR: f64 = 1e-30;

/// One control state: `M*S` analog phases and `K` user powers.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ControlVariable {
    /// Phase of `F[i, j]` at index `j * M + i`.
    pub theta: Vec<f64>,
    pub power: Vec<f64>,
}

impl ControlVariable {
    pub fn new(theta: Vec<f64>, power: Vec<f64>) -> Self {
        ControlVariable { theta, power }
    }

    /// Equal power split over all users.
    pub fn equal_power(theta: Vec<f64>, users: usize, max_power: f64) -> Self {
        ControlVariable {
            theta,
            power: vec![max_power / users as f64; users],
        }
    }

    pub fn analog(&self, dims: &SystemDims) -> Result<CMatrix> {
        analog_from_phases(&self.theta, dims.antennas, dims.rf_chains)
    }

    /// Largest violation of `0 <= theta <= 2 pi`, `p >= 0`, `sum p <= P_max`.
    pub fn feasibility_residual(&self, max_power: f64) -> f64 {
        let theta = self
            .theta
            .iter()
            .map(|&t| (-t).max(t - TAU).max(0.0))
            .fold(0.0, f64::max);
        let neg = self.power.iter().map(|&p| (-p).max(0.0)).fold(0.0, f64::max);
        let budget = (self.power.iter().sum::<f64>() - max_power).max(0.0);
        let nan = if self.theta.iter().chain(&self.power).all(|x| x.is_finite()) {
            0.0
        } else {
            f64::INFINITY
        };
        theta.max(neg).max(budget).max(nan)
    }

    pub fn validate(&self, dims: &SystemDims) -> Result<()> {
        ensure!(
            self.theta.len() == dims.phase_len() && self.power.len() == dims.users,
            Contract,
            "control variable has {} phases and {} powers, expected {} and {}",
            self.theta.len(),
            self.power.len(),
            dims.phase_len(),
            dims.users
        );
        let residual = self.feasibility_residual(dims.max_power);
        ensure!(
            residual <= 1e-9,
            Data,
            "control variable infeasible (residual {residual:.3e})"
        );
        Ok(())
    }

    /// `[theta; p]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.theta.clone();
        v.extend_from_slice(&self.power);
        v
    }

    pub fn from_slice(v: &[f64], phase_len: usize) -> Self {
        ControlVariable {
            theta: v[..phase_len].to_vec(),
            power: v[phase_len..].to_vec(),
        }
    }
}

/// `L` control states time-shared with probabilities `q`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ControlPolicy {
    pub gammas: Vec<ControlVariable>,
    pub q: Vec<f64>,
}

impl ControlPolicy {
    pub fn new(gammas: Vec<ControlVariable>, q: Vec<f64>) -> Self {
        ControlPolicy { gammas, q }
    }

    /// A single state used all the time.
    pub fn single(gamma: ControlVariable) -> Self {
        ControlPolicy {
            gammas: vec![gamma],
            q: vec![1.0],
        }
    }

    pub fn states(&self) -> usize {
        self.gammas.len()
    }

    /// Distance of `q` from the simplex combined with the worst state residual.
    pub fn feasibility_residual(&self, max_power: f64) -> f64 {
        let neg = self.q.iter().map(|&x| (-x).max(0.0)).fold(0.0, f64::max);
        let sum = (self.q.iter().sum::<f64>() - 1.0).abs();
        let q_res = if self.q.iter().all(|x| x.is_finite()) {
            neg.max(sum)
        } else {
            f64::INFINITY
        };
        self.gammas
            .iter()
            .map(|g| g.feasibility_residual(max_power))
            .fold(q_res, f64::max)
    }

    pub fn validate(&self, dims: &SystemDims) -> Result<()> {
        ensure!(
            self.gammas.len() == self.q.len() && !self.q.is_empty(),
            Contract,
            "policy has {} states but {} probabilities",
            self.gammas.len(),
            self.q.len()
        );
        for g in &self.gammas {
            g.validate(dims)?;
        }
        let residual = self.feasibility_residual(dims.max_power);
        ensure!(residual <= 1e-9, Data, "policy infeasible (residual {residual:.3e})");
        Ok(())
    }

    /// Stacked `[theta(1); p(1); ...; theta(L); p(L)]`.
    pub fn gamma_vec(&self) -> Vec<f64> {
        self.gammas.iter().flat_map(|g| g.to_vec()).collect()
    }
}

/// `F[i, j] = exp(j theta[j*M + i]) / sqrt(M)`.
pub fn analog_from_phases(theta: &[f64], antennas: usize, rf_chains: usize) -> Result<CMatrix> {
    ensure!(
        theta.len() == antennas * rf_chains,
        Contract,
        "expected {} phases for a {antennas}x{rf_chains} analog precoder, got {}",
        antennas * rf_chains,
        theta.len()
    );
    let scale = 1.0 / (antennas as f64).sqrt();
    Ok(CMatrix::from_fn(antennas, rf_chains, |i, j| {
        Complex64::from_polar(scale, theta[j * antennas + i])
    }))
}

/// A digital precoder and the scaling that normalized its columns.
#[derive(Debug, Clone, PartialEq)]
pub struct DigitalPrecoder {
    /// `S x K`.
    pub g: CMatrix,
    /// Diagonal of `Lambda^1/2` relative to the unnormalized precoder; zero
    /// for users whose column vanished.
    pub norm_factors: Vec<f64>,
}

impl DigitalPrecoder {
    /// `max_k | ||F g_k|| - 1 |` over nonzero columns.
    pub fn normalization_defect(&self, f: &CMatrix) -> f64 {
        let fg = f * &self.g;
        (0..fg.ncols())
            .filter(|&k| self.norm_factors[k] > 0.0)
            .map(|k| (fg.column(k).norm() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// `(H^H P H + I)^-1 H^H P` for `K x S` effective channels.
pub fn duality_unnormalized(h_eff: &CMatrix, power: &[f64]) -> Result<CMatrix> {
    let mut d = duality_directions(h_eff, power)?;
    for (k, &p) in power.iter().enumerate() {
        d.column_mut(k).scale_mut(p);
    }
    Ok(d)
}

/// `(H^H P H + I)^-1 H^H`: the duality precoder before the power weighting,
/// so column `k` keeps its direction when `p_k = 0`.
pub fn duality_directions(h_eff: &CMatrix, power: &[f64]) -> Result<CMatrix> {
    ensure!(
        power.len() == h_eff.nrows(),
        Contract,
        "{} powers for {} users",
        power.len(),
        h_eff.nrows()
    );
    let s = h_eff.ncols();
    let b = h_eff.adjoint();
    let mut bp = b.clone();
    for (k, &p) in power.iter().enumerate() {
        bp.column_mut(k).scale_mut(p);
    }
    let v = &bp * b.adjoint() + CMatrix::identity(s, s);
    Ok(cholesky(&v, "uplink MMSE matrix")?.solve(&b))
}

/// Scales each column so `||F g_k|| = 1`. Columns below [`NORM_FLOOR`] are
/// zeroed. Returns the normalized matrix and the applied factors.
pub fn normalize_columns(g: &CMatrix, f: &CMatrix) -> (CMatrix, Vec<f64>) {
    let fg = f * g;
    let mut out = g.clone();
    let mut factors = vec![0.0; g.ncols()];
    for k in 0..g.ncols() {
        let n = fg.column(k).norm();
        if n > NORM_FLOOR {
            factors[k] = 1.0 / n;
            out.column_mut(k).scale_mut(1.0 / n);
        } else {
            out.column_mut(k).fill(Complex64::new(0.0, 0.0));
        }
    }
    (out, factors)
}

/// Duality-based digital precoder with unit-norm `F g_k`. Users with zero
/// power get a zero column and a zero factor.
pub fn duality_digital_precoder(h_eff: &CMatrix, power: &[f64], f: &CMatrix) -> Result<DigitalPrecoder> {
    let g = duality_unnormalized(h_eff, power)?;
    let (g, norm_factors) = normalize_columns(&g, f);
    Ok(DigitalPrecoder { g, norm_factors })
}

/// `H^H (H H^H + alpha I)^-1`.
pub fn rzf_unnormalized(h_eff: &CMatrix, alpha: f64) -> Result<CMatrix> {
    ensure!(
        alpha > 0.0 && alpha.is_finite(),
        Config,
        "RZF regularization must be positive, got {alpha}"
    );
    let k = h_eff.nrows();
    let gram = h_eff * h_eff.adjoint() + CMatrix::identity(k, k).scale(alpha);
    // (H H^H + a I)^-1 is Hermitian, so G = (inv * H)^H
    Ok(cholesky(&gram, "RZF Gram matrix")?.solve(h_eff).adjoint())
}

pub fn rzf_digital_precoder(h_eff: &CMatrix, alpha: f64, f: &CMatrix) -> Result<DigitalPrecoder> {
    let g = rzf_unnormalized(h_eff, alpha)?;
    let (g, norm_factors) = normalize_columns(&g, f);
    Ok(DigitalPrecoder { g, norm_factors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{complex_normal, seeded};
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> CMatrix {
        let mut rng = seeded(seed);
        CMatrix::from_fn(rows, cols, |_, _| complex_normal(&mut rng))
    }

    fn random_phases(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = seeded(seed);
        (0..n).map(|_| rng.random::<f64>() * TAU).collect()
    }

    #[test]
    fn analog_examples() {
        let f = analog_from_phases(&[0.0; 8], 4, 2).unwrap();
        assert!(f.iter().all(|z| (z - Complex64::new(0.5, 0.0)).norm() < 1e-15));
        let f = analog_from_phases(&[core::f64::consts::PI; 6], 3, 2).unwrap();
        let v = -1.0 / 3f64.sqrt();
        assert!(f.iter().all(|z| (z - Complex64::new(v, 0.0)).norm() < 1e-15));
        let f = analog_from_phases(&random_phases(24, 1), 8, 3).unwrap();
        assert!((f.norm_squared() - 3.0).abs() < 1e-12);
        for c in f.column_iter() {
            assert!((c.norm() - 1.0).abs() < 1e-12);
        }
        assert!(analog_from_phases(&[0.0; 5], 4, 2).is_err());
    }

    #[test]
    fn column_major_phase_layout() {
        let mut theta = vec![0.0; 6];
        theta[4] = 1.0; // row 1, column 1 for M = 3
        let f = analog_from_phases(&theta, 3, 2).unwrap();
        assert!((f[(1, 1)].arg() - 1.0).abs() < 1e-15);
        assert!(f[(1, 0)].arg().abs() < 1e-15);
    }

    #[test]
    fn single_user_duality_is_matched_filter() {
        let h = random_matrix(1, 3, 2);
        let f = analog_from_phases(&random_phases(12, 3), 4, 3).unwrap();
        let dp = duality_digital_precoder(&h, &[2.5], &f).unwrap();
        let g = dp.g.column(0);
        let mf = h.row(0).adjoint();
        let cos = g.dotc(&mf).norm() / (g.norm() * mf.norm());
        assert!((cos - 1.0).abs() < 1e-12);
        assert!(((&f * g).norm() - 1.0).abs() < 1e-12);
        let rzf = rzf_digital_precoder(&h, 0.7, &f).unwrap();
        assert!((&rzf.g - &dp.g).norm() < 1e-12);
    }

    #[test]
    fn duality_matches_scalar_loop() {
        let (m, s, k) = (4, 2, 2);
        let h = random_matrix(k, s, 4);
        let f = analog_from_phases(&random_phases(m * s, 5), m, s).unwrap();
        let p = [1.3, 0.4];
        // V = sum_k p_k conj(h_k row)^T h_k row + I, explicit 2x2 inverse
        let mut v = [[Complex64::new(0.0, 0.0); 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                let mut acc = if a == b {
                    Complex64::new(1.0, 0.0)
                } else {
                    Complex64::new(0.0, 0.0)
                };
                for u in 0..k {
                    acc += h[(u, a)].conj() * p[u] * h[(u, b)];
                }
                v[a][b] = acc;
            }
        }
        let det = v[0][0] * v[1][1] - v[0][1] * v[1][0];
        let inv = [[v[1][1] / det, -v[0][1] / det], [-v[1][0] / det, v[0][0] / det]];
        let mut g = CMatrix::zeros(s, k);
        for u in 0..k {
            for a in 0..s {
                let mut acc = Complex64::new(0.0, 0.0);
                for b in 0..s {
                    acc += inv[a][b] * h[(u, b)].conj() * p[u];
                }
                g[(a, u)] = acc;
            }
            let mut norm2 = 0.0;
            for i in 0..m {
                let mut fi = Complex64::new(0.0, 0.0);
                for a in 0..s {
                    fi += f[(i, a)] * g[(a, u)];
                }
                norm2 += fi.norm_sqr();
            }
            for a in 0..s {
                g[(a, u)] /= norm2.sqrt();
            }
        }
        let dp = duality_digital_precoder(&h, &p, &f).unwrap();
        assert!((&dp.g - &g).norm() < 1e-12);
        assert!(dp.normalization_defect(&f) < 1e-12);
    }

    #[test]
    fn equal_power_duality_is_rzf() {
        for seed in 0..20 {
            let (k, s, pmax) = (3, 4, 7.0);
            let h = random_matrix(k, s, 100 + seed);
            let d = duality_unnormalized(&h, &[pmax / k as f64; 3]).unwrap();
            let r = rzf_unnormalized(&h, k as f64 / pmax).unwrap();
            for (a, b) in d.iter().zip(r.iter()) {
                assert!((a - b).norm() <= 1e-10 * b.norm().max(1e-300));
            }
        }
    }

    #[test]
    fn rzf_large_alpha_is_matched_filter() {
        let h = random_matrix(3, 4, 9);
        let f = analog_from_phases(&random_phases(32, 10), 8, 4).unwrap();
        let dp = rzf_digital_precoder(&h, 1e9, &f).unwrap();
        for k in 0..3 {
            let g = dp.g.column(k);
            let mf = h.row(k).adjoint();
            assert!(g.dotc(&mf).norm() / (g.norm() * mf.norm()) >= 1.0 - 1e-6);
        }
    }

    #[test]
    fn zero_power_user_gets_zero_column() {
        let h = random_matrix(2, 2, 11);
        let f = analog_from_phases(&random_phases(8, 12), 4, 2).unwrap();
        let dp = duality_digital_precoder(&h, &[0.0, 3.0], &f).unwrap();
        assert_eq!(dp.norm_factors[0], 0.0);
        assert!(dp.g.column(0).iter().all(|z| *z == Complex64::new(0.0, 0.0)));
        assert!(((&f * dp.g.column(1)).norm() - 1.0).abs() < 1e-12);
        assert!(dp.norm_factors[1] > 0.0);
    }

    #[test]
    fn feasibility_residuals() {
        let dims = SystemDims::new(2, 1, 2, 1, 2, 20, 4.0).unwrap();
        let ok = ControlVariable::new(vec![0.0, TAU], vec![1.0, 3.0]);
        assert_eq!(ok.feasibility_residual(4.0), 0.0);
        ok.validate(&dims).unwrap();
        let bad = ControlVariable::new(vec![-0.1, 0.0], vec![2.0, 3.0]);
        assert!((bad.feasibility_residual(4.0) - 1.0).abs() < 1e-15);
        assert!(bad.validate(&dims).is_err());
        let policy = ControlPolicy::new(vec![ok.clone(), ok], vec![0.3, 0.7]);
        policy.validate(&dims).unwrap();
        assert_eq!(policy.gamma_vec().len(), dims.policy_len());
        let skew = ControlPolicy::new(policy.gammas.clone(), vec![0.3, 0.8]);
        assert!(skew.validate(&dims).is_err());
    }
}
