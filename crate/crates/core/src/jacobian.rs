//! Analytic derivatives of the instantaneous rates with respect to the
//! phases and powers of one control state.
//!
//! Rates are differentiated at a frozen channel and noise draw. Each real
//! coordinate is pushed forward through the whole chain: analog precoder,
//! pilot observation, LMMSE estimate, uplink MMSE solve, column
//! normalization and SINR. Perturbing phase `(m, n)` only touches entry
//! `F[m, n]`, so every step is a rank-one or single-row update and the full
//! Jacobian of one state costs `O(MS (K S^2 + S K^2))`.
//!
//! The duality precoder is differentiated in its direction form
//! `D = (B P B^H + I)^-1 B`, `g_k = d_k / ||F d_k||`, which agrees with the
//! normalized precoder for `p_k > 0` and gives the one-sided derivative at
//! `p_k = 0`.

use alloc::vec::Vec;
use core::f64::consts::LN_2;
use num_complex::Complex64;

use crate::channel::ChannelSample;
use crate::error::{ensure, Error, Result};
use crate::estimation::observe_pilots_scaled;
use crate::linalg::{cholesky, J};
use crate::precoding::{ControlPolicy, ControlVariable, NORM_FLOOR};
use crate::rate::{sinr_rates, Pipeline, PrecoderKind, PreparedControl, RateVector};
use crate::{CMatrix, CVector, RMatrix};
#[allow(unused_imports)]
use num_traits::Float;

/// Rate derivatives of one state at one draw.
#[derive(Debug, Clone, PartialEq)]
pub struct RateJacobian {
    /// `MS x K`; column `k` is the gradient of `r_k` over the phases.
    pub d_theta: RMatrix,
    /// `K x K`; column `k` is the gradient of `r_k` over the powers.
    pub d_p: RMatrix,
}

impl RateJacobian {
    /// `[d_theta; d_p]`, shape `(MS + K) x K`.
    pub fn stacked(&self) -> RMatrix {
        let (ms, k) = (self.d_theta.nrows(), self.d_theta.ncols());
        let mut out = RMatrix::zeros(ms + k, k);
        out.rows_mut(0, ms).copy_from(&self.d_theta);
        out.rows_mut(ms, k).copy_from(&self.d_p);
        out
    }
}

/// Per-state quantities reused across channel draws.
#[derive(Debug, Clone)]
pub struct JacobianContext<'a> {
    prep: PreparedControl<'a>,
    pipeline: Pipeline<'a>,
    /// `C_k F`, one per user (estimated CSI only).
    cf: Vec<CMatrix>,
    /// `F^H F`.
    gram: CMatrix,
}

impl<'a> JacobianContext<'a> {
    pub fn new(pipeline: &Pipeline<'a>, gamma: &ControlVariable) -> Result<Self> {
        ensure!(
            pipeline.precoder == PrecoderKind::Duality,
            Config,
            "rate Jacobians are only defined for the duality precoder"
        );
        let prep = pipeline.prepare(gamma)?;
        let cf = if prep.filters().is_some() {
            pipeline.stats.covariances().iter().map(|c| c * &prep.f).collect()
        } else {
            Vec::new()
        };
        let gram = prep.f.adjoint() * &prep.f;
        Ok(JacobianContext {
            prep,
            pipeline: *pipeline,
            cf,
            gram,
        })
    }

    pub fn prepared(&self) -> &PreparedControl<'a> {
        &self.prep
    }

    /// Rates and their Jacobian at one draw.
    pub fn evaluate(&self, sample: &ChannelSample) -> Result<(RateVector, RateJacobian)> {
        let f = &self.prep.f;
        let p = &self.prep.power;
        let (m_ant, s) = (f.nrows(), f.ncols());
        let users = p.len();
        let h = &sample.h;
        let hf = h * f;

        // Channel estimate and, for LMMSE, the pieces of its differential
        // dh_k = R_k dC~_k v_k + (I - R_k)[:, n] dh~_k[n].
        let mut b = CMatrix::zeros(s, users);
        let mut lmmse: Vec<(CVector, CMatrix)> = Vec::new();
        match self.prep.filters() {
            None => {
                for k in 0..users {
                    for n in 0..s {
                        b[(n, k)] = hf[(k, n)].conj();
                    }
                }
            }
            Some(filters) => {
                let pilots = self.pipeline.pilots;
                let y = observe_pilots_scaled(sample, f, pilots, self.pipeline.noise_var.sqrt())?;
                let psi_conj = pilots.psi().conjugate();
                for (k, filter) in filters.iter().enumerate() {
                    let z = y.row(k).adjoint();
                    b.set_column(k, &filter.apply(&z));
                    let v = filter.pilot_response(&z);
                    let resid = CMatrix::identity(s, s) - &filter.gain * &psi_conj;
                    lmmse.push((v, resid));
                }
            }
        }

        let mut bp = b.clone();
        for k in 0..users {
            bp.column_mut(k).scale_mut(p[k]);
        }
        let v = &bp * b.adjoint() + CMatrix::identity(s, s);
        let v_inv = cholesky(&v, "uplink MMSE matrix")?.inverse();
        let d = &v_inv * &b;
        let w = f * &d;
        let norms: Vec<f64> = (0..users).map(|k| w.column(k).norm()).collect();
        let mut g = d.clone();
        for k in 0..users {
            if norms[k] > NORM_FLOOR {
                g.column_mut(k).scale_mut(1.0 / norms[k]);
            } else {
                g.column_mut(k).fill(Complex64::new(0.0, 0.0));
            }
        }
        let c = &hf * &g;
        let rates = sinr_rates(&c, p);
        let (gamma_all, gamma_minus): (Vec<f64>, Vec<f64>) = (0..users)
            .map(|k| {
                let minus: f64 = 1.0
                    + (0..users)
                        .filter(|&i| i != k)
                        .map(|i| p[i] * c[(k, i)].norm_sqr())
                        .sum::<f64>();
                (minus + p[k] * c[(k, k)].norm_sqr(), minus)
            })
            .collect();
        let gram_d = &self.gram * &d;
        let bh_d = b.adjoint() * &d;

        let rate_diff = |dc: &CMatrix, dp: Option<usize>| -> Vec<f64> {
            (0..users)
                .map(|k| {
                    let mut all = 0.0;
                    let mut minus = 0.0;
                    for i in 0..users {
                        let mut a = 2.0 * p[i] * (c[(k, i)].conj() * dc[(k, i)]).re;
                        if dp == Some(i) {
                            a += c[(k, i)].norm_sqr();
                        }
                        all += a;
                        if i != k {
                            minus += a;
                        }
                    }
                    (all / gamma_all[k] - minus / gamma_minus[k]) / LN_2
                })
                .collect()
        };
        // dG from dD, plus the direct d||F d_k|| term from dF (phases only)
        let normalize_diff = |dd: &CMatrix, df_term: &dyn Fn(usize) -> Complex64| -> CMatrix {
            let mut dg = CMatrix::zeros(s, users);
            for k in 0..users {
                let n = norms[k];
                if n <= NORM_FLOOR {
                    continue;
                }
                let dn = (df_term(k) + gram_d.column(k).dotc(&dd.column(k))).re / n;
                for r in 0..s {
                    dg[(r, k)] = dd[(r, k)] / n - d[(r, k)] * (dn / (n * n));
                }
            }
            dg
        };

        let mut d_theta = RMatrix::zeros(m_ant * s, users);
        let mut db = CMatrix::zeros(s, users);
        for n in 0..s {
            for m in 0..m_ant {
                let delta = J * f[(m, n)];
                db.fill(Complex64::new(0.0, 0.0));
                for k in 0..users {
                    let dh_n = (delta * h[(k, m)]).conj();
                    match lmmse.get(k) {
                        None => db[(n, k)] = dh_n,
                        Some((vk, resid)) => {
                            let a_row = self.cf[k].row(m);
                            let along: Complex64 = (0..s).map(|j| a_row[j] * vk[j]).sum();
                            let mut x = CVector::from_fn(s, |j, _| a_row[j].conj() * delta * vk[n]);
                            x[n] += delta.conj() * along;
                            let mut col = resid * x;
                            for r in 0..s {
                                let direct = if r == n {
                                    Complex64::new(1.0, 0.0)
                                } else {
                                    Complex64::new(0.0, 0.0)
                                };
                                col[r] += (direct - resid[(r, n)]) * dh_n;
                            }
                            db.set_column(k, &col);
                        }
                    }
                }
                let mut dbp = db.clone();
                for k in 0..users {
                    dbp.column_mut(k).scale_mut(p[k]);
                }
                let dv_d = &dbp * &bh_d + &bp * (db.adjoint() * &d);
                let dd = &v_inv * (&db - dv_d);
                let dg = normalize_diff(&dd, &|k| w[(m, k)].conj() * delta * d[(n, k)]);
                let mut dc = &hf * dg;
                for k in 0..users {
                    for i in 0..users {
                        dc[(k, i)] += h[(k, m)] * delta * g[(n, i)];
                    }
                }
                let dr = rate_diff(&dc, None);
                let row = n * m_ant + m;
                for k in 0..users {
                    d_theta[(row, k)] = dr[k];
                }
            }
        }

        let mut d_p = RMatrix::zeros(users, users);
        for jx in 0..users {
            // dV = b_j b_j^H, so dD = -d_j (B^H D)[j, :]
            let dd = -(d.column(jx) * bh_d.row(jx));
            let dg = normalize_diff(&dd, &|_| Complex64::new(0.0, 0.0));
            let dc = &hf * dg;
            let dr = rate_diff(&dc, Some(jx));
            for k in 0..users {
                d_p[(jx, k)] = dr[k];
            }
        }
        Ok((RateVector(rates), RateJacobian { d_theta, d_p }))
    }
}

/// Rate Jacobian of `gamma` at one draw.
pub fn rate_jacobian(pipeline: &Pipeline<'_>, gamma: &ControlVariable, sample: &ChannelSample) -> Result<RateJacobian> {
    Ok(JacobianContext::new(pipeline, gamma)?.evaluate(sample)?.1)
}

/// `MS x K` phase gradients.
pub fn rate_gradient_theta(
    pipeline: &Pipeline<'_>,
    gamma: &ControlVariable,
    sample: &ChannelSample,
) -> Result<RMatrix> {
    Ok(rate_jacobian(pipeline, gamma, sample)?.d_theta)
}

/// `K x K` power gradients.
pub fn rate_gradient_power(
    pipeline: &Pipeline<'_>,
    gamma: &ControlVariable,
    sample: &ChannelSample,
) -> Result<RMatrix> {
    Ok(rate_jacobian(pipeline, gamma, sample)?.d_p)
}

/// Jacobian of the `q`-weighted rate vector over all stacked control
/// variables, one `L(MS + K) x K` matrix per draw. Block `l` is
/// `q_l [d_theta(l); d_p(l)]`.
pub fn policy_jacobian(
    policy: &ControlPolicy,
    pipeline: &Pipeline<'_>,
    samples: &[ChannelSample],
) -> Result<Vec<RMatrix>> {
    let contexts = policy
        .gammas
        .iter()
        .map(|g| JacobianContext::new(pipeline, g))
        .collect::<Result<Vec<_>>>()?;
    let dims = pipeline.stats.dims();
    let block = dims.phase_len() + dims.users;
    samples
        .iter()
        .map(|sample| {
            let mut out = RMatrix::zeros(block * policy.states(), dims.users);
            for (l, ctx) in contexts.iter().enumerate() {
                if policy.q[l] == 0.0 {
                    continue;
                }
                let (_, jac) = ctx.evaluate(sample)?;
                out.rows_mut(l * block, block).copy_from(&(jac.stacked() * policy.q[l]));
            }
            Ok(out)
        })
        .collect()
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h`; row `i` of the
/// result is the derivative along coordinate `i`.
pub fn finite_difference_jacobian<F>(mut f: F, point: &[f64], step: f64) -> Result<RMatrix>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    ensure!(
        step > 0.0,
        Config,
        "finite-difference step must be positive, got {step}"
    );
    let mut x = point.to_vec();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        x[i] = point[i] + step;
        let up = f(&x)?;
        x[i] = point[i] - step;
        let down = f(&x)?;
        x[i] = point[i];
        ensure!(up.len() == down.len(), Contract, "function output length changed");
        rows.push(up.iter().zip(&down).map(|(a, b)| (a - b) / (2.0 * step)).collect());
    }
    let cols = rows.first().map_or(0, Vec::len);
    Ok(RMatrix::from_fn(point.len(), cols, |i, j| rows[i][j]))
}

/// Rates of a single state as a function of the stacked `[theta; p]`.
pub fn rates_of_control<'p>(
    pipeline: &'p Pipeline<'p>,
    sample: &'p ChannelSample,
) -> impl FnMut(&[f64]) -> Result<Vec<f64>> + 'p {
    let phase_len = pipeline.stats.dims().phase_len();
    move |x: &[f64]| {
        let gamma = ControlVariable::from_slice(x, phase_len);
        Ok(pipeline.rates(&gamma, sample)?.into_inner())
    }
}

/// Worst entrywise disagreement between an analytic and a finite-difference
/// Jacobian: relative error where `|fd| >= 1e-3`, absolute error elsewhere.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradientError {
    pub max_relative: f64,
    pub max_absolute_small: f64,
}

impl GradientError {
    pub fn compare(analytic: &RMatrix, fd: &RMatrix) -> Result<Self> {
        ensure!(
            analytic.shape() == fd.shape(),
            Contract,
            "Jacobian shapes differ: {:?} vs {:?}",
            analytic.shape(),
            fd.shape()
        );
        let mut out = GradientError::default();
        for (a, b) in analytic.iter().zip(fd.iter()) {
            if !a.is_finite() {
                return Err(Error::Numerical(alloc::format!("non-finite analytic derivative {a}")));
            }
            let err = (a - b).abs();
            if b.abs() >= 1e-3 {
                out.max_relative = out.max_relative.max(err / b.abs());
            } else {
                out.max_absolute_small = out.max_absolute_small.max(err);
            }
        }
        Ok(out)
    }

    pub fn within(&self, rel: f64, abs: f64) -> bool {
        self.max_relative <= rel && self.max_absolute_small <= abs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{build_geometry_stats, ChannelSampler, ChannelStats, GeometryModelParams};
    use crate::dims::SystemDims;
    use crate::estimation::{generate_pilots, PilotMatrix};
    use crate::rate::CsiMode;
    use crate::rng::seeded;
    use alloc::vec;
    use core::f64::consts::TAU;
    use rand::Rng;

    struct Instance {
        stats: ChannelStats,
        pilots: PilotMatrix,
        gamma: ControlVariable,
        sample: ChannelSample,
    }

    fn instance(m: usize, s: usize, k: usize, tp: usize, seed: u64) -> Instance {
        let dims = SystemDims::new(m, s, k, tp, 1, 20, 10.0).unwrap();
        let params = GeometryModelParams {
            paths: 4,
            ..GeometryModelParams::default()
        };
        let stats = build_geometry_stats(dims, &params, seed).unwrap();
        let pilots = generate_pilots(tp, s, 10.0, seed ^ 1).unwrap();
        let mut rng = seeded(seed ^ 2);
        let theta = (0..m * s).map(|_| rng.random::<f64>() * TAU).collect();
        let power = (0..k).map(|_| 0.2 + rng.random::<f64>() * 3.0).collect();
        let sample = ChannelSampler::new(&stats).unwrap().draw_indexed(seed ^ 3, 0);
        Instance {
            stats,
            pilots,
            gamma: ControlVariable::new(theta, power),
            sample,
        }
    }

    fn check(inst: &Instance, csi: CsiMode) -> GradientError {
        let pipe = Pipeline::new(&inst.stats, &inst.pilots).with_csi(csi);
        let jac = rate_jacobian(&pipe, &inst.gamma, &inst.sample).unwrap();
        let fd = finite_difference_jacobian(rates_of_control(&pipe, &inst.sample), &inst.gamma.to_vec(), 1e-5).unwrap();
        GradientError::compare(&jac.stacked(), &fd).unwrap()
    }

    #[test]
    fn matches_finite_differences_small() {
        for seed in 0..5 {
            let inst = instance(4, 2, 2, 2, seed);
            for csi in [CsiMode::Estimated, CsiMode::Perfect] {
                let err = check(&inst, csi);
                assert!(err.within(1e-4, 1e-7), "seed {seed} {csi:?}: {err:?}");
            }
        }
    }

    #[test]
    fn matches_finite_differences_sweep() {
        for seed in 0..20 {
            let inst = instance(8, 2, 3, 3, 100 + seed);
            let err = check(&inst, CsiMode::Estimated);
            assert!(err.within(1e-4, 1e-7), "seed {seed}: {err:?}");
        }
    }

    #[test]
    fn zero_power_kills_phase_gradient() {
        let mut inst = instance(4, 2, 2, 2, 7);
        inst.gamma.power = vec![0.0; 2];
        let pipe = Pipeline::new(&inst.stats, &inst.pilots);
        let g = rate_gradient_theta(&pipe, &inst.gamma, &inst.sample).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn silent_user_only_interferes() {
        let mut inst = instance(8, 2, 3, 3, 8);
        inst.gamma.power[1] = 0.0;
        let pipe = Pipeline::new(&inst.stats, &inst.pilots);
        let jac = rate_jacobian(&pipe, &inst.gamma, &inst.sample).unwrap();
        let x = inst.gamma.to_vec();
        let idx = inst.stats.dims().phase_len() + 1;
        let h = 1e-6;
        let mut up = x.clone();
        up[idx] += h;
        let mut rates = rates_of_control(&pipe, &inst.sample);
        let r0 = rates(&x).unwrap();
        let r1 = rates(&up).unwrap();
        for k in [0, 2] {
            let fd = (r1[k] - r0[k]) / h;
            assert!(jac.d_p[(1, k)] <= 0.0);
            assert!((jac.d_p[(1, k)] - fd).abs() <= 1e-4 * fd.abs().max(1e-3));
        }
        assert!(jac.d_p[(1, 1)] >= 0.0);
    }

    #[test]
    fn single_user_power_derivative_closed_form() {
        let dims = SystemDims::new(4, 1, 1, 1, 1, 20, 10.0).unwrap();
        let stats = build_geometry_stats(dims, &GeometryModelParams::default(), 9).unwrap();
        let pilots = generate_pilots(1, 1, 10.0, 1).unwrap();
        let gamma = ControlVariable::new(vec![0.3, 1.1, 2.0, 5.5], vec![2.0]);
        let sample = ChannelSampler::new(&stats).unwrap().draw_indexed(2, 0);
        let pipe = Pipeline::new(&stats, &pilots);
        let jac = rate_jacobian(&pipe, &gamma, &sample).unwrap();
        // S = 1: g is a unit-modulus scalar times 1/||F||, so |h^H F g|^2 is
        // independent of p.
        let f = gamma.analog(&dims).unwrap();
        let gain = (&sample.h * &f)[(0, 0)].norm_sqr();
        let expect = gain / LN_2 / (1.0 + 2.0 * gain);
        assert!((jac.d_p[(0, 0)] - expect).abs() < 1e-12 * expect);
    }

    #[test]
    fn phase_gradient_is_periodic() {
        let inst = instance(4, 2, 2, 2, 10);
        let pipe = Pipeline::new(&inst.stats, &inst.pilots);
        let base = rate_gradient_theta(&pipe, &inst.gamma, &inst.sample).unwrap();
        let mut shifted = inst.gamma.clone();
        shifted.theta[3] += TAU;
        let moved = rate_gradient_theta(&pipe, &shifted, &inst.sample).unwrap();
        assert!((base - moved).amax() < 1e-10);
    }

    #[test]
    fn policy_blocks_scale_with_q() {
        let inst = instance(4, 2, 2, 2, 11);
        let pipe = Pipeline::new(&inst.stats, &inst.pilots);
        let mut other = inst.gamma.clone();
        other.theta.iter_mut().for_each(|t| *t = (*t * 0.5) % TAU);
        let samples = [inst.sample.clone()];
        let single = policy_jacobian(&ControlPolicy::single(inst.gamma.clone()), &pipe, &samples).unwrap();
        let direct = rate_jacobian(&pipe, &inst.gamma, &inst.sample).unwrap().stacked();
        assert_eq!(single[0], direct);
        let policy = ControlPolicy::new(vec![inst.gamma.clone(), other.clone()], vec![0.0, 1.0]);
        let jac = &policy_jacobian(&policy, &pipe, &samples).unwrap()[0];
        let block = inst.stats.dims().phase_len() + 2;
        assert!(jac.rows(0, block).iter().all(|&x| x == 0.0));

        let policy = ControlPolicy::new(vec![inst.gamma.clone(), other], vec![0.3, 0.7]);
        let jac = &policy_jacobian(&policy, &pipe, &samples).unwrap()[0];
        let q = policy.q.clone();
        let stacked = policy.gamma_vec();
        let mixture = |x: &[f64]| -> Result<Vec<f64>> {
            let mut out = vec![0.0; 2];
            for l in 0..2 {
                let g = ControlVariable::from_slice(&x[l * block..(l + 1) * block], block - 2);
                let r = pipe.rates(&g, &inst.sample)?;
                for k in 0..2 {
                    out[k] += q[l] * r[k];
                }
            }
            Ok(out)
        };
        let fd = finite_difference_jacobian(mixture, &stacked, 1e-5).unwrap();
        assert!(GradientError::compare(jac, &fd).unwrap().within(1e-4, 1e-7));
    }

    #[test]
    fn finite_difference_examples() {
        let fd = finite_difference_jacobian(|x| Ok(vec![x[0] * x[0]]), &[3.0], 1e-5).unwrap();
        assert!((fd[(0, 0)] - 6.0).abs() < 1e-9);
        let fd = finite_difference_jacobian(|x| Ok(vec![2.0 * x[0] - x[1], 0.5 * x[1]]), &[1.0, -4.0], 1e-3).unwrap();
        let exact = RMatrix::from_row_slice(2, 2, &[2.0, 0.0, -1.0, 0.5]);
        assert!((fd - exact).amax() < 1e-12);
        assert!(finite_difference_jacobian(|x| Ok(x.to_vec()), &[1.0], 0.0).is_err());
    }

    #[test]
    fn richardson_consistency() {
        let inst = instance(4, 2, 2, 2, 12);
        let pipe = Pipeline::new(&inst.stats, &inst.pilots);
        let x = inst.gamma.to_vec();
        let fds: Vec<RMatrix> = [1e-4, 1e-5, 1e-6]
            .iter()
            .map(|&h| finite_difference_jacobian(rates_of_control(&pipe, &inst.sample), &x, h).unwrap())
            .collect();
        assert!((&fds[0] - &fds[1]).amax() < 1e-5);
        assert!((&fds[1] - &fds[2]).amax() < 1e-5);
    }
}
