//! Stochastic successive convex approximation over randomized policies.
//!
//! Each iteration draws a fresh batch of channel and noise realizations,
//! refreshes two recursive estimates
//!
//! ```text
//! r^t(l) = (1 - rho_t) r^{t-1}(l) + rho_t mean_i r(Gamma(l); H_i, N_i)
//! f^t    = (1 - rho_t) f^{t-1}    + rho_t mean_i J_Gamma(i) grad U(r^t(q^t))
//! ```
//!
//! maximizes the concave surrogate separately in `q` (a small strongly
//! concave program on the simplex) and in each `Gamma(l)` (a projection in
//! closed form), and moves toward the maximizers with step `gamma_t`.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::TAU;

use crate::channel::{ChannelSample, ChannelSampler, ChannelStats};
use crate::dims::SystemDims;
use crate::error::{ensure, Error, Result};
use crate::jacobian::JacobianContext;
use crate::linalg::{hermitian_eigen, wrap_phase};
use crate::precoding::{ControlPolicy, ControlVariable};
use crate::rate::{average_rates, Pipeline};
use crate::rng::{derive_seed, seeded};
use crate::utility::UtilitySpec;
use crate::{CMatrix, RMatrix};
#[allow(unused_imports)]
use num_traits::Float;

/// `rho_t = (t + 1)^-rho_exponent`, `gamma_t = (t + 1)^-gamma_exponent`
/// and the proximal weights of the two subproblems.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepSchedule {
    pub rho_exponent: f64,
    pub gamma_exponent: f64,
    pub tau_q: f64,
    pub tau_gamma: f64,
    /// Wrap phase candidates modulo `2 pi` instead of clipping to the box.
    #[cfg_attr(feature = "serde", serde(default))]
    pub wrap_phases: bool,
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule {
            rho_exponent: 0.6,
            gamma_exponent: 0.9,
            tau_q: 1.0,
            tau_gamma: 1.0,
            wrap_phases: false,
        }
    }
}

impl StepSchedule {
    /// Rejects exponents outside `0.5 < rho < gamma <= 1` and nonpositive
    /// proximal weights. These make `sum rho_t^2`, `sum gamma_t^2` finite,
    /// `sum gamma_t` infinite and `gamma_t / rho_t -> 0`.
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.rho_exponent > 0.5 && self.rho_exponent < 1.0,
            Config,
            "rho exponent must lie in (0.5, 1), got {}",
            self.rho_exponent
        );
        ensure!(
            self.gamma_exponent > self.rho_exponent && self.gamma_exponent <= 1.0,
            Config,
            "gamma exponent must lie in (rho exponent, 1], got {} with rho exponent {}",
            self.gamma_exponent,
            self.rho_exponent
        );
        ensure!(
            self.tau_q > 0.0 && self.tau_gamma > 0.0 && self.tau_q.is_finite() && self.tau_gamma.is_finite(),
            Config,
            "proximal weights must be positive, got tau_q = {} and tau_gamma = {}",
            self.tau_q,
            self.tau_gamma
        );
        Ok(())
    }

    pub fn rho(&self, t: usize) -> f64 {
        (t as f64 + 1.0).powf(-self.rho_exponent)
    }

    pub fn gamma(&self, t: usize) -> f64 {
        (t as f64 + 1.0).powf(-self.gamma_exponent)
    }
}

/// Recursive rate and gradient estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateState {
    /// `K x L`; column `l` estimates the mean rates of state `l`.
    pub r_hat: RMatrix,
    /// Gradient estimate over the stacked `[theta(l); p(l)]`.
    pub f_gamma: Vec<f64>,
    /// Number of updates applied.
    pub t: usize,
}

impl SurrogateState {
    pub fn new(dims: &SystemDims) -> Self {
        SurrogateState {
            r_hat: RMatrix::zeros(dims.users, dims.states),
            f_gamma: vec![0.0; dims.policy_len()],
            t: 0,
        }
    }

    /// `r^(q) = sum_l q_l r^(l)`.
    pub fn mixed_rates(&self, q: &[f64]) -> Vec<f64> {
        mix(&self.r_hat, q)
    }
}

fn mix(r_hat: &RMatrix, q: &[f64]) -> Vec<f64> {
    (0..r_hat.nrows())
        .map(|k| (0..r_hat.ncols()).map(|l| q[l] * r_hat[(k, l)]).sum::<f64>().max(0.0))
        .collect()
}

/// Batch means of the rates and of the (unscaled) per-state Jacobians.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTerms {
    /// `K x L`.
    pub rates: RMatrix,
    /// Per state, `(MS + K) x K`.
    pub jacobians: Vec<RMatrix>,
}

/// Rates only, for every state of `policy` averaged over `batch`.
pub fn batch_rates(policy: &ControlPolicy, pipeline: &Pipeline<'_>, batch: &[ChannelSample]) -> Result<RMatrix> {
    let mc = average_rates(policy, pipeline, batch)?;
    let users = pipeline.stats.dims().users;
    Ok(RMatrix::from_fn(users, policy.states(), |k, l| mc.per_state[l][k]))
}

/// Rates and Jacobians of every state averaged over `batch`.
pub fn batch_terms(policy: &ControlPolicy, pipeline: &Pipeline<'_>, batch: &[ChannelSample]) -> Result<BatchTerms> {
    ensure!(!batch.is_empty(), Config, "batch must contain at least one sample");
    let dims = pipeline.stats.dims();
    let users = dims.users;
    let n = batch.len() as f64;
    let mut rates = RMatrix::zeros(users, policy.states());
    let mut jacobians = Vec::with_capacity(policy.states());
    for (l, gamma) in policy.gammas.iter().enumerate() {
        let ctx = JacobianContext::new(pipeline, gamma)?;
        let mut jac = RMatrix::zeros(dims.control_len(), users);
        for sample in batch {
            let (r, j) = ctx.evaluate(sample)?;
            for k in 0..users {
                rates[(k, l)] += r[k] / n;
            }
            jac += j.stacked() / n;
        }
        jacobians.push(jac);
    }
    Ok(BatchTerms { rates, jacobians })
}

/// `r^ <- (1 - rho) r^ + rho * batch`.
pub fn update_rate_surrogate(state: &mut SurrogateState, batch_rates: &RMatrix, rho: f64) -> Result<()> {
    ensure!(rho > 0.0 && rho <= 1.0, Config, "rho must lie in (0, 1], got {rho}");
    ensure!(
        batch_rates.shape() == state.r_hat.shape(),
        Contract,
        "batch rates {:?} vs surrogate {:?}",
        batch_rates.shape(),
        state.r_hat.shape()
    );
    state.r_hat = state.r_hat.scale(1.0 - rho) + batch_rates.scale(rho);
    Ok(())
}

/// `f <- (1 - rho) f + rho * J_Gamma grad U(r^(q))`, with the gradient of
/// `U` taken at the current rate surrogate. Block `l` of `J_Gamma` carries
/// the factor `q_l`.
pub fn update_gradient_surrogate(
    state: &mut SurrogateState,
    jacobians: &[RMatrix],
    q: &[f64],
    utility: &UtilitySpec,
    rho: f64,
) -> Result<()> {
    ensure!(rho > 0.0 && rho <= 1.0, Config, "rho must lie in (0, 1], got {rho}");
    let weights = utility.gradient(&state.mixed_rates(q))?;
    let block = jacobians.first().map_or(0, RMatrix::nrows);
    ensure!(
        block * jacobians.len() == state.f_gamma.len() && jacobians.len() == q.len(),
        Contract,
        "{} Jacobian blocks of {block} rows for a gradient of length {}",
        jacobians.len(),
        state.f_gamma.len()
    );
    for (l, jac) in jacobians.iter().enumerate() {
        for row in 0..block {
            let term: f64 = (0..weights.len()).map(|k| jac[(row, k)] * weights[k]).sum();
            let f = &mut state.f_gamma[l * block + row];
            *f = (1.0 - rho) * *f + rho * q[l] * term;
        }
    }
    Ok(())
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    project_scaled_simplex(v, 1.0)
}

/// Projection onto `{x >= 0, sum x = level}` by sorting.
pub fn project_scaled_simplex(v: &[f64], level: f64) -> Vec<f64> {
    if v.is_empty() {
        return Vec::new();
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut shift = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - level) / (i as f64 + 1.0);
        if u - candidate > 0.0 {
            shift = candidate;
        }
    }
    v.iter().map(|&x| (x - shift).max(0.0)).collect()
}

/// Projection onto `{p >= 0, sum p <= budget}`.
pub fn project_power(v: &[f64], budget: f64) -> Vec<f64> {
    let clipped: Vec<f64> = v.iter().map(|&x| x.max(0.0)).collect();
    if clipped.iter().sum::<f64>() <= budget {
        clipped
    } else {
        project_scaled_simplex(v, budget)
    }
}

/// Result of the `q` subproblem.
#[derive(Debug, Clone, PartialEq)]
pub struct QSolution {
    pub q: Vec<f64>,
    /// `||q - P(q + grad)||` at the returned point.
    pub residual: f64,
    pub iterations: usize,
}

pub const Q_TOLERANCE: f64 = 1e-8;
pub const Q_MAX_ITERATIONS: usize = 10_000;

/// Maximizes `U(r^ q) - tau ||q - q_t||^2` over the simplex by projected
/// gradient ascent with backtracking on the step.
pub fn solve_q_subproblem(r_hat: &RMatrix, q_t: &[f64], utility: &UtilitySpec, tau_q: f64) -> Result<QSolution> {
    ensure!(tau_q > 0.0, Config, "tau_q must be positive, got {tau_q}");
    ensure!(
        q_t.len() == r_hat.ncols(),
        Contract,
        "q has {} entries for {} states",
        q_t.len(),
        r_hat.ncols()
    );
    let objective = |q: &[f64]| -> Result<f64> {
        let prox: f64 = q.iter().zip(q_t).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(utility.value(&mix(r_hat, q))? - tau_q * prox)
    };
    let gradient = |q: &[f64]| -> Result<Vec<f64>> {
        let w = utility.gradient(&mix(r_hat, q))?;
        Ok((0..q.len())
            .map(|l| {
                let lin: f64 = (0..w.len()).map(|k| r_hat[(k, l)] * w[k]).sum();
                lin - 2.0 * tau_q * (q[l] - q_t[l])
            })
            .collect())
    };
    let residual_at = |q: &[f64], g: &[f64]| -> f64 {
        let moved: Vec<f64> = q.iter().zip(g).map(|(a, b)| a + b).collect();
        let p = project_simplex(&moved);
        q.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    };

    let mut q = project_simplex(q_t);
    let mut value = objective(&q)?;
    let mut step = 1.0 / (2.0 * tau_q);
    for iteration in 0..Q_MAX_ITERATIONS {
        let g = gradient(&q)?;
        let residual = residual_at(&q, &g);
        if residual <= Q_TOLERANCE {
            return Ok(QSolution {
                q,
                residual,
                iterations: iteration,
            });
        }
        loop {
            let moved: Vec<f64> = q.iter().zip(&g).map(|(a, b)| a + step * b).collect();
            let cand = project_simplex(&moved);
            let diff: Vec<f64> = cand.iter().zip(&q).map(|(a, b)| a - b).collect();
            let lin: f64 = diff.iter().zip(&g).map(|(d, gi)| d * gi).sum();
            let sq: f64 = diff.iter().map(|d| d * d).sum();
            let cand_value = objective(&cand)?;
            let sufficient = cand_value >= value + lin - sq / (2.0 * step);
            // Near the optimum the objective change drops below rounding;
            // fall back to the secant curvature of the gradient.
            let flat = (cand_value - value).abs() <= 1e-12 * value.abs().max(1.0) && {
                let gc = gradient(&cand)?;
                let curvature: f64 = -gc.iter().zip(&g).zip(&diff).map(|((a, b), d)| (a - b) * d).sum::<f64>();
                curvature <= sq / step
            };
            if sufficient || flat || sq == 0.0 {
                q = cand;
                value = cand_value;
                step *= 2.0;
                break;
            }
            step *= 0.5;
            if step < 1e-300 {
                return Err(Error::Numerical("q-subproblem line search collapsed".into()));
            }
        }
    }
    let g = gradient(&q)?;
    Err(Error::NotConverged {
        iterations: Q_MAX_ITERATIONS,
        residual: residual_at(&q, &g),
    })
}

/// `P[Gamma(l) + f(l) / (2 tau)]` for every state.
pub fn solve_gamma_subproblems(
    f_gamma: &[f64],
    gammas: &[ControlVariable],
    tau_gamma: f64,
    max_power: f64,
    wrap_phases: bool,
) -> Result<Vec<ControlVariable>> {
    ensure!(tau_gamma > 0.0, Config, "tau_gamma must be positive, got {tau_gamma}");
    let block = gammas.first().map_or(0, |g| g.theta.len() + g.power.len());
    ensure!(
        block * gammas.len() == f_gamma.len(),
        Contract,
        "gradient of length {} for {} states of size {block}",
        f_gamma.len(),
        gammas.len()
    );
    Ok(gammas
        .iter()
        .enumerate()
        .map(|(l, gamma)| {
            let f = &f_gamma[l * block..(l + 1) * block];
            let ms = gamma.theta.len();
            let theta = gamma
                .theta
                .iter()
                .zip(&f[..ms])
                .map(|(t, g)| {
                    let x = t + g / (2.0 * tau_gamma);
                    if wrap_phases {
                        wrap_phase(x)
                    } else {
                        x.clamp(0.0, TAU)
                    }
                })
                .collect();
            let cand: Vec<f64> = gamma
                .power
                .iter()
                .zip(&f[ms..])
                .map(|(p, g)| p + g / (2.0 * tau_gamma))
                .collect();
            ControlVariable::new(theta, project_power(&cand, max_power))
        })
        .collect())
}

/// `(1 - gamma) x + gamma x_bar`, entrywise.
pub fn average_vectors(current: &[f64], solution: &[f64], gamma: f64) -> Vec<f64> {
    current
        .iter()
        .zip(solution)
        .map(|(a, b)| (1.0 - gamma) * a + gamma * b)
        .collect()
}

/// Averages both `q` and every control state.
pub fn average_iterates(
    current: &ControlPolicy,
    q_bar: &[f64],
    gamma_bar: &[ControlVariable],
    gamma: f64,
) -> ControlPolicy {
    let gammas = current
        .gammas
        .iter()
        .zip(gamma_bar)
        .map(|(a, b)| {
            ControlVariable::new(
                average_vectors(&a.theta, &b.theta, gamma),
                average_vectors(&a.power, &b.power, gamma),
            )
        })
        .collect();
    ControlPolicy::new(gammas, average_vectors(&current.q, q_bar, gamma))
}

/// Phases of the top `S` eigenvectors of `cov`: `theta[n*M + m] = arg U[m, n]`.
pub fn eigen_phases(cov: &CMatrix, rf_chains: usize) -> Vec<f64> {
    let m = cov.nrows();
    let (_, vectors) = hermitian_eigen(cov);
    let mut theta = Vec::with_capacity(m * rf_chains);
    for n in 0..rf_chains {
        for i in 0..m {
            theta.push(wrap_phase(vectors[(i, n)].arg()));
        }
    }
    theta
}

/// Uniform `q`. From a seeded user permutation, state `l` takes two
/// round-robin slices: `ceil(K / L)` users whose covariance sum gives the
/// analog beams (phases of its top `S` eigenvectors), and `min(S, K)` users
/// served at `P_max / K` each.
pub fn initialize_policy(stats: &ChannelStats, seed: u64) -> ControlPolicy {
    use rand::seq::SliceRandom;
    let dims = stats.dims();
    let (users, states) = (dims.users, dims.states);
    let mut order: Vec<usize> = (0..users).collect();
    order.shuffle(&mut seeded(seed));
    let served = dims.rf_chains.min(users);
    let beamed = users.div_ceil(states);
    let gammas = (0..states)
        .map(|l| {
            let mut cov = CMatrix::zeros(dims.antennas, dims.antennas);
            for i in 0..beamed {
                cov += stats.covariance(order[(l * beamed + i) % users]);
            }
            let mut power = vec![0.0; users];
            for i in 0..served {
                power[order[(l * served + i) % users]] = dims.max_power / users as f64;
            }
            ControlVariable::new(eigen_phases(&cov, dims.rf_chains), power)
        })
        .collect();
    ControlPolicy::new(gammas, vec![1.0 / states as f64; states])
}

/// Optimizer run settings.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SscaOptions {
    pub iterations: usize,
    /// Fresh channel draws per iteration.
    pub batch_size: usize,
    pub seed: u64,
    /// Record a held-out Monte-Carlo utility every this many iterations
    /// (0 disables it).
    pub eval_every: usize,
    pub eval_samples: usize,
    pub eval_seed: u64,
}

impl Default for SscaOptions {
    fn default() -> Self {
        SscaOptions {
            iterations: 100,
            batch_size: 9,
            seed: 0,
            eval_every: 10,
            eval_samples: 200,
            eval_seed: 0x5eed,
        }
    }
}

/// One optimizer iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TraceRecord {
    /// One-based iteration number; the record describes iterate `iter - 1`.
    pub iter: usize,
    /// `U(r^(q^t))` after the rate update.
    pub surrogate_utility: f64,
    /// Held-out Monte-Carlo utility of the iterate `t`, when recorded.
    pub mc_utility: Option<f64>,
    /// `||Gamma_bar - Gamma^t||` over all states.
    pub step_norm_gamma: f64,
    pub step_norm_q: f64,
    /// Feasibility residual of the next iterate.
    pub feasibility: f64,
    /// Iterations spent in the `q` subproblem.
    pub q_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerTrace {
    pub records: Vec<TraceRecord>,
}

impl OptimizerTrace {
    pub fn max_feasibility_residual(&self) -> f64 {
        self.records.iter().map(|r| r.feasibility).fold(0.0, f64::max)
    }

    /// `(max - min) / |mean|` of the surrogate utility over the `window`
    /// iterations ending at `end` (inclusive).
    pub fn relative_variation(&self, end: usize, window: usize) -> Option<f64> {
        if window == 0 || end + 1 < window || end >= self.records.len() {
            return None;
        }
        let vals: Vec<f64> = self.records[end + 1 - window..=end]
            .iter()
            .map(|r| r.surrogate_utility)
            .collect();
        let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let mean = vals.iter().sum::<f64>() / window as f64;
        Some((max - min) / mean.abs())
    }
}

/// Runs the optimizer from `init`. Every iterate, including the returned
/// one, is feasible.
pub fn ssca_optimize(
    pipeline: &Pipeline<'_>,
    utility: &UtilitySpec,
    schedule: &StepSchedule,
    init: &ControlPolicy,
    options: &SscaOptions,
) -> Result<(ControlPolicy, OptimizerTrace)> {
    schedule.validate()?;
    let dims = *pipeline.stats.dims();
    ensure!(
        init.states() == dims.states,
        Contract,
        "initial policy has {} states, expected {}",
        init.states(),
        dims.states
    );
    init.validate(&dims)?;
    ensure!(options.batch_size >= 1, Config, "batch size must be at least one");
    let sampler = ChannelSampler::new(pipeline.stats)?;
    let eval_set = if options.eval_every > 0 && options.eval_samples > 0 {
        sampler.draw_batch(options.eval_samples, options.eval_seed)
    } else {
        Vec::new()
    };

    let mut policy = init.clone();
    let mut state = SurrogateState::new(&dims);
    let mut trace = OptimizerTrace::default();
    for t in 0..options.iterations {
        let batch = sampler.draw_batch(options.batch_size, derive_seed(options.seed, t as u64));
        let terms = batch_terms(&policy, pipeline, &batch)?;
        let rho = schedule.rho(t);
        update_rate_surrogate(&mut state, &terms.rates, rho)?;
        update_gradient_surrogate(&mut state, &terms.jacobians, &policy.q, utility, rho)?;
        state.t += 1;
        let surrogate_utility = utility.value(&state.mixed_rates(&policy.q))?;

        let q_sol = solve_q_subproblem(&state.r_hat, &policy.q, utility, schedule.tau_q)?;
        let gamma_bar = solve_gamma_subproblems(
            &state.f_gamma,
            &policy.gammas,
            schedule.tau_gamma,
            dims.max_power,
            schedule.wrap_phases,
        )?;
        let step_norm_q = distance(&q_sol.q, &policy.q);
        let step_norm_gamma = policy
            .gammas
            .iter()
            .zip(&gamma_bar)
            .map(|(a, b)| distance(&a.to_vec(), &b.to_vec()).powi(2))
            .sum::<f64>()
            .sqrt();
        let mc_utility = if !eval_set.is_empty() && t % options.eval_every == 0 {
            let mc = average_rates(&policy, pipeline, &eval_set)?;
            Some(utility.value(&mc.mean)?)
        } else {
            None
        };

        policy = average_iterates(&policy, &q_sol.q, &gamma_bar, schedule.gamma(t));
        let feasibility = policy.feasibility_residual(dims.max_power);
        trace.records.push(TraceRecord {
            iter: t + 1,
            surrogate_utility,
            mc_utility,
            step_norm_gamma,
            step_norm_q,
            feasibility,
            q_iterations: q_sol.iterations,
        });
        ensure!(
            feasibility <= 1e-8,
            Numerical,
            "iterate {t} left the feasible set (residual {feasibility:.3e})"
        );
    }
    Ok((policy, trace))
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
