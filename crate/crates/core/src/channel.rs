//! Channel statistics synthesis and seeded channel realizations.
//!
//! Two covariance models are provided, both for a half-wavelength uniform
//! linear array:
//!
//! * a sparse geometry model, `C_k = sum_i sigma2_{k,i} a(phi_{k,i}) a(phi_{k,i})^H`
//!   with Laplacian-distributed angles of departure around a uniform center;
//! * a COST-2100 style cluster model, where each user's angular scattering
//!   function is uniform over a few randomly placed intervals in the
//!   normalized angle `xi = sin(theta)` and the covariance is obtained by
//!   quadrature of `a(xi) a(xi)^H` over that support.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::{FRAC_PI_2, PI};

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::dims::SystemDims;
use crate::error::{ensure, Error, Result};
use crate::linalg::{exact_rank_tol, hermitian_defect, hermitian_eigen, numerical_rank};
use crate::rng::{complex_normal, seeded, stream, SimRng};
use crate::{CMatrix, CVector};
#[allow(unused_imports)]
use num_traits::Float;

/// Array response `a(phi)` with entries `exp(j*pi*m*sin(phi))`, `m = 0..M`.
pub fn steering_vector(phi: f64, antennas: usize) -> CVector {
    steering_vector_xi(phi.sin(), antennas)
}

/// Array response parameterized by the normalized angle `xi = sin(phi)`.
pub fn steering_vector_xi(xi: f64, antennas: usize) -> CVector {
    CVector::from_fn(antennas, |m, _| Complex64::from_polar(1.0, PI * m as f64 * xi))
}

/// Per-user channel covariances together with the system dimensions.
///
/// Models that are built from a low-rank square root `C_k = B_k B_k^H` keep
/// `B_k`; it gives better-conditioned rank checks and is sampled directly.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    dims: SystemDims,
    covariances: Vec<CMatrix>,
    factors: Option<Vec<CMatrix>>,
}

impl ChannelStats {
    /// Validates shape, Hermitian symmetry (`||C - C^H||_F <= 1e-10 ||C||_F`)
    /// and positive semi-definiteness (`lambda_min >= -1e-8 tr(C)/M`).
    pub fn new(dims: SystemDims, covariances: Vec<CMatrix>) -> Result<Self> {
        dims.validate()?;
        ensure!(
            covariances.len() == dims.users,
            Contract,
            "expected {} covariances, got {}",
            dims.users,
            covariances.len()
        );
        for (k, c) in covariances.iter().enumerate() {
            ensure!(
                c.nrows() == dims.antennas && c.ncols() == dims.antennas,
                Contract,
                "covariance {k} is {}x{}, expected {}x{}",
                c.nrows(),
                c.ncols(),
                dims.antennas,
                dims.antennas
            );
            ensure!(
                c.iter().all(|z| z.re.is_finite() && z.im.is_finite()),
                Data,
                "covariance {k} has non-finite entries"
            );
            let defect = hermitian_defect(c);
            ensure!(
                defect <= 1e-10 * c.norm(),
                Data,
                "covariance {k} is not Hermitian (defect {defect:.3e})"
            );
            psd_floor(c)
                .map_err(|min| Error::Data(format!("covariance {k} is not PSD (smallest eigenvalue {min:.3e})")))?;
        }
        Ok(ChannelStats {
            dims,
            covariances,
            factors: None,
        })
    }

    /// Statistics from square-root factors, `C_k = B_k B_k^H` with `B_k`
    /// of shape `M x r_k`.
    pub fn from_factors(dims: SystemDims, factors: Vec<CMatrix>) -> Result<Self> {
        for (k, b) in factors.iter().enumerate() {
            ensure!(
                b.nrows() == dims.antennas,
                Contract,
                "factor {k} has {} rows, expected {}",
                b.nrows(),
                dims.antennas
            );
        }
        let covariances = factors.iter().map(|b| b * b.adjoint()).collect();
        let mut stats = Self::new(dims, covariances)?;
        stats.factors = Some(factors);
        Ok(stats)
    }

    pub fn dims(&self) -> &SystemDims {
        &self.dims
    }

    pub fn covariances(&self) -> &[CMatrix] {
        &self.covariances
    }

    pub fn covariance(&self, user: usize) -> &CMatrix {
        &self.covariances[user]
    }

    pub fn factors(&self) -> Option<&[CMatrix]> {
        self.factors.as_deref()
    }

    /// Rank of `C_k` at the `n * eps` tolerance. Uses the singular values of
    /// the square-root factor when one is stored.
    pub fn rank(&self, user: usize) -> usize {
        let tol = exact_rank_tol(self.dims.antennas);
        match &self.factors {
            Some(f) if f[user].ncols() > 0 => {
                let sv = f[user].clone().svd(false, false).singular_values;
                let top = sv.max();
                if top <= 0.0 {
                    return 0;
                }
                sv.iter().filter(|&&s| s > tol * top).count()
            }
            Some(_) => 0,
            None => numerical_rank(&self.covariances[user], tol),
        }
    }

    /// Number of eigenvalues of `C_k` above `rel_tol * lambda_max`.
    pub fn numerical_rank(&self, user: usize, rel_tol: f64) -> usize {
        numerical_rank(&self.covariances[user], rel_tol)
    }

    /// Same covariances under different pilot / power / state settings.
    /// Antenna and user counts must not change.
    pub fn with_dims(&self, dims: SystemDims) -> Result<Self> {
        dims.validate()?;
        ensure!(
            dims.antennas == self.dims.antennas && dims.users == self.dims.users,
            Contract,
            "cannot change antenna or user count of existing statistics"
        );
        Ok(ChannelStats {
            dims,
            covariances: self.covariances.clone(),
            factors: self.factors.clone(),
        })
    }
}

/// Returns the eigen-decomposition if the matrix is PSD within tolerance,
/// otherwise the offending eigenvalue.
fn psd_floor(c: &CMatrix) -> core::result::Result<(Vec<f64>, CMatrix), f64> {
    let m = c.nrows().max(1) as f64;
    let trace = c.trace().re;
    let (values, vectors) = hermitian_eigen(c);
    let min = values.last().copied().unwrap_or(0.0);
    if min < -1e-8 * trace.abs().max(0.0) / m - f64::MIN_POSITIVE {
        return Err(min);
    }
    Ok((values, vectors))
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct GeometryModelParams {
    /// Scattering paths per user (`N_p`).
    pub paths: usize,
    /// Standard deviation of the Laplacian angle-of-departure spread, degrees.
    pub angular_spread_deg: f64,
    /// Interval of the per-user path gain `g_k`, in dB.
    pub gain_db_range: (f64, f64),
}

impl Default for GeometryModelParams {
    fn default() -> Self {
        GeometryModelParams {
            paths: 8,
            angular_spread_deg: 10.0,
            gain_db_range: (-10.0, 10.0),
        }
    }
}

impl GeometryModelParams {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.paths >= 1, Config, "geometry model needs at least one path");
        ensure!(
            self.angular_spread_deg > 0.0 && self.angular_spread_deg.is_finite(),
            Config,
            "angular spread must be positive"
        );
        validate_gain_range(self.gain_db_range)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct Cost2100ModelParams {
    pub clusters: usize,
    pub clusters_per_user: usize,
    /// Width of each cluster in `xi`, within `(0, 2]`.
    pub cluster_width: f64,
    /// Midpoint-rule grid size over `xi in [-1, 1)`.
    pub grid_points: usize,
    pub gain_db_range: (f64, f64),
}

impl Default for Cost2100ModelParams {
    fn default() -> Self {
        Cost2100ModelParams {
            clusters: 3,
            clusters_per_user: 2,
            cluster_width: 0.2,
            grid_points: 2048,
            gain_db_range: (-10.0, 10.0),
        }
    }
}

impl Cost2100ModelParams {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.clusters >= 1, Config, "need at least one cluster");
        ensure!(
            self.clusters_per_user >= 1 && self.clusters_per_user <= self.clusters,
            Config,
            "clusters_per_user must be in 1..={}",
            self.clusters
        );
        ensure!(
            self.cluster_width > 0.0 && self.cluster_width <= 2.0,
            Config,
            "cluster width must be in (0, 2], got {}",
            self.cluster_width
        );
        ensure!(self.grid_points >= 64, Config, "grid_points must be at least 64");
        validate_gain_range(self.gain_db_range)
    }
}

fn validate_gain_range((lo, hi): (f64, f64)) -> Result<()> {
    ensure!(
        lo.is_finite() && hi.is_finite() && lo <= hi,
        Config,
        "gain range must satisfy low <= high, got ({lo}, {hi})"
    );
    Ok(())
}

fn uniform(rng: &mut SimRng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn draw_gain(rng: &mut SimRng, (lo, hi): (f64, f64)) -> f64 {
    10f64.powf(uniform(rng, lo, hi) / 10.0)
}

/// Zero-mean Laplacian sample with scale `b` (standard deviation `b*sqrt(2)`).
fn laplace(rng: &mut SimRng, b: f64) -> f64 {
    loop {
        let u: f64 = rng.random::<f64>() - 0.5;
        if u.abs() < 0.5 {
            return -b * u.signum() * (1.0 - 2.0 * u.abs()).ln();
        }
    }
}

/// Folds an angle back into `[-pi/2, pi/2]` by reflection at the edges.
fn reflect_angle(mut phi: f64) -> f64 {
    for _ in 0..64 {
        if phi < -FRAC_PI_2 {
            phi = -PI - phi;
        } else if phi > FRAC_PI_2 {
            phi = PI - phi;
        } else {
            return phi;
        }
    }
    phi.clamp(-FRAC_PI_2, FRAC_PI_2)
}

/// `sum_i power_i a(angle_i) a(angle_i)^H` for `(angle, power)` pairs.
pub fn geometry_covariance(paths: &[(f64, f64)], antennas: usize) -> CMatrix {
    let b = geometry_factor(paths, antennas);
    &b * b.adjoint()
}

/// Square root `B = [sqrt(power_i) a(angle_i)]` of [`geometry_covariance`].
pub fn geometry_factor(paths: &[(f64, f64)], antennas: usize) -> CMatrix {
    CMatrix::from_fn(antennas, paths.len(), |m, i| {
        let (phi, power) = paths[i];
        Complex64::from_polar(power.sqrt(), PI * m as f64 * phi.sin())
    })
}

/// Geometry-based covariances: `N_p` paths per user, rank at most `N_p`.
pub fn build_geometry_stats(dims: SystemDims, params: &GeometryModelParams, seed: u64) -> Result<ChannelStats> {
    dims.validate()?;
    params.validate()?;
    let mut rng = seeded(seed);
    let scale = params.angular_spread_deg.to_radians() / core::f64::consts::SQRT_2;
    let mut factors = Vec::with_capacity(dims.users);
    for _ in 0..dims.users {
        let center = uniform(&mut rng, -FRAC_PI_2, FRAC_PI_2);
        let gain = draw_gain(&mut rng, params.gain_db_range);
        let mut paths: Vec<(f64, f64)> = (0..params.paths)
            .map(|_| {
                let phi = reflect_angle(center + laplace(&mut rng, scale));
                let w: f64 = Exp1.sample(&mut rng);
                (phi, w)
            })
            .collect();
        let total: f64 = paths.iter().map(|p| p.1).sum();
        for p in &mut paths {
            p.1 *= gain / total;
        }
        factors.push(geometry_factor(&paths, dims.antennas));
    }
    ChannelStats::from_factors(dims, factors)
}

/// Quadrature of `a(xi) a(xi)^H` over the union of `intervals` (half-open
/// `[start, end)` in `xi`), midpoint rule with `grid_points` cells on `[-1, 1)`.
///
/// The result is Hermitian Toeplitz, so only the first column is integrated.
pub fn cluster_covariance(intervals: &[(f64, f64)], antennas: usize, grid_points: usize) -> CMatrix {
    let dx = 2.0 / grid_points as f64;
    let mut lags = alloc::vec![Complex64::new(0.0, 0.0); antennas];
    for j in 0..grid_points {
        let xi = -1.0 + (j as f64 + 0.5) * dx;
        if !intervals.iter().any(|&(a, b)| xi >= a && xi < b) {
            continue;
        }
        for (d, lag) in lags.iter_mut().enumerate() {
            *lag += Complex64::from_polar(dx, PI * d as f64 * xi);
        }
    }
    CMatrix::from_fn(antennas, antennas, |m, n| {
        if m >= n {
            lags[m - n]
        } else {
            lags[n - m].conj()
        }
    })
}

/// COST-2100 style covariances: clusters of width `cluster_width` placed
/// uniformly in `xi`, each user scattering uniformly over a random subset of
/// them, scaled so `tr(C_k) = M g_k`.
pub fn build_cost2100_stats(dims: SystemDims, params: &Cost2100ModelParams, seed: u64) -> Result<ChannelStats> {
    dims.validate()?;
    params.validate()?;
    let mut rng = seeded(seed);
    let w = params.cluster_width;
    let starts: Vec<f64> = (0..params.clusters).map(|_| uniform(&mut rng, -1.0, 1.0 - w)).collect();
    let mut covariances = Vec::with_capacity(dims.users);
    for _ in 0..dims.users {
        let gain = draw_gain(&mut rng, params.gain_db_range);
        let mut pool: Vec<usize> = (0..params.clusters).collect();
        // partial Fisher-Yates
        for i in 0..params.clusters_per_user {
            let j = rng.random_range(i..pool.len());
            pool.swap(i, j);
        }
        let intervals: Vec<(f64, f64)> = pool[..params.clusters_per_user]
            .iter()
            .map(|&c| (starts[c], starts[c] + w))
            .collect();
        let c = cluster_covariance(&intervals, dims.antennas, params.grid_points);
        let lag0 = c[(0, 0)].re;
        ensure!(
            lag0 > 0.0,
            Config,
            "cluster support missed every grid point; increase grid_points"
        );
        covariances.push(c.scale(gain / lag0));
    }
    ChannelStats::new(dims, covariances)
}

/// One channel realization and the matching estimation noise.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSample {
    /// `K x M`; row `k` is `h_k^H`.
    pub h: CMatrix,
    /// `K x T_p`; row `k` is `n_k^T`.
    pub noise: CMatrix,
}

impl ChannelSample {
    pub fn users(&self) -> usize {
        self.h.nrows()
    }

    /// Channel vector `h_k` of user `k` (column form).
    pub fn user_channel(&self, k: usize) -> CVector {
        self.h.row(k).adjoint()
    }

    pub fn is_finite(&self) -> bool {
        self.h
            .iter()
            .chain(self.noise.iter())
            .all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

/// Precomputed `C_k = (U sqrt(L)) (U sqrt(L))^H` factors for repeated draws.
#[derive(Debug, Clone)]
pub struct ChannelSampler {
    factors: Vec<CMatrix>,
    antennas: usize,
    pilots: usize,
}

impl ChannelSampler {
    /// Negative eigenvalues within the PSD tolerance are clamped to zero.
    pub fn new(stats: &ChannelStats) -> Result<Self> {
        let dims = stats.dims();
        if let Some(f) = stats.factors() {
            return Ok(ChannelSampler {
                factors: f.to_vec(),
                antennas: dims.antennas,
                pilots: dims.pilots,
            });
        }
        let mut factors = Vec::with_capacity(dims.users);
        for (k, c) in stats.covariances().iter().enumerate() {
            let (values, vectors) = psd_floor(c)
                .map_err(|min| Error::Data(format!("covariance {k} is not PSD (smallest eigenvalue {min:.3e})")))?;
            let keep: Vec<usize> = (0..values.len()).filter(|&i| values[i] > 0.0).collect();
            let factor = CMatrix::from_fn(dims.antennas, keep.len(), |m, j| {
                vectors[(m, keep[j])] * values[keep[j]].sqrt()
            });
            factors.push(factor);
        }
        Ok(ChannelSampler {
            factors,
            antennas: dims.antennas,
            pilots: dims.pilots,
        })
    }

    pub fn draw(&self, rng: &mut SimRng) -> ChannelSample {
        let users = self.factors.len();
        let mut h = CMatrix::zeros(users, self.antennas);
        for (k, factor) in self.factors.iter().enumerate() {
            let w = CVector::from_fn(factor.ncols(), |_, _| complex_normal(rng));
            let hk = factor * w;
            for m in 0..self.antennas {
                h[(k, m)] = hk[m].conj();
            }
        }
        let noise = CMatrix::from_fn(users, self.pilots, |_, _| complex_normal(rng));
        ChannelSample { h, noise }
    }

    /// Sample `index` of the stream keyed by `seed`.
    pub fn draw_indexed(&self, seed: u64, index: u64) -> ChannelSample {
        self.draw(&mut stream(seed, index))
    }

    pub fn draw_batch(&self, count: usize, seed: u64) -> Vec<ChannelSample> {
        (0..count as u64).map(|i| self.draw_indexed(seed, i)).collect()
    }
}

/// `count` independent samples `h_k ~ CN(0, C_k)`, `n_k ~ CN(0, I)`.
pub fn sample_channels(stats: &ChannelStats, count: usize, seed: u64) -> Result<Vec<ChannelSample>> {
    Ok(ChannelSampler::new(stats)?.draw_batch(count, seed))
}
