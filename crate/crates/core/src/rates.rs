//! Beam-domain covariance operators, Monte-Carlo ergodic rates, and the
//! SE / EE / RE metrics.
//!
//! With diagonal arguments both expectation operators collapse to
//! matrix-vector products with the coupling matrix:
//!
//! * `pi_op`: `[Pi_k(diag x)]_nn = sum_m Omega_k[n,m] x_m` (receive side, length N_k)
//! * `xi_op`: `[Xi_k(diag x)]_mm = sum_n Omega_k[n,m] x_n` (transmit side, length M)
//!
//! Rates are returned in bits/s/Hz.

use num_complex::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::de::{self, FixedPointOptions};
use crate::error::{invalid, Error, Result};
use crate::model::{budget_power, total_power, ChannelStats, CouplingMatrix, PowerAllocation, SystemParams};
use crate::scalar::{nats_to_bits, Scalar};

/// Receive-side operator on a diagonal argument of length M.
pub fn pi_op<T: Scalar>(omega: &CouplingMatrix<T>, x: &[T]) -> Result<Vec<T>> {
    if x.len() != omega.cols() {
        return Err(Error::Shape(format!(
            "pi_op: argument has length {}, expected M = {}",
            x.len(),
            omega.cols()
        )));
    }
    Ok(pi_apply(omega, x))
}

/// Transmit-side operator on a diagonal argument of length N_k.
pub fn xi_op<T: Scalar>(omega: &CouplingMatrix<T>, x: &[T]) -> Result<Vec<T>> {
    if x.len() != omega.rows() {
        return Err(Error::Shape(format!(
            "xi_op: argument has length {}, expected N_k = {}",
            x.len(),
            omega.rows()
        )));
    }
    Ok(xi_apply(omega, x))
}

#[inline]
pub(crate) fn pi_apply<T: Scalar>(omega: &CouplingMatrix<T>, x: &[T]) -> Vec<T> {
    (0..omega.rows())
        .map(|n| omega.row(n).iter().zip(x).map(|(w, v)| *w * *v).sum())
        .collect()
}

#[inline]
pub(crate) fn xi_apply<T: Scalar>(omega: &CouplingMatrix<T>, x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); omega.cols()];
    for (n, xn) in x.iter().enumerate() {
        if *xn == T::zero() {
            continue;
        }
        for (o, w) in out.iter_mut().zip(omega.row(n)) {
            *o += *w * *xn;
        }
    }
    out
}

/// Per-beam power summed over every user except `k`.
pub(crate) fn others_power<T: Scalar>(alloc: &PowerAllocation<T>, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); alloc.beams()];
    for (i, row) in alloc.rows().iter().enumerate() {
        if i == k {
            continue;
        }
        for (o, v) in out.iter_mut().zip(row) {
            *o += *v;
        }
    }
    out
}

pub(crate) fn check_user<T: Scalar>(stats: &ChannelStats<T>, k: usize) -> Result<()> {
    if k >= stats.users() {
        return Err(Error::UserIndex {
            index: k,
            count: stats.users(),
        });
    }
    Ok(())
}

/// Diagonal of the deterministic interference-plus-noise covariance
/// `sigma2 I + sum_{i != k} Pi_k(Lambda_i)` seen by user `k`.
pub fn interference_floor<T: Scalar>(
    stats: &ChannelStats<T>,
    alloc: &PowerAllocation<T>,
    k: usize,
    sigma2: T,
) -> Result<Vec<T>> {
    check_user(stats, k)?;
    alloc.check_shape(stats)?;
    Ok(floor_unchecked(stats.omega(k), alloc, k, sigma2))
}

#[inline]
pub(crate) fn floor_unchecked<T: Scalar>(
    omega: &CouplingMatrix<T>,
    alloc: &PowerAllocation<T>,
    k: usize,
    sigma2: T,
) -> Vec<T> {
    let others = others_power(alloc, k);
    pi_apply(omega, &others).into_iter().map(|v| v + sigma2).collect()
}

/// SplitMix64 finalizer, used to derive independent per-sample seeds.
pub fn mix_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One beam-domain channel realization: entry (n, m) is CN(0, Omega[n, m]).
fn sample_channel<T: Scalar>(omega: &CouplingMatrix<T>, rng: &mut ChaCha8Rng) -> Vec<Complex<T>> {
    let half = T::lit(0.5);
    omega
        .as_slice()
        .iter()
        .map(|w| {
            let s = (*w * half).sqrt();
            let re = T::sample_normal(rng);
            let im = T::sample_normal(rng);
            Complex::new(s * re, s * im)
        })
        .collect()
}

/// `diag(base) + G diag(p) G^H`, row-major N x N.
fn gram<T: Scalar>(g: &[Complex<T>], n: usize, m: usize, base: &[T], p: &[T]) -> Vec<Complex<T>> {
    let mut a = vec![Complex::new(T::zero(), T::zero()); n * n];
    for r in 0..n {
        for c in r..n {
            let mut acc = Complex::new(T::zero(), T::zero());
            for b in 0..m {
                if p[b] != T::zero() {
                    acc += g[r * m + b] * g[c * m + b].conj() * p[b];
                }
            }
            a[r * n + c] = acc;
            a[c * n + r] = acc.conj();
        }
        a[r * n + r] = Complex::new(a[r * n + r].re + base[r], T::zero());
    }
    a
}

/// Natural-log determinant of a Hermitian positive-definite matrix via Cholesky.
pub(crate) fn hpd_log_det<T: Scalar>(a: &[Complex<T>], n: usize) -> Result<T> {
    let mut l = vec![Complex::new(T::zero(), T::zero()); n * n];
    let mut logdet = T::zero();
    for j in 0..n {
        let mut d = a[j * n + j].re;
        for p in 0..j {
            d -= l[j * n + p].norm_sqr();
        }
        if !(d > T::zero()) {
            return Err(Error::NonFinite("Cholesky pivot"));
        }
        let djj = d.sqrt();
        l[j * n + j] = Complex::new(djj, T::zero());
        logdet += d.ln();
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for p in 0..j {
                s -= l[i * n + p] * l[j * n + p].conj();
            }
            l[i * n + j] = s / djj;
        }
    }
    Ok(logdet)
}

fn mc_average<T, F>(n_samples: usize, seed: u64, k: usize, per_sample: F) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut ChaCha8Rng) -> Result<T> + Sync,
{
    if n_samples < 1 {
        return Err(invalid("n_samples", "at least one Monte-Carlo sample required"));
    }
    // Collect in sample order so the sum does not depend on thread scheduling.
    let values: Vec<Result<T>> = (0..n_samples)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, k as u64, s as u64));
            per_sample(&mut rng)
        })
        .collect();
    let mut total = T::zero();
    for v in values {
        total += v?;
    }
    Ok(nats_to_bits(total / T::from_usize_lossy(n_samples)))
}

/// Ergodic rate of user `k` with the true (random) interference covariance,
/// averaged over `n_samples` seeded channel draws.
pub fn mc_rate_exact<T: Scalar>(
    stats: &ChannelStats<T>,
    alloc: &PowerAllocation<T>,
    k: usize,
    sigma2: T,
    n_samples: usize,
    seed: u64,
) -> Result<T> {
    check_user(stats, k)?;
    alloc.check_shape(stats)?;
    if n_samples < 1 {
        return Err(invalid("n_samples", "at least one Monte-Carlo sample required"));
    }
    let omega = stats.omega(k);
    if alloc.is_zero(k) || omega.is_zero() {
        return Ok(T::zero());
    }
    let (n, m) = (omega.rows(), omega.cols());
    let interf = others_power(alloc, k);
    let with_signal: Vec<T> = interf.iter().zip(alloc.user(k)).map(|(a, b)| *a + *b).collect();
    let noise = vec![sigma2; n];
    mc_average(n_samples, seed, k, |rng| {
        let g = sample_channel(omega, rng);
        let num = hpd_log_det(&gram(&g, n, m, &noise, &with_signal), n)?;
        let den = hpd_log_det(&gram(&g, n, m, &noise, &interf), n)?;
        Ok(num - den)
    })
}

/// Ergodic rate of user `k` with the interference covariance replaced by its
/// deterministic diagonal mean (the rate the optimizer targets).
pub fn mc_rate_approx<T: Scalar>(
    stats: &ChannelStats<T>,
    alloc: &PowerAllocation<T>,
    k: usize,
    sigma2: T,
    n_samples: usize,
    seed: u64,
) -> Result<T> {
    check_user(stats, k)?;
    alloc.check_shape(stats)?;
    if n_samples < 1 {
        return Err(invalid("n_samples", "at least one Monte-Carlo sample required"));
    }
    let omega = stats.omega(k);
    if alloc.is_zero(k) || omega.is_zero() {
        return Ok(T::zero());
    }
    let (n, m) = (omega.rows(), omega.cols());
    let floor = floor_unchecked(omega, alloc, k, sigma2);
    let floor_logdet: T = floor.iter().map(|v| v.ln()).sum();
    let own = alloc.user(k);
    mc_average(n_samples, seed, k, |rng| {
        let g = sample_channel(omega, rng);
        Ok(hpd_log_det(&gram(&g, n, m, &floor, own), n)? - floor_logdet)
    })
}

/// Which per-user rate feeds the metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateModel {
    /// Monte-Carlo with the random interference covariance.
    MonteCarloExact,
    /// Monte-Carlo with the deterministic interference floor.
    MonteCarloApprox,
    /// Deterministic equivalent (no sampling).
    DeterministicEquivalent,
}

/// Spectral, energy and resource efficiency of one allocation.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport<T> {
    /// bits/s/Hz
    pub se: T,
    /// bits/Joule
    pub ee: T,
    /// bits/Joule/Hz
    pub re: T,
    /// bits/s/Hz per user
    pub per_user_rates: Vec<T>,
    /// consumed power, watts
    pub p_sum: T,
    /// power-budget normalizer, watts
    pub p_tot: T,
}

impl<T: Scalar> MetricsReport<T> {
    /// Assembles SE, EE and RE from per-user rates in bits/s/Hz.
    pub fn from_rates(per_user_rates: Vec<T>, alloc: &PowerAllocation<T>, params: &SystemParams<T>) -> Self {
        let se: T = per_user_rates.iter().copied().sum();
        let p_sum = total_power(alloc, params);
        let p_tot = budget_power(params);
        let ee = params.bandwidth * se / p_sum;
        let re = ee / params.bandwidth + params.beta * se / p_tot;
        Self {
            se,
            ee,
            re,
            per_user_rates,
            p_sum,
            p_tot,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.se.is_finite() && self.ee.is_finite() && self.re.is_finite()
    }
}

/// Computes the full metrics report under the chosen rate model.
pub fn metrics<T: Scalar>(
    stats: &ChannelStats<T>,
    alloc: &PowerAllocation<T>,
    params: &SystemParams<T>,
    model: RateModel,
    n_samples: usize,
    seed: u64,
) -> Result<MetricsReport<T>> {
    alloc.check_shape(stats)?;
    let k_count = stats.users();
    let rates = match model {
        RateModel::MonteCarloExact => (0..k_count)
            .map(|k| mc_rate_exact(stats, alloc, k, params.sigma2, n_samples, seed))
            .collect::<Result<Vec<_>>>()?,
        RateModel::MonteCarloApprox => (0..k_count)
            .map(|k| mc_rate_approx(stats, alloc, k, params.sigma2, n_samples, seed))
            .collect::<Result<Vec<_>>>()?,
        RateModel::DeterministicEquivalent => de::de_rates(stats, alloc, params.sigma2, &FixedPointOptions::default())?,
    };
    Ok(MetricsReport::from_rates(rates, alloc, params))
}
