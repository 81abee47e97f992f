//! Deterministic-equivalent (DE) evaluation of the per-user ergodic rate.
//!
//! For user `k` with own powers `lambda` and interference floor `kbar`
//! (all diagonal), the auxiliaries solve the coupled fixed point
//!
//! ```text
//! phi_m       = 1 + lambda_m * sum_n Omega[n,m] / (phi_tilde_n * kbar_n)
//! phi_tilde_n = 1 + (sum_m Omega[n,m] * lambda_m / phi_m) / kbar_n
//! ```
//!
//! after which `gamma = Xi(1 / (phi_tilde * kbar))`, `gamma_tilde = Pi(lambda / phi)` and
//!
//! ```text
//! g_bar = sum_m ln(1 + gamma_m lambda_m) + sum_n ln(gamma_tilde_n + kbar_n)
//!         - sum_n (1 - 1 / phi_tilde_n)
//! rate  = (g_bar - sum_n ln kbar_n) / ln 2
//! ```
//!
//! All arithmetic is in nats; conversion to bits happens on return.

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::model::{budget_power, total_power, ChannelStats, PowerAllocation, SystemParams};
use crate::rates::{check_user, floor_unchecked, pi_apply, xi_apply};
use crate::scalar::{nats_to_bits, Scalar};

/// Tolerance and iteration cap of the fixed-point iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointOptions<T> {
    /// Stop once the max-abs change of `phi_tilde` drops to this value.
    pub eps: T,
    pub max_iter: usize,
}

impl<T: Scalar> Default for FixedPointOptions<T> {
    fn default() -> Self {
        Self {
            eps: T::lit(1e-8),
            max_iter: 1000,
        }
    }
}

/// Converged DE auxiliaries of one user.
#[derive(Debug, Clone, PartialEq)]
pub struct DeState<T> {
    /// diag of Phi_tilde (length N_k), entries >= 1
    pub phi_tilde: Vec<T>,
    /// diag of Phi (length M), entries >= 1
    pub phi: Vec<T>,
    /// diag of Gamma (length M)
    pub gamma: Vec<T>,
    /// diag of Gamma_tilde (length N_k)
    pub gamma_tilde: Vec<T>,
    pub converged: bool,
    pub iterations: usize,
}

/// Fixed-point failure; keeps the last iterate for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct NonConvergence<T> {
    pub user: usize,
    pub last_change: T,
    pub state: DeState<T>,
}

impl<T: Scalar> From<NonConvergence<T>> for Error {
    fn from(e: NonConvergence<T>) -> Self {
        Error::FixedPointDiverged {
            user: e.user,
            iterations: e.state.iterations,
            last_change: e.last_change.as_f64(),
        }
    }
}

fn phi_from_phi_tilde<T: Scalar>(omega_w: &[T], lambda: &[T]) -> Vec<T> {
    omega_w.iter().zip(lambda).map(|(g, l)| T::one() + *g * *l).collect()
}

fn inv_weights<T: Scalar>(phi_tilde: &[T], kbar: &[T]) -> Vec<T> {
    phi_tilde.iter().zip(kbar).map(|(p, k)| T::one() / (*p * *k)).collect()
}

fn ratio<T: Scalar>(lambda: &[T], phi: &[T]) -> Vec<T> {
    lambda.iter().zip(phi).map(|(l, p)| *l / *p).collect()
}

/// Runs the fixed point for user `k` starting from `phi_tilde = 1`.
pub fn de_fixed_point<T: Scalar>(
    stats: &ChannelStats<T>,
    alloc: &PowerAllocation<T>,
    k: usize,
    sigma2: T,
    opts: &FixedPointOptions<T>,
) -> Result<DeState<T>, FixedPointFailure<T>> {
    let n = stats.omega(k.min(stats.users().saturating_sub(1))).rows();
    de_fixed_point_from(stats, alloc, k, sigma2, opts, &vec![T::one(); n])
}

/// Either a bad input or a non-converged iteration.
#[derive(Debug, Clone, PartialEq)]
pub enum FixedPointFailure<T> {
    Input(Error),
    Diverged(NonConvergence<T>),
}

impl<T: Scalar> From<FixedPointFailure<T>> for Error {
    fn from(e: FixedPointFailure<T>) -> Self {
        match e {
            FixedPointFailure::Input(e) => e,
            FixedPointFailure::Diverged(nc) => nc.into(),
        }
    }
}

impl<T> From<Error> for FixedPointFailure<T> {
    fn from(e: Error) -> Self {
        FixedPointFailure::Input(e)
    }
}

/// Runs the fixed point for user `k` from an explicit `phi_tilde` start.
pub fn de_fixed_point_from<T: Scalar>(
    stats: &ChannelStats<T>,
    alloc: &PowerAllocation<T>,
    k: usize,
    sigma2: T,
    opts: &FixedPointOptions<T>,
    init_phi_tilde: &[T],
) -> Result<DeState<T>, FixedPointFailure<T>> {
    check_user(stats, k)?;
    alloc.check_shape(stats)?;
    if !(opts.eps > T::zero()) {
        return Err(invalid("eps1", "fixed-point tolerance must be > 0").into());
    }
    let omega = stats.omega(k);
    if init_phi_tilde.len() != omega.rows() {
        return Err(Error::Shape("initial phi_tilde must have length N_k".into()).into());
    }
    let kbar = floor_unchecked(omega, alloc, k, sigma2);
    let lambda = alloc.user(k);

    let (rows, cols) = (omega.rows(), omega.cols());
    let mut phi_tilde = init_phi_tilde.to_vec();
    let mut phi = vec![T::one(); cols];
    let mut w = vec![T::zero(); rows];
    let mut change = T::infinity();
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        for ((wn, p), kb) in w.iter_mut().zip(&phi_tilde).zip(&kbar) {
            *wn = T::one() / (*p * *kb);
        }
        phi.iter_mut().for_each(|v| *v = T::zero());
        for (n, wn) in w.iter().enumerate() {
            for (o, om) in phi.iter_mut().zip(omega.row(n)) {
                *o += *om * *wn;
            }
        }
        // phi now holds lambda / phi for the receive-side update
        for (v, l) in phi.iter_mut().zip(lambda) {
            *v = *l / (T::one() + *v * *l);
        }
        change = T::zero();
        for (n, (pt, kb)) in phi_tilde.iter_mut().zip(&kbar).enumerate() {
            let s: T = omega.row(n).iter().zip(&phi).map(|(om, r)| *om * *r).sum();
            let next = T::one() + s / *kb;
            let d = (next - *pt).abs();
            if !(d <= change) {
                change = d;
            }
            *pt = next;
        }
        if !change.is_finite() || change <= opts.eps {
            break;
        }
    }
    let converged = change <= opts.eps;
    // Phi consistent with the final Phi_tilde.
    let gamma = xi_apply(omega, &inv_weights(&phi_tilde, &kbar));
    let phi = phi_from_phi_tilde(&gamma, lambda);
    let gamma_tilde = pi_apply(omega, &ratio(lambda, &phi));
    let state = DeState {
        phi_tilde,
        phi,
        gamma,
        gamma_tilde,
        converged,
        iterations,
    };
    if converged {
        Ok(state)
    } else {
        Err(FixedPointFailure::Diverged(NonConvergence {
            user: k,
            last_change: change,
            state,
        }))
    }
}

/// `f_k = sum_n ln kbar_n` in nats.
pub fn interference_log_det<T: Scalar>(stats: &ChannelStats<T>, alloc: &PowerAllocation<T>, k: usize, sigma2: T) -> T {
    floor_unchecked(stats.omega(k), alloc, k, sigma2)
        .into_iter()
        .map(|v| v.ln())
        .sum()
}

/// Splits `g_bar` into the own-signal part `sum ln(1+gamma lambda) +
/// sum ln(1 + gamma_tilde/kbar) - sum(1 - 1/phi_tilde)` and `f_k`; their sum is
/// `g_bar`. Keeping them apart makes the zero-power rate exactly zero.
fn split_g<T: Scalar>(state: &DeState<T>, lambda: &[T], kbar: &[T]) -> (T, T) {
    let own: T = state
        .gamma
        .iter()
        .zip(lambda)
        .map(|(g, l)| (*g * *l).ln_1p())
        .sum::<T>()
        + state
            .gamma_tilde
            .iter()
            .zip(kbar)
            .map(|(gt, kb)| (*gt / *kb).ln_1p())
            .sum::<T>()
        - state.phi_tilde.iter().map(|p| T::one() - T::one() / *p).sum::<T>();
    let f: T = kbar.iter().map(|v| v.ln()).sum();
    (own, f)
}

/// DE of `E[log det(Kbar + G Lambda_k G^H)]` in nats.
pub fn de_g<T: Scalar>(
    state: &DeState<T>,
    alloc: &PowerAllocation<T>,
    k: usize,
    stats: &ChannelStats<T>,
    sigma2: T,
) -> Result<T> {
    check_user(stats, k)?;
    if !state.converged {
        return Err(Error::NotConverged(k));
    }
    let kbar = floor_unchecked(stats.omega(k), alloc, k, sigma2);
    let (own, f) = split_g(state, alloc.user(k), &kbar);
    Ok(own + f)
}

/// DE rate of user `k` in bits/s/Hz.
pub fn de_rate<T: Scalar>(
    state: &DeState<T>,
    alloc: &PowerAllocation<T>,
    k: usize,
    stats: &ChannelStats<T>,
    sigma2: T,
) -> Result<T> {
    check_user(stats, k)?;
    if !state.converged {
        return Err(Error::NotConverged(k));
    }
    if alloc.is_zero(k) {
        return Ok(T::zero());
    }
    let kbar = floor_unchecked(stats.omega(k), alloc, k, sigma2);
    let (own, _) = split_g(state, alloc.user(k), &kbar);
    Ok(nats_to_bits(own))
}

/// DE states of every user, computed in parallel.
pub fn de_states<T: Scalar>(
    stats: &ChannelStats<T>,
    alloc: &PowerAllocation<T>,
    sigma2: T,
    opts: &FixedPointOptions<T>,
) -> Result<Vec<DeState<T>>> {
    alloc.check_shape(stats)?;
    (0..stats.users())
        .into_par_iter()
        .map(|k| de_fixed_point(stats, alloc, k, sigma2, opts).map_err(Error::from))
        .collect()
}

/// DE rates of every user in bits/s/Hz.
pub fn de_rates<T: Scalar>(
    stats: &ChannelStats<T>,
    alloc: &PowerAllocation<T>,
    sigma2: T,
    opts: &FixedPointOptions<T>,
) -> Result<Vec<T>> {
    let states = de_states(stats, alloc, sigma2, opts)?;
    states
        .iter()
        .enumerate()
        .map(|(k, s)| de_rate(s, alloc, k, stats, sigma2))
        .collect()
}

/// DE sum rate in bits/s/Hz.
pub fn de_sum_rate<T: Scalar>(
    stats: &ChannelStats<T>,
    alloc: &PowerAllocation<T>,
    sigma2: T,
    opts: &FixedPointOptions<T>,
) -> Result<T> {
    Ok(de_rates(stats, alloc, sigma2, opts)?.into_iter().sum())
}

/// `(1/P_sum + beta/P_tot) * (DE sum rate)`, in bits/J/Hz.
pub fn de_re_value<T: Scalar>(
    stats: &ChannelStats<T>,
    alloc: &PowerAllocation<T>,
    params: &SystemParams<T>,
    opts: &FixedPointOptions<T>,
) -> Result<T> {
    let se = de_sum_rate(stats, alloc, params.sigma2, opts)?;
    let re = (T::one() / total_power(alloc, params) + params.beta / budget_power(params)) * se;
    if re.is_finite() {
        Ok(re)
    } else {
        Err(Error::NonFinite("DE resource efficiency"))
    }
}

/// `1/(xi P + M Pc + Ps) + beta/P_tot`.
pub fn re_weight<T: Scalar>(transmit: T, params: &SystemParams<T>) -> T {
    T::one() / params.consumed_power(transmit) + params.beta / budget_power(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{synth_coupling, CouplingMatrix, SynthSpec};
    use crate::rates::{interference_floor, xi_op};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const GOLDEN: f64 = 1.618_033_988_749_895;

    fn scalar_case() -> (ChannelStats<f64>, PowerAllocation<f64>) {
        (
            ChannelStats::new(vec![CouplingMatrix::from_rows(&[vec![1.0]]).unwrap()]).unwrap(),
            PowerAllocation::new(vec![vec![1.0]]).unwrap(),
        )
    }

    fn tight() -> FixedPointOptions<f64> {
        FixedPointOptions {
            eps: 1e-13,
            max_iter: 1000,
        }
    }

    #[test]
    fn zero_own_power_converges_in_one_step() {
        let omega = CouplingMatrix::from_rows(&[vec![0.5, 1.5], vec![2.0, 0.0]]).unwrap();
        let other = CouplingMatrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let stats = ChannelStats::new(vec![omega.clone(), other]).unwrap();
        let alloc = PowerAllocation::new(vec![vec![0.0, 0.0], vec![0.4, 0.2]]).unwrap();
        let s = de_fixed_point(&stats, &alloc, 0, 0.5, &FixedPointOptions::default()).unwrap();
        assert_eq!(s.iterations, 1);
        assert_eq!(s.phi_tilde, vec![1.0, 1.0]);
        assert_eq!(s.phi, vec![1.0, 1.0]);
        assert_eq!(s.gamma_tilde, vec![0.0, 0.0]);
        let kbar = interference_floor(&stats, &alloc, 0, 0.5).unwrap();
        let inv: Vec<f64> = kbar.iter().map(|v| 1.0 / v).collect();
        assert_eq!(s.gamma, xi_op(&omega, &inv).unwrap());
        assert_eq!(de_rate(&s, &alloc, 0, &stats, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn scalar_fixed_point_is_golden_ratio() {
        let (stats, alloc) = scalar_case();
        let s = de_fixed_point(&stats, &alloc, 0, 1.0, &tight()).unwrap();
        assert!((s.phi[0] - GOLDEN).abs() < 1e-12);
        assert!((s.phi_tilde[0] - GOLDEN).abs() < 1e-12);
        assert!((s.gamma[0] - 1.0 / GOLDEN).abs() < 1e-12);
        assert!((s.gamma_tilde[0] - 1.0 / GOLDEN).abs() < 1e-12);
    }

    #[test]
    fn scalar_rate_closed_form() {
        let (stats, alloc) = scalar_case();
        let s = de_fixed_point(&stats, &alloc, 0, 1.0, &tight()).unwrap();
        let expected = (2.0 * GOLDEN.ln() - (1.0 - 1.0 / GOLDEN)) / std::f64::consts::LN_2;
        let r = de_rate(&s, &alloc, 0, &stats, 1.0).unwrap();
        assert!((r - expected).abs() < 1e-12, "{r} vs {expected}");
        assert!((r - 0.837_42).abs() < 1e-4);
    }

    #[test]
    fn scalar_re_value() {
        let (stats, alloc) = scalar_case();
        let params = SystemParams {
            m: 1,
            n: vec![1],
            bandwidth: 1.0,
            sigma2: 1.0,
            xi: 5.0,
            pc: 1.0,
            ps: 10.0,
            pmax: 1.0,
            beta: 0.0,
        };
        let rate = (2.0 * GOLDEN.ln() - (1.0 - 1.0 / GOLDEN)) / std::f64::consts::LN_2;
        let re = de_re_value(&stats, &alloc, &params, &tight()).unwrap();
        assert!((re - rate / 16.0).abs() < 1e-12);
        let zero = PowerAllocation::zeros(1, 1);
        assert_eq!(de_re_value(&stats, &zero, &params, &tight()).unwrap(), 0.0);
    }

    #[test]
    fn non_convergence_is_surfaced() {
        let (stats, alloc) = scalar_case();
        let opts = FixedPointOptions {
            eps: 1e-14,
            max_iter: 3,
        };
        match de_fixed_point(&stats, &alloc, 0, 1.0, &opts) {
            Err(FixedPointFailure::Diverged(nc)) => {
                assert_eq!(nc.state.iterations, 3);
                assert!(!nc.state.converged);
                assert!(de_rate(&nc.state, &alloc, 0, &stats, 1.0).is_err());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
        let bad = FixedPointOptions { eps: 0.0, max_iter: 3 };
        assert!(matches!(
            de_fixed_point(&stats, &alloc, 0, 1.0, &bad),
            Err(FixedPointFailure::Input(_))
        ));
    }

    fn random_instance(
        seed: u64,
        m: usize,
        k: usize,
        n: usize,
    ) -> (SystemParams<f64>, ChannelStats<f64>, PowerAllocation<f64>) {
        let params = SystemParams {
            pmax: 1.0,
            ..SystemParams::<f64>::reference(m, vec![n; k])
        };
        let stats = synth_coupling(&params, &SynthSpec::default(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let rows: Vec<Vec<f64>> = (0..k).map(|_| (0..m).map(|_| rng.random::<f64>()).collect()).collect();
        let total: f64 = rows.iter().flatten().sum();
        let alloc = PowerAllocation::new(rows).unwrap().scaled(params.pmax / total);
        (params, stats, alloc)
    }

    #[test]
    fn fixed_point_residual_is_small() {
        for seed in 0..10 {
            let (params, stats, alloc) = random_instance(seed, 16, 3, 2);
            let opts = FixedPointOptions::default();
            for k in 0..3 {
                let s = de_fixed_point(&stats, &alloc, k, params.sigma2, &opts).unwrap();
                assert!(s.phi.iter().chain(&s.phi_tilde).all(|v| *v >= 1.0));
                assert!(s.gamma.iter().chain(&s.gamma_tilde).all(|v| *v >= 0.0));
                // One more sweep from the converged point.
                let again = de_fixed_point_from(
                    &stats,
                    &alloc,
                    k,
                    params.sigma2,
                    &FixedPointOptions {
                        eps: 1e300,
                        max_iter: 1,
                    },
                    &s.phi_tilde,
                )
                .unwrap();
                for (a, b) in again.phi_tilde.iter().zip(&s.phi_tilde) {
                    assert!((a - b).abs() <= opts.eps, "{a} {b}");
                }
            }
        }
    }

    #[test]
    fn fixed_point_is_independent_of_start() {
        let (params, stats, alloc) = random_instance(3, 16, 3, 2);
        let opts = FixedPointOptions {
            eps: 1e-12,
            max_iter: 5000,
        };
        for k in 0..3 {
            let a = de_fixed_point(&stats, &alloc, k, params.sigma2, &opts).unwrap();
            let b = de_fixed_point_from(&stats, &alloc, k, params.sigma2, &opts, &[50.0, 7.0]).unwrap();
            for (x, y) in a.phi_tilde.iter().zip(&b.phi_tilde) {
                assert!((x - y).abs() < 1e-9 * x.max(1.0));
            }
        }
    }

    #[test]
    fn g_bar_is_concave_on_segments_and_rate_nonnegative() {
        let opts = FixedPointOptions {
            eps: 1e-12,
            max_iter: 5000,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..100 {
            let (params, stats, a) = random_instance(trial, 8, 2, 2);
            let (_, _, b) = random_instance(trial + 1000, 8, 2, 2);
            let t: f64 = rng.random();
            let mid = a.lerp(&b, t);
            for k in 0..2 {
                let g = |x: &PowerAllocation<f64>| {
                    let s = de_fixed_point(&stats, x, k, params.sigma2, &opts).unwrap();
                    de_g(&s, x, k, &stats, params.sigma2).unwrap()
                };
                let lhs = g(&mid);
                let rhs = (1.0 - t) * g(&a) + t * g(&b);
                assert!(lhs >= rhs - 1e-9 * rhs.abs(), "trial {trial}: {lhs} < {rhs}");
            }
            for r in de_rates(&stats, &mid, params.sigma2, &opts).unwrap() {
                assert!(r >= 0.0);
            }
        }
    }

    #[test]
    fn uniform_full_budget_re_is_positive() {
        for seed in 0..5 {
            let (params, stats, _) = random_instance(seed, 16, 4, 2);
            let u = PowerAllocation::uniform(4, 16, params.pmax);
            let re = de_re_value(&stats, &u, &params, &FixedPointOptions::default()).unwrap();
            assert!(re.is_finite() && re > 0.0);
        }
    }

    #[test]
    fn works_in_single_precision() {
        let stats = ChannelStats::new(vec![CouplingMatrix::from_rows(&[vec![1.0f32]]).unwrap()]).unwrap();
        let alloc = PowerAllocation::new(vec![vec![1.0f32]]).unwrap();
        let opts = FixedPointOptions {
            eps: 1e-6f32,
            max_iter: 200,
        };
        let s = de_fixed_point(&stats, &alloc, 0, 1.0, &opts).unwrap();
        assert!((s.phi[0] - GOLDEN as f32).abs() < 1e-5);
    }
}
