//! Two-layer solver for one MM surrogate: an outer derivative-assisted search
//! over the total transmit power `P_T` wrapped around an inner generalized
//! multi-user water-filling at fixed `P_T`.
//!
//! The inner problem, with the DE auxiliaries `gamma`, `gamma_tilde` and the
//! linearization slopes `d` frozen at the MM anchor, is the concave program
//!
//! ```text
//! max  sum_k sum_m ln(1 + gamma_km x_km)
//!    + sum_k sum_n ln(gamma_tilde_kn + sigma2 + sum_{i != k} sum_m Omega_k[n,m] x_im)
//!    - sum_k sum_m d_km x_km
//! s.t. sum x = P_T,  x >= 0
//! ```
//!
//! whose KKT conditions read `nu_km(x_km) = 0` on active beams and
//! `nu_km(0) <= 0` on idle ones, `nu` being the marginal utility minus the
//! water level `mu`. All quantities are in nats; `mu` is in nats/W.

use crate::config::SolverConfig;
use crate::error::{invalid, Error, Result};
use crate::model::{ChannelStats, PowerAllocation, SystemParams};
use crate::rates::{check_user, floor_unchecked};
use crate::scalar::{nats_to_bits, Scalar};

/// The inner concave problem of one MM step.
#[derive(Debug, Clone)]
pub struct SurrogateProblem<'a, T> {
    stats: &'a ChannelStats<T>,
    sigma2: T,
    gamma: Vec<Vec<T>>,
    gamma_tilde: Vec<Vec<T>>,
    d: Vec<Vec<T>>,
    offset: T,
    active: Vec<Vec<bool>>,
}

/// Output of [`SurrogateProblem::waterfill`].
#[derive(Debug, Clone, PartialEq)]
pub struct WaterfillResult<T> {
    pub alloc: PowerAllocation<T>,
    /// Optimal water level, i.e. the slope of the surrogate SE in `P_T` (nats/W).
    pub mu_star: T,
    /// Surrogate SE at `P_T`, bits/s/Hz.
    pub se_value: T,
    /// Surrogate SE at `P_T`, nats/s/Hz.
    pub se_nats: T,
    /// Largest violation of the per-beam stationarity / idle-beam conditions.
    pub kkt_residual: T,
    /// `|sum(lambda) - P_T|`.
    pub power_gap: T,
    pub bisect_iters: usize,
}

impl<T: Scalar> WaterfillResult<T> {
    pub fn mu_star_bits(&self) -> T {
        nats_to_bits(self.mu_star)
    }
}

/// Scalar root problem for one beam with every other power frozen.
struct Beam<'b, T> {
    gamma: T,
    d: T,
    /// `(r, base)` pairs: cross gain and the denominator without this beam.
    cross: &'b [(T, T)],
}

enum Root<T> {
    Finite(T),
    Unbounded,
}

impl<T: Scalar> Beam<'_, T> {
    #[inline]
    fn nu(&self, x: T, mu: T) -> T {
        let mut v = self.gamma / (T::one() + self.gamma * x) - self.d - mu;
        for &(r, base) in self.cross {
            v += r / (base + r * x);
        }
        v
    }

    #[inline]
    fn nu_prime(&self, x: T) -> T {
        let s = self.gamma / (T::one() + self.gamma * x);
        let mut v = -s * s;
        for &(r, base) in self.cross {
            let q = r / (base + r * x);
            v -= q * q;
        }
        v
    }

    /// Root of `nu(., mu)` on `[0, inf)`, clamped at zero. `nu` is convex and
    /// strictly decreasing, so Newton from the left of the root is monotone.
    fn root(&self, mu: T, start: T, cfg: &SolverConfig<T>) -> Root<T> {
        let at_zero = self.nu(T::zero(), mu);
        if at_zero <= T::zero() {
            return Root::Finite(T::zero());
        }
        // Every term but -d - mu vanishes as x grows.
        if -self.d - mu >= T::zero() {
            return Root::Unbounded;
        }
        let mut x = start.max(T::zero());
        if !x.is_finite() {
            x = T::zero();
        }
        for _ in 0..cfg.max_newton_iter {
            let f = self.nu(x, mu);
            let df = self.nu_prime(x);
            if f == T::zero() || df == T::zero() {
                return Root::Finite(x);
            }
            let mut next = x - f / df;
            if next < T::zero() {
                next = T::zero();
            }
            let step = (next - x).abs();
            x = next;
            if step <= cfg.eps4 * x.max(T::one()) * T::lit(1e-3) {
                return Root::Finite(x);
            }
        }
        Root::Finite(self.bisect_root(mu, x))
    }

    /// Fallback when Newton stalls: plain bisection on the monotone `nu`.
    fn bisect_root(&self, mu: T, hint: T) -> T {
        let mut lo = T::zero();
        let mut hi = hint.max(T::min_positive_value());
        let two = T::lit(2.0);
        while self.nu(hi, mu) > T::zero() {
            lo = hi;
            hi *= two;
            if !hi.is_finite() {
                return lo;
            }
        }
        for _ in 0..300 {
            let mid = (lo + hi) / two;
            if mid <= lo || mid >= hi {
                break;
            }
            if self.nu(mid, mu) > T::zero() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (lo + hi) / two
    }
}

impl<'a, T: Scalar> SurrogateProblem<'a, T> {
    /// `gamma`, `d`: K vectors of length M; `gamma_tilde`: K vectors of length N_k.
    pub fn new(
        stats: &'a ChannelStats<T>,
        sigma2: T,
        gamma: Vec<Vec<T>>,
        gamma_tilde: Vec<Vec<T>>,
        d: Vec<Vec<T>>,
    ) -> Result<Self> {
        let (kc, mc) = (stats.users(), stats.beams());
        let n = stats.receive_antennas();
        if gamma.len() != kc || d.len() != kc || gamma_tilde.len() != kc {
            return Err(Error::Shape("surrogate coefficients need one entry per user".into()));
        }
        for k in 0..kc {
            if gamma[k].len() != mc || d[k].len() != mc || gamma_tilde[k].len() != n[k] {
                return Err(Error::Shape(format!(
                    "surrogate coefficients of user {k} have wrong length"
                )));
            }
        }
        let bad = |v: &T| !(v.is_finite() && *v >= T::zero());
        if gamma.iter().chain(&gamma_tilde).chain(&d).flatten().any(bad) {
            return Err(invalid("gamma/d", "coefficients must be finite and >= 0"));
        }
        if !(sigma2 > T::zero()) {
            return Err(invalid("sigma2", "must be > 0"));
        }
        let active = (0..kc)
            .map(|k| {
                (0..mc)
                    .map(|m| {
                        gamma[k][m] > T::zero()
                            || (0..kc).any(|kp| kp != k && (0..n[kp]).any(|r| stats.omega(kp).get(r, m) > T::zero()))
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            stats,
            sigma2,
            gamma,
            gamma_tilde,
            d,
            offset: T::zero(),
            active,
        })
    }

    /// Adds a constant to the objective (used to make it tight at the MM anchor).
    pub fn with_offset(mut self, offset: T) -> Self {
        self.offset = offset;
        self
    }

    pub fn offset(&self) -> T {
        self.offset
    }

    pub fn stats(&self) -> &ChannelStats<T> {
        self.stats
    }

    pub fn sigma2(&self) -> T {
        self.sigma2
    }

    pub fn gamma(&self) -> &[Vec<T>] {
        &self.gamma
    }

    pub fn gamma_tilde(&self) -> &[Vec<T>] {
        &self.gamma_tilde
    }

    pub fn slopes(&self) -> &[Vec<T>] {
        &self.d
    }

    /// Whether beam `(k, m)` can carry useful power at all.
    pub fn is_active(&self, k: usize, m: usize) -> bool {
        self.active[k][m]
    }

    fn any_active(&self) -> bool {
        self.active.iter().flatten().any(|a| *a)
    }

    /// `gamma_tilde_kn + sigma2 + interference_kn(x)` for every user and antenna.
    pub fn denominators(&self, alloc: &PowerAllocation<T>) -> Vec<Vec<T>> {
        (0..self.stats.users())
            .map(|k| {
                floor_unchecked(self.stats.omega(k), alloc, k, self.sigma2)
                    .into_iter()
                    .zip(&self.gamma_tilde[k])
                    .map(|(f, gt)| f + *gt)
                    .collect()
            })
            .collect()
    }

    /// Objective value in nats (including the offset).
    pub fn objective(&self, alloc: &PowerAllocation<T>) -> T {
        let mut v = self.offset;
        for k in 0..self.stats.users() {
            for (m, x) in alloc.user(k).iter().enumerate() {
                v += (self.gamma[k][m] * *x).ln_1p() - self.d[k][m] * *x;
            }
        }
        // ln(den) split as ln(sigma2) + ln(den / sigma2); the constant part is
        // left to the offset.
        for (k, den) in self.denominators(alloc).iter().enumerate() {
            let _ = k;
            for v_den in den {
                v += ((*v_den - self.sigma2) / self.sigma2).ln_1p();
            }
        }
        v
    }

    /// Constant dropped by [`Self::objective`]: `sum_k N_k ln sigma2`.
    pub fn dropped_constant(&self) -> T {
        let total: usize = self.stats.receive_antennas().iter().sum();
        T::from_usize_lossy(total) * self.sigma2.ln()
    }

    /// Partial derivatives of the objective.
    pub fn gradient(&self, alloc: &PowerAllocation<T>) -> Vec<Vec<T>> {
        let den = self.denominators(alloc);
        let mut buf = Vec::new();
        (0..self.stats.users())
            .map(|k| {
                (0..self.stats.beams())
                    .map(|m| {
                        self.beam(k, m, alloc.get(k, m), &den, &mut buf)
                            .nu(alloc.get(k, m), T::zero())
                    })
                    .collect()
            })
            .collect()
    }

    fn beam<'b>(&self, k: usize, m: usize, x_km: T, den: &[Vec<T>], buf: &'b mut Vec<(T, T)>) -> Beam<'b, T> {
        buf.clear();
        for (kp, den_kp) in den.iter().enumerate() {
            if kp == k {
                continue;
            }
            let w = self.stats.omega(kp);
            for (n, dn) in den_kp.iter().enumerate() {
                let r = w.get(n, m);
                if r > T::zero() {
                    buf.push((r, *dn - r * x_km));
                }
            }
        }
        Beam {
            gamma: self.gamma[k][m],
            d: self.d[k][m],
            cross: buf,
        }
    }

    fn check_beam(&self, alloc: &PowerAllocation<T>, k: usize, m: usize) -> Result<()> {
        check_user(self.stats, k)?;
        alloc.check_shape(self.stats)?;
        if m >= self.stats.beams() {
            return Err(Error::Shape(format!("beam index {m} out of range")));
        }
        Ok(())
    }

    /// Marginal utility of beam `(k, m)` at candidate power `xbar`, with all
    /// other powers taken from `alloc`, minus `d_km + mu`.
    pub fn nu(&self, alloc: &PowerAllocation<T>, k: usize, m: usize, xbar: T, mu: T) -> Result<T> {
        self.check_beam(alloc, k, m)?;
        let den = self.denominators(alloc);
        Ok(self.beam(k, m, alloc.get(k, m), &den, &mut Vec::new()).nu(xbar, mu))
    }

    /// Derivative of [`Self::nu`] with respect to `xbar`.
    pub fn nu_prime(&self, alloc: &PowerAllocation<T>, k: usize, m: usize, xbar: T) -> Result<T> {
        self.check_beam(alloc, k, m)?;
        let den = self.denominators(alloc);
        Ok(self.beam(k, m, alloc.get(k, m), &den, &mut Vec::new()).nu_prime(xbar))
    }

    /// Upper end of the water-level bracket: the largest marginal utility
    /// at zero power, over all beams.
    pub fn mu_upper_bound(&self) -> T {
        let zero = PowerAllocation::zeros(self.stats.users(), self.stats.beams());
        let den = self.denominators(&zero);
        let mut buf = Vec::new();
        let mut best = T::neg_infinity();
        for k in 0..self.stats.users() {
            for m in 0..self.stats.beams() {
                best = best.max(self.beam(k, m, T::zero(), &den, &mut buf).nu(T::zero(), T::zero()));
            }
        }
        best
    }

    fn min_active_slope(&self) -> T {
        let mut best = T::infinity();
        for (k, row) in self.active.iter().enumerate() {
            for (m, a) in row.iter().enumerate() {
                if *a {
                    best = best.min(self.d[k][m]);
                }
            }
        }
        best
    }

    /// Gauss-Seidel maximization of the Lagrangian at water level `mu`.
    /// Returns `None` when some beam would absorb unbounded power.
    fn lagrangian_argmax(
        &self,
        mu: T,
        x: &mut PowerAllocation<T>,
        den: &mut [Vec<T>],
        cfg: &SolverConfig<T>,
        scale: T,
    ) -> Option<T> {
        let (kc, mc) = (self.stats.users(), self.stats.beams());
        let tol = cfg.eps4 * scale;
        let mut buf = Vec::new();
        for _ in 0..cfg.max_sweep_iter {
            let mut max_step = T::zero();
            for k in 0..kc {
                for m in 0..mc {
                    if !self.active[k][m] {
                        continue;
                    }
                    let old = x.get(k, m);
                    let beam = self.beam(k, m, old, den, &mut buf);
                    let new = match beam.root(mu, old, cfg) {
                        Root::Finite(v) => v,
                        Root::Unbounded => return None,
                    };
                    if new != old {
                        let delta = new - old;
                        for (kp, den_kp) in den.iter_mut().enumerate() {
                            if kp == k {
                                continue;
                            }
                            let w = self.stats.omega(kp);
                            for (n, dn) in den_kp.iter_mut().enumerate() {
                                *dn += w.get(n, m) * delta;
                            }
                        }
                        x.set(k, m, new);
                        max_step = max_step.max(delta.abs());
                    }
                }
            }
            if max_step <= tol {
                break;
            }
        }
        Some(x.total())
    }

    /// Largest violation of the KKT conditions at water level `mu`.
    pub fn kkt_residual(&self, alloc: &PowerAllocation<T>, mu: T) -> T {
        let den = self.denominators(alloc);
        let mut buf = Vec::new();
        let mut worst = T::zero();
        for k in 0..self.stats.users() {
            for m in 0..self.stats.beams() {
                if !self.active[k][m] {
                    continue;
                }
                let x = alloc.get(k, m);
                let v = self.beam(k, m, x, &den, &mut buf).nu(x, mu);
                let viol = if x > T::zero() { v.abs() } else { v.max(T::zero()) };
                worst = worst.max(viol);
            }
        }
        worst
    }

    /// Water-filling at total power `p_t`: bisection on the water level, with
    /// a Gauss-Seidel sweep of per-beam Newton solves at each level.
    pub fn waterfill(
        &self,
        p_t: T,
        cfg: &SolverConfig<T>,
        warm: Option<&PowerAllocation<T>>,
    ) -> Result<WaterfillResult<T>> {
        if !(p_t.is_finite() && p_t >= T::zero()) {
            return Err(invalid("P_T", format!("must be finite and >= 0, got {p_t}")));
        }
        let (kc, mc) = (self.stats.users(), self.stats.beams());
        let zero = PowerAllocation::zeros(kc, mc);
        if p_t == T::zero() || !self.any_active() {
            let mu_star = if self.any_active() {
                self.mu_upper_bound()
            } else {
                T::zero()
            };
            return Ok(self.finish(zero, mu_star, p_t, 0));
        }

        let mut x = match warm {
            Some(w) => {
                w.check_shape(self.stats)?;
                let mut w = w.clone();
                for k in 0..kc {
                    for m in 0..mc {
                        if !self.active[k][m] {
                            w.set(k, m, T::zero());
                        }
                    }
                }
                w
            }
            None => zero.clone(),
        };
        let mut den = self.denominators(&x);
        let scale = p_t;
        let target_tol = cfg.eps5 * p_t.max(T::one());
        let two = T::lit(2.0);

        // At mu_upper_bound every beam is idle, so total power is zero there.
        let mut hi = self.mu_upper_bound();
        let mut f_hi = -p_t;
        let mut lo = hi.min(T::zero());
        let slope_floor = -self.min_active_slope();
        let mut last_good = x.clone();
        // f(lo) = p(lo) - P_T, or None while p(lo) is unbounded.
        let mut f_lo: Option<T> = None;
        let mut iters = 0;
        let mut bracketed = false;
        while iters < cfg.max_bisect_iter {
            iters += 1;
            match self.lagrangian_argmax(lo, &mut x, &mut den, cfg, scale) {
                None => {
                    bracketed = true;
                    x = last_good.clone();
                    den = self.denominators(&x);
                    break;
                }
                Some(p) => {
                    last_good = x.clone();
                    if (p - p_t).abs() <= target_tol {
                        return Ok(self.finish(x, lo, p_t, iters));
                    }
                    if p >= p_t {
                        f_lo = Some(p - p_t);
                        bracketed = true;
                        break;
                    }
                    // Too little power even at this level: push the level down
                    // towards the point where the flattest beam saturates.
                    hi = lo;
                    f_hi = p - p_t;
                    lo = (lo + slope_floor) / two;
                }
            }
        }
        if !bracketed {
            return Err(Error::Bracket { target: p_t.as_f64() });
        }

        // Illinois regula falsi on the decreasing map mu -> p(mu), with
        // plain bisection while the lower end is unbounded.
        let mut best: Option<(T, PowerAllocation<T>, T)> = None;
        let mut side = 0i8;
        while iters < cfg.max_bisect_iter {
            iters += 1;
            let mu = match f_lo {
                Some(fl) => lo + (hi - lo) * fl / (fl - f_hi),
                None => (lo + hi) / two,
            };
            if !(mu > lo && mu < hi) {
                break;
            }
            match self.lagrangian_argmax(mu, &mut x, &mut den, cfg, scale) {
                None => {
                    lo = mu;
                    f_lo = None;
                    x = last_good.clone();
                    den = self.denominators(&x);
                }
                Some(p) => {
                    last_good = x.clone();
                    let f = p - p_t;
                    if best.as_ref().is_none_or(|b| f.abs() < b.2) {
                        best = Some((mu, x.clone(), f.abs()));
                    }
                    if f.abs() <= target_tol {
                        break;
                    }
                    if f < T::zero() {
                        hi = mu;
                        f_hi = f;
                        if side == -1 {
                            if let Some(fl) = f_lo.as_mut() {
                                *fl /= two;
                            }
                        }
                        side = -1;
                    } else {
                        lo = mu;
                        f_lo = Some(f);
                        if side == 1 {
                            f_hi /= two;
                        }
                        side = 1;
                    }
                }
            }
        }
        let (mu, alloc, _) = best.ok_or(Error::Bracket { target: p_t.as_f64() })?;
        Ok(self.finish(alloc, mu, p_t, iters))
    }

    fn finish(&self, alloc: PowerAllocation<T>, mu_star: T, p_t: T, bisect_iters: usize) -> WaterfillResult<T> {
        let total = alloc.total();
        let power_gap = (total - p_t).abs();
        let (alloc, mu_star) = self.balance(alloc, mu_star, p_t);
        let se_nats = self.objective(&alloc);
        let kkt_residual = self.kkt_residual(&alloc, mu_star);
        WaterfillResult {
            alloc,
            mu_star,
            se_value: nats_to_bits(se_nats),
            se_nats,
            kkt_residual,
            power_gap,
            bisect_iters,
        }
    }

    /// Removes the imbalance left by the water-level tolerance with one
    /// linearized step of the level itself: every positive beam moves along
    /// its own `nu` curve, so stationarity survives. Falls back to a uniform
    /// rescale if a beam would go negative.
    fn balance(&self, mut alloc: PowerAllocation<T>, mu: T, p_t: T) -> (PowerAllocation<T>, T) {
        let total = alloc.total();
        let gap = p_t - total;
        if total == T::zero() || gap == T::zero() {
            return (alloc, mu);
        }
        let den = self.denominators(&alloc);
        let mut buf = Vec::new();
        let mut resp = Vec::new();
        for k in 0..self.stats.users() {
            for m in 0..self.stats.beams() {
                let x = alloc.get(k, m);
                if self.active[k][m] && x > T::zero() {
                    resp.push((k, m, -T::one() / self.beam(k, m, x, &den, &mut buf).nu_prime(x)));
                }
            }
        }
        let sum: T = resp.iter().map(|r| r.2).sum();
        let fits = resp
            .iter()
            .all(|&(k, m, w)| alloc.get(k, m) + gap * w / sum >= T::zero());
        let mut mu = mu;
        if sum.is_finite() && sum > T::zero() && fits {
            for &(k, m, w) in &resp {
                alloc.set(k, m, alloc.get(k, m) + gap * w / sum);
            }
            mu -= gap / sum;
        }
        // Rounding-level remainder.
        let total = alloc.total();
        (alloc.scaled(p_t / total), mu)
    }

    /// Surrogate RE (bits/J/Hz) at total power `p_t`.
    pub fn re_at(&self, p_t: T, params: &SystemParams<T>, cfg: &SolverConfig<T>) -> Result<(T, WaterfillResult<T>)> {
        let wf = self.waterfill(p_t, cfg, None)?;
        Ok((crate::de::re_weight(p_t, params) * wf.se_value, wf))
    }
}

/// Slope of the surrogate RE in `P_T` given the surrogate SE (`se`, nats) and
/// its slope `mu` (nats/W). Result is in nats/J/Hz per watt.
pub fn re_derivative<T: Scalar>(p_t: T, se: T, mu: T, params: &SystemParams<T>) -> T {
    let consumed = params.consumed_power(p_t);
    let p_tot = crate::model::budget_power(params);
    ((T::one() + params.beta * consumed / p_tot) * mu - params.xi * se / consumed) / consumed
}

/// How the outer power search ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchStatus {
    Converged,
    /// Step length underflowed before `|dP_T| <= eps2`.
    Stalled,
    IterationCap,
}

/// Output of [`pt_search`].
#[derive(Debug, Clone, PartialEq)]
pub struct PtSearchResult<T> {
    pub p_opt: T,
    /// Surrogate RE at `p_opt`, bits/J/Hz.
    pub re_value: T,
    /// `(P_T, RE, dRE/dP_T)` for every evaluated point, in evaluation order
    /// (RE in bits/J/Hz, slope in bits/J/Hz/W).
    pub trace: Vec<(T, T, T)>,
    pub inner: WaterfillResult<T>,
    pub status: SearchStatus,
}

struct Probe<T> {
    p: T,
    re: T,
    slope: T,
    wf: WaterfillResult<T>,
}

fn probe<T: Scalar, F>(
    inner: &mut F,
    p: T,
    params: &SystemParams<T>,
    warm: Option<&PowerAllocation<T>>,
) -> Result<Probe<T>>
where
    F: FnMut(T, Option<&PowerAllocation<T>>) -> Result<WaterfillResult<T>>,
{
    let wf = inner(p, warm)?;
    let re = crate::de::re_weight(p, params) * wf.se_value;
    let slope = nats_to_bits(re_derivative(p, wf.se_nats, wf.mu_star, params));
    Ok(Probe { p, re, slope, wf })
}

/// Derivative-assisted search on `P_T` over `[0, Pmax]` for a fixed
/// surrogate, using [`SurrogateProblem::waterfill`] as the inner solver.
pub fn pt_search<T: Scalar>(
    problem: &SurrogateProblem<'_, T>,
    params: &SystemParams<T>,
    cfg: &SolverConfig<T>,
    warm: Option<&PowerAllocation<T>>,
) -> Result<PtSearchResult<T>> {
    pt_search_with(|p, w| problem.waterfill(p, cfg, w), params, cfg, warm)
}

/// Interval known to contain the RE peak, with the slopes at its ends.
/// Halving the slope of an end kept twice in a row (Illinois) keeps the
/// secant from stalling on one side.
struct Bracket<T> {
    lo: T,
    hi: T,
    s_lo: Option<T>,
    s_hi: Option<T>,
    side: i8,
}

impl<T: Scalar> Bracket<T> {
    fn absorb(&mut self, p: T, slope: T) {
        if slope > T::zero() && p >= self.lo {
            self.set_lo(p, slope);
        } else if slope < T::zero() && p <= self.hi {
            self.set_hi(p, slope);
        }
    }

    fn set_lo(&mut self, p: T, slope: T) {
        self.lo = p;
        self.s_lo = Some(slope);
        if self.side == 1 {
            self.s_hi = self.s_hi.map(|s| s * T::lit(0.5));
        }
        self.side = 1;
    }

    fn set_hi(&mut self, p: T, slope: T) {
        self.hi = p;
        self.s_hi = Some(slope);
        if self.side == -1 {
            self.s_lo = self.s_lo.map(|s| s * T::lit(0.5));
        }
        self.side = -1;
    }

    fn cut_hi(&mut self, p: T, slope: T) {
        if p < self.hi {
            self.set_hi(p, slope.min(T::zero()));
        }
    }

    fn cut_lo(&mut self, p: T, slope: T) {
        if p > self.lo {
            self.set_lo(p, slope.max(T::zero()));
        }
    }
}
/// Derivative-assisted gradient ascent on `P_T` in `[0, Pmax]` starting at
/// `Pmax / 2`. `inner(P_T, warm)` must return the inner optimum at `P_T`
/// together with its water level.
///
/// The step starts at `step_scale * Pmax / |slope|`, grows while the ascent
/// keeps its direction and halves whenever the RE drops. Once slopes of both
/// signs have been seen, the peak is bracketed and steps become secant steps
/// on the slope, falling back to the bracket midpoint.
pub fn pt_search_with<T: Scalar, F>(
    mut inner: F,
    params: &SystemParams<T>,
    cfg: &SolverConfig<T>,
    warm: Option<&PowerAllocation<T>>,
) -> Result<PtSearchResult<T>>
where
    F: FnMut(T, Option<&PowerAllocation<T>>) -> Result<WaterfillResult<T>>,
{
    let pmax = params.pmax;
    let half = T::lit(0.5);
    let mut trace = Vec::new();
    let mut cur = probe(&mut inner, pmax * half, params, warm)?;
    trace.push((cur.p, cur.re, cur.slope));
    if cur.p > T::zero() && cur.wf.alloc.total() == T::zero() {
        // Nothing can be radiated usefully; transmit nothing.
        cur = probe(&mut inner, T::zero(), params, None)?;
        trace.push((cur.p, cur.re, cur.slope));
    }
    if pmax == T::zero() || cur.p == T::zero() {
        return Ok(PtSearchResult {
            p_opt: cur.p,
            re_value: cur.re,
            trace,
            inner: cur.wf,
            status: SearchStatus::Converged,
        });
    }

    let tol = cfg.eps2 * pmax;
    let floor = T::lit(1e-12) * pmax;
    let mut step = if cur.slope != T::zero() {
        cfg.step_scale * pmax / cur.slope.abs()
    } else {
        T::zero()
    };
    // Slope-sign bracket around the peak, with the slopes seen at its ends.
    let mut br = Bracket {
        lo: T::zero(),
        hi: pmax,
        s_lo: None,
        s_hi: None,
        side: 0,
    };
    br.absorb(cur.p, cur.slope);
    let mut status = SearchStatus::IterationCap;
    for _ in 0..cfg.max_pt_iter {
        let mut cand = match (br.s_lo, br.s_hi) {
            (Some(a), Some(b)) if br.hi > br.lo => {
                let (lo, hi) = (br.lo, br.hi);
                let sec = if a - b > T::zero() {
                    lo + (hi - lo) * a / (a - b)
                } else {
                    (lo + hi) * half
                };
                if sec.is_finite() {
                    sec.max(lo + tol * half).min(hi - tol * half)
                } else {
                    (lo + hi) * half
                }
            }
            _ => (cur.p + step * cur.slope).max(T::zero()).min(pmax),
        };
        if cur.slope > T::zero() && cand > br.hi {
            cand = (cur.p + br.hi) * half;
        } else if cur.slope < T::zero() && cand < br.lo {
            cand = (cur.p + br.lo) * half;
        }
        if (cand - cur.p).abs() <= tol || (br.hi - br.lo) <= tol {
            status = SearchStatus::Converged;
            break;
        }
        let next = probe(&mut inner, cand, params, Some(&cur.wf.alloc))?;
        trace.push((next.p, next.re, next.slope));
        if next.re < cur.re {
            // Quasi-concavity: the peak lies on the near side of `cand`.
            if cand > cur.p {
                br.cut_hi(cand, next.slope);
            } else {
                br.cut_lo(cand, next.slope);
            }
            step *= half;
            if (cand - cur.p).abs() < floor {
                status = SearchStatus::Stalled;
                break;
            }
            continue;
        }
        br.absorb(next.p, next.slope);
        if next.slope.signum() == cur.slope.signum() {
            step *= T::lit(2.0);
        }
        cur = next;
    }
    Ok(PtSearchResult {
        p_opt: cur.p,
        re_value: cur.re,
        trace,
        inner: cur.wf,
        status,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CouplingMatrix;

    /// One user, two beams, gamma = (4, 1), no interference terms.
    fn single_user() -> ChannelStats<f64> {
        ChannelStats::new(vec![CouplingMatrix::from_rows(&[vec![1.0, 1.0]]).unwrap()]).unwrap()
    }

    fn single_problem(stats: &ChannelStats<f64>) -> SurrogateProblem<'_, f64> {
        SurrogateProblem::new(stats, 1.0, vec![vec![4.0, 1.0]], vec![vec![0.0]], vec![vec![0.0, 0.0]]).unwrap()
    }

    #[test]
    fn nu_single_user_examples() {
        let stats = single_user();
        let p = single_problem(&stats);
        let z = PowerAllocation::zeros(1, 2);
        assert_eq!(p.nu(&z, 0, 0, 0.0, 0.0).unwrap(), 4.0);
        assert_eq!(p.nu_prime(&z, 0, 0, 0.0).unwrap(), -16.0);
        // Root of nu at level mu is 1/mu - 1/gamma.
        let mu = 0.5;
        let root = 1.0 / mu - 1.0 / 4.0;
        assert!(p.nu(&z, 0, 0, root, mu).unwrap().abs() < 1e-14);
        let mut prev = f64::INFINITY;
        for i in 0..20 {
            let v = p.nu(&z, 0, 0, i as f64 * 0.3, 0.1).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn mu_bound_examples() {
        let stats = single_user();
        assert_eq!(single_problem(&stats).mu_upper_bound(), 4.0);
        let dead =
            SurrogateProblem::new(&stats, 1.0, vec![vec![0.0, 0.0]], vec![vec![0.0]], vec![vec![0.0, 0.0]]).unwrap();
        assert_eq!(dead.mu_upper_bound(), 0.0);
    }

    #[test]
    fn closed_form_single_user_waterfill() {
        let stats = single_user();
        let p = single_problem(&stats);
        let r = p.waterfill(1.0, &SolverConfig::default(), None).unwrap();
        assert!((r.alloc.get(0, 0) - 0.875).abs() < 1e-8);
        assert!((r.alloc.get(0, 1) - 0.125).abs() < 1e-8);
        assert!((r.mu_star - 8.0 / 9.0).abs() < 1e-8);
        assert!(r.kkt_residual < 1e-6);
    }

    #[test]
    fn zero_total_power() {
        let stats = single_user();
        let p = single_problem(&stats);
        let r = p.waterfill(0.0, &SolverConfig::default(), None).unwrap();
        assert_eq!(r.alloc.total(), 0.0);
        assert_eq!(r.se_nats, 0.0);
        assert_eq!(r.mu_star, 4.0);
        assert!(p.waterfill(-1.0, &SolverConfig::default(), None).is_err());
    }

    #[test]
    fn dead_channel_gets_nothing() {
        let stats = ChannelStats::zeros(3, &[1, 1]);
        let p = SurrogateProblem::new(
            &stats,
            1.0,
            vec![vec![0.0; 3]; 2],
            vec![vec![0.0]; 2],
            vec![vec![0.0; 3]; 2],
        )
        .unwrap();
        let r = p.waterfill(2.0, &SolverConfig::default(), None).unwrap();
        assert_eq!(r.alloc.total(), 0.0);
        assert_eq!(r.mu_star, 0.0);
    }

    #[test]
    fn re_derivative_signs() {
        let params = SystemParams {
            beta: 0.0,
            ..SystemParams::<f64>::reference(4, vec![1])
        };
        assert!(re_derivative(0.5, 3.0, 0.0, &params) < 0.0);
        assert!(re_derivative(0.5, 0.0, 1.0, &params) > 0.0);
    }
}
