//! Outer minorization-maximization loop.
//!
//! The DE sum rate is `sum_k g_bar_k(L) - sum_k f_k(L)` with concave
//! `f_k = sum_n ln kbar_kn`. Replacing `f_k` by its tangent at the current
//! iterate gives a concave minorant of the SE; maximizing the induced RE
//! surrogate and re-linearizing yields a nondecreasing RE sequence.

use rayon::prelude::*;

use crate::config::SolverConfig;
use crate::de::{de_rate, de_states, interference_log_det, re_weight, DeState};
use crate::error::{invalid, Error, Result};
use crate::model::{ChannelStats, PowerAllocation, SystemParams};
use crate::oracle::project_capped_simplex;
use crate::powerctl::{pt_search_with, SearchStatus, SurrogateProblem, WaterfillResult};
use crate::rates::{floor_unchecked, xi_apply};
use crate::scalar::{nats_to_bits, Scalar};

/// Slopes of `sum_{k' != k} f_k'` with respect to each of user `k`'s beam
/// powers, in nats/W. Entry `[k][t]` is
/// `sum_{k' != k} sum_n Omega_k'[n,t] / kbar_k'[n]`.
pub fn mm_derivative<T: Scalar>(stats: &ChannelStats<T>, alloc: &PowerAllocation<T>, sigma2: T) -> Result<Vec<Vec<T>>> {
    alloc.check_shape(stats)?;
    let kc = stats.users();
    let per_user: Vec<Vec<T>> = (0..kc)
        .into_par_iter()
        .map(|kp| {
            let kbar = floor_unchecked(stats.omega(kp), alloc, kp, sigma2);
            let inv: Vec<T> = kbar.iter().map(|v| T::one() / *v).collect();
            xi_apply(stats.omega(kp), &inv)
        })
        .collect();
    Ok((0..kc)
        .map(|k| {
            let mut d = vec![T::zero(); stats.beams()];
            for (kp, col) in per_user.iter().enumerate() {
                if kp != k {
                    for (dt, c) in d.iter_mut().zip(col) {
                        *dt += *c;
                    }
                }
            }
            d
        })
        .collect())
}

/// First-order expansion of `sum_k f_k` around `anchor`:
/// `f_anchor + sum_k sum_m d_km (lambda_km - anchor_km)`.
pub fn taylor_upper_bound<T: Scalar>(
    f_anchor: T,
    d: &[Vec<T>],
    alloc: &PowerAllocation<T>,
    anchor: &PowerAllocation<T>,
) -> T {
    let mut v = f_anchor;
    for (k, dk) in d.iter().enumerate() {
        for (m, slope) in dk.iter().enumerate() {
            v += *slope * (alloc.get(k, m) - anchor.get(k, m));
        }
    }
    v
}

/// Everything the surrogate needs from its anchor point.
#[derive(Debug, Clone)]
pub struct Anchor<T> {
    pub alloc: PowerAllocation<T>,
    pub states: Vec<DeState<T>>,
    pub d: Vec<Vec<T>>,
    /// `sum_k f_k` at the anchor, nats.
    pub f_sum: T,
    /// DE sum rate at the anchor, nats/s/Hz.
    pub se_nats: T,
}

impl<T: Scalar> Anchor<T> {
    pub fn new(stats: &ChannelStats<T>, alloc: &PowerAllocation<T>, sigma2: T, cfg: &SolverConfig<T>) -> Result<Self> {
        let states = de_states(stats, alloc, sigma2, &cfg.fixed_point())?;
        let d = mm_derivative(stats, alloc, sigma2)?;
        let f_sum = sum_f(stats, alloc, sigma2);
        let se_nats = de_se_nats(stats, alloc, sigma2, &states)?;
        Ok(Self {
            alloc: alloc.clone(),
            states,
            d,
            f_sum,
            se_nats,
        })
    }

    /// Inner problem with the DE auxiliaries frozen at the anchor, shifted so
    /// that its value at the anchor is the DE sum rate there.
    pub fn surrogate<'a>(&self, stats: &'a ChannelStats<T>, sigma2: T) -> Result<SurrogateProblem<'a, T>> {
        let gamma = self.states.iter().map(|s| s.gamma.clone()).collect();
        let gamma_tilde = self.states.iter().map(|s| s.gamma_tilde.clone()).collect();
        let p = SurrogateProblem::new(stats, sigma2, gamma, gamma_tilde, self.d.clone())?;
        let raw = p.objective(&self.alloc);
        Ok(p.with_offset(self.se_nats - raw))
    }

    /// Minorant of the DE sum rate (nats): `sum g_bar(L) - taylor bound of sum f`.
    pub fn minorant(
        &self,
        stats: &ChannelStats<T>,
        alloc: &PowerAllocation<T>,
        sigma2: T,
        cfg: &SolverConfig<T>,
    ) -> Result<T> {
        let states = de_states(stats, alloc, sigma2, &cfg.fixed_point())?;
        let g = de_se_nats(stats, alloc, sigma2, &states)? + sum_f(stats, alloc, sigma2);
        Ok(g - taylor_upper_bound(self.f_sum, &self.d, alloc, &self.alloc))
    }
}

fn sum_f<T: Scalar>(stats: &ChannelStats<T>, alloc: &PowerAllocation<T>, sigma2: T) -> T {
    (0..stats.users())
        .map(|k| interference_log_det(stats, alloc, k, sigma2))
        .sum()
}

fn de_se_nats<T: Scalar>(
    stats: &ChannelStats<T>,
    alloc: &PowerAllocation<T>,
    sigma2: T,
    states: &[DeState<T>],
) -> Result<T> {
    let mut se = T::zero();
    for (k, s) in states.iter().enumerate() {
        se += de_rate(s, alloc, k, stats, sigma2)?;
    }
    Ok(se * crate::scalar::ln2())
}

/// DE resource efficiency (bits/J/Hz) together with the DE SE (bits/s/Hz).
pub fn de_re_and_se<T: Scalar>(
    stats: &ChannelStats<T>,
    alloc: &PowerAllocation<T>,
    params: &SystemParams<T>,
    cfg: &SolverConfig<T>,
) -> Result<(T, T)> {
    let states = de_states(stats, alloc, params.sigma2, &cfg.fixed_point())?;
    let se = nats_to_bits(de_se_nats(stats, alloc, params.sigma2, &states)?);
    let re = re_weight(alloc.total(), params) * se;
    if re.is_finite() {
        Ok((re, se))
    } else {
        Err(Error::NonFinite("DE resource efficiency"))
    }
}

/// Trace of an MM run.
#[derive(Debug, Clone, PartialEq)]
pub struct MMState<T> {
    /// Number of MM iterations performed.
    pub ell: usize,
    pub alloc: PowerAllocation<T>,
    /// Linearization slopes at the final anchor (nats/W).
    pub d: Vec<Vec<T>>,
    /// DE RE (bits/J/Hz) of the initial point and of every iterate.
    pub re_trace: Vec<T>,
    /// Total transmit power of every iterate, starting with the initial one.
    pub pt_trace: Vec<T>,
    pub converged: bool,
    /// Iterations whose surrogate step had to be shortened to keep RE from dropping.
    pub backtracks: usize,
    /// Normalized projected-gradient residual of the DE RE at the returned point.
    pub stationarity: T,
    /// Status of the last outer power search.
    pub last_search: Option<SearchStatus>,
}

impl<T: Scalar> MMState<T> {
    pub fn re(&self) -> T {
        *self.re_trace.last().expect("trace holds the initial point")
    }
}

const MAX_HALVINGS: usize = 40;

/// Runs the MM iteration from `init` (uniform full-budget power when `None`).
pub fn mm_solve<T: Scalar>(
    stats: &ChannelStats<T>,
    params: &SystemParams<T>,
    cfg: &SolverConfig<T>,
    init: Option<&PowerAllocation<T>>,
) -> Result<(PowerAllocation<T>, MMState<T>)> {
    params.validate()?;
    cfg.validate()?;
    stats.check_shape(params)?;
    let (kc, mc) = (stats.users(), stats.beams());
    let mut alloc = match init {
        Some(a) => {
            a.check_shape(stats)?;
            let slack = T::lit(1e-9) * params.pmax.max(T::one());
            if a.total() > params.pmax + slack {
                return Err(invalid("init_alloc", "total power exceeds Pmax"));
            }
            a.clone()
        }
        None => PowerAllocation::uniform(kc, mc, params.pmax),
    };
    let sigma2 = params.sigma2;

    let (mut re, _) = de_re_and_se(stats, &alloc, params, cfg)?;
    let mut re_trace = vec![re];
    let mut pt_trace = vec![alloc.total()];
    let mut converged = false;
    let mut backtracks = 0;
    let mut last_search = None;
    let mut anchor = Anchor::new(stats, &alloc, sigma2, cfg)?;
    let mut ell = 0;

    while ell < cfg.max_mm_iter {
        ell += 1;
        let search = pt_search_with(
            |p_t, warm| consistent_inner(stats, sigma2, cfg, &anchor, p_t, warm),
            params,
            cfg,
            Some(&alloc),
        )?;
        last_search = Some(search.status);
        let candidate = search.inner.alloc;

        // The frozen auxiliaries make the inner objective only a local model
        // away from the anchor; shorten the step if the true RE would drop.
        let mut t = T::one();
        let mut accepted = None;
        for h in 0..MAX_HALVINGS {
            let trial = if h == 0 {
                candidate.clone()
            } else {
                alloc.lerp(&candidate, t)
            };
            let (trial_re, _) = de_re_and_se(stats, &trial, params, cfg)?;
            if trial_re >= re {
                if h > 0 {
                    backtracks += 1;
                }
                accepted = Some((trial, trial_re));
                break;
            }
            t *= T::lit(0.5);
        }
        let Some((next, next_re)) = accepted else {
            re_trace.push(re);
            pt_trace.push(alloc.total());
            converged = true;
            break;
        };
        let delta = next_re - re;
        alloc = next;
        re = next_re;
        re_trace.push(re);
        pt_trace.push(alloc.total());
        anchor = Anchor::new(stats, &alloc, sigma2, cfg)?;
        if delta.abs() <= cfg.eps3 {
            converged = true;
            break;
        }
    }

    let stationarity = stationarity_residual(stats, &anchor, params)?;
    let state = MMState {
        ell,
        alloc: alloc.clone(),
        d: anchor.d.clone(),
        re_trace,
        pt_trace,
        converged,
        backtracks,
        stationarity,
        last_search,
    };
    Ok((alloc, state))
}

/// Cap on auxiliary refreshes per inner solve.
const MAX_REFRESH: usize = 60;

/// Minorant value (nats), its gradient and the DE states at one point.
struct LinePoint<T> {
    f: T,
    grad: Vec<Vec<T>>,
    states: Vec<DeState<T>>,
}

fn line_point<T: Scalar>(
    stats: &ChannelStats<T>,
    sigma2: T,
    cfg: &SolverConfig<T>,
    anchor: &Anchor<T>,
    x: &PowerAllocation<T>,
) -> Result<LinePoint<T>> {
    let states = de_states(stats, x, sigma2, &cfg.fixed_point())?;
    let g = de_se_nats(stats, x, sigma2, &states)? + sum_f(stats, x, sigma2);
    let f = g - taylor_upper_bound(anchor.f_sum, &anchor.d, x, &anchor.alloc);
    // Auxiliaries at their fixed point: the frozen-auxiliary gradient is exact.
    let problem = SurrogateProblem::new(
        stats,
        sigma2,
        states.iter().map(|s| s.gamma.clone()).collect(),
        states.iter().map(|s| s.gamma_tilde.clone()).collect(),
        anchor.d.clone(),
    )?;
    let grad = problem.gradient(x);
    Ok(LinePoint { f, grad, states })
}

fn directional<T: Scalar>(grad: &[Vec<T>], from: &PowerAllocation<T>, to: &PowerAllocation<T>) -> T {
    let mut s = T::zero();
    for (k, gk) in grad.iter().enumerate() {
        for (m, g) in gk.iter().enumerate() {
            s += *g * (to.get(k, m) - from.get(k, m));
        }
    }
    s
}

/// Maximizes the minorant on the segment `x -> y` with a safeguarded secant
/// on the directional derivative. Returns the best point seen.
fn line_search<T: Scalar>(
    stats: &ChannelStats<T>,
    sigma2: T,
    cfg: &SolverConfig<T>,
    anchor: &Anchor<T>,
    x: &PowerAllocation<T>,
    at_x: &LinePoint<T>,
    y: &PowerAllocation<T>,
) -> Result<Option<(T, LinePoint<T>)>> {
    let h0 = directional(&at_x.grad, x, y);
    if !(h0 > T::zero()) {
        return Ok(None);
    }
    let mut best: Option<(T, LinePoint<T>)> = None;
    let keep = |t: T, p: LinePoint<T>, best: &mut Option<(T, LinePoint<T>)>| {
        if p.f > at_x.f && best.as_ref().is_none_or(|(_, b)| p.f > b.f) {
            *best = Some((t, p));
        }
    };
    let p1 = line_point(stats, sigma2, cfg, anchor, y)?;
    let h1 = directional(&p1.grad, x, y);
    keep(T::one(), p1, &mut best);
    if h1 >= T::zero() {
        return Ok(best);
    }
    let (mut lo, mut hlo, mut hi, mut hhi) = (T::zero(), h0, T::one(), h1);
    let mut side = 0i8;
    for _ in 0..LINE_ITERS {
        let mut t = lo - hlo * (hi - lo) / (hhi - hlo);
        if !(t > lo && t < hi) {
            t = T::lit(0.5) * (lo + hi);
        }
        let p = line_point(stats, sigma2, cfg, anchor, &x.lerp(y, t))?;
        let h = directional(&p.grad, x, y);
        keep(t, p, &mut best);
        if h.abs() <= T::lit(1e-8) * h0 || hi - lo <= T::lit(1e-6) {
            break;
        }
        if h > T::zero() {
            lo = t;
            hlo = h;
            if side == 1 {
                hhi *= T::lit(0.5);
            }
            side = 1;
        } else {
            hi = t;
            hhi = h;
            if side == -1 {
                hlo *= T::lit(0.5);
            }
            side = -1;
        }
    }
    Ok(best)
}

const LINE_ITERS: usize = 40;

/// Inner optimum of the MM surrogate at total power `p_t`.
///
/// A water-filling with the DE auxiliaries frozen at the current point gives
/// a search direction; a line search on the minorant along it gives the next
/// point, at which the auxiliaries are re-evaluated. At the limit the KKT
/// conditions hold with the auxiliaries of the solution itself. The reported
/// SE is the minorant value (nats) at the returned allocation.
pub fn consistent_inner<T: Scalar>(
    stats: &ChannelStats<T>,
    sigma2: T,
    cfg: &SolverConfig<T>,
    anchor: &Anchor<T>,
    p_t: T,
    warm: Option<&PowerAllocation<T>>,
) -> Result<WaterfillResult<T>> {
    let (kc, mc) = (stats.users(), stats.beams());
    let mut x = match warm {
        Some(w) if w.total() > T::zero() => w.scaled(p_t / w.total()),
        _ => PowerAllocation::uniform(kc, mc, p_t),
    };
    let mut at_x = line_point(stats, sigma2, cfg, anchor, &x)?;
    let tol = T::lit(1e-9) * p_t;
    let mut last: Option<WaterfillResult<T>> = None;
    for _ in 0..MAX_REFRESH {
        let problem = SurrogateProblem::new(
            stats,
            sigma2,
            at_x.states.iter().map(|s| s.gamma.clone()).collect(),
            at_x.states.iter().map(|s| s.gamma_tilde.clone()).collect(),
            anchor.d.clone(),
        )?;
        let wf = problem.waterfill(p_t, cfg, Some(&x))?;
        if wf.alloc.total() == T::zero() {
            // No beam is worth any power.
            return Ok(wf);
        }
        let moved = wf
            .alloc
            .rows()
            .iter()
            .flatten()
            .zip(x.rows().iter().flatten())
            .fold(T::zero(), |a, (u, v)| a.max((*u - *v).abs()));
        let step = line_search(stats, sigma2, cfg, anchor, &x, &at_x, &wf.alloc)?;
        last = Some(wf);
        let Some((t, p)) = step else { break };
        x = x.lerp(&last.as_ref().expect("just set").alloc, t);
        at_x = p;
        if moved * t <= tol {
            break;
        }
    }
    let mut wf = last.expect("at least one refresh");
    wf.alloc = x;
    wf.se_nats = at_x.f;
    wf.se_value = nats_to_bits(at_x.f);
    wf.power_gap = (wf.alloc.total() - p_t).abs();
    Ok(wf)
}

/// Gradient of the DE RE (bits/J/Hz per W) at the anchor point.
pub fn re_gradient<T: Scalar>(
    stats: &ChannelStats<T>,
    anchor: &Anchor<T>,
    params: &SystemParams<T>,
) -> Result<Vec<Vec<T>>> {
    let problem = anchor.surrogate(stats, params.sigma2)?;
    // With the auxiliaries at their fixed point and the slopes at the anchor,
    // the surrogate's gradient is the SE gradient there.
    let g_se = problem.gradient(&anchor.alloc);
    let p = anchor.alloc.total();
    let w = re_weight(p, params);
    let consumed = params.consumed_power(p);
    let dw = -params.xi / (consumed * consumed);
    let se_bits = nats_to_bits(anchor.se_nats);
    Ok(g_se
        .into_iter()
        .map(|row| row.into_iter().map(|g| w * nats_to_bits(g) + dw * se_bits).collect())
        .collect())
}

/// `|| P(L + a g) - L ||_inf / Pmax` with `a = Pmax / ||g||_inf`, where `P`
/// projects onto `{L >= 0, sum L <= Pmax}`. Zero exactly at KKT points.
pub fn stationarity_residual<T: Scalar>(
    stats: &ChannelStats<T>,
    anchor: &Anchor<T>,
    params: &SystemParams<T>,
) -> Result<T> {
    let pmax = params.pmax;
    if pmax == T::zero() {
        return Ok(T::zero());
    }
    let grad = re_gradient(stats, anchor, params)?;
    let gmax = grad.iter().flatten().fold(T::zero(), |a, g| a.max(g.abs()));
    if gmax == T::zero() {
        return Ok(T::zero());
    }
    let step = pmax / gmax;
    let x: Vec<T> = anchor.alloc.rows().iter().flatten().copied().collect();
    let moved: Vec<T> = x
        .iter()
        .zip(grad.iter().flatten())
        .map(|(x, g)| *x + step * *g)
        .collect();
    let proj = project_capped_simplex(&moved, pmax);
    Ok(proj.iter().zip(&x).fold(T::zero(), |a, (p, x)| a.max((*p - *x).abs())) / pmax)
}
