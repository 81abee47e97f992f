//! Independent cross-checks: exhaustive grid search at tiny scale, a
//! projected-gradient solver for the inner problem, finite differences and
//! DE-vs-Monte-Carlo comparisons.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::config::SolverConfig;
use crate::error::{invalid, Error, Result};
use crate::mm::de_re_and_se;
use crate::model::{ChannelStats, PowerAllocation, SystemParams};
use crate::powerctl::SurrogateProblem;
use crate::rates::mc_rate_approx;
use crate::scalar::Scalar;

/// Largest `K * M` accepted by [`grid_search_re`].
pub const GRID_DIM_CAP: usize = 6;

/// Relative-gap floor for Monte-Carlo rates, bits/s/Hz.
pub const MC_RATE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum OracleKind {
    Grid,
    RefSolver,
    Fd,
    DeVsMc,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport<T> {
    pub kind: OracleKind,
    /// Relative difference, always >= 0.
    pub gap: T,
    pub details: BTreeMap<String, T>,
}

/// Euclidean projection onto `{x >= 0, sum x = total}`.
pub fn project_simplex<T: Scalar>(v: &[T], total: T) -> Vec<T> {
    if v.is_empty() {
        return Vec::new();
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let mut cum = T::zero();
    let mut theta = T::zero();
    for (i, u) in sorted.iter().enumerate() {
        cum += *u;
        let t = (cum - total) / T::from_usize_lossy(i + 1);
        if *u - t > T::zero() {
            theta = t;
        }
    }
    v.iter().map(|x| (*x - theta).max(T::zero())).collect()
}

/// Euclidean projection onto `{x >= 0, sum x <= cap}`.
pub fn project_capped_simplex<T: Scalar>(v: &[T], cap: T) -> Vec<T> {
    let clipped: Vec<T> = v.iter().map(|x| x.max(T::zero())).collect();
    if clipped.iter().copied().sum::<T>() <= cap {
        clipped
    } else {
        project_simplex(v, cap)
    }
}

/// Exhaustive DE-RE maximization over the lattice
/// `{ j * Pmax / (pts - 1) : j >= 0 integer, sum j <= pts - 1 }`.
pub fn grid_search_re<T: Scalar>(
    stats: &ChannelStats<T>,
    params: &SystemParams<T>,
    grid_points_per_dim: usize,
    cfg: &SolverConfig<T>,
) -> Result<(PowerAllocation<T>, T)> {
    params.validate()?;
    stats.check_shape(params)?;
    let (kc, mc) = (stats.users(), stats.beams());
    let dims = kc * mc;
    if dims > GRID_DIM_CAP {
        return Err(Error::GridCap {
            dims,
            cap: GRID_DIM_CAP,
        });
    }
    if grid_points_per_dim < 2 {
        return Err(invalid("grid_points_per_dim", "must be at least 2"));
    }
    let steps = grid_points_per_dim - 1;
    let mut points = Vec::new();
    let mut cur = vec![0usize; dims];
    enumerate_lattice(&mut cur, 0, steps, &mut points);

    let h = params.pmax / T::from_usize_lossy(steps);
    let to_alloc = |j: &[usize]| {
        PowerAllocation::new(
            j.chunks(mc)
                .map(|row| row.iter().map(|v| T::from_usize_lossy(*v) * h).collect())
                .collect(),
        )
    };
    let best = points
        .par_iter()
        .enumerate()
        .map(|(i, j)| -> Result<(T, usize)> {
            let (re, _) = de_re_and_se(stats, &to_alloc(j)?, params, cfg)?;
            Ok((re, i))
        })
        .try_reduce(
            || (T::neg_infinity(), usize::MAX),
            |a, b| Ok(if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a }),
        )?;
    Ok((to_alloc(&points[best.1])?, best.0))
}

fn enumerate_lattice(cur: &mut Vec<usize>, pos: usize, left: usize, out: &mut Vec<Vec<usize>>) {
    if pos == cur.len() {
        out.push(cur.clone());
        return;
    }
    for j in 0..=left {
        cur[pos] = j;
        enumerate_lattice(cur, pos + 1, left - j, out);
    }
    cur[pos] = 0;
}

/// Spectral projected-gradient ascent on the inner problem over
/// `{x >= 0, sum x = p_t}` with Armijo backtracking. Returns the allocation
/// and the objective in nats.
pub fn refsolve_inner<T: Scalar>(problem: &SurrogateProblem<'_, T>, p_t: T) -> Result<(PowerAllocation<T>, T)> {
    if !(p_t.is_finite() && p_t >= T::zero()) {
        return Err(invalid("P_T", "must be finite and >= 0"));
    }
    let (kc, mc) = (problem.stats().users(), problem.stats().beams());
    let shape = |v: &[T]| PowerAllocation::new(v.chunks(mc).map(|r| r.to_vec()).collect());
    let flat = |g: Vec<Vec<T>>| g.into_iter().flatten().collect::<Vec<T>>();

    let mut x = vec![p_t / T::from_usize_lossy(kc * mc); kc * mc];
    let mut alloc = shape(&x)?;
    let mut f = problem.objective(&alloc);
    let mut g = flat(problem.gradient(&alloc));
    let mut step = T::one();
    let (c1, half) = (T::lit(1e-4), T::lit(0.5));
    let stall = T::lit(1e-9);
    let mut quiet = 0;
    for _ in 0..200_000 {
        if p_t == T::zero() {
            break;
        }
        let mut s = step;
        let mut accepted = None;
        for _ in 0..100 {
            let trial: Vec<T> = x.iter().zip(&g).map(|(a, b)| *a + s * *b).collect();
            let trial = project_simplex(&trial, p_t);
            let dir: T = trial.iter().zip(&x).zip(&g).map(|((t, a), b)| (*t - *a) * *b).sum();
            let ta = shape(&trial)?;
            let ft = problem.objective(&ta);
            if ft >= f + c1 * dir {
                accepted = Some((trial, ta, ft));
                break;
            }
            s *= half;
        }
        let Some((nx, na, nf)) = accepted else { break };
        let ng = flat(problem.gradient(&na));
        // Barzilai-Borwein step for the next iteration.
        let (mut sy, mut ss) = (T::zero(), T::zero());
        for i in 0..x.len() {
            let dx = nx[i] - x[i];
            let dg = ng[i] - g[i];
            ss += dx * dx;
            sy -= dx * dg;
        }
        step = if sy > T::zero() {
            (ss / sy).min(T::lit(1e12))
        } else {
            s * T::lit(2.0)
        };
        let gain = nf - f;
        x = nx;
        alloc = na;
        f = nf;
        g = ng;
        if gain <= stall * f.abs().max(T::one()) * T::lit(1e-3) {
            quiet += 1;
            if quiet >= 5 {
                break;
            }
        } else {
            quiet = 0;
        }
    }
    Ok((alloc, f))
}

/// Relative gap between `df` and the central difference of `f` at `x0`.
pub fn fd_check<T: Scalar>(f: impl Fn(T) -> T, df: T, x0: T, delta: T) -> Result<T> {
    if !(delta > T::zero()) {
        return Err(invalid("delta", "must be > 0"));
    }
    let fd = (f(x0 + delta) - f(x0 - delta)) / (delta + delta);
    Ok(relative_gap(df, fd))
}

/// `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn relative_gap<T: Scalar>(a: T, b: T) -> T {
    let scale = a.abs().max(b.abs());
    if scale == T::zero() {
        T::zero()
    } else {
        (a - b).abs() / scale
    }
}

/// Compares per-user DE rates with Monte-Carlo rates under the same
/// deterministic interference floor.
pub fn de_vs_mc_report<T: Scalar>(
    stats: &ChannelStats<T>,
    alloc: &PowerAllocation<T>,
    params: &SystemParams<T>,
    n_samples: usize,
    seed: u64,
) -> Result<OracleReport<T>> {
    if n_samples < 100 {
        return Err(invalid("n_samples", "at least 100 samples required"));
    }
    let de = crate::de::de_rates(stats, alloc, params.sigma2, &crate::de::FixedPointOptions::default())?;
    let floor = T::lit(MC_RATE_FLOOR);
    let mut details = BTreeMap::new();
    let (mut se_de, mut se_mc) = (T::zero(), T::zero());
    for (k, de_k) in de.iter().enumerate() {
        let mc_k = mc_rate_approx(stats, alloc, k, params.sigma2, n_samples, seed)?;
        details.insert(format!("de_rate_{k}"), *de_k);
        details.insert(format!("mc_rate_{k}"), mc_k);
        details.insert(format!("gap_{k}"), (*de_k - mc_k).abs() / mc_k.max(floor));
        se_de += *de_k;
        se_mc += mc_k;
    }
    let gap = (se_de - se_mc).abs() / se_mc.max(floor);
    details.insert("se_de".into(), se_de);
    details.insert("se_mc".into(), se_mc);
    Ok(OracleReport {
        kind: OracleKind::DeVsMc,
        gap,
        details,
    })
}
