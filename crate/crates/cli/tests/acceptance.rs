//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any of them fails.
//!
//! `cargo test --test acceptance -- 3 7` runs only criteria 3 and 7.

use std::fs;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{ensure, Result};
use beamre::mm::Anchor;
use beamre::oracle::relative_gap;
use beamre::rates::mix_seed;
use beamre::{
    dbm_to_watt, de_vs_mc_report, grid_search_re, mc_rate_approx, mc_rate_exact, metrics, mm_solve, refsolve_inner,
    synth_coupling, ChannelStats64, CouplingMatrix, PowerAllocation64, RateModel, SolverConfig64, SurrogateProblem,
    SynthSpec, SystemParams64,
};
use beamre_cli::run::{random_start, run_sweep, solve_once};
use beamre_cli::{parse_config, ExperimentConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

type Criterion = (&'static str, fn() -> Result<Outcome>);

fn desk(m: usize, pmax_dbm: f64) -> SystemParams64 {
    let mut p = SystemParams64::reference(m, vec![2; 4]);
    p.pmax = dbm_to_watt(pmax_dbm);
    p
}

fn channel(params: &SystemParams64, seed: u64) -> Result<ChannelStats64> {
    Ok(synth_coupling(params, &SynthSpec::default(), seed)?)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `b >= a` up to a relative slack.
fn not_below(b: f64, a: f64, slack: f64) -> bool {
    b >= a - slack * a.abs().max(b.abs())
}

fn de_accuracy() -> Result<Outcome> {
    const SAMPLES: usize = 2000;
    let cfg = SolverConfig64::default();
    let gaps = |m: usize| -> Result<Vec<f64>> {
        (0..20u64)
            .map(|seed| {
                let params = desk(m, 30.0);
                let stats = channel(&params, seed)?;
                let (alloc, _) = mm_solve(&stats, &params, &cfg, None)?;
                Ok(de_vs_mc_report(&stats, &alloc, &params, SAMPLES, mix_seed(seed, 1, m as u64))?.gap)
            })
            .collect()
    };
    let g64 = gaps(64)?;
    let g8 = gaps(8)?;
    let worst = g64.iter().copied().fold(0.0, f64::max);
    let (m64, m8) = (median(g64), median(g8));
    Ok(Outcome {
        pass: worst <= 0.02 && m64 <= m8,
        detail: format!(
            "M=64 worst |DE-MC|/MC {:.3}% (<= 2%); median M=64 {:.3}% vs M=8 {:.3}%",
            100.0 * worst,
            100.0 * m64,
            100.0 * m8
        ),
    })
}

fn rate_approximation() -> Result<Outcome> {
    const SAMPLES: usize = 1000;
    let cfg = SolverConfig64::default();
    // The optimized allocation mostly avoids shared beams, so the uniform one
    // is checked too: it carries the most interference.
    let (mut worst_opt, mut worst_uni): (f64, f64) = (0.0, 0.0);
    for (i, dbm) in [0.0, 10.0, 20.0, 30.0, 40.0].into_iter().enumerate() {
        let params = desk(32, dbm);
        let stats = channel(&params, 0)?;
        let (opt, _) = mm_solve(&stats, &params, &cfg, None)?;
        let uni = PowerAllocation64::uniform(stats.users(), stats.beams(), params.pmax);
        let seed = mix_seed(0, 2, i as u64);
        for (alloc, worst) in [(&opt, &mut worst_opt), (&uni, &mut worst_uni)] {
            let (mut exact, mut approx) = (0.0, 0.0);
            for k in 0..stats.users() {
                exact += mc_rate_exact(&stats, alloc, k, params.sigma2, SAMPLES, seed)?;
                approx += mc_rate_approx(&stats, alloc, k, params.sigma2, SAMPLES, seed)?;
            }
            *worst = worst.max((exact - approx).abs() / exact);
        }
    }
    Ok(Outcome {
        pass: worst_opt <= 0.05 && worst_uni <= 0.05,
        detail: format!(
            "worst aggregate SE gap over 5 Pmax points: optimized {:.2e}, uniform {:.2e} (<= 5e-2)",
            worst_opt, worst_uni
        ),
    })
}

fn mm_convergence() -> Result<Outcome> {
    let cfg = SolverConfig64::default();
    let levels = [0.0, 10.0, 20.0, 30.0, 40.0];
    let (mut drops, mut unconverged, mut slow_low) = (0, 0, 0);
    let mut worst_drop: f64 = 0.0;
    let mut low_iters = Vec::new();
    for seed in 0..50u64 {
        let dbm = levels[seed as usize % levels.len()];
        let params = desk(32, dbm);
        let stats = channel(&params, seed)?;
        let (_, st) = mm_solve(&stats, &params, &cfg, None)?;
        let drop = st.re_trace.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max);
        worst_drop = worst_drop.max(drop);
        if drop > 1e-9 {
            drops += 1;
        }
        if !(st.converged && st.ell <= 50) {
            unconverged += 1;
        }
        if dbm <= 30.0 {
            low_iters.push(st.ell);
            if st.ell > 3 {
                slow_low += 1;
            }
        }
    }
    Ok(Outcome {
        pass: drops == 0 && unconverged == 0 && slow_low == 0,
        detail: format!(
            "{drops}/50 traces drop (worst {worst_drop:.1e}); {unconverged}/50 miss 50 iterations; \
             {slow_low}/{} low-budget runs need > 3 iterations (min {}, max {})",
            low_iters.len(),
            low_iters.iter().min().unwrap_or(&0),
            low_iters.iter().max().unwrap_or(&0)
        ),
    })
}

/// Surrogate anchored at a random feasible point.
fn random_surrogate<'a>(
    stats: &'a ChannelStats64,
    params: &SystemParams64,
    cfg: &SolverConfig64,
    seed: u64,
) -> Result<SurrogateProblem<'a, f64>> {
    let start = random_start(stats.users(), stats.beams(), params.pmax, seed);
    let anchor = Anchor::new(stats, &start, params.sigma2, cfg)?;
    Ok(anchor.surrogate(stats, params.sigma2)?)
}

fn waterfilling() -> Result<Outcome> {
    let cfg = SolverConfig64::default();
    let single = ChannelStats64::new(vec![CouplingMatrix::from_rows(&[vec![1.0, 1.0]])?])?;
    let p = SurrogateProblem::new(
        &single,
        1.0,
        vec![vec![4.0, 1.0]],
        vec![vec![0.0]],
        vec![vec![0.0, 0.0]],
    )?;
    let wf = p.waterfill(1.0, &cfg, None)?;
    let closed = [
        (wf.alloc.get(0, 0) - 0.875).abs(),
        (wf.alloc.get(0, 1) - 0.125).abs(),
        (wf.mu_star - 8.0 / 9.0).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);

    let (mut kkt, mut ref_gap): (f64, f64) = (0.0, 0.0);
    for i in 0..20u64 {
        let params = desk(32, [10.0, 20.0, 30.0, 40.0][i as usize % 4]);
        let stats = channel(&params, 100 + i)?;
        let problem = random_surrogate(&stats, &params, &cfg, mix_seed(i, 4, 0))?;
        let p_t = params.pmax * (0.05 + 0.95 * (mix_seed(i, 4, 1) as f64 / u64::MAX as f64));
        let wf = problem.waterfill(p_t, &cfg, None)?;
        kkt = kkt.max(wf.kkt_residual.max(wf.mu_star * (wf.alloc.total() - p_t).abs()));
        let (_, reference) = refsolve_inner(&problem, p_t)?;
        let ours = problem.objective(&wf.alloc);
        // Only a shortfall against the reference counts.
        if ours < reference {
            ref_gap = ref_gap.max(relative_gap(ours, reference));
        }
    }
    Ok(Outcome {
        pass: closed <= 1e-8 && kkt <= 1e-6 && ref_gap <= 1e-5,
        detail: format!(
            "closed form {closed:.1e} (<= 1e-8); KKT {kkt:.1e} (<= 1e-6); refsolve shortfall {ref_gap:.1e} (<= 1e-5)"
        ),
    })
}

fn derivative_identity() -> Result<Outcome> {
    let cfg = SolverConfig64::default();
    let params = desk(32, 40.0);
    let stats = channel(&params, 5)?;
    let start = PowerAllocation64::uniform(stats.users(), stats.beams(), params.pmax);
    let problem = Anchor::new(&stats, &start, params.sigma2, &cfg)?.surrogate(&stats, params.sigma2)?;
    let mut failures = 0;
    let mut worst_rel: f64 = 0.0;
    for i in 0..10u64 {
        let p_t = params.pmax * (0.01 + 0.99 * (mix_seed(5, 5, i) as f64 / u64::MAX as f64));
        let h = 1e-4 * p_t;
        let se = |p: f64| problem.waterfill(p, &cfg, None).map(|w| w.se_nats);
        let fd = (se(p_t + h)? - se(p_t - h)?) / (2.0 * h);
        let mu = problem.waterfill(p_t, &cfg, None)?.mu_star;
        let abs = (mu - fd).abs();
        let rel = abs / fd.abs().max(mu.abs());
        worst_rel = worst_rel.max(rel);
        if !(rel <= 1e-3 || abs <= 1e-8) {
            failures += 1;
        }
    }
    Ok(Outcome {
        pass: failures == 0,
        detail: format!("{failures}/10 points outside tolerance; worst relative mismatch {worst_rel:.1e}"),
    })
}

fn global_quality() -> Result<Outcome> {
    let cfg = SolverConfig64::default();
    // With two beams a quarter-width support is a single beam, and two users
    // on the same beam form an exactly symmetric instance; spread both users
    // over the whole array instead.
    let spec = SynthSpec {
        support_fraction: 1.0,
        ..SynthSpec::default()
    };
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let params = SystemParams64::reference(2, vec![1, 1]);
        let stats = synth_coupling(&params, &spec, seed)?;
        let (_, st) = mm_solve(&stats, &params, &cfg, None)?;
        let (_, grid) = grid_search_re(&stats, &params, 25, &cfg)?;
        worst = worst.max((grid - st.re()) / grid);
    }
    Ok(Outcome {
        pass: worst <= 1e-3,
        detail: format!(
            "worst shortfall against the 25-point grid {:.2e} (<= 1e-3)",
            worst.max(0.0)
        ),
    })
}

/// Relative slack used where the criteria say "1e-6 slack": SE and EE live on
/// scales six orders of magnitude apart, so the slack scales with the value.
const SLACK: f64 = 1e-6;

fn solve_metrics(stats: &ChannelStats64, params: &SystemParams64, cfg: &SolverConfig64) -> Result<(f64, f64, f64)> {
    let (alloc, _) = mm_solve(stats, params, cfg, None)?;
    let m = metrics(
        stats,
        &alloc,
        params,
        RateModel::DeterministicEquivalent,
        cfg.mc_samples,
        cfg.seed,
    )?;
    Ok((m.se, m.ee, alloc.total()))
}

fn beta_tradeoff() -> Result<Outcome> {
    let cfg = SolverConfig64::default();
    let betas = [0.0, 0.25, 0.5, 1.0, 2.0, 5.0];
    let mut violations = Vec::new();
    for seed in 0..3u64 {
        for dbm in [30.0, 40.0] {
            let base = desk(32, dbm);
            let stats = channel(&base, seed)?;
            let pts = betas
                .iter()
                .map(|b| {
                    solve_metrics(
                        &stats,
                        &SystemParams64 {
                            beta: *b,
                            ..base.clone()
                        },
                        &cfg,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            for (i, w) in pts.windows(2).enumerate() {
                if !not_below(w[1].0, w[0].0, SLACK) || !not_below(w[0].1, w[1].1, SLACK) {
                    violations.push(format!("seed {seed} {dbm} dBm beta {}->{}", betas[i], betas[i + 1]));
                }
            }
        }
    }
    Ok(Outcome {
        pass: violations.is_empty(),
        detail: if violations.is_empty() {
            "SE nondecreasing, EE nonincreasing over 6 betas on 6 instances".into()
        } else {
            format!("violations: {}", violations.join("; "))
        },
    })
}

fn regimes() -> Result<Outcome> {
    let cfg = SolverConfig64::default();
    let mut min_use = f64::INFINITY;
    for seed in 0..3u64 {
        for dbm in [0.0, 10.0] {
            let params = desk(32, dbm);
            let stats = channel(&params, seed)?;
            let (_, _, used) = solve_metrics(&stats, &params, &cfg)?;
            min_use = min_use.min(used / params.pmax);
        }
    }
    let mut order_bad = Vec::new();
    for seed in 0..3u64 {
        let params = desk(32, 45.0);
        let stats = channel(&params, seed)?;
        let seopt = ExperimentConfig::default_seopt_beta(&params);
        let ee_opt = solve_metrics(
            &stats,
            &SystemParams64 {
                beta: 0.0,
                ..params.clone()
            },
            &cfg,
        )?;
        let re_opt = solve_metrics(&stats, &params, &cfg)?;
        let se_opt = solve_metrics(
            &stats,
            &SystemParams64 {
                beta: seopt,
                ..params.clone()
            },
            &cfg,
        )?;
        let ok = not_below(re_opt.0, ee_opt.0, SLACK)
            && not_below(se_opt.0, re_opt.0, SLACK)
            && not_below(re_opt.1, se_opt.1, SLACK)
            && not_below(ee_opt.1, re_opt.1, SLACK);
        if !ok {
            order_bad.push(seed);
        }
    }
    Ok(Outcome {
        pass: min_use >= 0.99 && order_bad.is_empty(),
        detail: format!(
            "low budget uses >= {:.2}% of Pmax (>= 99%); high-budget ordering broken on seeds {order_bad:?}",
            100.0 * min_use
        ),
    })
}

fn multistart() -> Result<Outcome> {
    let cfg = SolverConfig64::default();
    let mut worst: f64 = 0.0;
    for (seed, dbm) in [(0u64, 30.0), (1, 40.0)] {
        let params = desk(32, dbm);
        let stats = channel(&params, seed)?;
        let (_, default) = mm_solve(&stats, &params, &cfg, None)?;
        let mut best = default.re();
        for run in 0..10u64 {
            let init = random_start(stats.users(), stats.beams(), params.pmax, mix_seed(seed, 9, run));
            let (_, st) = mm_solve(&stats, &params, &cfg, Some(&init))?;
            best = best.max(st.re());
        }
        worst = worst.max((best - default.re()) / best);
    }
    Ok(Outcome {
        pass: worst <= 0.01,
        detail: format!("worst best-minus-default gap {:.2e} (<= 1e-2)", worst),
    })
}

const DETERMINISM_CONFIG: &str = "\
M = 16
N = 2, 2, 2, 2
Pmax = 35 dBm
mc_samples = 300
starts = 3
seed = 17
";

fn determinism() -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let mut compared = 0;
    for (sweep, axis) in [
        ("pmax", "range = 0, 40\nstep = 10"),
        ("multistart", "values = 20, 40"),
        ("rate_compare", "values = 10, 30"),
    ] {
        let cfg = parse_config(&format!("{DETERMINISM_CONFIG}sweep = {sweep}\n{axis}\n"))?;
        let mut outputs = Vec::new();
        for threads in [1, 4] {
            let out = dir.path().join(format!("{sweep}_{threads}"));
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
            pool.install(|| -> Result<()> {
                run_sweep(&cfg, &out)?;
                solve_once(&cfg, &out)?;
                Ok(())
            })?;
            outputs.push(out);
        }
        for file in [
            format!("sweep_{sweep}.csv"),
            "metrics.csv".into(),
            "allocation.txt".into(),
        ] {
            let a = fs::read(outputs[0].join(&file))?;
            let b = fs::read(outputs[1].join(&file))?;
            ensure!(a == b, "{file} differs between 1 and 4 threads");
            compared += 1;
        }
    }
    // Two runs with the same pool size.
    let cfg = parse_config(&format!("{DETERMINISM_CONFIG}sweep = pmax\nvalues = 30\n"))?;
    let (a, b) = (dir.path().join("again_a"), dir.path().join("again_b"));
    run_sweep(&cfg, &a)?;
    run_sweep(&cfg, &b)?;
    ensure!(
        fs::read(a.join("sweep_pmax.csv"))? == fs::read(b.join("sweep_pmax.csv"))?,
        "repeated run differs"
    );
    Ok(Outcome {
        pass: true,
        detail: format!("{} output files byte-identical", compared + 1),
    })
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("de_accuracy", de_accuracy),
        ("rate_approximation", rate_approximation),
        ("mm_convergence", mm_convergence),
        ("waterfilling", waterfilling),
        ("derivative_identity", derivative_identity),
        ("global_quality", global_quality),
        ("beta_tradeoff", beta_tradeoff),
        ("regimes", regimes),
        ("multistart", multistart),
        ("determinism", determinism),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let outcome = run().unwrap_or_else(|e| Outcome {
            pass: false,
            detail: format!("error: {e:#}"),
        });
        if !outcome.pass {
            failed += 1;
        }
        println!(
            "{} {id:>2} {name:<20} {} [{:.1} s]",
            if outcome.pass { "PASS" } else { "FAIL" },
            outcome.detail,
            t.elapsed().as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
