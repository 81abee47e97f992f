//! Subcommand implementations: each writes its CSVs plus `manifest.json`
//! into an output directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use beamre::mm::Anchor;
use beamre::oracle::relative_gap;
use beamre::rates::mix_seed;
use beamre::{
    dbm_to_watt, de_vs_mc_report, grid_search_re, mc_rate_approx, mc_rate_exact, metrics, mm_solve, refsolve_inner,
    synth_coupling, ChannelStats64, CouplingMatrix, MMState, PowerAllocation64, RateModel, SolverConfig64,
    SurrogateProblem, SystemParams64,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::{render, ChannelSource, ExperimentConfig, SweepKind};
use crate::omega::{read_omega, write_omega};

// Seed streams, so that no two consumers share random numbers.
const STREAM_MULTISTART: u64 = 11;
const STREAM_RATES: u64 = 12;
const STREAM_VERIFY: u64 = 13;

/// Points on the grid oracle's axes in `verify`.
const VERIFY_GRID_POINTS: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Converged,
    /// The MM loop hit `max_mm_iter`.
    MaxIter,
    Failed,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Converged => "converged",
            Status::MaxIter => "max_iter",
            Status::Failed => "failed",
        }
    }
}

/// 17 significant digits.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

/// One solver run with its DE metrics; metrics are NaN when it failed.
#[derive(Debug, Clone)]
pub struct Solved {
    pub alloc: Option<PowerAllocation64>,
    pub state: Option<MMState<f64>>,
    pub re: f64,
    pub se: f64,
    pub ee: f64,
    pub status: Status,
    pub error: Option<String>,
}

impl Solved {
    fn failed(msg: String) -> Self {
        Self {
            alloc: None,
            state: None,
            re: f64::NAN,
            se: f64::NAN,
            ee: f64::NAN,
            status: Status::Failed,
            error: Some(msg),
        }
    }

    pub fn mm_iters(&self) -> Option<usize> {
        self.state.as_ref().map(|s| s.ell)
    }

    pub fn pt_used(&self) -> f64 {
        self.alloc.as_ref().map_or(f64::NAN, |a| a.total())
    }

    fn manifest(&self) -> Value {
        json!({
            "status": self.status.as_str(),
            "converged": self.status == Status::Converged,
            "mm_iters": self.mm_iters(),
            "error": self.error,
        })
    }
}

pub fn solve(
    stats: &ChannelStats64,
    params: &SystemParams64,
    solver: &SolverConfig64,
    init: Option<&PowerAllocation64>,
) -> Solved {
    let run = || -> beamre::Result<(PowerAllocation64, MMState<f64>, beamre::MetricsReport<f64>)> {
        let (alloc, state) = mm_solve(stats, params, solver, init)?;
        let m = metrics(
            stats,
            &alloc,
            params,
            RateModel::DeterministicEquivalent,
            solver.mc_samples,
            solver.seed,
        )?;
        Ok((alloc, state, m))
    };
    match run() {
        Err(e) => Solved::failed(e.to_string()),
        Ok((alloc, state, m)) => {
            let status = if !m.is_finite() {
                Status::Failed
            } else if state.converged {
                Status::Converged
            } else {
                Status::MaxIter
            };
            Solved {
                alloc: Some(alloc),
                state: Some(state),
                re: m.re,
                se: m.se,
                ee: m.ee,
                status,
                error: (status == Status::Failed).then(|| "non-finite metric".to_string()),
            }
        }
    }
}

pub fn load_channel(cfg: &ExperimentConfig) -> Result<ChannelStats64> {
    let stats = match &cfg.channel {
        ChannelSource::Synth(spec) => synth_coupling(&cfg.params, spec, cfg.seed)?,
        ChannelSource::File(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            read_omega(&text).with_context(|| format!("parsing {}", path.display()))?
        }
    };
    stats
        .check_shape(&cfg.params)
        .context("channel file does not match M and N of the config")?;
    Ok(stats)
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_manifest(out: &Path, command: &str, cfg: &ExperimentConfig, extra: Value) -> Result<()> {
    let mut m = json!({
        "tool": "beamre",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "seed": cfg.seed,
        "seopt_beta": cfg.seopt_beta,
        "config": render(cfg),
    });
    if let (Value::Object(m), Value::Object(extra)) = (&mut m, extra) {
        m.extend(extra);
    }
    let text = serde_json::to_string_pretty(&m)? + "\n";
    fs::write(out.join("manifest.json"), text)?;
    Ok(())
}

/// `gen-channel`: writes `omega.txt`.
pub fn gen_channel(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out)?;
    let stats = load_channel(cfg)?;
    let path = out.join("omega.txt");
    fs::write(&path, write_omega(&stats))?;
    Ok(path)
}

/// Header of `metrics.csv` written by `solve`.
pub const METRICS_HEADER: [&str; 9] = [
    "se_de",
    "ee_de",
    "re_de",
    "se_mc",
    "ee_mc",
    "re_mc",
    "pt_used_w",
    "mm_iters",
    "status",
];

/// `solve`: writes `allocation.txt` (K rows of M watts) and `metrics.csv`.
pub fn solve_once(cfg: &ExperimentConfig, out: &Path) -> Result<Solved> {
    fs::create_dir_all(out)?;
    let stats = load_channel(cfg)?;
    let s = solve(&stats, &cfg.params, &cfg.solver, None);
    let mut status = s.status;
    let (mut se_mc, mut ee_mc, mut re_mc) = (f64::NAN, f64::NAN, f64::NAN);
    let mut alloc_text = String::new();
    if let Some(alloc) = &s.alloc {
        for row in alloc.rows() {
            let cells: Vec<String> = row.iter().map(|v| num(*v)).collect();
            alloc_text.push_str(&cells.join(" "));
            alloc_text.push('\n');
        }
        match metrics(
            &stats,
            alloc,
            &cfg.params,
            RateModel::MonteCarloExact,
            cfg.solver.mc_samples,
            cfg.solver.seed,
        ) {
            Ok(m) if m.is_finite() => (se_mc, ee_mc, re_mc) = (m.se, m.ee, m.re),
            _ => status = Status::Failed,
        }
    }
    fs::write(out.join("allocation.txt"), alloc_text)?;
    let row = vec![
        num(s.se),
        num(s.ee),
        num(s.re),
        num(se_mc),
        num(ee_mc),
        num(re_mc),
        num(s.pt_used()),
        s.mm_iters().map_or("NaN".into(), |v| v.to_string()),
        status.as_str().to_string(),
    ];
    write_csv(&out.join("metrics.csv"), &METRICS_HEADER, &[row])?;
    write_manifest(out, "solve", cfg, json!({ "points": [s.manifest()] }))?;
    Ok(Solved { status, ..s })
}

pub fn sweep_header(kind: SweepKind) -> &'static [&'static str] {
    match kind {
        SweepKind::Pmax => &["pmax_dbm", "re", "se", "ee", "pt_used_w", "mm_iters", "status"],
        SweepKind::Beta => &["beta", "re", "se", "ee", "status"],
        SweepKind::Tradeoff => &["pmax_dbm", "se", "ee", "method", "status"],
        SweepKind::Convergence => &["pmax_dbm", "mm_iter", "re", "status"],
        SweepKind::Multistart => &["pmax_dbm", "run", "re", "gap_rel", "status"],
        SweepKind::RateCompare => &["pmax_dbm", "user", "rate_exact", "rate_approx", "n_samples", "status"],
    }
}

/// Summary of a finished sweep.
#[derive(Debug, Clone)]
pub struct SweepReport {
    pub csv: PathBuf,
    pub rows: usize,
    pub failed: usize,
}

/// Random feasible start: uniform random beam weights scaled to a random
/// fraction of `pmax`.
pub fn random_start(users: usize, beams: usize, pmax: f64, seed: u64) -> PowerAllocation64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<Vec<f64>> = (0..users)
        .map(|_| (0..beams).map(|_| rng.random::<f64>()).collect())
        .collect();
    let total: f64 = w.iter().flatten().sum();
    let budget = pmax * rng.random_range(0.1..=1.0);
    let scale = if total > 0.0 { budget / total } else { 0.0 };
    PowerAllocation64::new(
        w.into_iter()
            .map(|r| r.into_iter().map(|v| v * scale).collect())
            .collect(),
    )
    .expect("non-negative weights")
}

/// Output of one sweep point: CSV rows plus manifest entries.
type PointRows = (Vec<Vec<String>>, Vec<Value>);

fn sweep_point(
    kind: SweepKind,
    idx: usize,
    x: f64,
    cfg: &ExperimentConfig,
    stats: &ChannelStats64,
    starts: usize,
) -> PointRows {
    let mut params = cfg.params.clone();
    if kind.axis_is_pmax() {
        params.pmax = dbm_to_watt(x);
    } else {
        params.beta = x;
    }
    let solver = &cfg.solver;
    let tag = |mut v: Value| {
        v["x"] = json!(x);
        v
    };
    match kind {
        SweepKind::Pmax => {
            let s = solve(stats, &params, solver, None);
            let row = vec![
                num(x),
                num(s.re),
                num(s.se),
                num(s.ee),
                num(s.pt_used()),
                s.mm_iters().map_or("NaN".into(), |v| v.to_string()),
                s.status.as_str().into(),
            ];
            (vec![row], vec![tag(s.manifest())])
        }
        SweepKind::Beta => {
            let s = solve(stats, &params, solver, None);
            let row = vec![num(x), num(s.re), num(s.se), num(s.ee), s.status.as_str().into()];
            (vec![row], vec![tag(s.manifest())])
        }
        SweepKind::Tradeoff => {
            let methods = [("REOpt", params.beta), ("EEOpt", 0.0), ("SEOpt", cfg.seopt_beta)];
            let solved: Vec<_> = methods
                .par_iter()
                .map(|(name, beta)| {
                    let p = SystemParams64 {
                        beta: *beta,
                        ..params.clone()
                    };
                    (*name, solve(stats, &p, solver, None))
                })
                .collect();
            let rows = solved
                .iter()
                .map(|(name, s)| vec![num(x), num(s.se), num(s.ee), name.to_string(), s.status.as_str().into()])
                .collect();
            let man = solved
                .iter()
                .map(|(name, s)| {
                    let mut v = tag(s.manifest());
                    v["method"] = json!(name);
                    v
                })
                .collect();
            (rows, man)
        }
        SweepKind::Convergence => {
            let s = solve(stats, &params, solver, None);
            let status = s.status.as_str().to_string();
            let rows = match &s.state {
                Some(st) => st
                    .re_trace
                    .iter()
                    .enumerate()
                    .map(|(i, re)| vec![num(x), i.to_string(), num(*re), status.clone()])
                    .collect(),
                None => vec![vec![num(x), "0".into(), num(f64::NAN), status]],
            };
            (rows, vec![tag(s.manifest())])
        }
        SweepKind::Multistart => {
            let (kc, mc) = (stats.users(), stats.beams());
            let runs: Vec<Solved> = (0..=starts)
                .into_par_iter()
                .map(|run| {
                    if run == 0 {
                        solve(stats, &params, solver, None)
                    } else {
                        let seed = mix_seed(cfg.seed, STREAM_MULTISTART, (idx * (starts + 1) + run) as u64);
                        let init = random_start(kc, mc, params.pmax, seed);
                        solve(stats, &params, solver, Some(&init))
                    }
                })
                .collect();
            let best = runs
                .iter()
                .map(|s| s.re)
                .filter(|v| v.is_finite())
                .fold(f64::NAN, f64::max);
            let rows = runs
                .iter()
                .enumerate()
                .map(|(run, s)| {
                    let gap = (best - s.re) / best;
                    vec![num(x), run.to_string(), num(s.re), num(gap), s.status.as_str().into()]
                })
                .collect();
            let man = runs
                .iter()
                .enumerate()
                .map(|(run, s)| {
                    let mut v = tag(s.manifest());
                    v["run"] = json!(run);
                    v
                })
                .collect();
            (rows, man)
        }
        SweepKind::RateCompare => {
            let s = solve(stats, &params, solver, None);
            let n = solver.mc_samples;
            let seed = mix_seed(cfg.seed, STREAM_RATES, idx as u64);
            let mut rows = Vec::new();
            for k in 0..stats.users() {
                let (exact, approx, status) = match &s.alloc {
                    None => (f64::NAN, f64::NAN, Status::Failed),
                    Some(a) => {
                        let e = mc_rate_exact(stats, a, k, params.sigma2, n, seed);
                        let p = mc_rate_approx(stats, a, k, params.sigma2, n, seed);
                        match (e, p) {
                            (Ok(e), Ok(p)) if e.is_finite() && p.is_finite() => (e, p, s.status),
                            _ => (f64::NAN, f64::NAN, Status::Failed),
                        }
                    }
                };
                rows.push(vec![
                    num(x),
                    k.to_string(),
                    num(exact),
                    num(approx),
                    n.to_string(),
                    status.as_str().into(),
                ]);
            }
            (rows, vec![tag(s.manifest())])
        }
    }
}

/// `sweep`: writes `sweep_<kind>.csv`. Points run in parallel; rows are
/// written in sweep order.
pub fn run_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<SweepReport> {
    let Some(sw) = &cfg.sweep else {
        bail!("config has no `sweep` key");
    };
    fs::create_dir_all(out)?;
    let stats = load_channel(cfg)?;
    let xs = sw.axis.values();
    let points: Vec<PointRows> = xs
        .par_iter()
        .enumerate()
        .map(|(i, x)| sweep_point(sw.kind, i, *x, cfg, &stats, sw.starts))
        .collect();
    let (mut rows, mut man) = (Vec::new(), Vec::new());
    for (r, m) in points {
        rows.extend(r);
        man.extend(m);
    }
    let status_col = sweep_header(sw.kind).len() - 1;
    let failed = rows.iter().filter(|r| r[status_col] == Status::Failed.as_str()).count();
    let csv = out.join(format!("sweep_{}.csv", sw.kind.name()));
    write_csv(&csv, sweep_header(sw.kind), &rows)?;
    write_manifest(out, "sweep", cfg, json!({ "sweep": sw.kind.name(), "points": man }))?;
    Ok(SweepReport {
        csv,
        rows: rows.len(),
        failed,
    })
}

/// One oracle comparison of `verify`.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub property: String,
    pub kind: &'static str,
    pub gap: f64,
    pub bound: f64,
    pub note: Option<String>,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.gap <= self.bound
    }

    fn new(property: &str, kind: &'static str, gap: f64, bound: f64) -> Self {
        Self {
            property: property.into(),
            kind,
            gap,
            bound,
            note: None,
        }
    }

    fn from_result(property: &str, kind: &'static str, bound: f64, r: Result<f64>) -> Self {
        match r {
            Ok(gap) => Self::new(property, kind, gap, bound),
            Err(e) => Self {
                note: Some(format!("{e:#}")),
                ..Self::new(property, kind, f64::NAN, bound)
            },
        }
    }
}

pub const VERIFY_HEADER: [&str; 5] = ["property", "kind", "gap", "bound", "status"];

fn check_closed_form(solver: &SolverConfig64) -> Result<f64> {
    let stats = ChannelStats64::new(vec![CouplingMatrix::from_rows(&[vec![1.0, 1.0]])?])?;
    let p = SurrogateProblem::new(&stats, 1.0, vec![vec![4.0, 1.0]], vec![vec![0.0]], vec![vec![0.0, 0.0]])?;
    let wf = p.waterfill(1.0, solver, None)?;
    let gaps = [
        (wf.alloc.get(0, 0) - 0.875).abs(),
        (wf.alloc.get(0, 1) - 0.125).abs(),
        (wf.mu_star - 8.0 / 9.0).abs(),
    ];
    Ok(gaps.into_iter().fold(0.0, f64::max))
}

fn check_grid(cfg: &ExperimentConfig) -> Result<f64> {
    let params = SystemParams64 {
        m: 2,
        n: vec![1, 1],
        ..cfg.params.clone()
    };
    // A narrower support would collapse to one beam per user at M = 2.
    let spec = match &cfg.channel {
        ChannelSource::Synth(s) => beamre::SynthSpec {
            support_fraction: 1.0,
            ..*s
        },
        ChannelSource::File(_) => beamre::SynthSpec {
            support_fraction: 1.0,
            ..Default::default()
        },
    };
    let stats = synth_coupling(&params, &spec, mix_seed(cfg.seed, STREAM_VERIFY, 0))?;
    let (_, st) = mm_solve(&stats, &params, &cfg.solver, None)?;
    let (_, grid) = grid_search_re(&stats, &params, VERIFY_GRID_POINTS, &cfg.solver)?;
    Ok(((grid - st.re()) / grid).max(0.0))
}

/// Surrogate at the uniform full-budget point of the configured instance.
fn anchor_problem<'a>(
    stats: &'a ChannelStats64,
    params: &SystemParams64,
    solver: &SolverConfig64,
) -> Result<SurrogateProblem<'a, f64>> {
    let start = PowerAllocation64::uniform(stats.users(), stats.beams(), params.pmax);
    let anchor = Anchor::new(stats, &start, params.sigma2, solver)?;
    Ok(anchor.surrogate(stats, params.sigma2)?)
}

fn check_refsolve(problem: &SurrogateProblem<f64>, p_t: f64, solver: &SolverConfig64) -> Result<f64> {
    let wf = problem.waterfill(p_t, solver, None)?;
    let (_, reference) = refsolve_inner(problem, p_t)?;
    let ours = problem.objective(&wf.alloc);
    Ok(relative_gap(ours, reference))
}

fn check_kkt(problem: &SurrogateProblem<f64>, p_t: f64, solver: &SolverConfig64) -> Result<f64> {
    let wf = problem.waterfill(p_t, solver, None)?;
    let slack = wf.mu_star * (wf.alloc.total() - p_t).abs();
    Ok(wf.kkt_residual.max(slack))
}

/// Relative mismatch of `mu*` against a central difference of the inner
/// optimum in `P_T`, floored at an absolute 1e-8.
fn check_mu_fd(problem: &SurrogateProblem<f64>, p_t: f64, solver: &SolverConfig64) -> Result<f64> {
    let h = 1e-4 * p_t;
    let se = |p: f64| problem.waterfill(p, solver, None).map(|w| w.se_nats);
    let fd = (se(p_t + h)? - se(p_t - h)?) / (2.0 * h);
    let mu = problem.waterfill(p_t, solver, None)?.mu_star;
    Ok((mu - fd).abs() / fd.abs().max(mu.abs()).max(1e-5))
}

fn check_re_derivative_fd(
    problem: &SurrogateProblem<f64>,
    params: &SystemParams64,
    p_t: f64,
    solver: &SolverConfig64,
) -> Result<f64> {
    let h = 1e-4 * p_t;
    let re = |p: f64| problem.re_at(p, params, solver).map(|(re, _)| re);
    let fd = (re(p_t + h)? - re(p_t - h)?) / (2.0 * h);
    let wf = problem.waterfill(p_t, solver, None)?;
    let analytic = beamre::scalar::nats_to_bits(beamre::re_derivative(p_t, wf.se_nats, wf.mu_star, params));
    // The 1e-5 floor turns the bound into an absolute 1e-8 near a stationary point.
    Ok((analytic - fd).abs() / fd.abs().max(analytic.abs()).max(1e-5))
}

fn check_de_vs_mc(stats: &ChannelStats64, cfg: &ExperimentConfig) -> Result<f64> {
    let (alloc, _) = mm_solve(stats, &cfg.params, &cfg.solver, None)?;
    let n = cfg.solver.mc_samples.max(100);
    Ok(de_vs_mc_report(stats, &alloc, &cfg.params, n, mix_seed(cfg.seed, STREAM_VERIFY, 1))?.gap)
}

/// Runs every oracle suite against the configured instance.
pub fn verify_checks(cfg: &ExperimentConfig) -> Result<Vec<Check>> {
    let stats = load_channel(cfg)?;
    let solver = &cfg.solver;
    let params = &cfg.params;
    let mut checks = vec![
        Check::from_result("closed_form_waterfill", "closed_form", 1e-8, check_closed_form(solver)),
        Check::from_result("mm_vs_grid_k2_m2", "grid", 1e-3, check_grid(cfg)),
    ];
    let problem = anchor_problem(&stats, params, solver);
    let p_t = 0.5 * params.pmax;
    match &problem {
        Ok(p) => {
            checks.push(Check::from_result(
                "waterfill_vs_refsolve",
                "ref_solver",
                1e-5,
                check_refsolve(p, p_t, solver),
            ));
            checks.push(Check::from_result(
                "kkt_residual",
                "kkt",
                1e-6,
                check_kkt(p, p_t, solver),
            ));
            checks.push(Check::from_result(
                "mu_star_vs_fd",
                "fd",
                1e-3,
                check_mu_fd(p, p_t, solver),
            ));
            checks.push(Check::from_result(
                "re_derivative_vs_fd",
                "fd",
                1e-3,
                check_re_derivative_fd(p, params, p_t, solver),
            ));
        }
        Err(e) => {
            for (prop, kind, bound) in [
                ("waterfill_vs_refsolve", "ref_solver", 1e-5),
                ("kkt_residual", "kkt", 1e-6),
                ("mu_star_vs_fd", "fd", 1e-3),
                ("re_derivative_vs_fd", "fd", 1e-3),
            ] {
                checks.push(Check::from_result(prop, kind, bound, Err(anyhow::anyhow!("{e:#}"))));
            }
        }
    }
    checks.push(Check::from_result(
        "de_vs_mc",
        "de_vs_mc",
        0.02,
        check_de_vs_mc(&stats, cfg),
    ));
    Ok(checks)
}

/// `verify`: writes `verify.csv` with one pass/fail row per property.
pub fn verify(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<Check>> {
    fs::create_dir_all(out)?;
    let checks = verify_checks(cfg)?;
    let rows: Vec<Vec<String>> = checks
        .iter()
        .map(|c| {
            vec![
                c.property.clone(),
                c.kind.to_string(),
                num(c.gap),
                num(c.bound),
                if c.passed() { "pass" } else { "fail" }.to_string(),
            ]
        })
        .collect();
    write_csv(&out.join("verify.csv"), &VERIFY_HEADER, &rows)?;
    let man: Vec<Value> = checks
        .iter()
        .map(|c| json!({ "property": c.property, "passed": c.passed(), "note": c.note }))
        .collect();
    write_manifest(out, "verify", cfg, json!({ "checks": man }))?;
    Ok(checks)
}
