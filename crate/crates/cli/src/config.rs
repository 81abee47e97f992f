//! Flat `key = value` experiment configuration.
//!
//! ```text
//! # system
//! M = 32
//! N = 2, 2, 2, 2
//! Pmax = 30 dBm
//! beta = 0.5
//! # sweep
//! sweep = pmax
//! range = 0, 40
//! step = 10
//! ```
//!
//! Power-valued keys take a `dBm` or `W` suffix; a bare number is watts.

use std::fmt::Write as _;
use std::path::PathBuf;

use beamre::{dbm_to_watt, SolverConfig64, SynthSpec, SystemParams64};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("missing required key `{0}`")]
    MissingKey(&'static str),
    #[error("line {line}: bad value for `{key}`: {msg}")]
    BadValue { line: usize, key: String, msg: String },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: key `{key}` given twice")]
    Duplicate { line: usize, key: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    Pmax,
    Beta,
    Tradeoff,
    Convergence,
    Multistart,
    RateCompare,
}

impl SweepKind {
    pub const ALL: [SweepKind; 6] = [
        SweepKind::Pmax,
        SweepKind::Beta,
        SweepKind::Tradeoff,
        SweepKind::Convergence,
        SweepKind::Multistart,
        SweepKind::RateCompare,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Pmax => "pmax",
            SweepKind::Beta => "beta",
            SweepKind::Tradeoff => "tradeoff",
            SweepKind::Convergence => "convergence",
            SweepKind::Multistart => "multistart",
            SweepKind::RateCompare => "rate_compare",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Whether the swept axis is a power budget in dBm (otherwise beta).
    pub fn axis_is_pmax(self) -> bool {
        self != SweepKind::Beta
    }
}

/// Swept values: an inclusive `start..=stop` range with a step, or a list.
#[derive(Debug, Clone, PartialEq)]
pub enum Axis {
    Range { start: f64, stop: f64, step: f64 },
    List(Vec<f64>),
}

impl Axis {
    pub fn values(&self) -> Vec<f64> {
        match self {
            Axis::List(v) => v.clone(),
            Axis::Range { start, stop, step } => {
                let n = ((stop - start) / step + 1e-9).floor() as usize;
                (0..=n).map(|i| start + i as f64 * step).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub kind: SweepKind,
    pub axis: Axis,
    /// Random initializations per point (multistart only).
    pub starts: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ChannelSource {
    Synth(SynthSpec<f64>),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub params: SystemParams64,
    pub channel: ChannelSource,
    pub solver: SolverConfig64,
    pub sweep: Option<SweepSpec>,
    pub output: PathBuf,
    pub seed: u64,
    /// Weighting factor standing in for beta -> infinity.
    pub seopt_beta: f64,
}

impl ExperimentConfig {
    /// Default SEOpt weight: `1e6 * P_tot / W`.
    pub fn default_seopt_beta(params: &SystemParams64) -> f64 {
        1e6 * beamre::budget_power(params) / params.bandwidth
    }
}

const KEYS: &[&str] = &[
    "M",
    "K",
    "N",
    "W",
    "sigma2",
    "xi",
    "Pc",
    "Ps",
    "Pmax",
    "beta",
    "channel",
    "pathloss_db",
    "support_fraction",
    "decay",
    "jitter",
    "eps1",
    "eps2",
    "eps3",
    "eps4",
    "eps5",
    "step_scale",
    "max_mm_iter",
    "max_fp_iter",
    "max_newton_iter",
    "max_bisect_iter",
    "max_sweep_iter",
    "max_pt_iter",
    "mc_samples",
    "sweep",
    "range",
    "step",
    "values",
    "starts",
    "seopt_beta",
    "out",
    "seed",
];

struct Entry<'a> {
    line: usize,
    key: &'a str,
    value: &'a str,
}

impl Entry<'_> {
    fn bad(&self, msg: impl Into<String>) -> ConfigError {
        ConfigError::BadValue {
            line: self.line,
            key: self.key.to_string(),
            msg: msg.into(),
        }
    }

    fn real(&self) -> Result<f64, ConfigError> {
        let v: f64 = self
            .value
            .parse()
            .map_err(|_| self.bad(format!("`{}` is not a number", self.value)))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.bad("must be finite"))
        }
    }

    fn positive(&self) -> Result<f64, ConfigError> {
        let v = self.real()?;
        if v > 0.0 {
            Ok(v)
        } else {
            Err(self.bad("must be > 0"))
        }
    }

    fn count(&self) -> Result<usize, ConfigError> {
        self.value
            .parse()
            .map_err(|_| self.bad(format!("`{}` is not a non-negative integer", self.value)))
    }

    fn at_least_one(&self) -> Result<usize, ConfigError> {
        match self.count()? {
            0 => Err(self.bad("must be at least 1")),
            v => Ok(v),
        }
    }

    fn list(&self) -> Result<Vec<f64>, ConfigError> {
        self.value
            .split(',')
            .map(|s| {
                let s = s.trim();
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| self.bad(format!("`{s}` is not a finite number")))
            })
            .collect()
    }

    /// Power in watts from `<x> dBm`, `<x> W` or a bare `<x>`.
    fn power(&self) -> Result<f64, ConfigError> {
        let v = self.value;
        let (num, dbm) = if let Some(x) = v.strip_suffix("dBm") {
            (x.trim(), true)
        } else if let Some(x) = v.strip_suffix('W') {
            (x.trim(), false)
        } else {
            (v, false)
        };
        let x: f64 = num.parse().map_err(|_| self.bad(format!("`{v}` is not a power")))?;
        if !x.is_finite() {
            return Err(self.bad("must be finite"));
        }
        let w = if dbm { dbm_to_watt(x) } else { x };
        if w < 0.0 {
            return Err(self.bad("power must be >= 0"));
        }
        Ok(w)
    }
}

/// Parses and validates a config, filling defaults for optional keys.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut entries: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or(ConfigError::Syntax { line })?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(ConfigError::Syntax { line });
        }
        if !KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey {
                line,
                key: key.to_string(),
            });
        }
        if entries.iter().any(|e| e.key == key) {
            return Err(ConfigError::Duplicate {
                line,
                key: key.to_string(),
            });
        }
        entries.push(Entry { line, key, value });
    }
    let get = |k: &str| entries.iter().find(|e| e.key == k);

    let m = get("M").ok_or(ConfigError::MissingKey("M"))?.at_least_one()?;
    let n_entry = get("N").ok_or(ConfigError::MissingKey("N"))?;
    let mut n = Vec::new();
    for s in n_entry.value.split(',') {
        let v: usize = s
            .trim()
            .parse()
            .map_err(|_| n_entry.bad(format!("`{}` is not a positive integer", s.trim())))?;
        if v == 0 {
            return Err(n_entry.bad("antenna counts must be at least 1"));
        }
        n.push(v);
    }
    if let Some(e) = get("K") {
        let k = e.at_least_one()?;
        if n.len() == 1 {
            n = vec![n[0]; k];
        } else if n.len() != k {
            return Err(e.bad(format!("K = {k} but N lists {} users", n.len())));
        }
    }

    let mut params = SystemParams64::reference(m, n);
    if let Some(e) = get("W") {
        params.bandwidth = e.positive()?;
    }
    if let Some(e) = get("sigma2") {
        params.sigma2 = e.power()?;
    }
    if let Some(e) = get("xi") {
        params.xi = e.positive()?;
    }
    if let Some(e) = get("Pc") {
        params.pc = e.power()?;
    }
    if let Some(e) = get("Ps") {
        params.ps = e.power()?;
    }
    if let Some(e) = get("Pmax") {
        params.pmax = e.power()?;
    }
    if let Some(e) = get("beta") {
        params.beta = e.real()?;
        if params.beta < 0.0 {
            return Err(e.bad("must be >= 0"));
        }
    }
    params.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;

    let mut synth = SynthSpec::default();
    if let Some(e) = get("pathloss_db") {
        synth.pathloss_db = e.real()?;
    }
    if let Some(e) = get("support_fraction") {
        synth.support_fraction = e.real()?;
        if !(synth.support_fraction > 0.0 && synth.support_fraction <= 1.0) {
            return Err(e.bad("must lie in (0, 1]"));
        }
    }
    if let Some(e) = get("decay") {
        synth.decay = e.real()?;
        if synth.decay < 0.0 {
            return Err(e.bad("must be >= 0"));
        }
    }
    if let Some(e) = get("jitter") {
        synth.jitter = match e.value {
            "true" => true,
            "false" => false,
            _ => return Err(e.bad("expected `true` or `false`")),
        };
    }
    let channel = match get("channel").map(|e| e.value) {
        None | Some("synth") => ChannelSource::Synth(synth),
        Some(path) => ChannelSource::File(PathBuf::from(path)),
    };

    let mut solver = SolverConfig64::default();
    for (key, slot) in [
        ("eps1", &mut solver.eps1),
        ("eps2", &mut solver.eps2),
        ("eps3", &mut solver.eps3),
        ("eps4", &mut solver.eps4),
        ("eps5", &mut solver.eps5),
        ("step_scale", &mut solver.step_scale),
    ] {
        if let Some(e) = get(key) {
            *slot = e.positive()?;
        }
    }
    for (key, slot) in [
        ("max_mm_iter", &mut solver.max_mm_iter),
        ("max_fp_iter", &mut solver.max_fp_iter),
        ("max_newton_iter", &mut solver.max_newton_iter),
        ("max_bisect_iter", &mut solver.max_bisect_iter),
        ("max_sweep_iter", &mut solver.max_sweep_iter),
        ("max_pt_iter", &mut solver.max_pt_iter),
        ("mc_samples", &mut solver.mc_samples),
    ] {
        if let Some(e) = get(key) {
            *slot = e.at_least_one()?;
        }
    }
    let seed = match get("seed") {
        Some(e) => e.value.parse().map_err(|_| e.bad("expected a non-negative integer"))?,
        None => 1,
    };
    solver.seed = seed;

    let sweep = match get("sweep") {
        None => {
            for k in ["range", "step", "values", "starts"] {
                if let Some(e) = get(k) {
                    return Err(e.bad("only meaningful together with `sweep`"));
                }
            }
            None
        }
        Some(e) => {
            let kind = SweepKind::parse(e.value).ok_or_else(|| {
                let names: Vec<_> = SweepKind::ALL.iter().map(|k| k.name()).collect();
                e.bad(format!("expected one of {}", names.join(", ")))
            })?;
            let axis = match (get("range"), get("step"), get("values")) {
                (Some(r), Some(s), None) => {
                    let ends = r.list()?;
                    if ends.len() != 2 {
                        return Err(r.bad("expected `start, stop`"));
                    }
                    if ends[1] < ends[0] {
                        return Err(r.bad("empty range: stop < start"));
                    }
                    Axis::Range {
                        start: ends[0],
                        stop: ends[1],
                        step: s.positive()?,
                    }
                }
                (None, None, Some(v)) => {
                    let vals = v.list()?;
                    if vals.is_empty() {
                        return Err(v.bad("empty list"));
                    }
                    Axis::List(vals)
                }
                (Some(_), None, None) => return Err(ConfigError::MissingKey("step")),
                (None, Some(_), None) => return Err(ConfigError::MissingKey("range")),
                (None, None, None) => return Err(ConfigError::MissingKey("range")),
                (_, _, Some(v)) => return Err(v.bad("give either `values` or `range` and `step`")),
            };
            if kind == SweepKind::Beta {
                let bad = axis.values().into_iter().any(|b| b < 0.0);
                if bad {
                    return Err(ConfigError::Invalid("beta values must be >= 0".into()));
                }
            }
            let starts = match get("starts") {
                Some(e) => e.at_least_one()?,
                None => 10,
            };
            Some(SweepSpec { kind, axis, starts })
        }
    };

    let seopt_beta = match get("seopt_beta") {
        Some(e) => e.positive()?,
        None => ExperimentConfig::default_seopt_beta(&params),
    };
    let output = PathBuf::from(get("out").map_or("results", |e| e.value));
    solver.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;

    Ok(ExperimentConfig {
        params,
        channel,
        solver,
        sweep,
        output,
        seed,
        seopt_beta,
    })
}

fn list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ")
}

/// Writes a config back as text; `parse_config(&render(c)) == c`.
pub fn render(c: &ExperimentConfig) -> String {
    let p = &c.params;
    let s = &c.solver;
    let mut out = String::new();
    let n: Vec<String> = p.n.iter().map(|v| v.to_string()).collect();
    let _ = writeln!(out, "M = {}", p.m);
    let _ = writeln!(out, "N = {}", n.join(", "));
    let _ = writeln!(out, "W = {:?}", p.bandwidth);
    let _ = writeln!(out, "sigma2 = {:?} W", p.sigma2);
    let _ = writeln!(out, "xi = {:?}", p.xi);
    let _ = writeln!(out, "Pc = {:?} W", p.pc);
    let _ = writeln!(out, "Ps = {:?} W", p.ps);
    let _ = writeln!(out, "Pmax = {:?} W", p.pmax);
    let _ = writeln!(out, "beta = {:?}", p.beta);
    match &c.channel {
        ChannelSource::Synth(sp) => {
            let _ = writeln!(out, "channel = synth");
            let _ = writeln!(out, "pathloss_db = {:?}", sp.pathloss_db);
            let _ = writeln!(out, "support_fraction = {:?}", sp.support_fraction);
            let _ = writeln!(out, "decay = {:?}", sp.decay);
            let _ = writeln!(out, "jitter = {}", sp.jitter);
        }
        ChannelSource::File(path) => {
            let _ = writeln!(out, "channel = {}", path.display());
        }
    }
    for (k, v) in [
        ("eps1", s.eps1),
        ("eps2", s.eps2),
        ("eps3", s.eps3),
        ("eps4", s.eps4),
        ("eps5", s.eps5),
        ("step_scale", s.step_scale),
    ] {
        let _ = writeln!(out, "{k} = {v:?}");
    }
    for (k, v) in [
        ("max_mm_iter", s.max_mm_iter),
        ("max_fp_iter", s.max_fp_iter),
        ("max_newton_iter", s.max_newton_iter),
        ("max_bisect_iter", s.max_bisect_iter),
        ("max_sweep_iter", s.max_sweep_iter),
        ("max_pt_iter", s.max_pt_iter),
        ("mc_samples", s.mc_samples),
    ] {
        let _ = writeln!(out, "{k} = {v}");
    }
    if let Some(sw) = &c.sweep {
        let _ = writeln!(out, "sweep = {}", sw.kind.name());
        match &sw.axis {
            Axis::Range { start, stop, step } => {
                let _ = writeln!(out, "range = {start:?}, {stop:?}");
                let _ = writeln!(out, "step = {step:?}");
            }
            Axis::List(v) => {
                let _ = writeln!(out, "values = {}", list(v));
            }
        }
        let _ = writeln!(out, "starts = {}", sw.starts);
    }
    let _ = writeln!(out, "seopt_beta = {:?}", c.seopt_beta);
    let _ = writeln!(out, "out = {}", c.output.display());
    let _ = writeln!(out, "seed = {}", c.seed);
    out
}
