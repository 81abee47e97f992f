//! System parameters, statistical channel description, power-consumption model,
//! and a seeded synthetic generator for eigenmode coupling matrices.
//!
//! Everything here works in linear units (watts, linear gains). dBm only shows
//! up in [`dbm_to_watt`] / [`watt_to_dbm`], which the config layer calls.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// Converts a power in dBm to watts.
pub fn dbm_to_watt<T: Scalar>(dbm: T) -> T {
    T::lit(10.0).powf((dbm - T::lit(30.0)) / T::lit(10.0))
}

/// Converts a power in watts to dBm.
pub fn watt_to_dbm<T: Scalar>(watt: T) -> T {
    T::lit(10.0) * watt.log10() + T::lit(30.0)
}

/// Converts a gain in dB to a linear gain.
pub fn db_to_linear<T: Scalar>(db: T) -> T {
    T::lit(10.0).powf(db / T::lit(10.0))
}

/// Physical and economic constants of one downlink cell.
///
/// The number of users is `n.len()`; `n[k]` is the receive-antenna count of
/// user `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemParams<T> {
    /// BS antenna count.
    pub m: usize,
    /// Receive antennas per user.
    pub n: Vec<usize>,
    /// Bandwidth in Hz.
    pub bandwidth: T,
    /// Noise power in watts.
    pub sigma2: T,
    /// Amplifier inefficiency.
    pub xi: T,
    /// Dynamic power per antenna, watts.
    pub pc: T,
    /// Static power, watts.
    pub ps: T,
    /// Transmit power budget, watts.
    pub pmax: T,
    /// EE/SE weighting factor.
    pub beta: T,
}

impl<T: Scalar> SystemParams<T> {
    /// Parameters of a suburban macro-cell setup for the given array
    /// sizes: W = 10 MHz, sigma2 = -105 dBm, xi = 5, Pc = 30 dBm, Ps = 40 dBm,
    /// Pmax = 30 dBm, beta = 0.5.
    pub fn reference(m: usize, n: Vec<usize>) -> Self {
        Self {
            m,
            n,
            bandwidth: T::lit(10e6),
            sigma2: dbm_to_watt(T::lit(-105.0)),
            xi: T::lit(5.0),
            pc: dbm_to_watt(T::lit(30.0)),
            ps: dbm_to_watt(T::lit(40.0)),
            pmax: dbm_to_watt(T::lit(30.0)),
            beta: T::lit(0.5),
        }
    }

    pub fn users(&self) -> usize {
        self.n.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(invalid("M", "must be at least 1"));
        }
        if self.n.is_empty() {
            return Err(invalid("K", "must be at least 1"));
        }
        if let Some(k) = self.n.iter().position(|&nk| nk == 0) {
            return Err(invalid("N", format!("N[{k}] must be at least 1")));
        }
        let positive = [
            ("W", self.bandwidth),
            ("sigma2", self.sigma2),
            ("xi", self.xi),
            ("Pc", self.pc),
            ("Ps", self.ps),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > T::zero()) {
                return Err(invalid(name, format!("must be finite and > 0, got {v}")));
            }
        }
        if !(self.pmax.is_finite() && self.pmax >= T::zero()) {
            return Err(invalid("Pmax", format!("must be finite and >= 0, got {}", self.pmax)));
        }
        if !(self.beta.is_finite() && self.beta >= T::zero()) {
            return Err(invalid("beta", format!("must be finite and >= 0, got {}", self.beta)));
        }
        Ok(())
    }

    /// Circuit power `M Pc + Ps`.
    pub fn circuit_power(&self) -> T {
        T::from_usize_lossy(self.m) * self.pc + self.ps
    }

    /// Power consumption for a given total transmit power.
    pub fn consumed_power(&self, transmit: T) -> T {
        self.xi * transmit + self.circuit_power()
    }
}

/// Dense row-major nonnegative matrix of mean beam-domain power gains
/// (one receive eigen-direction per row, one transmit beam per column).
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> CouplingMatrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "coupling matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && **v >= T::zero())) {
            return Err(invalid("omega", format!("entries must be finite and >= 0, got {v}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged coupling matrix rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, n: usize, m: usize) -> T {
        self.data[n * self.cols + m]
    }

    #[inline]
    pub fn row(&self, n: usize) -> &[T] {
        &self.data[n * self.cols..(n + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| *v == T::zero())
    }

    fn scale(&mut self, c: T) {
        for v in &mut self.data {
            *v *= c;
        }
    }
}

/// Statistical CSI: one eigenmode coupling matrix per user.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats<T> {
    omega: Vec<CouplingMatrix<T>>,
}

impl<T: Scalar> ChannelStats<T> {
    /// All matrices must share the same column count (the BS antenna count).
    pub fn new(omega: Vec<CouplingMatrix<T>>) -> Result<Self> {
        if omega.is_empty() {
            return Err(invalid("omega", "at least one user required"));
        }
        let m = omega[0].cols();
        if m == 0 {
            return Err(Error::Shape("coupling matrices need at least one column".into()));
        }
        for (k, w) in omega.iter().enumerate() {
            if w.cols() != m || w.rows() == 0 {
                return Err(Error::Shape(format!(
                    "omega[{k}] is {}x{}, expected N_k x {m} with N_k >= 1",
                    w.rows(),
                    w.cols()
                )));
            }
        }
        Ok(Self { omega })
    }

    pub fn zeros(m: usize, n: &[usize]) -> Self {
        Self {
            omega: n.iter().map(|&nk| CouplingMatrix::zeros(nk, m)).collect(),
        }
    }

    #[inline]
    pub fn users(&self) -> usize {
        self.omega.len()
    }

    #[inline]
    pub fn beams(&self) -> usize {
        self.omega[0].cols()
    }

    #[inline]
    pub fn omega(&self, k: usize) -> &CouplingMatrix<T> {
        &self.omega[k]
    }

    pub fn matrices(&self) -> &[CouplingMatrix<T>] {
        &self.omega
    }

    pub fn receive_antennas(&self) -> Vec<usize> {
        self.omega.iter().map(CouplingMatrix::rows).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.omega.iter().all(CouplingMatrix::is_zero)
    }

    /// Checks that the shapes agree with `params`.
    pub fn check_shape(&self, params: &SystemParams<T>) -> Result<()> {
        if self.beams() != params.m || self.receive_antennas() != params.n {
            return Err(Error::Shape(format!(
                "channel has M={} N={:?}, parameters have M={} N={:?}",
                self.beams(),
                self.receive_antennas(),
                params.m,
                params.n
            )));
        }
        Ok(())
    }
}

/// Diagonal beam powers, one length-M vector per user (watts per beam).
#[derive(Debug, Clone, PartialEq)]
pub struct PowerAllocation<T> {
    lambda: Vec<Vec<T>>,
}

impl<T: Scalar> PowerAllocation<T> {
    pub fn new(lambda: Vec<Vec<T>>) -> Result<Self> {
        if lambda.is_empty() {
            return Err(invalid("lambda", "at least one user required"));
        }
        let m = lambda[0].len();
        if lambda.iter().any(|l| l.len() != m) {
            return Err(Error::Shape("power vectors must share the beam count".into()));
        }
        if let Some(v) = lambda.iter().flatten().find(|v| !(v.is_finite() && **v >= T::zero())) {
            return Err(invalid("lambda", format!("powers must be finite and >= 0, got {v}")));
        }
        Ok(Self { lambda })
    }

    pub fn zeros(k: usize, m: usize) -> Self {
        Self {
            lambda: vec![vec![T::zero(); m]; k],
        }
    }

    /// Spreads `total` evenly over all K*M beams.
    pub fn uniform(k: usize, m: usize, total: T) -> Self {
        let each = total / T::from_usize_lossy(k * m);
        Self {
            lambda: vec![vec![each; m]; k],
        }
    }

    #[inline]
    pub fn users(&self) -> usize {
        self.lambda.len()
    }

    #[inline]
    pub fn beams(&self) -> usize {
        self.lambda[0].len()
    }

    #[inline]
    pub fn user(&self, k: usize) -> &[T] {
        &self.lambda[k]
    }

    #[inline]
    pub fn get(&self, k: usize, m: usize) -> T {
        self.lambda[k][m]
    }

    #[inline]
    pub(crate) fn set(&mut self, k: usize, m: usize, v: T) {
        self.lambda[k][m] = v;
    }

    pub fn rows(&self) -> &[Vec<T>] {
        &self.lambda
    }

    /// Total transmit power (sum over all users and beams).
    pub fn total(&self) -> T {
        self.lambda.iter().flatten().copied().sum()
    }

    pub fn is_zero(&self, k: usize) -> bool {
        self.lambda[k].iter().all(|v| *v == T::zero())
    }

    pub fn scaled(&self, c: T) -> Self {
        Self {
            lambda: self
                .lambda
                .iter()
                .map(|row| row.iter().map(|v| *v * c).collect())
                .collect(),
        }
    }

    /// `self + t (other - self)`, clamped at zero.
    pub fn lerp(&self, other: &Self, t: T) -> Self {
        Self {
            lambda: self
                .lambda
                .iter()
                .zip(&other.lambda)
                .map(|(a, b)| {
                    a.iter()
                        .zip(b)
                        .map(|(x, y)| (*x + t * (*y - *x)).max(T::zero()))
                        .collect()
                })
                .collect(),
        }
    }

    pub fn check_shape(&self, stats: &ChannelStats<T>) -> Result<()> {
        if self.users() != stats.users() || self.beams() != stats.beams() {
            return Err(Error::Shape(format!(
                "allocation is {}x{}, channel is {}x{}",
                self.users(),
                self.beams(),
                stats.users(),
                stats.beams()
            )));
        }
        Ok(())
    }
}

/// Overall consumed power `xi * sum(lambda) + M Pc + Ps`.
pub fn total_power<T: Scalar>(alloc: &PowerAllocation<T>, params: &SystemParams<T>) -> T {
    params.consumed_power(alloc.total())
}

/// Power-budget normalizer `xi Pmax + M Pc + Ps`.
pub fn budget_power<T: Scalar>(params: &SystemParams<T>) -> T {
    params.consumed_power(params.pmax)
}

/// Knobs of the synthetic coupling-matrix generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec<T> {
    /// Mean entry of every Omega_k, in dB.
    pub pathloss_db: T,
    /// Fraction of beams in each user's contiguous support window, in (0, 1].
    pub support_fraction: T,
    /// Exponential decay rate of the profile away from the window centre.
    pub decay: T,
    /// Multiply every entry by an independent uniform factor in [0.5, 1.5].
    pub jitter: bool,
}

impl<T: Scalar> Default for SynthSpec<T> {
    fn default() -> Self {
        Self {
            pathloss_db: T::lit(-120.0),
            support_fraction: T::lit(0.25),
            decay: T::lit(0.3),
            jitter: true,
        }
    }
}

/// Seeded synthetic statistical channel: sparse, clustered beam supports.
pub fn synth_coupling<T: Scalar>(params: &SystemParams<T>, spec: &SynthSpec<T>, seed: u64) -> Result<ChannelStats<T>> {
    let sf = spec.support_fraction;
    if !(sf > T::zero() && sf <= T::one()) {
        return Err(invalid("support_fraction", format!("must lie in (0, 1], got {sf}")));
    }
    if !(spec.decay.is_finite() && spec.decay >= T::zero()) {
        return Err(invalid("decay", format!("must be finite and >= 0, got {}", spec.decay)));
    }
    if params.m == 0 || params.n.is_empty() || params.n.contains(&0) {
        return Err(invalid("N", "array sizes must be at least 1"));
    }
    let m = params.m;
    // Guard the ceiling against representation error (0.25 * 64 must stay 16).
    let raw = (sf * T::from_usize_lossy(m)).as_f64();
    let width = ((raw - 1e-9).ceil() as usize).clamp(1, m);
    let target_mean = db_to_linear(spec.pathloss_db);
    let half = T::lit(0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut omega = Vec::with_capacity(params.n.len());
    for &nk in &params.n {
        let offset = rand::Rng::random_range(&mut rng, 0..=m - width);
        let centre = T::from_usize_lossy(offset) + T::from_usize_lossy(width - 1) * half;
        let mut w = CouplingMatrix::zeros(nk, m);
        for n in 0..nk {
            for b in offset..offset + width {
                let dist = (T::from_usize_lossy(b) - centre).abs();
                let mut v = (-spec.decay * dist).exp();
                if spec.jitter {
                    v *= T::sample_uniform(&mut rng, half, T::lit(1.5));
                }
                w.data[n * m + b] = v;
            }
        }
        let mean = w.sum() / T::from_usize_lossy(nk * m);
        w.scale(target_mean / mean);
        omega.push(w);
    }
    ChannelStats::new(omega)
}
