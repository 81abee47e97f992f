//! Plain-text coupling-matrix files.
//!
//! First line `K M`; then for each user a line `N_k` followed by `N_k` rows
//! of `M` non-negative reals.

use std::fmt::Write as _;

use anyhow::{anyhow, bail, Context, Result};
use beamre::{ChannelStats64, CouplingMatrix};

pub fn write_omega(stats: &ChannelStats64) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{} {}", stats.users(), stats.beams());
    for w in stats.matrices() {
        let _ = writeln!(out, "{}", w.rows());
        for n in 0..w.rows() {
            let row: Vec<String> = w.row(n).iter().map(|v| format!("{v:.16e}")).collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
    }
    out
}

pub fn read_omega(text: &str) -> Result<ChannelStats64> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| anyhow!("unexpected end of file, expected {what}"))
    };

    let (ln, head) = next("`K M` header")?;
    let dims: Vec<usize> = head
        .split_whitespace()
        .map(|t| t.parse())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("line {ln}: header must be two integers `K M`"))?;
    let [k, m] = dims[..] else {
        bail!("line {ln}: header must be two integers `K M`");
    };
    if k == 0 || m == 0 {
        bail!("line {ln}: K and M must be at least 1");
    }
    let mut mats = Vec::with_capacity(k);
    for user in 0..k {
        let (ln, t) = next("antenna count N_k")?;
        let n: usize = t
            .parse()
            .with_context(|| format!("line {ln}: expected N_k for user {user}"))?;
        if n == 0 {
            bail!("line {ln}: N_k must be at least 1");
        }
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let (ln, t) = next("a row of coupling gains")?;
            let row: Vec<f64> = t
                .split_whitespace()
                .map(|x| x.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .with_context(|| format!("line {ln}: malformed number"))?;
            if row.len() != m {
                bail!("line {ln}: expected {m} values, found {}", row.len());
            }
            if let Some(bad) = row.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                bail!("line {ln}: gains must be finite and >= 0, found {bad}");
            }
            rows.push(row);
        }
        mats.push(CouplingMatrix::from_rows(&rows)?);
    }
    if let Some((ln, _)) = lines.next() {
        bail!("line {ln}: trailing content after the last user");
    }
    Ok(ChannelStats64::new(mats)?)
}
