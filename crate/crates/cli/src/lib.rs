//! Config-driven experiment runner for `beamre`: single solves, parameter
//! sweeps written as CSV, oracle verification and channel generation.

pub mod config;
pub mod omega;
pub mod run;

pub use config::{parse_config, render, ConfigError, ExperimentConfig, SweepKind};

/// Worker count: `BEAMRE_THREADS` wins over the command-line value; `None`
/// leaves the choice to rayon.
pub fn thread_count(flag: Option<usize>, env: Option<&str>) -> Result<Option<usize>, String> {
    match env.map(str::trim).filter(|s| !s.is_empty()) {
        Some(s) => match s.parse::<usize>() {
            Ok(0) | Err(_) => Err(format!("BEAMRE_THREADS must be a positive integer, got `{s}`")),
            Ok(n) => Ok(Some(n)),
        },
        None => match flag {
            Some(0) => Err("--threads must be at least 1".into()),
            f => Ok(f),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_overrides_flag() {
        assert_eq!(thread_count(Some(4), Some("2")), Ok(Some(2)));
        assert_eq!(thread_count(Some(4), None), Ok(Some(4)));
        assert_eq!(thread_count(None, Some(" ")), Ok(None));
        assert!(thread_count(Some(4), Some("zero")).is_err());
        assert!(thread_count(Some(0), None).is_err());
    }
}
