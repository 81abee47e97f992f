//! Resource-efficiency power allocation for the massive MIMO downlink in the
//! beam domain, driven only by statistical channel knowledge.
//!
//! The core is generic over the floating-point type; the `*64` / `*32`
//! aliases fix it for the common cases.
//!
//! ```
//! use beamre::{mm_solve, synth_coupling, SolverConfig64, SynthSpec, SystemParams64};
//!
//! let params = SystemParams64::reference(8, vec![2, 2]);
//! let stats = synth_coupling(&params, &SynthSpec::default(), 7).unwrap();
//! let (alloc, state) = mm_solve(&stats, &params, &SolverConfig64::default(), None).unwrap();
//! assert!(state.converged);
//! assert!(alloc.total() <= params.pmax + 1e-9);
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0)` also rejects NaN

pub mod config;
pub mod de;
pub mod error;
pub mod mm;
pub mod model;
pub mod oracle;
pub mod powerctl;
pub mod rates;
pub mod scalar;

pub use config::SolverConfig;
pub use de::{de_fixed_point, de_rate, de_rates, de_re_value, de_states, DeState, FixedPointOptions};
pub use error::{Error, Result};
pub use mm::{de_re_and_se, mm_derivative, mm_solve, taylor_upper_bound, MMState};
pub use model::{
    budget_power, dbm_to_watt, synth_coupling, total_power, watt_to_dbm, ChannelStats, CouplingMatrix, PowerAllocation,
    SynthSpec, SystemParams,
};
pub use oracle::{de_vs_mc_report, fd_check, grid_search_re, refsolve_inner, OracleKind, OracleReport};
pub use powerctl::{pt_search, re_derivative, PtSearchResult, SearchStatus, SurrogateProblem, WaterfillResult};
pub use rates::{interference_floor, mc_rate_approx, mc_rate_exact, metrics, pi_op, xi_op, MetricsReport, RateModel};
pub use scalar::Scalar;

pub type SystemParams64 = SystemParams<f64>;
pub type SystemParams32 = SystemParams<f32>;
pub type ChannelStats64 = ChannelStats<f64>;
pub type ChannelStats32 = ChannelStats<f32>;
pub type PowerAllocation64 = PowerAllocation<f64>;
pub type PowerAllocation32 = PowerAllocation<f32>;
pub type SolverConfig64 = SolverConfig<f64>;
pub type SolverConfig32 = SolverConfig<f32>;
