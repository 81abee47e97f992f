use crate::de::FixedPointOptions;
use crate::error::{invalid, Result};
use crate::scalar::Scalar;

/// Tolerances, step sizes, caps and seeds of the full solver stack.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig<T> {
    /// DE fixed point: max-abs change of `phi_tilde`.
    pub eps1: T,
    /// Outer power search: stop when `|dP_T| <= eps2 * Pmax`.
    pub eps2: T,
    /// MM loop: absolute RE change in bits/J/Hz.
    pub eps3: T,
    /// Newton step tolerance, relative to `max(x, 1)`.
    pub eps4: T,
    /// Power balance: `|sum(lambda) - P_T| <= eps5 * max(P_T, 1)`.
    pub eps5: T,
    /// Initial outer step moves `P_T` by `step_scale * Pmax`.
    pub step_scale: T,
    pub max_mm_iter: usize,
    pub max_fp_iter: usize,
    pub max_newton_iter: usize,
    pub max_bisect_iter: usize,
    /// Gauss-Seidel sweeps per water level.
    pub max_sweep_iter: usize,
    /// Outer power-search iterations per MM step.
    pub max_pt_iter: usize,
    pub mc_samples: usize,
    pub seed: u64,
}

impl<T: Scalar> Default for SolverConfig<T> {
    fn default() -> Self {
        Self {
            eps1: T::lit(1e-8),
            eps2: T::lit(1e-6),
            eps3: T::lit(1e-6),
            eps4: T::lit(1e-10),
            eps5: T::lit(1e-8),
            step_scale: T::lit(0.1),
            max_mm_iter: 50,
            max_fp_iter: 1000,
            max_newton_iter: 50,
            max_bisect_iter: 200,
            max_sweep_iter: 2000,
            max_pt_iter: 200,
            mc_samples: 1000,
            seed: 1,
        }
    }
}

impl<T: Scalar> SolverConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let tols = [
            ("eps1", self.eps1),
            ("eps2", self.eps2),
            ("eps3", self.eps3),
            ("eps4", self.eps4),
            ("eps5", self.eps5),
            ("step_scale", self.step_scale),
        ];
        for (name, v) in tols {
            if !(v.is_finite() && v > T::zero()) {
                return Err(invalid(name, format!("must be finite and > 0, got {v}")));
            }
        }
        let caps = [
            ("max_mm_iter", self.max_mm_iter),
            ("max_fp_iter", self.max_fp_iter),
            ("max_newton_iter", self.max_newton_iter),
            ("max_bisect_iter", self.max_bisect_iter),
            ("max_sweep_iter", self.max_sweep_iter),
            ("max_pt_iter", self.max_pt_iter),
            ("mc_samples", self.mc_samples),
        ];
        for (name, v) in caps {
            if v < 1 {
                return Err(invalid(name, "must be at least 1"));
            }
        }
        Ok(())
    }

    pub fn fixed_point(&self) -> FixedPointOptions<T> {
        FixedPointOptions {
            eps: self.eps1,
            max_iter: self.max_fp_iter,
        }
    }
}
