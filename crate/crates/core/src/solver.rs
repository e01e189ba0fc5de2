//! Damped fixed-point iteration with a relative-difference stopping rule.

use serde::{Deserialize, Serialize};

use crate::numerics::{Scalar, Tensor};

/// Guard added to every residual denominator.
pub const RESIDUAL_GUARD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolveMode {
    #[default]
    Simultaneous,
    Sequential,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualNorm {
    /// Largest per-row relative difference.
    #[default]
    PerToken,
    /// Relative difference of the whole iterate.
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub tolerance: f64,
    pub max_iters: usize,
    #[serde(default = "default_damping")]
    pub damping: f64,
    #[serde(default)]
    pub mode: SolveMode,
    #[serde(default)]
    pub norm: ResidualNorm,
    /// When false every solve runs exactly `max_iters` evaluations.
    #[serde(default = "default_true")]
    pub early_stop: bool,
    /// Halve the damping after the residual has grown this many times (0 disables).
    #[serde(default = "default_fallback")]
    pub damping_fallback_after: usize,
}

fn default_damping() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

fn default_fallback() -> usize {
    2
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tolerance: 0.01,
            max_iters: 16,
            damping: 1.0,
            mode: SolveMode::Simultaneous,
            norm: ResidualNorm::PerToken,
            early_stop: true,
            damping_fallback_after: 2,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SolverError {
    #[error("invalid solver config: {0}")]
    Config(String),
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.tolerance > 0.0) {
            return Err(SolverError::Config(format!("tolerance must be > 0, got {}", self.tolerance)));
        }
        if self.max_iters == 0 {
            return Err(SolverError::Config("max_iters must be at least 1".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(SolverError::Config(format!("damping must be in (0, 1], got {}", self.damping)));
        }
        Ok(())
    }

    /// Same settings with the cap scaled for test-time use.
    pub fn test_time(&self, factor: usize) -> Self {
        Self {
            max_iters: self.max_iters * factor.max(1),
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIters,
    NumericFailure,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    /// Evaluations of the iteration map.
    pub iterations: usize,
    pub final_residual: f64,
    pub converged: bool,
    pub status: SolveStatus,
    /// `histogram[i]` counts tokens that needed `i` evaluations (sequential mode).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_token_histogram: Vec<usize>,
}

impl RunStats {
    /// Mean evaluations per token when a histogram is present, else `iterations`.
    pub fn mean_iters(&self) -> f64 {
        let n: usize = self.per_token_histogram.iter().sum();
        if n == 0 {
            return self.iterations as f64;
        }
        let total: usize = self.per_token_histogram.iter().enumerate().map(|(i, c)| i * c).sum();
        total as f64 / n as f64
    }

    /// Folds per-token solves into one record: worst residual, summed evaluations.
    pub fn merge_tokens(parts: &[RunStats]) -> RunStats {
        let max_iters = parts.iter().map(|p| p.iterations).max().unwrap_or(0);
        let mut histogram = vec![0; max_iters + 1];
        for p in parts {
            histogram[p.iterations] += 1;
        }
        let failed = parts.iter().any(|p| p.status == SolveStatus::NumericFailure);
        let converged = !parts.is_empty() && parts.iter().all(|p| p.converged);
        RunStats {
            iterations: parts.iter().map(|p| p.iterations).sum(),
            final_residual: parts.iter().map(|p| p.final_residual).fold(0.0, f64::max),
            converged,
            status: if failed {
                SolveStatus::NumericFailure
            } else if converged {
                SolveStatus::Converged
            } else {
                SolveStatus::MaxIters
            },
            per_token_histogram: histogram,
        }
    }
}

/// Relative difference `‖new − old‖ / (‖old‖ + guard)`; rows are the last axis.
pub fn residual<T: Scalar>(new: &Tensor<T>, old: &Tensor<T>, norm: ResidualNorm) -> f64 {
    assert_eq!(new.shape(), old.shape(), "residual of mismatched shapes");
    let width = new.shape().last().copied().unwrap_or(1).max(1);
    let rel = |a: &[T], b: &[T]| {
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for (&x, &y) in a.iter().zip(b) {
            let (x, y) = (x.as_f64(), y.as_f64());
            num += (x - y) * (x - y);
            den += y * y;
        }
        num.sqrt() / (den.sqrt() + RESIDUAL_GUARD)
    };
    match norm {
        ResidualNorm::Global => rel(new.data(), old.data()),
        ResidualNorm::PerToken => new
            .data()
            .chunks(width)
            .zip(old.data().chunks(width))
            .map(|(a, b)| rel(a, b))
            .fold(0.0, f64::max),
    }
}

/// Result of [`solve_fixed_point`].
#[derive(Clone, Debug)]
pub struct FixedPoint<T, A> {
    /// Converged: the iterate whose image met the tolerance. Otherwise the last iterate.
    pub z: Tensor<T>,
    /// Side output of the evaluation that produced the latest image.
    pub aux: Option<A>,
    pub stats: RunStats,
}

/// Damped Picard iteration `z ← (1−α)z + α F(z)` from `z0`.
///
/// The stopping quantity is `rel(F(z), z)`. When it drops below the tolerance the
/// returned `z` is that iterate, so re-evaluating `F` reproduces the residual.
pub fn solve_fixed_point<T, A, E, F>(mut step: F, z0: Tensor<T>, cfg: &SolverConfig) -> Result<FixedPoint<T, A>, E>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<(Tensor<T>, A), E>,
{
    let mut z = z0;
    let mut alpha = cfg.damping;
    let mut increases = 0;
    let mut prev_res = f64::INFINITY;
    let mut aux = None;
    let mut res = f64::INFINITY;
    for it in 1..=cfg.max_iters {
        let (fz, a) = step(&z)?;
        if !fz.is_finite() {
            return Ok(FixedPoint {
                z,
                aux,
                stats: RunStats {
                    iterations: it,
                    final_residual: f64::NAN,
                    converged: false,
                    status: SolveStatus::NumericFailure,
                    per_token_histogram: Vec::new(),
                },
            });
        }
        res = residual(&fz, &z, cfg.norm);
        aux = Some(a);
        if cfg.early_stop && res < cfg.tolerance {
            return Ok(FixedPoint {
                z,
                aux,
                stats: RunStats {
                    iterations: it,
                    final_residual: res,
                    converged: true,
                    status: SolveStatus::Converged,
                    per_token_histogram: Vec::new(),
                },
            });
        }
        if res > prev_res && cfg.damping_fallback_after > 0 {
            increases += 1;
            if increases == cfg.damping_fallback_after {
                alpha = alpha.min(0.5);
            }
        }
        prev_res = res;
        z = if alpha == 1.0 {
            fz
        } else {
            let a = T::lit(alpha);
            z.zip_map(&fz, |old, new| (T::one() - a) * old + a * new)
                .expect("iterate shape is fixed")
        };
    }
    let converged = res < cfg.tolerance;
    Ok(FixedPoint {
        z,
        aux,
        stats: RunStats {
            iterations: cfg.max_iters,
            final_residual: res,
            converged,
            status: if converged { SolveStatus::Converged } else { SolveStatus::MaxIters },
            per_token_histogram: Vec::new(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::convert::Infallible;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::new(vec![1, 1], vec![v]).unwrap()
    }

    fn affine(a: f64, b: f64) -> impl FnMut(&Tensor<f64>) -> Result<(Tensor<f64>, ()), Infallible> {
        move |z| Ok((z.map(|v| a * v + b), ()))
    }

    #[test]
    fn linear_contraction_converges_to_two() {
        let cfg = SolverConfig {
            tolerance: 1e-10,
            max_iters: 200,
            ..Default::default()
        };
        let out = solve_fixed_point(affine(0.5, 1.0), scalar(0.0), &cfg).unwrap();
        assert!(out.stats.converged);
        assert!((out.z.item() - 2.0).abs() < 1e-9);
        let f = 0.5 * out.z.item() + 1.0;
        assert!(residual(&scalar(f), &out.z, ResidualNorm::Global) < cfg.tolerance);
    }

    #[test]
    fn damping_fixes_oscillation() {
        let undamped = SolverConfig {
            tolerance: 1e-8,
            max_iters: 50,
            damping_fallback_after: 0,
            ..Default::default()
        };
        let out = solve_fixed_point(affine(-1.0, 1.0), scalar(0.0), &undamped).unwrap();
        assert!(!out.stats.converged);
        let damped = SolverConfig { damping: 0.5, ..undamped };
        let out = solve_fixed_point(affine(-1.0, 1.0), scalar(0.0), &damped).unwrap();
        assert!(out.stats.converged);
        assert!((out.z.item() - 0.5).abs() < 1e-8);
    }

    #[test]
    fn residual_guards_zero_denominator() {
        let r = residual(&scalar(1.0), &scalar(0.0), ResidualNorm::Global);
        assert!(r.is_finite() && r > 1e11);
        assert_eq!(residual(&scalar(3.0), &scalar(3.0), ResidualNorm::PerToken), 0.0);
    }

    #[test]
    fn per_token_and_global_norms_differ() {
        let old = Tensor::new(vec![2, 2], vec![10.0, 10.0, 0.1, 0.1]).unwrap();
        let new = Tensor::new(vec![2, 2], vec![10.0, 10.0, -0.1, -0.1]).unwrap();
        let g = residual(&new, &old, ResidualNorm::Global);
        let t = residual(&new, &old, ResidualNorm::PerToken);
        assert!((t - 2.0).abs() < 1e-9);
        assert!(g < 0.03);
    }

    #[test]
    fn non_finite_reports_failure_with_last_finite_iterate() {
        let mut calls = 0;
        let step = |z: &Tensor<f64>| -> Result<_, Infallible> {
            calls += 1;
            let v = if calls == 3 { f64::NAN } else { z.item() + 1.0 };
            Ok((scalar(v), ()))
        };
        let out = solve_fixed_point(step, scalar(0.0), &SolverConfig::default()).unwrap();
        assert_eq!(out.stats.status, SolveStatus::NumericFailure);
        assert_eq!(out.z.item(), 2.0);
    }

    #[test]
    fn fixed_budget_runs_every_iteration() {
        let cfg = SolverConfig {
            max_iters: 4,
            early_stop: false,
            ..Default::default()
        };
        let mut n = 0;
        let out = solve_fixed_point(
            |z: &Tensor<f64>| -> Result<_, Infallible> {
                n += 1;
                Ok((z.map(|v| 0.5 * v + 1.0), ()))
            },
            scalar(0.0),
            &cfg,
        )
        .unwrap();
        assert_eq!(n, 4);
        assert_eq!(out.stats.iterations, 4);
        assert!((out.z.item() - 1.875).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        assert!(SolverConfig {
            tolerance: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SolverConfig {
            max_iters: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SolverConfig {
            damping: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert_eq!(SolverConfig::default().test_time(4).max_iters, 64);
    }
}
