//! Finite-difference verification of analytic gradients.
//!
//! Central differences `(f(x+eps) - f(x-eps)) / (2 eps)` are compared per
//! coordinate against the hand-derived gradients, with coordinate sampling
//! for large tensors. The registries at the bottom cover every
//! differentiable op in the library; the CLI's `gradcheck` command and the
//! acceptance suite run them.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DcucError, Result};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
/// Relative-error denominator floor; avoids blowups at zero gradients.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub op: String,
    pub param: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub eps: f64,
    pub pass: bool,
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "op={} param={} max_rel_err={:.3e} tol={:.1e} eps={:.1e} pass={}",
            self.op, self.param, self.max_rel_err, self.tol, self.eps, self.pass
        )
    }
}

/// Settings for one gradient check.
#[derive(Debug, Clone)]
pub struct CheckSettings {
    pub eps: f64,
    pub tol: f64,
    /// Max coordinates sampled per tensor (all coordinates if it is smaller).
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for CheckSettings {
    fn default() -> Self {
        CheckSettings {
            eps: DEFAULT_EPS,
            tol: DEFAULT_TOL,
            max_coords: 64,
            seed: 0x5eed,
        }
    }
}

/// Verify the analytic gradient of a scalar function with respect to one
/// flattened tensor.
///
/// `f` evaluates the scalar at the given parameter vector; it must be
/// deterministic (two evaluations at the base point are compared bit-wise).
/// `analytic` is the hand-derived gradient at the base point.
pub fn check_gradients(
    op: &str,
    param: &str,
    theta: &[f64],
    analytic: &[f64],
    settings: &CheckSettings,
    mut f: impl FnMut(&[f64]) -> f64,
) -> Result<GradReport> {
    assert_eq!(
        theta.len(),
        analytic.len(),
        "analytic gradient length mismatch for {op}/{param}"
    );
    let base_a = f(theta);
    let base_b = f(theta);
    if base_a.to_bits() != base_b.to_bits() {
        return Err(DcucError::Nondeterminism(format!(
            "{op}: two forward passes disagree ({base_a} vs {base_b})"
        )));
    }

    let mut coords: Vec<usize> = (0..theta.len()).collect();
    if coords.len() > settings.max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        coords.shuffle(&mut rng);
        coords.truncate(settings.max_coords);
        coords.sort_unstable();
    }

    let mut work = theta.to_vec();
    let mut max_rel = 0.0_f64;
    for &k in &coords {
        let orig = work[k];
        work[k] = orig + settings.eps;
        let plus = f(&work);
        work[k] = orig - settings.eps;
        let minus = f(&work);
        work[k] = orig;
        let numeric = (plus - minus) / (2.0 * settings.eps);
        let a = analytic[k];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if rel > max_rel {
            max_rel = rel;
        }
    }

    Ok(GradReport {
        op: op.to_string(),
        param: param.to_string(),
        max_rel_err: max_rel,
        tol: settings.tol,
        eps: settings.eps,
        pass: max_rel <= settings.tol,
    })
}

/// Fixed random weights for reducing a multi-output op to a scalar; a
/// weighted sum exercises every output coordinate's gradient at once.
pub fn loss_weights(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xae5u64);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn weighted_sum(values: &[f64], weights: &[f64]) -> f64 {
    values.iter().zip(weights).map(|(v, w)| v * w).sum()
}

/// Push values inside (-margin, margin) out to +/-margin so piecewise-linear
/// ops are checked away from their kinks.
pub fn nudge_from_kinks(data: &mut [f64], margin: f64) {
    for v in data.iter_mut() {
        if v.abs() < margin {
            *v = if *v >= 0.0 { margin } else { -margin };
        }
    }
}

pub fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

mod conformer_checks;
mod pipeline_checks;
mod registry;

pub use registry::{run_full_model_check, run_kernel_checks, run_model_checks};
