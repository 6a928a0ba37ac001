//! Central finite-difference gradient verification.
//!
//! The oracle only ever evaluates the forward pass (through a disabled
//! tape), so it stays independent of the backward implementations it
//! checks. Use `f64` tensors; float32 rounding swamps the h^2 truncation
//! term.

use super::core::{Element, Tensor};
use super::tape::Tape;
use crate::error::Result;

/// Default step for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Central-difference gradient of a scalar-valued closure with respect to
/// every element of every listed input. The closure is re-evaluated with
/// nudged inputs on a disabled tape.
pub fn finite_diff_grads<E: Element>(
    inputs: &[&Tensor<E>],
    h: f64,
    mut f: impl FnMut(&Tape<E>) -> Result<Tensor<E>>,
) -> Result<Vec<Vec<f64>>> {
    let tape = Tape::disabled();
    let mut all = Vec::with_capacity(inputs.len());
    for x in inputs {
        let mut grads = Vec::with_capacity(x.numel());
        for i in 0..x.numel() {
            let orig = x.data()[i];
            x.with_data_mut(|d| d[i] = orig + E::of(h));
            let fp = f(&tape)?.item().to64();
            x.with_data_mut(|d| d[i] = orig - E::of(h));
            let fm = f(&tape)?.item().to64();
            x.with_data_mut(|d| d[i] = orig);
            grads.push((fp - fm) / (2.0 * h));
        }
        all.push(grads);
    }
    Ok(all)
}

/// Outcome of [`gradcheck`]: worst absolute and relative deviation between
/// analytic and finite-difference gradients over all checked elements.
/// An element passes when its absolute difference is below `abs_tol` or
/// its relative error is below `rel_tol`; near-zero gradients fall back to
/// the absolute criterion.
#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub max_abs_diff: f64,
    pub max_rel_err: f64,
    pub checked: usize,
    pub violations: usize,
    pub worst_violation: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Runs the closure once on a recording tape, backpropagates, and compares
/// every input gradient against central finite differences.
pub fn gradcheck<E: Element>(
    inputs: &[&Tensor<E>],
    h: f64,
    rel_tol: f64,
    abs_tol: f64,
    mut f: impl FnMut(&Tape<E>) -> Result<Tensor<E>>,
) -> Result<GradReport> {
    for x in inputs {
        x.set_requires_grad(true);
        x.clear_grad();
    }
    let tape = Tape::new();
    let loss = f(&tape)?;
    tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|x| {
            x.grad()
                .map(|g| g.iter().map(|v| v.to64()).collect())
                .unwrap_or_else(|| vec![0.0; x.numel()])
        })
        .collect();
    let numeric = finite_diff_grads(inputs, h, f)?;

    let mut report = GradReport {
        max_abs_diff: 0.0,
        max_rel_err: 0.0,
        checked: 0,
        violations: 0,
        worst_violation: 0.0,
    };
    for (a_vec, n_vec) in analytic.iter().zip(&numeric) {
        for (&a, &n) in a_vec.iter().zip(n_vec) {
            let abs = (a - n).abs();
            let denom = a.abs().max(n.abs());
            let rel = if denom > 0.0 { abs / denom } else { 0.0 };
            report.max_abs_diff = report.max_abs_diff.max(abs);
            if denom > abs_tol {
                report.max_rel_err = report.max_rel_err.max(rel);
            }
            if abs >= abs_tol && rel >= rel_tol {
                report.violations += 1;
                report.worst_violation = report.worst_violation.max(rel);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Panicking convenience wrapper for unit tests: every element must have
/// rel err < `rel_tol` or abs diff < 1e-6.
pub fn assert_grads_match<E: Element>(
    inputs: &[&Tensor<E>],
    rel_tol: f64,
    f: impl FnMut(&Tape<E>) -> Result<Tensor<E>>,
) {
    let report = gradcheck(inputs, FD_STEP, rel_tol, 1e-6, f).expect("gradcheck forward failed");
    assert!(
        report.passed(),
        "gradient mismatch: {} of {} elements off (worst rel err {:.3e}, max abs diff {:.3e})",
        report.violations,
        report.checked,
        report.worst_violation,
        report.max_abs_diff
    );
}
