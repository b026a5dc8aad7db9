//! Central finite-difference gradient checking for micro-instances of every
//! layer type.

use crate::tensor::{Scalar, Tensor};

/// Result of comparing analytic gradients against central differences.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub n_checked: usize,
}

/// `f` evaluates the scalar loss given the full set of input tensors;
/// `analytic` holds the gradients to verify, aligned with `inputs`.
/// The relative error uses `|a - n| / max(1, |a|, |n|)`.
pub fn check<S: Scalar>(
    inputs: &[Tensor<S>],
    analytic: &[Tensor<S>],
    step: f64,
    f: impl Fn(&[Tensor<S>]) -> f64,
) -> GradCheckReport {
    assert_eq!(inputs.len(), analytic.len());
    let mut max_rel = 0.0f64;
    let mut n_checked = 0;
    let mut work: Vec<Tensor<S>> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let orig = t[j];
            work[ti][j] = orig + S::of_f64(step);
            let fp = f(&work);
            work[ti][j] = orig - S::of_f64(step);
            let fm = f(&work);
            work[ti][j] = orig;
            let num = (fp - fm) / (2.0 * step);
            let ana = analytic[ti][j].as_f64();
            let denom = 1.0f64.max(ana.abs()).max(num.abs());
            let rel = (ana - num).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
            n_checked += 1;
        }
    }
    GradCheckReport {
        max_rel_err: max_rel,
        n_checked,
    }
}
