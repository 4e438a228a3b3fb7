use serde::Serialize;

use super::params::Parameterized;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub num_params: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

/// Compares `analytic` against central finite differences of `loss` on every
/// parameter of `model`.
///
/// Uses the five-point central stencil at ±step and ±2·step. Its truncation
/// error is order step^4; the two-point stencil's step^2 term alone exceeds
/// 1e-4 at step 1e-4 wherever a layer norm sees a small spread.
///
/// The error for one coordinate is |a − n| / max(|a|, |n|, 1e-6); the floor
/// keeps structurally zero gradients (rounding noise near 1e-13) from
/// dominating.
pub fn gradient_check<M, F>(model: &M, analytic: &[f64], loss: F, step: f64) -> GradCheckReport
where
    M: Parameterized + Clone,
    F: Fn(&M) -> f64,
{
    let num_params = model.num_params();
    assert_eq!(analytic.len(), num_params, "analytic gradient length mismatch");
    let mut probe = model.clone();
    let mut worst = (0.0f64, 0usize);
    for i in 0..num_params {
        let original = get(&probe, i);
        let mut at = |offset: f64| {
            set(&mut probe, i, original + offset);
            loss(&probe)
        };
        let (p1, m1, p2, m2) = (at(step), at(-step), at(2.0 * step), at(-2.0 * step));
        set(&mut probe, i, original);
        let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        if err > worst.0 || err.is_nan() {
            worst = (err, i);
        }
    }
    GradCheckReport {
        max_relative_error: worst.0,
        worst_index: worst.1,
        num_params,
    }
}

fn get<M: Parameterized>(m: &M, mut i: usize) -> f64 {
    let mut v = Vec::new();
    m.params(&mut v);
    for s in v {
        if i < s.len() {
            return s[i];
        }
        i -= s.len();
    }
    panic!("parameter index out of range")
}

fn set<M: Parameterized>(m: &mut M, mut i: usize, value: f64) {
    let mut v = Vec::new();
    m.params_mut(&mut v);
    for s in v {
        if i < s.len() {
            s[i] = value;
            return;
        }
        i -= s.len();
    }
    panic!("parameter index out of range")
}
