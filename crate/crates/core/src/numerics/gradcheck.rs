//! Finite-difference verification of analytic gradients. The central
//! difference estimate is the independent oracle every backward
//! implementation in this crate is checked against.

/// Outcome of comparing an analytic gradient against the finite-difference
/// oracle.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_abs_diff: f64,
    pub max_rel_diff: f64,
    /// Coordinate of the worst relative disagreement, if any parameter exists.
    pub worst_index: Option<usize>,
    /// Coordinates whose relative difference exceeded the tolerance.
    pub failures: Vec<usize>,
    pub tol: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Five-point central-difference gradient estimate of `f` at `x` with step
/// `h`. The fourth-order stencil keeps truncation error ~h^4 so the step can
/// be chosen large enough that floating-point cancellation stays negligible.
pub fn finite_diff_gradient(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = xs[i];
        let mut at = |v: f64, f: &mut dyn FnMut(&[f64]) -> f64| {
            xs[i] = v;
            f(&xs)
        };
        let f1 = at(orig + h, f) - at(orig - h, f);
        let f2 = at(orig + 2.0 * h, f) - at(orig - 2.0 * h, f);
        xs[i] = orig;
        grad[i] = (8.0 * f1 - f2) / (12.0 * h);
    }
    grad
}

/// Compare the analytic gradient of `loss_fn` against the finite-difference
/// oracle at `params`. `loss_fn` must return the loss value and its analytic
/// gradient; only the value component is used for finite differencing.
///
/// The relative difference uses denominator `max(|analytic|, |numeric|, 1e-6)`.
/// The floor reflects the oracle's own resolution: against an O(1) loss in
/// double precision, five-point differences carry absolute noise around
/// 1e-12..1e-10, so components below 1e-6 cannot be compared relatively.
pub fn check_gradients(
    loss_fn: &mut dyn FnMut(&[f64]) -> (f64, Vec<f64>),
    params: &[f64],
    h: f64,
    tol: f64,
) -> GradReport {
    let (_, analytic) = loss_fn(params);
    let mut value_only = |x: &[f64]| loss_fn(x).0;
    check_gradients_vg(&mut value_only, &analytic, params, h, tol)
}

/// Like [`check_gradients`] but with the analytic gradient precomputed and a
/// value-only closure, so the `4 * params.len()` finite-difference
/// evaluations skip the backward pass entirely. Preferable for large models.
pub fn check_gradients_vg(
    value_fn: &mut dyn FnMut(&[f64]) -> f64,
    analytic: &[f64],
    params: &[f64],
    h: f64,
    tol: f64,
) -> GradReport {
    assert_eq!(analytic.len(), params.len(), "analytic gradient length");
    let numeric = finite_diff_gradient(value_fn, params, h);

    let mut report = GradReport {
        max_abs_diff: 0.0,
        max_rel_diff: 0.0,
        worst_index: None,
        failures: Vec::new(),
        tol,
    };
    for i in 0..params.len() {
        let abs = (analytic[i] - numeric[i]).abs();
        let denom = analytic[i].abs().max(numeric[i].abs()).max(1e-6);
        let rel = abs / denom;
        if abs > report.max_abs_diff {
            report.max_abs_diff = abs;
        }
        if rel > report.max_rel_diff {
            report.max_rel_diff = rel;
            report.worst_index = Some(i);
        }
        if rel > tol {
            report.failures.push(i);
        }
    }
    report
}
