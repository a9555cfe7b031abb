//! Pure scalar kernels shared by the autograd graph and by tests that want
//! the closed-form definitions directly.

use super::Scalar;
use crate::{invalid, Result};

/// Temperature-scaled softmax with max-subtraction for stability.
pub fn softmax<F: Scalar>(v: &[F], temperature: F) -> Result<Vec<F>> {
    if temperature <= F::zero() {
        return Err(invalid(format!("temperature must be positive, got {temperature}")));
    }
    if v.is_empty() {
        return Err(invalid("softmax of empty vector"));
    }
    let mut max = v[0];
    for &x in v {
        if x > max {
            max = x;
        }
    }
    let mut out: Vec<F> = v.iter().map(|&x| ((x - max) / temperature).exp()).collect();
    let sum: F = out.iter().copied().sum();
    for o in out.iter_mut() {
        *o = *o / sum;
    }
    Ok(out)
}

/// KL divergence sum p_i ln(max(p_i,eps)/max(q_i,eps)). Zero when p == q.
pub fn kl_divergence<F: Scalar>(p: &[F], q: &[F], eps: F) -> Result<F> {
    if p.len() != q.len() {
        return Err(invalid(format!("kl length mismatch: {} vs {}", p.len(), q.len())));
    }
    let mut acc = F::zero();
    for (&pi, &qi) in p.iter().zip(q.iter()) {
        let pc = pi.max(eps);
        let qc = qi.max(eps);
        // pc == qc gives ln(1.0) == 0 exactly, so kl(p, p) == 0 exactly
        acc = acc + pi * (pc / qc).ln();
    }
    Ok(acc)
}

/// log-sum-exp of a vector, computed with max subtraction.
pub fn log_sum_exp<F: Scalar>(v: &[F]) -> F {
    let mut max = v[0];
    for &x in v {
        if x > max {
            max = x;
        }
    }
    let s: F = v.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

/// -log_softmax(logits)[label], evaluated in log-space.
pub fn cross_entropy<F: Scalar>(logits: &[F], label: usize) -> Result<F> {
    if label >= logits.len() {
        return Err(invalid(format!(
            "label {label} out of range for {} logits",
            logits.len()
        )));
    }
    Ok(log_sum_exp(logits) - logits[label])
}

/// Unaveraged squared L2 distance, sum (a_i - b_i)^2.
pub fn mse_pair<F: Scalar>(a: &[F], b: &[F]) -> Result<F> {
    if a.len() != b.len() {
        return Err(invalid(format!("mse length mismatch: {} vs {}", a.len(), b.len())));
    }
    Ok(a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum())
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Tanh-approximation GELU. The analytic backward differentiates this exact
/// expression, so finite differences agree with it.
pub fn gelu<F: Scalar>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (F::one() + u.tanh())
}

/// ln(1 + e^x), evaluated as max(x, 0) + ln_1p(e^-|x|) for stability.
pub fn softplus<F: Scalar>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

/// d/dx softplus(x) = sigmoid(x).
pub fn softplus_deriv<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

pub fn gelu_deriv<F: Scalar>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * a * x * x)
}
