//! Tape-free versions of the scalar formulas, for callers that only need values.

use crate::graph;
use crate::real::Real;

/// Softmax of a slice of logits.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let mut out = logits.to_vec();
    graph::softmax_in_place(&mut out);
    out
}

/// `−(y ln p + (1 − y) ln(1 − p))` with `p` clamped to `[1e-7, 1 − 1e-7]`.
pub fn log_loss<T: Real>(y: T, p: T) -> T {
    graph::log_loss_term(y, p)
}

pub fn sigmoid<T: Real>(x: T) -> T {
    graph::sigmoid(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0f64, 0.0]), vec![0.5, 0.5]);
        let p = softmax(&[1.0f64.ln(), 3.0f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-12 && (p[1] - 0.75).abs() < 1e-12);
        let base = softmax(&[0.3f64, -1.2, 2.0]);
        let shifted = softmax(&[100.3f64, 98.8, 102.0]);
        for (a, b) in base.iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn log_loss_examples() {
        assert!((log_loss(1.0f64, 1.0 - 1e-7) - 1e-7).abs() < 1e-12);
        assert!((log_loss(1.0f64, 0.5) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((log_loss(0.0f64, 0.5) - std::f64::consts::LN_2).abs() < 1e-12);
        // clamping keeps the loss finite at the extremes
        assert!(log_loss(1.0f64, 0.0).is_finite());
        assert!(log_loss(0.0f64, 1.0).is_finite());
    }
}
