//! Finite-difference verification of gradients.

/// Central-difference gradient of a scalar function at `x`.
///
/// Each coordinate is perturbed by `+-eps` around its original value; the
/// function is evaluated `2 * x.len()` times.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let hi = f(&probe);
        probe[i] = orig - eps;
        let lo = f(&probe);
        probe[i] = orig;
        grad.push((hi - lo) / (2.0 * eps));
    }
    grad
}

/// `||a - b||_2 / max(||b||_2, tiny)`, the relative disagreement of two
/// gradient vectors with `b` as reference.
pub fn relative_l2(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch {} vs {}", a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|&y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-300)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_is_exact_on_quadratics() {
        // f(x) = sum x_i^2 has gradient 2x, and the second-order error term
        // of the central stencil vanishes on quadratics.
        let x = [0.3, -1.4, 2.0, 0.0];
        let grad = central_difference(|v| v.iter().map(|t| t * t).sum(), &x, 1e-5);
        for (g, xi) in grad.iter().zip(&x) {
            assert!((g - 2.0 * xi).abs() <= 1e-9, "{g} vs {}", 2.0 * xi);
        }
    }

    #[test]
    fn central_difference_matches_cosine_derivative() {
        let x = [0.2, 1.1];
        let grad = central_difference(|v| v.iter().map(|t| t.sin()).sum(), &x, 1e-5);
        for (g, xi) in grad.iter().zip(&x) {
            assert!((g - xi.cos()).abs() <= 1e-9);
        }
    }

    #[test]
    fn relative_l2_normalizes_by_reference() {
        assert_eq!(relative_l2(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        let r = relative_l2(&[1.1, 0.0], &[1.0, 0.0]);
        assert!((r - 0.1).abs() <= 1e-12);
        // Zero reference falls back to the tiny floor instead of dividing
        // by zero.
        assert!(relative_l2(&[1e-3, 0.0], &[0.0, 0.0]).is_finite());
    }
}
