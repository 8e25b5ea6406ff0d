use super::Matrix;

/// Softmax of each row, with the row maximum subtracted first.
pub fn softmax_rows(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// `x / sqrt(mean(x²) + eps) * gain`.
pub fn rmsnorm(x: &[f64], gain: &[f64], eps: f64) -> Vec<f64> {
    let inv = inv_rms(x, eps);
    x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
}

#[inline]
pub fn inv_rms(x: &[f64], eps: f64) -> f64 {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    1.0 / (ms + eps).sqrt()
}

/// Gradient of `rmsnorm` given the cached inverse rms. Adds the gain gradient
/// into `d_gain` and returns the input gradient.
pub fn rmsnorm_backward(x: &[f64], gain: &[f64], inv: f64, dy: &[f64], d_gain: &mut [f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mut proj = 0.0;
    for k in 0..x.len() {
        d_gain[k] += dy[k] * x[k] * inv;
        proj += dy[k] * gain[k] * x[k];
    }
    let coeff = inv * inv * inv * proj / n;
    (0..x.len())
        .map(|k| inv * gain[k] * dy[k] - coeff * x[k])
        .collect()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{fd_grad, Rng};

    #[test]
    fn softmax_symmetric_row() {
        let s = softmax_rows(&Matrix::from_rows(&[vec![0.0, 0.0]]));
        assert_eq!(s.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let s = softmax_rows(&Matrix::from_rows(&[vec![1000.0, 0.0]]));
        assert!(s.is_finite());
        assert!((s[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(s[(0, 1)] < 1e-300 || s[(0, 1)] == 0.0);
    }

    #[test]
    fn softmax_reference_values() {
        // exp(1), exp(2), exp(3) normalized by hand.
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        let s = softmax_rows(&Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]));
        for k in 0..3 {
            assert!((s[(0, k)] - e[k] / z).abs() < 1e-15);
        }
        assert!((s[(0, 0)] - 0.09003).abs() < 5e-6);
        assert!((s[(0, 1)] - 0.24473).abs() < 5e-6);
        assert!((s[(0, 2)] - 0.66524).abs() < 5e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = Rng::new(9);
        let a = rng.normal_matrix(6, 9, 3.0);
        let s = softmax_rows(&a);
        for i in 0..6 {
            assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let shifted = softmax_rows(&a.map(|v| v + 17.5));
        assert!(s.max_abs_diff(&shifted) < 1e-12);
    }

    #[test]
    fn rmsnorm_zero_vector() {
        assert_eq!(rmsnorm(&[0.0; 4], &[1.0; 4], 1e-6), vec![0.0; 4]);
    }

    #[test]
    fn rmsnorm_constant_vector_is_sign() {
        let y = rmsnorm(&[-3.0; 5], &[1.0; 5], 1e-300);
        for v in y {
            assert!((v + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rmsnorm_hand_value() {
        let y = rmsnorm(&[3.0, 4.0], &[1.0, 1.0], 0.0);
        let r = 12.5f64.sqrt();
        assert!((y[0] - 3.0 / r).abs() < 1e-15);
        assert!((y[1] - 4.0 / r).abs() < 1e-15);
        assert!((y[0] - 0.84853).abs() < 5e-6 && (y[1] - 1.13137).abs() < 5e-6);
    }

    #[test]
    fn rmsnorm_backward_matches_fd() {
        let mut rng = Rng::new(4);
        let x = rng.normal_matrix(1, 7, 1.0);
        let g = rng.normal_matrix(1, 7, 1.0);
        let up = rng.normal_matrix(1, 7, 1.0);
        let eps = 1e-5;
        let loss = |xm: &Matrix| {
            let y = rmsnorm(xm.row(0), g.row(0), eps);
            y.iter().zip(up.row(0)).map(|(a, b)| a * b).sum::<f64>()
        };
        let numeric = fd_grad(loss, &x, 1e-5);
        let mut dg = vec![0.0; 7];
        let inv = inv_rms(x.row(0), eps);
        let analytic = rmsnorm_backward(x.row(0), g.row(0), inv, up.row(0), &mut dg);
        for k in 0..7 {
            let rel = (analytic[k] - numeric[(0, k)]).abs() / numeric[(0, k)].abs().max(1e-8);
            assert!(rel < 1e-4, "k={k} rel={rel}");
        }
        let g_loss = |gm: &Matrix| {
            let y = rmsnorm(x.row(0), gm.row(0), eps);
            y.iter().zip(up.row(0)).map(|(a, b)| a * b).sum::<f64>()
        };
        let numeric_g = fd_grad(g_loss, &g, 1e-5);
        for k in 0..7 {
            assert!((dg[k] - numeric_g[(0, k)]).abs() < 1e-8);
        }
    }

    #[test]
    fn silu_values() {
        assert_eq!(silu(0.0), 0.0);
        assert!((silu(40.0) - 40.0).abs() < 1e-12);
        assert!((silu(1.0) - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
        assert!((silu(1.0) - 0.731059).abs() < 5e-7);
    }

    #[test]
    fn silu_grad_matches_fd() {
        for &x in &[-3.0, -0.4, 0.0, 0.7, 2.5] {
            let h = 1e-5;
            let numeric = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((silu_grad(x) - numeric).abs() < 1e-9);
        }
    }
}
