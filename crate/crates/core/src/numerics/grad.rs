use super::Matrix;

/// Central-difference gradient of a scalar function of a matrix.
///
/// Perturbs one entry at a time: `(f(x + h·e) − f(x − h·e)) / 2h`.
pub fn fd_grad(mut f: impl FnMut(&Matrix) -> f64, at: &Matrix, h: f64) -> Matrix {
    assert!(h > 0.0, "step must be positive");
    let mut probe = at.clone();
    let mut out = Matrix::zeros(at.rows(), at.cols());
    for idx in 0..at.data().len() {
        let orig = probe.data()[idx];
        probe.data_mut()[idx] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[idx] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[idx] = orig;
        out.data_mut()[idx] = (fp - fm) / (2.0 * h);
    }
    out
}

/// Relative error `|a − b| / max(|a|, |b|, floor)` used by gradient checks.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Matrix::from_rows(&[vec![0.3, -2.0], vec![5.0, 1.0]]);
        let g = fd_grad(|m| m.sum(), &x, 1e-5);
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn square_sum_gradient() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]);
        let g = fd_grad(|m| m.data().iter().map(|v| v * v).sum(), &x, 1e-5);
        assert!((g[(0, 0)] - 2.0).abs() < 1e-8);
        assert!((g[(0, 1)] - 4.0).abs() < 1e-8);
    }
}
