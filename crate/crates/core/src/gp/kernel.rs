use nalgebra::DMatrix;

use super::GpHyperparams;

const SQRT5: f64 = 2.236_067_977_499_79;

/// Scaled distance `r = sqrt(sum(((x_i - y_i) / l_i)^2))`.
#[inline]
pub(crate) fn scaled_distance(x: &[f64], y: &[f64], lengthscales: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .zip(lengthscales)
        .map(|((a, b), l)| {
            let t = (a - b) / l;
            t * t
        })
        .sum::<f64>()
        .sqrt()
}

/// Matern 5/2 shape as a function of the scaled distance, unit variance.
#[inline]
pub(crate) fn matern52_shape(r: f64) -> f64 {
    let sr = SQRT5 * r;
    (1.0 + sr + 5.0 * r * r / 3.0) * (-sr).exp()
}

/// `d k / d log(l_k) = s2 * 5/3 * (1 + sqrt5 r) exp(-sqrt5 r) * (dx_k / l_k)^2`; this
/// returns the part shared by every dimension.
#[inline]
pub(crate) fn matern52_lengthscale_factor(r: f64) -> f64 {
    let sr = SQRT5 * r;
    5.0 / 3.0 * (1.0 + sr) * (-sr).exp()
}

/// Matern 5/2 covariance with ARD lengthscales.
pub fn matern52_cov(x: &[f64], y: &[f64], hp: &GpHyperparams) -> f64 {
    hp.signal_variance * matern52_shape(scaled_distance(x, y, &hp.lengthscales))
}

/// Dense covariance matrix between two point sets (rows are points).
pub(crate) fn cross_cov(a: &[Vec<f64>], b: &[Vec<f64>], hp: &GpHyperparams) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| matern52_cov(&a[i], &b[j], hp))
}

/// Symmetric covariance matrix of one point set; the diagonal is exactly `s2`.
pub(crate) fn gram(points: &[Vec<f64>], hp: &GpHyperparams) -> DMatrix<f64> {
    let n = points.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = hp.signal_variance;
        for j in 0..i {
            let v = matern52_cov(&points[i], &points[j], hp);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}
