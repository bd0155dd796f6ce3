//! Independent reference implementations used by the integration tests.
//! Nothing here calls into the library's numerics.

#![allow(dead_code)]

/// Matern 5/2 with ARD lengthscales, written out from the closed form.
pub fn matern52(x: &[f64], y: &[f64], lengthscales: &[f64], signal_variance: f64) -> f64 {
    let r2: f64 = x
        .iter()
        .zip(y)
        .zip(lengthscales)
        .map(|((a, b), l)| ((a - b) / l).powi(2))
        .sum();
    let r = r2.sqrt();
    let s5 = 5f64.sqrt();
    signal_variance * (1.0 + s5 * r + 5.0 * r2 / 3.0) * (-s5 * r).exp()
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
pub fn solve_dense(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a.iter().zip(b).map(|(row, &bi)| {
        let mut r = row.clone();
        r.push(bi);
        r
    }).collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        m.swap(col, pivot);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            for k in col..=n {
                m[row][k] -= f * m[col][k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| m[row][k] * x[k]).sum();
        x[row] = (m[row][n] - s) / m[row][row];
    }
    x
}

/// Dense GP posterior at `x` in original units: `(mean, latent variance)`.
/// Values are standardized with the population mean and standard deviation,
/// `diag_extra` is added to the kernel diagonal on top of the noise.
pub struct DenseGp {
    pub points: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
    pub diag_extra: f64,
}

impl DenseGp {
    fn standardization(&self) -> (f64, f64) {
        let n = self.values.len() as f64;
        let mean = self.values.iter().sum::<f64>() / n;
        let sd = (self.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        (mean, if sd > 1e-12 * mean.abs().max(1.0) { sd } else { 1.0 })
    }

    fn gram(&self) -> Vec<Vec<f64>> {
        let n = self.points.len();
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        let k = matern52(&self.points[i], &self.points[j], &self.lengthscales, self.signal_variance);
                        if i == j {
                            k + self.noise_variance + self.diag_extra
                        } else {
                            k
                        }
                    })
                    .collect()
            })
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let (mu, scale) = self.standardization();
        let y: Vec<f64> = self.values.iter().map(|v| (v - mu) / scale).collect();
        let a = self.gram();
        let k: Vec<f64> = self
            .points
            .iter()
            .map(|p| matern52(p, x, &self.lengthscales, self.signal_variance))
            .collect();
        let alpha = solve_dense(&a, &y);
        let w = solve_dense(&a, &k);
        let mean = k.iter().zip(&alpha).map(|(a, b)| a * b).sum::<f64>();
        let var = self.signal_variance - k.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        (mu + scale * mean, var * scale * scale)
    }
}

/// Standard normal CDF by composite Simpson integration of the density.
pub fn std_normal_cdf(z: f64) -> f64 {
    if z < -12.0 {
        return 0.0;
    }
    // Composite Simpson on [-12, z].
    let n = 20_000;
    let h = (z + 12.0) / n as f64;
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(-12.0) + pdf(z);
    for i in 1..n {
        let t = -12.0 + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(t);
    }
    s * h / 3.0
}

/// Median by the nearest-rank rule.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((0.5 * v.len() as f64).ceil() as usize).max(1);
    v[rank - 1]
}
