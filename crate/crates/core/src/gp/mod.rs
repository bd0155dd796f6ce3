//! Zero-mean Gaussian process surrogate with a Matern 5/2 ARD kernel and a
//! single homoscedastic noise variance.
//!
//! Inputs live in the unit cube. Outputs are standardized to zero mean and
//! unit variance before fitting; predictions are reported in the original
//! output units.

mod fit;
mod kernel;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

pub use fit::{fit_gp, log_marginal_likelihood, FitOptions};
pub use kernel::matern52_cov;

pub(crate) use kernel::{cross_cov, gram};

pub const LENGTHSCALE_BOUNDS: (f64, f64) = (1e-3, 10.0);
pub const SIGNAL_VARIANCE_BOUNDS: (f64, f64) = (1e-4, 100.0);
pub const NOISE_VARIANCE_BOUNDS: (f64, f64) = (1e-8, 10.0);

/// Diagonal jitter ladder tried after a plain Cholesky attempt fails.
const JITTER_START: f64 = 1e-9;
const JITTER_MAX: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpError {
    #[error("need at least {needed} observations, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("invalid dataset: {0}")]
    InvalidData(String),
}

/// Observations in the unit cube with their (minimization) objective values.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    points: Vec<Vec<f64>>,
    values: Vec<f64>,
}

impl Dataset {
    pub fn new(points: Vec<Vec<f64>>, values: Vec<f64>) -> Result<Self, GpError> {
        if points.len() != values.len() {
            return Err(GpError::InvalidData(format!(
                "{} points but {} values",
                points.len(),
                values.len()
            )));
        }
        if let Some(d) = points.first().map(Vec::len) {
            if d == 0 {
                return Err(GpError::InvalidData("zero-dimensional points".into()));
            }
            for p in &points {
                if p.len() != d {
                    return Err(GpError::InvalidData("ragged point dimensions".into()));
                }
                if p.iter().any(|u| !(0.0..=1.0).contains(u)) {
                    return Err(GpError::InvalidData(format!("point {p:?} outside unit cube")));
                }
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GpError::InvalidData("non-finite value".into()));
        }
        Ok(Self { points, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn min_value(&self) -> Option<f64> {
        self.values.iter().copied().reduce(f64::min)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpHyperparams {
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    /// Observation noise variance in standardized output units.
    pub noise_variance: f64,
}

/// Affine output normalization: `standardized = (value - mean) / scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Standardization {
    pub mean: f64,
    pub scale: f64,
}

impl Standardization {
    pub const IDENTITY: Self = Self {
        mean: 0.0,
        scale: 1.0,
    };

    /// Population mean and standard deviation; a zero spread clamps the scale to 1.
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        let scale = if sd > 1e-12 * mean.abs().max(1.0) {
            sd
        } else {
            1.0
        };
        Self { mean, scale }
    }

    fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorPrediction {
    pub mean: f64,
    pub variance: f64,
    pub includes_observation_noise: bool,
}

impl PosteriorPrediction {
    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Cholesky factorization with the bounded jitter policy: plain attempt, then
/// `1e-9, 1e-8, ..., 1e-4` added to the diagonal. Returns the factor and the
/// jitter used.
pub(crate) fn cholesky_with_jitter(
    matrix: &DMatrix<f64>,
) -> Result<(Cholesky<f64, Dyn>, f64), GpError> {
    if let Some(chol) = Cholesky::new(matrix.clone()) {
        return Ok((chol, 0.0));
    }
    let mut jitter = JITTER_START;
    while jitter <= JITTER_MAX * 1.000_001 {
        let mut m = matrix.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(m) {
            return Ok((chol, jitter));
        }
        jitter *= 10.0;
    }
    Err(GpError::NumericalFailure(format!(
        "matrix of size {} not positive definite with jitter up to {JITTER_MAX:e}",
        matrix.nrows()
    )))
}

/// A GP conditioned on a dataset with fixed hyperparameters.
#[derive(Debug, Clone)]
pub struct GpModel {
    hyperparams: GpHyperparams,
    dataset: Dataset,
    standardization: Standardization,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    jitter: f64,
}

impl GpModel {
    /// Conditions the GP on `dataset` without optimizing hyperparameters.
    /// With `standardize = false` the values are used as-is.
    pub fn condition(
        dataset: Dataset,
        hyperparams: GpHyperparams,
        standardize: bool,
    ) -> Result<Self, GpError> {
        if dataset.is_empty() {
            return Err(GpError::InsufficientData { needed: 1, got: 0 });
        }
        if hyperparams.lengthscales.len() != dataset.dim() {
            return Err(GpError::InvalidData(format!(
                "{} lengthscales for {}-dimensional data",
                hyperparams.lengthscales.len(),
                dataset.dim()
            )));
        }
        let standardization = if standardize {
            Standardization::from_values(dataset.values())
        } else {
            Standardization::IDENTITY
        };
        let y = DVector::from_iterator(
            dataset.len(),
            dataset.values().iter().map(|&v| standardization.apply(v)),
        );
        let mut a = gram(dataset.points(), &hyperparams);
        for i in 0..a.nrows() {
            a[(i, i)] += hyperparams.noise_variance;
        }
        let (chol, jitter) = cholesky_with_jitter(&a)?;
        let alpha = chol.solve(&y);
        Ok(Self {
            hyperparams,
            dataset,
            standardization,
            chol,
            alpha,
            jitter,
        })
    }

    pub fn hyperparams(&self) -> &GpHyperparams {
        &self.hyperparams
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn standardization(&self) -> Standardization {
        self.standardization
    }

    /// Jitter that was added to `K + tau2 I` to make it factorizable.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.dataset.dim()
    }

    /// Lower-triangular factor `L` with `L L^T = K + tau2 I (+ jitter)`.
    pub fn cholesky_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub(crate) fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub(crate) fn cross_cov_to(&self, points: &[Vec<f64>]) -> DMatrix<f64> {
        cross_cov(self.dataset.points(), points, &self.hyperparams)
    }

    /// `(K + tau2 I)^-1 b` with the cached factor.
    pub(crate) fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// Solves `L v = b` in place for the cached factor.
    pub(crate) fn solve_lower(&self, b: &mut DMatrix<f64>) {
        self.chol.l_dirty().solve_lower_triangular_unchecked_mut(b);
    }

    /// Latent posterior mean and variance in standardized units. The raw
    /// variance may dip slightly below zero from rounding; it is clamped.
    pub(crate) fn latent_standardized(&self, x: &[f64]) -> (f64, f64) {
        let n = self.dataset.len();
        let mut k = DMatrix::from_fn(n, 1, |i, _| {
            matern52_cov(&self.dataset.points()[i], x, &self.hyperparams)
        });
        let mean = k.column(0).dot(&self.alpha);
        self.solve_lower(&mut k);
        let var = self.hyperparams.signal_variance - k.column(0).norm_squared();
        (mean, var.max(0.0))
    }

    /// Posterior at `x` in original output units; `with_noise` adds the
    /// observation noise variance.
    pub fn predict(&self, x: &[f64], with_noise: bool) -> PosteriorPrediction {
        let (m, v) = self.latent_standardized(x);
        let s = self.standardization;
        let mut variance = v * s.scale * s.scale;
        if with_noise {
            variance += self.hyperparams.noise_variance * s.scale * s.scale;
        }
        PosteriorPrediction {
            mean: s.mean + s.scale * m,
            variance,
            includes_observation_noise: with_noise,
        }
    }

    /// Joint latent posterior (standardized units) at `points`: mean vector
    /// and covariance matrix.
    pub(crate) fn joint_posterior_standardized(
        &self,
        points: &[Vec<f64>],
    ) -> (DVector<f64>, DMatrix<f64>) {
        let mut v = self.cross_cov_to(points);
        let mean = v.tr_mul(&self.alpha);
        self.solve_lower(&mut v);
        let mut cov = gram(points, &self.hyperparams) - v.tr_mul(&v);
        // Restore exact symmetry lost to rounding.
        let m = cov.nrows();
        for i in 0..m {
            for j in 0..i {
                let avg = 0.5 * (cov[(i, j)] + cov[(j, i)]);
                cov[(i, j)] = avg;
                cov[(j, i)] = avg;
            }
        }
        (mean, cov)
    }

    /// Draws `n_samples` joint samples of the latent function at `points`.
    /// Row `s` is one draw; values are in original output units.
    pub fn sample_joint<R: Rng + ?Sized>(
        &self,
        points: &[Vec<f64>],
        n_samples: usize,
        rng: &mut R,
    ) -> Result<DMatrix<f64>, GpError> {
        let m = points.len();
        if n_samples == 0 || m == 0 {
            return Ok(DMatrix::zeros(n_samples, m));
        }
        let (mean, cov) = self.joint_posterior_standardized(points);
        let (chol, _) = cholesky_with_jitter(&cov)?;
        let l = chol.l();
        let s = self.standardization;
        let mut out = DMatrix::zeros(n_samples, m);
        let mut z = DVector::zeros(m);
        for row in 0..n_samples {
            for zi in z.iter_mut() {
                *zi = rng.sample(StandardNormal);
            }
            let f = &mean + &l * &z;
            for j in 0..m {
                out[(row, j)] = s.mean + s.scale * f[j];
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hp(ls: Vec<f64>, s2: f64, tau2: f64) -> GpHyperparams {
        GpHyperparams {
            lengthscales: ls,
            signal_variance: s2,
            noise_variance: tau2,
        }
    }

    fn toy_model(tau2: f64) -> GpModel {
        let data = Dataset::new(
            vec![vec![0.1], vec![0.4], vec![0.5], vec![0.9]],
            vec![1.0, -0.5, 0.3, 2.0],
        )
        .unwrap();
        GpModel::condition(data, hp(vec![0.2], 1.3, tau2), true).unwrap()
    }

    #[test]
    fn cholesky_reproduces_matrix() {
        let model = toy_model(0.05);
        let l = model.cholesky_factor();
        let mut a = gram(model.dataset().points(), model.hyperparams());
        for i in 0..a.nrows() {
            a[(i, i)] += 0.05 + model.jitter();
        }
        let err = (&l * l.transpose() - &a).norm() / a.norm();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn dataset_validation() {
        assert!(Dataset::new(vec![vec![0.2]], vec![1.0, 2.0]).is_err());
        assert!(Dataset::new(vec![vec![1.2]], vec![1.0]).is_err());
        assert!(Dataset::new(vec![vec![0.2]], vec![f64::NAN]).is_err());
        assert!(Dataset::new(vec![vec![0.2], vec![0.1, 0.3]], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn reverts_to_prior_far_from_data() {
        let data = Dataset::new(
            vec![vec![0.0, 0.0], vec![0.05, 0.02], vec![0.01, 0.06]],
            vec![3.0, 4.0, 8.0],
        )
        .unwrap();
        let model = GpModel::condition(data, hp(vec![0.01, 0.01], 0.7, 1e-3), true).unwrap();
        let s = model.standardization();
        let p = model.predict(&[1.0, 1.0], false);
        assert!((p.mean - s.mean).abs() < 1e-3 * s.scale);
        assert!((p.variance - 0.7 * s.scale * s.scale).abs() < 1e-3);
    }

    #[test]
    fn interpolates_at_negligible_noise() {
        let model = toy_model(1e-8);
        let s = model.standardization();
        let p = model.predict(&[0.4], false);
        assert!((p.mean - -0.5).abs() < 1e-3 * s.scale);
    }

    #[test]
    fn noisy_prediction_adds_tau2() {
        let model = toy_model(0.1);
        let s = model.standardization().scale;
        let a = model.predict(&[0.3], false);
        let b = model.predict(&[0.3], true);
        assert!(b.includes_observation_noise && !a.includes_observation_noise);
        assert!((b.variance - a.variance - 0.1 * s * s).abs() < 1e-12);
        assert!(a.variance <= 1.3 * s * s + 1e-8);
    }

    #[test]
    fn sample_joint_empty_and_duplicates() {
        let model = toy_model(0.01);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let empty = model.sample_joint(&[vec![0.3]], 0, &mut rng).unwrap();
        assert_eq!(empty.shape(), (0, 1));

        // The singular joint covariance needs the 1e-9 jitter step, which
        // leaves a residual of sqrt(2e-9) * scale * z between the rows.
        let pts = vec![vec![0.7], vec![0.7]];
        let n = 200;
        let draws = model.sample_joint(&pts, n, &mut rng).unwrap();
        let diffs: Vec<f64> = (0..n).map(|r| (draws[(r, 0)] - draws[(r, 1)]).abs()).collect();
        let mean_abs = diffs.iter().sum::<f64>() / n as f64;
        assert!(mean_abs < 1e-4, "mean abs diff {mean_abs}");
        let bound = 6.0 * (2e-9f64).sqrt() * model.standardization().scale;
        assert!(diffs.iter().all(|d| *d < bound.max(1e-4)));
    }

    #[test]
    fn sample_joint_is_stream_deterministic() {
        let model = toy_model(0.01);
        let pts = vec![vec![0.2], vec![0.6], vec![0.95]];
        let a = model
            .sample_joint(&pts, 32, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        let b = model
            .sample_joint(&pts, 32, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_point_draws_match_marginal() {
        let model = toy_model(0.02);
        let x = vec![0.7];
        let n = 100_000;
        let draws = model
            .sample_joint(&[x.clone()], n, &mut ChaCha8Rng::seed_from_u64(5))
            .unwrap();
        let col = draws.column(0);
        let mean = col.mean();
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let p = model.predict(&x, false);
        let se_mean = (p.variance / n as f64).sqrt();
        // Var of the sample variance for a Gaussian is 2 sigma^4 / (n - 1).
        let se_var = p.variance * (2.0 / (n - 1) as f64).sqrt();
        assert!((mean - p.mean).abs() < 3.0 * se_mean, "{mean} vs {}", p.mean);
        assert!((var - p.variance).abs() < 3.0 * se_var, "{var} vs {}", p.variance);
    }

    #[test]
    fn constant_values_use_unit_scale() {
        let s = Standardization::from_values(&[5.0, 5.0, 5.0]);
        assert_eq!(s, Standardization { mean: 5.0, scale: 1.0 });
    }
}
