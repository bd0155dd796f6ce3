//! Type-II maximum likelihood for the kernel hyperparameters.
//!
//! The search runs in natural-log hyperparameter space with the box bounds
//! folded in through a logistic reparameterization, so an unconstrained
//! quasi-Newton solver (L-BFGS with analytic gradients) can be used directly.

use std::cell::RefCell;
use std::f64::consts::PI;

use argmin::core::{CostFunction, Error as ArgminError, Executor, Gradient};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::LBFGS;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernel::{matern52_lengthscale_factor, matern52_shape, scaled_distance};
use super::{
    cholesky_with_jitter, Dataset, GpError, GpHyperparams, GpModel, Standardization,
    LENGTHSCALE_BOUNDS, NOISE_VARIANCE_BOUNDS, SIGNAL_VARIANCE_BOUNDS,
};

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    /// Random restarts of the local optimizer.
    pub restarts: usize,
    /// Iteration cap per restart.
    pub max_iters: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            restarts: 10,
            max_iters: 60,
        }
    }
}

/// `-1/2 y^T A^-1 y - 1/2 log|A| - n/2 log(2 pi)` with `A = K + tau2 I`.
/// `standardize` applies the same output normalization as [`fit_gp`].
pub fn log_marginal_likelihood(
    hp: &GpHyperparams,
    data: &Dataset,
    standardize: bool,
) -> Result<f64, GpError> {
    if data.is_empty() {
        return Err(GpError::InsufficientData { needed: 1, got: 0 });
    }
    let s = if standardize {
        Standardization::from_values(data.values())
    } else {
        Standardization::IDENTITY
    };
    let y = DVector::from_iterator(data.len(), data.values().iter().map(|v| s.apply(*v)));
    let mut a = super::gram(data.points(), hp);
    for i in 0..a.nrows() {
        a[(i, i)] += hp.noise_variance;
    }
    let (chol, _) = cholesky_with_jitter(&a)?;
    let alpha = chol.solve(&y);
    let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(-0.5 * y.dot(&alpha) - 0.5 * log_det - 0.5 * data.len() as f64 * (2.0 * PI).ln())
}

/// Log-space bounds in parameter order `[ln l_1..ln l_d, ln s2, ln tau2]`.
fn log_bounds(d: usize) -> Vec<(f64, f64)> {
    let ln = |(a, b): (f64, f64)| (a.ln(), b.ln());
    let mut b = vec![ln(LENGTHSCALE_BOUNDS); d];
    b.push(ln(SIGNAL_VARIANCE_BOUNDS));
    b.push(ln(NOISE_VARIANCE_BOUNDS));
    b
}

fn sigmoid(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn hyperparams_from_log(theta: &[f64]) -> GpHyperparams {
    let d = theta.len() - 2;
    GpHyperparams {
        lengthscales: theta[..d].iter().map(|t| t.exp()).collect(),
        signal_variance: theta[d].exp(),
        noise_variance: theta[d + 1].exp(),
    }
}

/// Log marginal likelihood and its gradient with respect to the log
/// hyperparameters.
fn mll_with_gradient(
    points: &[Vec<f64>],
    y: &DVector<f64>,
    theta: &[f64],
) -> Result<(f64, Vec<f64>), GpError> {
    let n = points.len();
    let d = theta.len() - 2;
    let hp = hyperparams_from_log(theta);
    let s2 = hp.signal_variance;
    let tau2 = hp.noise_variance;

    // Pairwise scaled distances are reused by the gradient.
    let mut r = DMatrix::zeros(n, n);
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        a[(i, i)] = s2 + tau2;
        for j in 0..i {
            let rij = scaled_distance(&points[i], &points[j], &hp.lengthscales);
            let k = s2 * matern52_shape(rij);
            r[(i, j)] = rij;
            a[(i, j)] = k;
            a[(j, i)] = k;
        }
    }
    let (chol, _) = cholesky_with_jitter(&a)?;
    let alpha = chol.solve(y);
    let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let mll = -0.5 * y.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * PI).ln();

    // dL/dtheta = 1/2 tr((alpha alpha^T - A^-1) dA/dtheta)
    let a_inv = chol.inverse();
    let mut grad = vec![0.0; d + 2];
    let mut trace_w = 0.0;
    for i in 0..n {
        let w_ii = alpha[i] * alpha[i] - a_inv[(i, i)];
        trace_w += w_ii;
        grad[d] += w_ii * s2;
        for j in 0..i {
            let w = 2.0 * (alpha[i] * alpha[j] - a_inv[(i, j)]);
            let rij = r[(i, j)];
            grad[d] += w * s2 * matern52_shape(rij);
            let common = w * s2 * matern52_lengthscale_factor(rij);
            for (k, g) in grad.iter_mut().take(d).enumerate() {
                let t = (points[i][k] - points[j][k]) / hp.lengthscales[k];
                *g += common * t * t;
            }
        }
    }
    grad[d + 1] = trace_w * tau2;
    for g in &mut grad {
        *g *= 0.5;
    }
    Ok((mll, grad))
}

/// Negative MLL in the unconstrained logistic coordinates. Evaluations are
/// cached so the solver's separate cost and gradient calls share one
/// factorization; the best valid point seen goes to the shared `best` slot.
struct MllProblem<'a> {
    points: &'a [Vec<f64>],
    y: &'a DVector<f64>,
    bounds: &'a [(f64, f64)],
    last: RefCell<Option<(Vec<f64>, f64, Vec<f64>)>>,
    best: &'a RefCell<Option<(f64, Vec<f64>)>>,
}

impl MllProblem<'_> {
    fn theta(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.bounds)
            .map(|(&u, &(lo, hi))| lo + (hi - lo) * sigmoid(u.clamp(-40.0, 40.0)))
            .collect()
    }

    fn evaluate(&self, u: &[f64]) -> Result<(f64, Vec<f64>), ArgminError> {
        if let Some((pu, cost, grad)) = self.last.borrow().as_ref() {
            if pu.as_slice() == u {
                return Ok((*cost, grad.clone()));
            }
        }
        let theta = self.theta(u);
        let (mll, grad_theta) = mll_with_gradient(self.points, self.y, &theta)?;
        let cost = -mll;
        let grad: Vec<f64> = grad_theta
            .iter()
            .zip(u)
            .zip(self.bounds)
            .map(|((g, &u), &(lo, hi))| {
                let s = sigmoid(u.clamp(-40.0, 40.0));
                -g * (hi - lo) * s * (1.0 - s)
            })
            .collect();
        {
            let mut best = self.best.borrow_mut();
            if cost.is_finite() && best.as_ref().is_none_or(|(c, _)| cost < *c) {
                *best = Some((cost, theta));
            }
        }
        *self.last.borrow_mut() = Some((u.to_vec(), cost, grad.clone()));
        Ok((cost, grad))
    }
}

impl CostFunction for MllProblem<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, u: &Self::Param) -> Result<f64, ArgminError> {
        Ok(self.evaluate(u)?.0)
    }
}

impl Gradient for MllProblem<'_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;

    fn gradient(&self, u: &Self::Param) -> Result<Vec<f64>, ArgminError> {
        Ok(self.evaluate(u)?.1)
    }
}

/// Fits kernel hyperparameters by maximizing the log marginal likelihood of
/// the standardized values, using `options.restarts` random starts drawn from
/// a stream seeded with `seed`. Identical inputs give bit-identical fits.
pub fn fit_gp(data: &Dataset, options: &FitOptions, seed: u64) -> Result<GpModel, GpError> {
    if data.len() < 2 {
        return Err(GpError::InsufficientData {
            needed: 2,
            got: data.len(),
        });
    }
    let s = Standardization::from_values(data.values());
    let y = DVector::from_iterator(data.len(), data.values().iter().map(|v| s.apply(*v)));
    let bounds = log_bounds(data.dim());
    let best = RefCell::new(None);
    let mut last_error = None;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..options.restarts.max(1) {
        let start: Vec<f64> = bounds
            .iter()
            .map(|_| logit(rng.random_range(0.05..0.95)))
            .collect();
        let problem = MllProblem {
            points: data.points(),
            y: &y,
            bounds: &bounds,
            last: RefCell::new(None),
            best: &best,
        };
        let solver = LBFGS::new(MoreThuenteLineSearch::new(), 7)
            .with_tolerance_grad(1e-6)
            .and_then(|s| s.with_tolerance_cost(1e-10))
            .map_err(|e| GpError::NumericalFailure(e.to_string()))?;
        // A failed restart still contributes every point it evaluated.
        if let Err(e) = Executor::new(problem, solver)
            .configure(|state| state.param(start).max_iters(options.max_iters))
            .run()
        {
            log::debug!("mll restart failed: {e}");
            last_error = Some(e.to_string());
        }
    }
    let (_, theta) = best.into_inner().ok_or_else(|| {
        GpError::NumericalFailure(
            last_error.unwrap_or_else(|| "no valid hyperparameters found".into()),
        )
    })?;
    GpModel::condition(data.clone(), hyperparams_from_log(&theta), true)
}
