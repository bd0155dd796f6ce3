//! Acquisition functions over a fitted GP and their maximization.
//!
//! Everything here uses the minimization convention: EI and qNEI reward
//! predicted values *below* the incumbent, and LCB is the optimistic bound
//! `mu - beta * sigma`, which the suggestion step minimizes.

use std::f64::consts::PI;
use std::sync::OnceLock;

use argmin::core::{CostFunction, Error as ArgminError, Executor};
use argmin::solver::neldermead::NelderMead;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sobol::params::JoeKuoD6;
use sobol::Sobol;
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::gp::{cholesky_with_jitter, matern52_cov, GpError, GpModel};
use crate::space::{Config, ParamSpace, SpaceError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AcqError {
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("invalid acquisition settings: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcqKind {
    Ei,
    Lcb,
    Qnei,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcqSpec {
    pub kind: AcqKind,
    /// LCB exploration weight.
    pub beta: f64,
    /// Monte-Carlo draws for qNEI.
    pub mc_samples: usize,
    /// Seed of the common random numbers shared by all candidates of one
    /// BO iteration.
    pub mc_seed: u64,
}

impl AcqSpec {
    pub const DEFAULT_BETA: f64 = 2.0;
    pub const DEFAULT_MC_SAMPLES: usize = 128;

    pub fn ei() -> Self {
        Self {
            kind: AcqKind::Ei,
            beta: Self::DEFAULT_BETA,
            mc_samples: Self::DEFAULT_MC_SAMPLES,
            mc_seed: 0,
        }
    }

    pub fn lcb(beta: f64) -> Self {
        Self {
            kind: AcqKind::Lcb,
            beta,
            ..Self::ei()
        }
    }

    pub fn qnei(mc_samples: usize, mc_seed: u64) -> Self {
        Self {
            kind: AcqKind::Qnei,
            mc_samples,
            mc_seed,
            ..Self::ei()
        }
    }

    pub fn validate(&self) -> Result<(), AcqError> {
        if !(self.beta >= 0.0) {
            return Err(AcqError::InvalidSpec(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.kind == AcqKind::Qnei && self.mc_samples < 16 {
            return Err(AcqError::InvalidSpec(format!(
                "qnei needs at least 16 MC samples, got {}",
                self.mc_samples
            )));
        }
        Ok(())
    }

    fn minimizes(&self) -> bool {
        self.kind == AcqKind::Lcb
    }
}

/// Candidate budget for [`maximize_acquisition`].
#[derive(Debug, Clone, PartialEq)]
pub struct MaximizeOptions {
    pub candidates: usize,
    pub refine: usize,
    pub refine_iters: u64,
}

impl Default for MaximizeOptions {
    fn default() -> Self {
        Self {
            candidates: 1024,
            refine: 10,
            refine_iters: 100,
        }
    }
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// `E[max(0, incumbent - f)]` for `f ~ N(mean, sd^2)`.
pub fn expected_improvement_closed_form(mean: f64, sd: f64, incumbent: f64) -> f64 {
    if sd < 1e-12 {
        return (incumbent - mean).max(0.0);
    }
    let z = (incumbent - mean) / sd;
    (sd * (z * std_normal_cdf(z) + std_normal_pdf(z))).max(0.0)
}

/// Analytic EI under the latent (noise-free) posterior; `incumbent` is the
/// raw minimum observed value.
pub fn expected_improvement(model: &GpModel, x: &[f64], incumbent: f64) -> f64 {
    let p = model.predict(x, false);
    expected_improvement_closed_form(p.mean, p.std_dev(), incumbent)
}

pub fn lcb_score(model: &GpModel, x: &[f64], beta: f64) -> f64 {
    let p = model.predict(x, false);
    p.mean - beta * p.std_dev()
}

/// Minimum observed value of the model's dataset.
pub fn incumbent(model: &GpModel) -> f64 {
    model.dataset().min_value().unwrap_or(f64::INFINITY)
}

/// Randomized quasi-Monte-Carlo standard normals: row `r` is the `r`-th
/// point of a `dims`-dimensional Sobol sequence, shifted modulo 1 by a
/// uniform vector drawn from `seed` and mapped through the normal quantile.
/// Each row is marginally a standard normal vector; rows are not independent.
pub fn qmc_normals(rows: usize, dims: usize, seed: u64) -> DMatrix<f64> {
    static PARAMS: OnceLock<JoeKuoD6> = OnceLock::new();
    let params = PARAMS.get_or_init(JoeKuoD6::extended);
    let mut out = DMatrix::zeros(rows, dims);
    if rows == 0 || dims == 0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift: Vec<f64> = (0..dims).map(|_| rng.random::<f64>()).collect();
    let unit = Normal::standard();
    for (r, point) in Sobol::<f64>::new(dims, params).take(rows).enumerate() {
        for (j, u) in point.into_iter().enumerate() {
            let v = (u + shift[j]).fract().clamp(f64::EPSILON, 1.0 - f64::EPSILON);
            out[(r, j)] = unit.inverse_cdf(v);
        }
    }
    out
}

/// Precomputed state for scoring many candidates with the same common random
/// numbers.
///
/// Writing the joint posterior over `(observed points, x)` as a block
/// Cholesky factor `[[L_o, 0], [l^T, d]]`, a draw is
/// `f_obs = mu_o + L_o z_o`, `f_x = mu_x + l . z_o + d z_x`. The observed
/// block and the base normals do not depend on `x`, so they are computed once.
/// Observed points enter in ascending lexicographic order, so the score does
/// not depend on the order the data arrived in. The base normals are the
/// rows of [`qmc_normals`] seeded by `mc_seed`.
pub struct QneiContext<'a> {
    model: &'a GpModel,
    /// `K_oo (K_oo + tau2 I)^-1`, used for the posterior cross-covariance.
    gain: DMatrix<f64>,
    chol_obs: DMatrix<f64>,
    /// Model index of each row of `chol_obs`.
    order: Vec<usize>,
    z_obs: DMatrix<f64>,
    z_x: DVector<f64>,
    /// Per-draw minimum over the observed points (standardized units).
    sample_minima: DVector<f64>,
}

impl<'a> QneiContext<'a> {
    pub fn new(model: &'a GpModel, spec: &AcqSpec) -> Result<Self, AcqError> {
        let obs = model.dataset().points();
        let n = obs.len();
        let s = spec.mc_samples;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            let key = |i: usize| obs[i].iter().chain(std::iter::once(&model.dataset().values()[i]));
            key(a)
                .zip(key(b))
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(a.cmp(&b))
        });
        let sorted: Vec<Vec<f64>> = order.iter().map(|&i| obs[i].clone()).collect();
        let (mean_obs, cov_obs) = model.joint_posterior_standardized(&sorted);
        let (chol, _) = cholesky_with_jitter(&cov_obs)?;
        let chol_obs = chol.l();

        // Column 0 drives the candidate, the rest the observed points.
        let normals = qmc_normals(s, n + 1, spec.mc_seed);
        let z_x: DVector<f64> = normals.column(0).into_owned();
        let z_obs: DMatrix<f64> = normals.columns(1, n).into_owned();
        // f_obs draws as rows: mu^T + Z L^T
        let f_obs = &z_obs * chol_obs.transpose();
        let sample_minima = DVector::from_iterator(
            s,
            (0..s).map(|row| {
                (0..n)
                    .map(|j| mean_obs[j] + f_obs[(row, j)])
                    .fold(f64::INFINITY, f64::min)
            }),
        );

        let k_oo = crate::gp::gram(obs, model.hyperparams());
        // (A^-1 K)^T = K A^-1 since both are symmetric.
        let gain = model.solve(&k_oo).transpose();

        Ok(Self {
            model,
            gain,
            chol_obs,
            order,
            z_obs,
            z_x,
            sample_minima,
        })
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        let draws = self.improvements(x);
        draws.iter().sum::<f64>() / draws.len() as f64
    }

    /// Per-draw improvement at `x` in original units.
    fn improvements(&self, x: &[f64]) -> Vec<f64> {
        let model = self.model;
        let obs = model.dataset().points();
        let n = obs.len();
        let hp = model.hyperparams();
        let k = DVector::from_iterator(n, obs.iter().map(|p| matern52_cov(p, x, hp)));
        let mean_x = k.dot(model.alpha());
        let mut v = DMatrix::from_column_slice(n, 1, k.as_slice());
        model.solve_lower(&mut v);
        let var_x = (hp.signal_variance - v.column(0).norm_squared()).max(0.0);

        let cross = &k - &self.gain * &k;
        let cross = DVector::from_iterator(n, self.order.iter().map(|&i| cross[i]));
        let l = self
            .chol_obs
            .solve_lower_triangular(&cross)
            .unwrap_or_else(|| DVector::zeros(n));
        let resid = (var_x - l.norm_squared()).max(0.0).sqrt();

        let shifted = &self.z_obs * &l;
        let scale = model.standardization().scale;
        (0..self.z_x.len())
            .map(|row| {
                let f_x = mean_x + shifted[row] + resid * self.z_x[row];
                (self.sample_minima[row] - f_x).max(0.0) * scale
            })
            .collect()
    }
}

/// Monte-Carlo noisy EI: the mean over joint latent draws at the observed
/// points and `x` of `max(0, min f(observed) - f(x))`.
pub fn qnei_score(model: &GpModel, x: &[f64], spec: &AcqSpec) -> Result<f64, AcqError> {
    spec.validate()?;
    Ok(QneiContext::new(model, spec)?.score(x))
}

/// A scorer bound to one model and acquisition spec.
enum Scorer<'a> {
    Ei { model: &'a GpModel, incumbent: f64 },
    Lcb { model: &'a GpModel, beta: f64 },
    Qnei(QneiContext<'a>),
}

impl Scorer<'_> {
    fn score(&self, x: &[f64]) -> f64 {
        match self {
            Scorer::Ei { model, incumbent } => expected_improvement(model, x, *incumbent),
            Scorer::Lcb { model, beta } => lcb_score(model, x, *beta),
            Scorer::Qnei(ctx) => ctx.score(x),
        }
    }
}

/// Nelder-Mead objective; coordinates are projected back into the unit cube.
struct RefineProblem<'a, 'b> {
    scorer: &'a Scorer<'b>,
    sign: f64,
}

fn project(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.clamp(0.0, 1.0)).collect()
}

impl CostFunction for RefineProblem<'_, '_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, x: &Vec<f64>) -> Result<f64, ArgminError> {
        Ok(self.sign * self.scorer.score(&project(x)))
    }
}

fn initial_simplex(x: &[f64]) -> Vec<Vec<f64>> {
    let step = 0.05;
    let mut simplex = vec![x.to_vec()];
    for i in 0..x.len() {
        let mut p = x.to_vec();
        p[i] = if x[i] + step <= 1.0 { x[i] + step } else { x[i] - step };
        simplex.push(p);
    }
    simplex
}

/// Best unit-cube point and its acquisition value.
fn optimize_scorer<R: Rng + ?Sized>(
    scorer: &Scorer<'_>,
    dim: usize,
    minimize: bool,
    options: &MaximizeOptions,
    rng: &mut R,
) -> (Vec<f64>, f64) {
    let sign = if minimize { 1.0 } else { -1.0 };
    // Lower cost is better for everything below.
    let mut scored: Vec<(f64, usize, Vec<f64>)> = (0..options.candidates.max(1))
        .map(|i| {
            let x: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
            (sign * scorer.score(&x), i, x)
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let (mut best_cost, _, mut best_x) = scored[0].clone();
    for (cost, _, start) in scored.iter().take(options.refine) {
        let problem = RefineProblem { scorer, sign };
        let solver = NelderMead::new(initial_simplex(start))
            .with_sd_tolerance(1e-10)
            .expect("valid tolerance");
        let refined = Executor::new(problem, solver)
            .configure(|s| s.max_iters(options.refine_iters))
            .run()
            .ok()
            .and_then(|res| {
                let x = project(res.state.best_param.as_ref()?);
                Some((sign * scorer.score(&x), x))
            });
        let (c, x) = match refined {
            Some((c, x)) if c < *cost => (c, x),
            _ => (*cost, start.clone()),
        };
        if c < best_cost {
            best_cost = c;
            best_x = x;
        }
    }
    (best_x, sign * best_cost)
}

fn build_scorer<'a>(model: &'a GpModel, spec: &AcqSpec) -> Result<Scorer<'a>, AcqError> {
    spec.validate()?;
    Ok(match spec.kind {
        AcqKind::Ei => Scorer::Ei {
            model,
            incumbent: incumbent(model),
        },
        AcqKind::Lcb => Scorer::Lcb {
            model,
            beta: spec.beta,
        },
        AcqKind::Qnei => Scorer::Qnei(QneiContext::new(model, spec)?),
    })
}

/// Unit-cube optimum of the acquisition and its value: the best of
/// `options.candidates` uniform draws, each of the top `options.refine`
/// polished by bounded Nelder-Mead. EI and qNEI are maximized, LCB minimized.
pub fn optimize_acquisition<R: Rng + ?Sized>(
    model: &GpModel,
    spec: &AcqSpec,
    options: &MaximizeOptions,
    rng: &mut R,
) -> Result<(Vec<f64>, f64), AcqError> {
    let scorer = build_scorer(model, spec)?;
    Ok(optimize_scorer(&scorer, model.dim(), spec.minimizes(), options, rng))
}

pub fn maximize_acquisition<R: Rng + ?Sized>(
    model: &GpModel,
    space: &ParamSpace,
    spec: &AcqSpec,
    options: &MaximizeOptions,
    rng: &mut R,
) -> Result<Config, AcqError> {
    let (x, _) = optimize_acquisition(model, spec, options, rng)?;
    Ok(space.from_unit(&x)?)
}

/// Best predicted configuration: the minimizer of the posterior mean, found
/// by optimizing LCB with `beta = 0`.
pub fn recommend_best_predicted<R: Rng + ?Sized>(
    model: &GpModel,
    space: &ParamSpace,
    options: &MaximizeOptions,
    rng: &mut R,
) -> Result<Config, AcqError> {
    maximize_acquisition(model, space, &AcqSpec::lcb(0.0), options, rng)
}
