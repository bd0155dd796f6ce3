//! Seed-deterministic synthetic objectives.
//!
//! Every synthetic function is defined on the unit cube of the search space.
//! A noisy evaluation is `f(u) + noise_sd * range * z / sqrt(b)` plus a
//! partial-budget penalty `(1 - b) * bias_scale * range`, where `b` is the
//! budget fraction and `z` a standard normal drawn from a generator seeded by
//! hashing the canonical config bytes together with the trial seed.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::space::{Config, ParamSpace};

use super::HarnessError;

pub const DEFAULT_BIAS_SCALE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    #[serde(rename = "noisy_quadratic_1d")]
    NoisyQuadratic1d,
    #[serde(rename = "noisy_branin_2d")]
    NoisyBranin2d,
    NoisyBraninHetero,
}

/// Branin on `x1 in [-5, 10]`, `x2 in [0, 15]`.
pub fn branin(x1: f64, x2: f64) -> f64 {
    let b = 5.1 / (4.0 * PI * PI);
    let c = 5.0 / PI;
    let t = 1.0 / (8.0 * PI);
    let a = x2 - b * x1 * x1 + c * x1 - 6.0;
    a * a + 10.0 * (1.0 - t) * x1.cos() + 10.0
}

pub const BRANIN_MIN: f64 = 0.397_887_357_729_738_2;

fn branin_unit(u: &[f64]) -> f64 {
    branin(-5.0 + 15.0 * u[0], 15.0 * u[1])
}

impl SyntheticKind {
    pub fn dim(self) -> usize {
        match self {
            SyntheticKind::NoisyQuadratic1d => 1,
            _ => 2,
        }
    }

    /// Noise-free loss at unit coordinates.
    pub fn true_value(self, u: &[f64]) -> f64 {
        match self {
            SyntheticKind::NoisyQuadratic1d => (u[0] - 0.6).powi(2),
            _ => branin_unit(u),
        }
    }

    pub fn global_min(self) -> f64 {
        match self {
            SyntheticKind::NoisyQuadratic1d => 0.0,
            _ => BRANIN_MIN,
        }
    }

    /// Max minus min of the noise-free function over the unit cube.
    pub fn range(self) -> f64 {
        match self {
            SyntheticKind::NoisyQuadratic1d => 0.36,
            // The maximum sits at the (-5, 0) corner.
            _ => branin(-5.0, 0.0) - BRANIN_MIN,
        }
    }

    /// Multiplier on the noise term; the hetero variant grows it along the
    /// first coordinate while keeping its average at 1.
    fn noise_factor(self, u: &[f64]) -> f64 {
        match self {
            SyntheticKind::NoisyBraninHetero => 0.25 + 1.5 * u[0],
            _ => 1.0,
        }
    }
}

/// First eight bytes of SHA-256, little endian.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(head)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticObjective {
    pub kind: SyntheticKind,
    pub noise_sd: f64,
    pub bias_scale: f64,
}

impl SyntheticObjective {
    pub fn new(kind: SyntheticKind, noise_sd: f64) -> Self {
        Self {
            kind,
            noise_sd,
            bias_scale: DEFAULT_BIAS_SCALE,
        }
    }

    pub fn validate(&self, space: &ParamSpace) -> Result<(), HarnessError> {
        if !(0.0..=1.0).contains(&self.noise_sd) {
            return Err(HarnessError::InvalidSpec(format!(
                "noise_sd must be in [0, 1], got {}",
                self.noise_sd
            )));
        }
        if !(self.bias_scale >= 0.0 && self.bias_scale.is_finite()) {
            return Err(HarnessError::InvalidSpec(format!(
                "bias_scale must be non-negative, got {}",
                self.bias_scale
            )));
        }
        if space.dim() != self.kind.dim() {
            return Err(HarnessError::InvalidSpec(format!(
                "{:?} needs a {}-dimensional space, got {}",
                self.kind,
                self.kind.dim(),
                space.dim()
            )));
        }
        Ok(())
    }

    pub fn true_value(&self, space: &ParamSpace, config: &Config) -> Result<f64, HarnessError> {
        Ok(self.kind.true_value(&space.to_unit(config)?))
    }

    pub fn evaluate(
        &self,
        space: &ParamSpace,
        config: &Config,
        seed: u64,
        budget_fraction: f64,
    ) -> Result<f64, HarnessError> {
        if !(budget_fraction > 0.0 && budget_fraction <= 1.0) {
            return Err(HarnessError::InvalidSpec(format!(
                "budget fraction must be in (0, 1], got {budget_fraction}"
            )));
        }
        let u = space.to_unit(config)?;
        let f = self.kind.true_value(&u);
        let range = self.kind.range();
        let mut bytes = space.canonical_bytes(config);
        bytes.extend_from_slice(&seed.to_le_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(&bytes));
        let z: f64 = StandardNormal.sample(&mut rng);
        let noise = self.noise_sd * range * self.kind.noise_factor(&u) * z / budget_fraction.sqrt();
        let bias = (1.0 - budget_fraction) * self.bias_scale * range;
        Ok(f + noise + bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::ParamSpec;

    fn unit_space(d: usize) -> ParamSpace {
        ParamSpace::new(
            (0..d)
                .map(|i| ParamSpec::linear(format!("x{i}"), 0.0, 1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn noise_free_quadratic() {
        let space = unit_space(1);
        let obj = SyntheticObjective::new(SyntheticKind::NoisyQuadratic1d, 0.0);
        for x in [0.0, 0.25, 0.6, 1.0] {
            let c = space.config(&[x]).unwrap();
            assert_eq!(obj.evaluate(&space, &c, 3, 1.0).unwrap(), (x - 0.6) * (x - 0.6));
        }
    }

    #[test]
    fn same_seed_same_value() {
        let space = unit_space(2);
        let obj = SyntheticObjective::new(SyntheticKind::NoisyBranin2d, 0.3);
        let c = space.config(&[0.3, 0.7]).unwrap();
        let a = obj.evaluate(&space, &c, 42, 1.0).unwrap();
        assert_eq!(a, obj.evaluate(&space, &c, 42, 1.0).unwrap());
        assert_ne!(a, obj.evaluate(&space, &c, 43, 1.0).unwrap());
    }

    #[test]
    fn branin_minimizers() {
        let space = unit_space(2);
        let obj = SyntheticObjective::new(SyntheticKind::NoisyBranin2d, 0.0);
        for (x1, x2) in [(-PI, 12.275), (PI, 2.275), (9.424_78, 2.475)] {
            let c = space.config(&[(x1 + 5.0) / 15.0, x2 / 15.0]).unwrap();
            let v = obj.evaluate(&space, &c, 0, 1.0).unwrap();
            assert!((v - 0.397887).abs() < 1e-4, "{v}");
        }
    }

    #[test]
    fn branin_grid_extremes() {
        let n = 1000;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..=n {
            for j in 0..=n {
                let v = branin_unit(&[i as f64 / n as f64, j as f64 / n as f64]);
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        assert!(lo >= BRANIN_MIN - 1e-12 && lo - BRANIN_MIN < 1e-3, "{lo}");
        assert_eq!(hi, branin(-5.0, 0.0));
        assert!((SyntheticKind::NoisyBranin2d.range() - (hi - BRANIN_MIN)).abs() < 1e-12);
    }

    #[test]
    fn partial_budget_is_biased_worse() {
        let space = unit_space(1);
        let obj = SyntheticObjective::new(SyntheticKind::NoisyQuadratic1d, 0.0);
        let c = space.config(&[0.6]).unwrap();
        let v = obj.evaluate(&space, &c, 0, 1.0 / 9.0).unwrap();
        assert!((v - (8.0 / 9.0) * 0.5 * 0.36).abs() < 1e-15);
    }

    #[test]
    fn noise_scale_matches_spec() {
        let space = unit_space(1);
        let obj = SyntheticObjective::new(SyntheticKind::NoisyQuadratic1d, 0.1);
        let c = space.config(&[0.6]).unwrap();
        let n = 20_000;
        let draws: Vec<f64> = (0..n)
            .map(|s| obj.evaluate(&space, &c, s, 0.25).unwrap() - 0.75 * 0.5 * 0.36)
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let sd = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let expected = 0.1 * 0.36 / 0.5;
        assert!(mean.abs() < 4.0 * expected / (n as f64).sqrt());
        assert!((sd / expected - 1.0).abs() < 0.03, "{sd} vs {expected}");
    }

    #[test]
    fn rejects_wrong_dimension() {
        let obj = SyntheticObjective::new(SyntheticKind::NoisyBranin2d, 0.1);
        assert!(obj.validate(&unit_space(1)).is_err());
        let bad = SyntheticObjective::new(SyntheticKind::NoisyQuadratic1d, 1.5);
        assert!(bad.validate(&unit_space(1)).is_err());
    }
}
