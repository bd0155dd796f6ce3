//! Box-constrained search spaces and their unit-cube embedding.
//!
//! Bounds are stored in *transformed* space: a `log10` parameter declared on
//! `[-5, -1]` is sampled uniformly in the exponent. Converting back to the raw
//! value (`10^x`) is left to the objective.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpaceError {
    #[error("search space must contain at least one parameter")]
    Empty,
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("invalid bounds for `{name}`: low ({low}) must be < high ({high})")]
    InvalidBounds { name: String, low: f64, high: f64 },
    #[error("parameter `{name}` value {value} outside [{low}, {high}]")]
    OutOfBounds {
        name: String,
        value: f64,
        low: f64,
        high: f64,
    },
    #[error("unit coordinate {index} = {value} outside [0, 1]")]
    UnitOutOfBounds { index: usize, value: f64 },
    #[error("expected {expected} coordinates, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("config is missing parameter `{0}`")]
    MissingParam(String),
    #[error("config has unknown parameter `{0}`")]
    UnknownParam(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    Linear,
    Log10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSpec {
    pub name: String,
    pub transform: Transform,
    pub low: f64,
    pub high: f64,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, transform: Transform, low: f64, high: f64) -> Self {
        Self {
            name: name.into(),
            transform,
            low,
            high,
        }
    }

    pub fn linear(name: impl Into<String>, low: f64, high: f64) -> Self {
        Self::new(name, Transform::Linear, low, high)
    }

    pub fn log10(name: impl Into<String>, low: f64, high: f64) -> Self {
        Self::new(name, Transform::Log10, low, high)
    }

    /// Raw (untransformed) value for a transformed-space coordinate.
    pub fn raw_value(&self, value: f64) -> f64 {
        match self.transform {
            Transform::Linear => value,
            Transform::Log10 => 10f64.powf(value),
        }
    }

    fn width(&self) -> f64 {
        self.high - self.low
    }
}

/// An ordered, validated collection of parameters. The order fixes the
/// unit-cube coordinate order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpace {
    params: Vec<ParamSpec>,
}

/// A point in the space: parameter name to transformed-space value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Config {
    values: BTreeMap<String, f64>,
}

impl Config {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }

    pub fn values(&self) -> &BTreeMap<String, f64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl fmt::Display for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, (k, v)) in self.values.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{k}: {v}")?;
        }
        f.write_str("}")
    }
}

impl ParamSpace {
    pub fn new(specs: Vec<ParamSpec>) -> Result<Self, SpaceError> {
        if specs.is_empty() {
            return Err(SpaceError::Empty);
        }
        let mut seen = HashSet::new();
        for spec in &specs {
            if !seen.insert(spec.name.as_str()) {
                return Err(SpaceError::DuplicateParam(spec.name.clone()));
            }
            // NaN bounds fail this comparison as well.
            if !(spec.low < spec.high) || !spec.low.is_finite() || !spec.high.is_finite() {
                return Err(SpaceError::InvalidBounds {
                    name: spec.name.clone(),
                    low: spec.low,
                    high: spec.high,
                });
            }
        }
        Ok(Self { params: specs })
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[ParamSpec] {
        &self.params
    }

    /// Draws each coordinate independently and uniformly on `[low, high]`.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Config {
        let unit: Vec<f64> = (0..self.dim()).map(|_| rng.random::<f64>()).collect();
        self.from_unit_unchecked(&unit)
    }

    pub fn check(&self, config: &Config) -> Result<(), SpaceError> {
        for name in config.values.keys() {
            if !self.params.iter().any(|p| &p.name == name) {
                return Err(SpaceError::UnknownParam(name.clone()));
            }
        }
        for p in &self.params {
            let value = config
                .get(&p.name)
                .ok_or_else(|| SpaceError::MissingParam(p.name.clone()))?;
            if !(p.low..=p.high).contains(&value) {
                return Err(SpaceError::OutOfBounds {
                    name: p.name.clone(),
                    value,
                    low: p.low,
                    high: p.high,
                });
            }
        }
        Ok(())
    }

    /// Builds a config from values listed in parameter order.
    pub fn config(&self, values: &[f64]) -> Result<Config, SpaceError> {
        if values.len() != self.dim() {
            return Err(SpaceError::DimensionMismatch {
                expected: self.dim(),
                got: values.len(),
            });
        }
        let config = Config {
            values: self
                .params
                .iter()
                .zip(values)
                .map(|(p, &v)| (p.name.clone(), v))
                .collect(),
        };
        self.check(&config)?;
        Ok(config)
    }

    pub fn to_unit(&self, config: &Config) -> Result<Vec<f64>, SpaceError> {
        self.check(config)?;
        Ok(self
            .params
            .iter()
            .map(|p| {
                let v = config.values[&p.name];
                ((v - p.low) / p.width()).clamp(0.0, 1.0)
            })
            .collect())
    }

    pub fn from_unit(&self, unit: &[f64]) -> Result<Config, SpaceError> {
        if unit.len() != self.dim() {
            return Err(SpaceError::DimensionMismatch {
                expected: self.dim(),
                got: unit.len(),
            });
        }
        if let Some((index, &value)) = unit
            .iter()
            .enumerate()
            .find(|(_, u)| !(0.0..=1.0).contains(*u))
        {
            return Err(SpaceError::UnitOutOfBounds { index, value });
        }
        Ok(self.from_unit_unchecked(unit))
    }

    fn from_unit_unchecked(&self, unit: &[f64]) -> Config {
        Config {
            values: self
                .params
                .iter()
                .zip(unit)
                .map(|(p, &u)| {
                    let v = (p.low + u * p.width()).clamp(p.low, p.high);
                    (p.name.clone(), v)
                })
                .collect(),
        }
    }

    /// Stable byte encoding of a config: parameter order, name, then the
    /// little-endian bits of the value.
    pub fn canonical_bytes(&self, config: &Config) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.dim() * 16);
        for p in &self.params {
            out.extend_from_slice(p.name.as_bytes());
            out.push(0);
            let v = config.get(&p.name).unwrap_or(f64::NAN);
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        out
    }
}
