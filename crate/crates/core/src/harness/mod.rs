//! Benchmark harness: noisy objectives, the external worker protocol, the
//! matched-budget experiment runner and result summaries.
//!
//! Optimizers always minimize. Synthetic objectives are losses already;
//! external workers report a number whose sense is configured (rewards by
//! default) and the harness negates it where needed. Reports flip the sign
//! back so that every `final_mean`, `true_value` and `best_observed` reads as
//! a reward, higher being better.

mod objective;
mod runner;
mod summary;
mod worker;

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optimizer::OptimizerError;
use crate::space::{Config, ParamSpace, SpaceError};

pub use objective::{
    branin, stable_hash, SyntheticKind, SyntheticObjective, BRANIN_MIN, DEFAULT_BIAS_SCALE,
};
pub use runner::{
    final_evaluation, run_experiment, run_seed, Event, EventBody, EventLog, ExperimentReport,
    ExperimentSpec, FinalEvaluation, RunDetails, RunOutcome, RunRecord, EVAL_SEED_OFFSET,
};
pub use summary::{
    aggregate, nearest_rank, parse_log, rows_from_events, rows_from_reports, to_csv, to_markdown,
    Aggregate, ParsedLog, SummaryRow, CSV_HEADER,
};
pub use worker::{parse_reply, WorkerClient, WorkerError, WorkerRequest, PROTOCOL};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Worker(#[from] WorkerError),
    #[error("results log: {0}")]
    Log(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Errors that fail a single trial rather than the whole run.
    pub fn is_trial_failure(&self) -> bool {
        matches!(self, HarnessError::Worker(e) if !matches!(e, WorkerError::Spawn { .. }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    #[serde(rename = "noisy_quadratic_1d")]
    NoisyQuadratic1d,
    #[serde(rename = "noisy_branin_2d")]
    NoisyBranin2d,
    NoisyBraninHetero,
    External,
}

impl ObjectiveKind {
    pub fn synthetic(self) -> Option<SyntheticKind> {
        match self {
            ObjectiveKind::NoisyQuadratic1d => Some(SyntheticKind::NoisyQuadratic1d),
            ObjectiveKind::NoisyBranin2d => Some(SyntheticKind::NoisyBranin2d),
            ObjectiveKind::NoisyBraninHetero => Some(SyntheticKind::NoisyBraninHetero),
            ObjectiveKind::External => None,
        }
    }
}

/// Direction of the number an external worker reports.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sense {
    #[default]
    Maximize,
    Minimize,
}

fn default_bias_scale() -> f64 {
    DEFAULT_BIAS_SCALE
}

fn default_timeout_secs() -> f64 {
    600.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    #[serde(default)]
    pub noise_sd: f64,
    #[serde(default = "default_bias_scale")]
    pub bias_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default)]
    pub sense: Sense,
}

impl ObjectiveSpec {
    pub fn synthetic(kind: SyntheticKind, noise_sd: f64) -> Self {
        let kind = match kind {
            SyntheticKind::NoisyQuadratic1d => ObjectiveKind::NoisyQuadratic1d,
            SyntheticKind::NoisyBranin2d => ObjectiveKind::NoisyBranin2d,
            SyntheticKind::NoisyBraninHetero => ObjectiveKind::NoisyBraninHetero,
        };
        Self {
            kind,
            noise_sd,
            bias_scale: DEFAULT_BIAS_SCALE,
            command: None,
            timeout_secs: default_timeout_secs(),
            sense: Sense::Maximize,
        }
    }

    pub fn external(command: impl Into<String>, timeout: Duration) -> Self {
        Self {
            kind: ObjectiveKind::External,
            noise_sd: 0.0,
            bias_scale: DEFAULT_BIAS_SCALE,
            command: Some(command.into()),
            timeout_secs: timeout.as_secs_f64(),
            sense: Sense::Maximize,
        }
    }

    pub fn synthetic_objective(&self) -> Option<SyntheticObjective> {
        self.kind.synthetic().map(|kind| SyntheticObjective {
            kind,
            noise_sd: self.noise_sd,
            bias_scale: self.bias_scale,
        })
    }

    pub fn validate(&self, space: &ParamSpace) -> Result<(), HarnessError> {
        match self.synthetic_objective() {
            Some(obj) => obj.validate(space),
            None => {
                if self.command.as_deref().is_none_or(|c| c.trim().is_empty()) {
                    return Err(HarnessError::InvalidSpec(
                        "external objective requires a non-empty command".into(),
                    ));
                }
                if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
                    return Err(HarnessError::InvalidSpec("timeout_secs must be positive".into()));
                }
                Ok(())
            }
        }
    }

    /// Noise-free loss, when the objective has one.
    pub fn true_loss(&self, space: &ParamSpace, config: &Config) -> Result<Option<f64>, HarnessError> {
        match self.synthetic_objective() {
            Some(obj) => obj.true_value(space, config).map(Some),
            None => Ok(None),
        }
    }

    /// Regret of a noise-free loss against the objective's global minimum.
    pub fn regret(&self, true_loss: f64) -> Option<f64> {
        self.kind.synthetic().map(|k| true_loss - k.global_min())
    }

    pub fn evaluator(&self, space: &ParamSpace) -> Box<dyn Evaluator> {
        match self.synthetic_objective() {
            Some(objective) => Box::new(SyntheticEvaluator {
                objective,
                space: space.clone(),
            }),
            None => Box::new(ExternalEvaluator {
                command: self.command.clone().unwrap_or_default(),
                timeout: Duration::from_secs_f64(self.timeout_secs),
                sense: self.sense,
                space: space.clone(),
                client: None,
                next_id: 0,
            }),
        }
    }
}

/// Evaluates trials and returns losses.
pub trait Evaluator: Send {
    fn evaluate(&mut self, config: &Config, seed: u64, budget: f64) -> Result<f64, HarnessError>;
}

pub struct SyntheticEvaluator {
    objective: SyntheticObjective,
    space: ParamSpace,
}

impl Evaluator for SyntheticEvaluator {
    fn evaluate(&mut self, config: &Config, seed: u64, budget: f64) -> Result<f64, HarnessError> {
        self.objective.evaluate(&self.space, config, seed, budget)
    }
}

/// Talks to one worker process, respawning it after any failed trial.
pub struct ExternalEvaluator {
    command: String,
    timeout: Duration,
    sense: Sense,
    space: ParamSpace,
    client: Option<WorkerClient>,
    next_id: u64,
}

impl Evaluator for ExternalEvaluator {
    fn evaluate(&mut self, config: &Config, seed: u64, budget: f64) -> Result<f64, HarnessError> {
        self.space.check(config)?;
        if self.client.is_none() {
            self.client = Some(WorkerClient::spawn(&self.command, self.timeout)?);
        }
        let raw: BTreeMap<String, f64> = self
            .space
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.raw_value(config.get(&p.name).unwrap_or(f64::NAN))))
            .collect();
        let id = self.next_id;
        self.next_id += 1;
        let client = self.client.as_mut().expect("client spawned above");
        match client.request(&WorkerRequest {
            id,
            config: &raw,
            seed,
            budget,
        }) {
            Ok(v) => Ok(match self.sense {
                Sense::Maximize => -v,
                Sense::Minimize => v,
            }),
            Err(e) => {
                // A reported trial error leaves the worker usable.
                if !matches!(e, WorkerError::TrialFailed { .. }) {
                    self.client = None;
                }
                Err(e.into())
            }
        }
    }
}
