//! Suggest/observe loops for random search, GP-based Bayesian optimization
//! and asynchronous successive halving, sharing one trial ledger and budget.
//!
//! Values passed to [`Optimizer::observe`] are losses (lower is better).

mod asha;
mod budget;

use std::collections::{HashSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acquisition::{
    optimize_acquisition, recommend_best_predicted, AcqError, AcqKind, AcqSpec, MaximizeOptions,
};
use crate::gp::{fit_gp, Dataset, FitOptions, GpError, GpModel};
use crate::space::{Config, ParamSpace, SpaceError};

pub use asha::{AshaAction, RungLadder, RungResult};
pub use budget::{BudgetAccount, BUDGET_EPS};

/// Trial seeds stay below 2^52 so they survive a round trip through an IEEE
/// double on the worker side; evaluation seeds use the next bit.
pub const OPTIMIZATION_SEED_LIMIT: u64 = 1 << 52;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizerError {
    #[error("budget exhausted: {remaining} remaining, trial costs {cost}")]
    BudgetExhausted { remaining: f64, cost: f64 },
    #[error("unknown trial {0}")]
    UnknownTrial(usize),
    #[error("trial {0} already has a result")]
    DuplicateResult(usize),
    #[error("no completed trials")]
    EmptyLedger,
    #[error("cannot average an empty list of values")]
    EmptyAggregate,
    #[error("non-finite objective value {value} for trial {trial_id}")]
    InvalidValue { trial_id: usize, value: f64 },
    #[error("invalid optimizer settings: {0}")]
    InvalidSettings(String),
    #[error(transparent)]
    Acquisition(#[from] AcqError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Space(#[from] SpaceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    RandomSearch,
    BoEi,
    BoLcb,
    BoQnei,
    Asha,
}

impl Method {
    pub fn is_bo(self) -> bool {
        matches!(self, Method::BoEi | Method::BoLcb | Method::BoQnei)
    }

    fn acq_kind(self) -> Option<AcqKind> {
        match self {
            Method::BoEi => Some(AcqKind::Ei),
            Method::BoLcb => Some(AcqKind::Lcb),
            Method::BoQnei => Some(AcqKind::Qnei),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSettings {
    pub method: Method,
    pub repetitions: usize,
    pub eta: usize,
    pub min_fraction: f64,
    pub beta: f64,
    pub mc_samples: usize,
    pub fit: FitOptions,
    pub maximize: MaximizeOptions,
}

impl OptimizerSettings {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            repetitions: 1,
            eta: RungLadder::DEFAULT_ETA,
            min_fraction: RungLadder::DEFAULT_MIN_FRACTION,
            beta: AcqSpec::DEFAULT_BETA,
            mc_samples: AcqSpec::DEFAULT_MC_SAMPLES,
            fit: FitOptions::default(),
            maximize: MaximizeOptions::default(),
        }
    }

    pub fn with_repetitions(mut self, k: usize) -> Self {
        self.repetitions = k;
        self
    }

    fn validate(&self) -> Result<(), OptimizerError> {
        if self.repetitions == 0 {
            return Err(OptimizerError::InvalidSettings("repetitions must be >= 1".into()));
        }
        if self.method == Method::Asha && self.repetitions != 1 {
            return Err(OptimizerError::InvalidSettings(
                "asha does not support repetitions".into(),
            ));
        }
        if let Some(kind) = self.method.acq_kind() {
            self.acq_spec(kind, 0).validate()?;
        }
        Ok(())
    }

    fn acq_spec(&self, kind: AcqKind, mc_seed: u64) -> AcqSpec {
        AcqSpec {
            kind,
            beta: self.beta,
            mc_samples: self.mc_samples,
            mc_seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "value", rename_all = "snake_case")]
pub enum TrialStatus {
    Pending,
    Completed(f64),
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub trial_id: usize,
    pub config_id: usize,
    pub config: Config,
    pub seed: u64,
    pub budget_fraction: f64,
    pub status: TrialStatus,
    /// ASHA rung, `-1` for other methods.
    pub rung: i32,
}

/// What to evaluate next.
#[derive(Debug, Clone, PartialEq)]
pub struct Suggestion {
    pub trial_id: usize,
    pub config_id: usize,
    pub config: Config,
    pub seed: u64,
    pub budget_fraction: f64,
    pub rung: i32,
}

#[derive(Debug, Clone)]
struct ConfigEntry {
    config: Config,
    unit: Vec<f64>,
    values: Vec<f64>,
}

/// Arithmetic mean of repeated measurements of one configuration.
pub fn repeated_mean(values: &[f64]) -> Result<f64, OptimizerError> {
    if values.is_empty() {
        return Err(OptimizerError::EmptyAggregate);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Where the next trial comes from, decided before any state changes.
enum Plan {
    Repeat(usize),
    Fresh,
    Promote { config_id: usize, to_rung: usize },
}

pub struct Optimizer {
    settings: OptimizerSettings,
    space: ParamSpace,
    budget: BudgetAccount,
    ledger: Vec<TrialRecord>,
    configs: Vec<ConfigEntry>,
    repeat_queue: VecDeque<usize>,
    ladder: Option<RungLadder>,
    model: Option<GpModel>,
    model_stale: bool,
    rng: ChaCha8Rng,
    seed_rng: ChaCha8Rng,
    incumbent_rng: ChaCha8Rng,
    used_seeds: HashSet<u64>,
}

impl Optimizer {
    pub fn new(
        settings: OptimizerSettings,
        space: ParamSpace,
        budget: BudgetAccount,
        seed: u64,
    ) -> Result<Self, OptimizerError> {
        settings.validate()?;
        let ladder = match settings.method {
            Method::Asha => Some(RungLadder::new(settings.eta, settings.min_fraction)?),
            _ => None,
        };
        let stream = |id: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(id);
            rng
        };
        Ok(Self {
            settings,
            space,
            budget,
            ledger: Vec::new(),
            configs: Vec::new(),
            repeat_queue: VecDeque::new(),
            ladder,
            model: None,
            model_stale: true,
            rng: stream(1),
            seed_rng: stream(2),
            incumbent_rng: stream(3),
            used_seeds: HashSet::new(),
        })
    }

    pub fn settings(&self) -> &OptimizerSettings {
        &self.settings
    }

    pub fn space(&self) -> &ParamSpace {
        &self.space
    }

    pub fn budget(&self) -> &BudgetAccount {
        &self.budget
    }

    pub fn ledger(&self) -> &[TrialRecord] {
        &self.ledger
    }

    pub fn ladder(&self) -> Option<&RungLadder> {
        self.ladder.as_ref()
    }

    /// Most recent GP fitted by a BO suggestion, if still current.
    pub fn cached_model(&self) -> Option<&GpModel> {
        if self.model_stale {
            None
        } else {
            self.model.as_ref()
        }
    }

    pub fn num_configs(&self) -> usize {
        self.configs.len()
    }

    pub fn config(&self, config_id: usize) -> Option<&Config> {
        self.configs.get(config_id).map(|c| &c.config)
    }

    /// Mean of the completed values of one config.
    pub fn config_mean(&self, config_id: usize) -> Result<f64, OptimizerError> {
        let entry = self
            .configs
            .get(config_id)
            .ok_or(OptimizerError::EmptyAggregate)?;
        repeated_mean(&entry.values)
    }

    /// Initial uniform design size for BO: `max(5, 2d)`.
    pub fn initial_design_size(&self) -> usize {
        5.max(2 * self.space.dim())
    }

    fn plan(&self) -> (Plan, f64, i32) {
        if let Some(&config_id) = self.repeat_queue.front() {
            return (Plan::Repeat(config_id), 1.0, -1);
        }
        match &self.ladder {
            Some(ladder) => match ladder.next_action() {
                AshaAction::Promote { config_id, to_rung } => (
                    Plan::Promote { config_id, to_rung },
                    ladder.fraction(to_rung),
                    to_rung as i32,
                ),
                AshaAction::NewConfig => (Plan::Fresh, ladder.fraction(0), 0),
            },
            None => (Plan::Fresh, 1.0, -1),
        }
    }

    fn draw_seed(&mut self) -> u64 {
        loop {
            let s = self.seed_rng.random::<u64>() % OPTIMIZATION_SEED_LIMIT;
            if self.used_seeds.insert(s) {
                return s;
            }
        }
    }

    /// Per-config means of completed full-budget observations.
    pub fn full_budget_dataset(&self) -> Result<Dataset, OptimizerError> {
        let mut points = Vec::new();
        let mut values = Vec::new();
        for entry in &self.configs {
            if let Ok(mean) = repeated_mean(&entry.values) {
                points.push(entry.unit.clone());
                values.push(mean);
            }
        }
        Ok(Dataset::new(points, values)?)
    }

    fn propose_bo(&mut self, kind: AcqKind) -> Result<Vec<f64>, OptimizerError> {
        let uniform = |rng: &mut ChaCha8Rng, d: usize| (0..d).map(|_| rng.random()).collect();
        let d = self.space.dim();
        if self.configs.len() < self.initial_design_size() {
            return Ok(uniform(&mut self.rng, d));
        }
        let data = self.full_budget_dataset()?;
        if data.len() < 2 {
            // Only reachable with many trials in flight.
            return Ok(uniform(&mut self.rng, d));
        }
        let fit_seed = self.rng.random::<u64>();
        let mc_seed = self.rng.random::<u64>();
        let model = fit_gp(&data, &self.settings.fit, fit_seed)?;
        let spec = self.settings.acq_spec(kind, mc_seed);
        let (x, _) = optimize_acquisition(&model, &spec, &self.settings.maximize, &mut self.rng)?;
        self.model = Some(model);
        self.model_stale = false;
        Ok(x)
    }

    fn new_config(&mut self) -> Result<usize, OptimizerError> {
        let unit: Vec<f64> = match self.settings.method.acq_kind() {
            Some(kind) => self.propose_bo(kind)?,
            None => (0..self.space.dim()).map(|_| self.rng.random()).collect(),
        };
        let config = self.space.from_unit(&unit)?;
        let unit = self.space.to_unit(&config)?;
        self.configs.push(ConfigEntry {
            config,
            unit,
            values: Vec::new(),
        });
        let id = self.configs.len() - 1;
        for _ in 1..self.settings.repetitions {
            self.repeat_queue.push_back(id);
        }
        Ok(id)
    }

    /// Next trial to run. The trial's cost is charged immediately; when the
    /// budget cannot cover it, nothing changes and `BudgetExhausted` is
    /// returned.
    pub fn suggest(&mut self) -> Result<Suggestion, OptimizerError> {
        let (plan, fraction, rung) = self.plan();
        if !self.budget.can_afford(fraction) {
            return Err(OptimizerError::BudgetExhausted {
                remaining: self.budget.remaining(),
                cost: fraction,
            });
        }
        let config_id = match plan {
            Plan::Repeat(id) => {
                self.repeat_queue.pop_front();
                id
            }
            Plan::Fresh => self.new_config()?,
            Plan::Promote { config_id, to_rung } => {
                if let Some(ladder) = self.ladder.as_mut() {
                    ladder.mark_promoted(to_rung - 1, config_id);
                }
                config_id
            }
        };
        self.budget.charge(fraction)?;
        let seed = self.draw_seed();
        let trial_id = self.ledger.len();
        let config = self.configs[config_id].config.clone();
        self.ledger.push(TrialRecord {
            trial_id,
            config_id,
            config: config.clone(),
            seed,
            budget_fraction: fraction,
            status: TrialStatus::Pending,
            rung,
        });
        Ok(Suggestion {
            trial_id,
            config_id,
            config,
            seed,
            budget_fraction: fraction,
            rung,
        })
    }

    fn pending_mut(&mut self, trial_id: usize) -> Result<&mut TrialRecord, OptimizerError> {
        let record = self
            .ledger
            .get_mut(trial_id)
            .ok_or(OptimizerError::UnknownTrial(trial_id))?;
        if record.status != TrialStatus::Pending {
            return Err(OptimizerError::DuplicateResult(trial_id));
        }
        Ok(record)
    }

    /// Records a completed trial's loss.
    pub fn observe(&mut self, trial_id: usize, value: f64) -> Result<(), OptimizerError> {
        if !value.is_finite() {
            // Still validate the id first so unknown ids report as such.
            self.pending_mut(trial_id)?;
            return Err(OptimizerError::InvalidValue { trial_id, value });
        }
        let record = self.pending_mut(trial_id)?;
        record.status = TrialStatus::Completed(value);
        let (config_id, rung) = (record.config_id, record.rung);
        self.configs[config_id].values.push(value);
        self.model_stale = true;
        if let Some(ladder) = self.ladder.as_mut() {
            ladder.record(
                rung as usize,
                RungResult {
                    config_id,
                    trial_id,
                    value,
                },
            );
        }
        Ok(())
    }

    /// Marks a trial as failed. Its budget stays spent and it never enters
    /// model fitting or incumbent selection.
    pub fn fail(&mut self, trial_id: usize) -> Result<(), OptimizerError> {
        self.pending_mut(trial_id)?.status = TrialStatus::Failed;
        Ok(())
    }

    /// Best observed config by per-config mean (ASHA: best at the highest
    /// populated rung), with that value.
    pub fn best_observed(&self) -> Option<(usize, f64)> {
        if let Some(ladder) = &self.ladder {
            return ladder
                .best_at_highest_rung()
                .map(|(_, r)| (r.config_id, r.value));
        }
        self.configs
            .iter()
            .enumerate()
            .filter_map(|(i, c)| repeated_mean(&c.values).ok().map(|m| (i, m)))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
    }

    /// Current recommendation: best observed for random search and ASHA, best
    /// predicted posterior mean for BO.
    pub fn select_incumbent(&mut self) -> Result<Config, OptimizerError> {
        let (best_id, _) = self.best_observed().ok_or(OptimizerError::EmptyLedger)?;
        if !self.settings.method.is_bo() {
            return Ok(self.configs[best_id].config.clone());
        }
        let data = self.full_budget_dataset()?;
        if data.len() < 2 {
            return Ok(self.configs[best_id].config.clone());
        }
        let fit_seed = self.incumbent_rng.random::<u64>();
        let model = fit_gp(&data, &self.settings.fit, fit_seed)?;
        Ok(recommend_best_predicted(
            &model,
            &self.space,
            &self.settings.maximize,
            &mut self.incumbent_rng,
        )?)
    }
}
