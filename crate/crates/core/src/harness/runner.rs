use std::collections::VecDeque;
use std::io::Write;
use std::sync::{mpsc, Arc, Mutex};
use std::thread;
use std::time::{SystemTime, UNIX_EPOCH};

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::optimizer::{
    BudgetAccount, Optimizer, OptimizerError, OptimizerSettings, TrialRecord, BUDGET_EPS,
    OPTIMIZATION_SEED_LIMIT,
};
use crate::space::{Config, ParamSpace};

use super::{stable_hash, Evaluator, HarnessError, ObjectiveSpec};

/// Evaluation seeds live in `[2^52, 2^53)`, optimization seeds below.
pub const EVAL_SEED_OFFSET: u64 = OPTIMIZATION_SEED_LIMIT;

const EVAL_STREAM: u64 = 4;

/// Seed of outer run `r`: the master seed xor a stable hash of `r`.
pub fn run_seed(master_seed: u64, run_index: usize) -> u64 {
    master_seed ^ stable_hash(&(run_index as u64).to_le_bytes())
}

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    /// Method label used in logs and summaries.
    pub label: String,
    pub space: ParamSpace,
    pub objective: ObjectiveSpec,
    pub settings: OptimizerSettings,
    pub capacity: f64,
    pub checkpoints: Vec<f64>,
    pub final_eval_seeds: usize,
    pub hpo_runs: usize,
    pub master_seed: u64,
    /// Trials evaluated concurrently.
    pub workers: usize,
}

impl ExperimentSpec {
    pub fn new(
        label: impl Into<String>,
        space: ParamSpace,
        objective: ObjectiveSpec,
        settings: OptimizerSettings,
    ) -> Self {
        Self {
            label: label.into(),
            space,
            objective,
            settings,
            capacity: 100.0,
            checkpoints: vec![25.0, 50.0, 100.0],
            final_eval_seeds: 20,
            hpo_runs: 1,
            master_seed: 0,
            workers: 1,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.final_eval_seeds == 0 {
            return Err(HarnessError::InvalidSpec("final_eval_seeds must be >= 1".into()));
        }
        if self.hpo_runs == 0 {
            return Err(HarnessError::InvalidSpec("hpo_runs must be >= 1".into()));
        }
        if self.workers == 0 {
            return Err(HarnessError::InvalidSpec("workers must be >= 1".into()));
        }
        self.objective.validate(&self.space)?;
        BudgetAccount::new(self.capacity, self.checkpoints.clone())?;
        // Catches invalid method knobs before any run starts.
        Optimizer::new(
            self.settings.clone(),
            self.space.clone(),
            BudgetAccount::new(self.capacity, vec![])?,
            0,
        )?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialOutcome {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventBody {
    TrialStarted {
        trial_id: usize,
        config_id: usize,
        config: Config,
        seed: u64,
        budget_fraction: f64,
        rung: i32,
    },
    TrialCompleted {
        trial_id: usize,
        status: TrialOutcome,
        /// Loss handed to the optimizer.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        value: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reward: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
    CheckpointRecommendation {
        checkpoint: f64,
        config: Config,
        spent: f64,
        trials_used: usize,
    },
    FinalEvaluation {
        checkpoint: f64,
        config: Config,
        final_mean: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        true_value: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        best_observed: Option<f64>,
        trials_used: usize,
        eval_seeds: usize,
    },
    RunFailed {
        error: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub event_index: u64,
    pub run_index: usize,
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp_ms: Option<u64>,
    #[serde(flatten)]
    pub body: EventBody,
}

/// Append-only JSONL sink with a global event counter.
pub struct EventLog<W: Write> {
    out: W,
    next_index: u64,
    deterministic: bool,
}

impl<W: Write> EventLog<W> {
    pub fn new(out: W, deterministic: bool) -> Self {
        Self {
            out,
            next_index: 0,
            deterministic,
        }
    }

    pub fn emit(&mut self, run_index: usize, method: &str, body: EventBody) -> std::io::Result<()> {
        let timestamp_ms = (!self.deterministic).then(|| {
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0)
        });
        let event = Event {
            event_index: self.next_index,
            run_index,
            method: method.to_string(),
            timestamp_ms,
            body,
        };
        self.next_index += 1;
        serde_json::to_writer(&mut self.out, &event)?;
        self.out.write_all(b"\n")
    }

    pub fn events_written(&self) -> u64 {
        self.next_index
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// One recommendation snapshot. Values are rewards (negated losses).
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub method: String,
    pub run: usize,
    pub checkpoint: f64,
    pub config: Config,
    pub final_mean: f64,
    pub true_value: Option<f64>,
    pub best_observed: Option<f64>,
    pub trials_used: usize,
    pub regret: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunDetails {
    pub records: Vec<RunRecord>,
    pub ledger: Vec<TrialRecord>,
    pub spent: f64,
    pub eval_seeds: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_index: usize,
    pub seed: u64,
    pub result: Result<RunDetails, String>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub label: String,
    pub runs: Vec<RunOutcome>,
}

impl ExperimentReport {
    pub fn records(&self) -> impl Iterator<Item = &RunRecord> {
        self.runs
            .iter()
            .filter_map(|r| r.result.as_ref().ok())
            .flat_map(|d| d.records.iter())
    }

    pub fn failed_runs(&self) -> usize {
        self.runs.iter().filter(|r| r.result.is_err()).count()
    }

    /// Records at one checkpoint, in run order.
    pub fn at_checkpoint(&self, checkpoint: f64) -> Vec<&RunRecord> {
        self.records().filter(|r| r.checkpoint == checkpoint).collect()
    }
}

/// Mean loss over the evaluation seeds plus the noise-free loss.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalEvaluation {
    pub mean_loss: f64,
    pub true_loss: Option<f64>,
}

/// Evaluates `config` at full budget on every seed and averages, in seed
/// order.
pub fn final_evaluation(
    evaluator: &mut dyn Evaluator,
    objective: &ObjectiveSpec,
    space: &ParamSpace,
    config: &Config,
    seeds: &[u64],
) -> Result<FinalEvaluation, HarnessError> {
    let losses = seeds
        .iter()
        .map(|&s| evaluator.evaluate(config, s, 1.0))
        .collect::<Result<Vec<_>, _>>()?;
    finish_evaluation(objective, space, config, &losses)
}

fn finish_evaluation(
    objective: &ObjectiveSpec,
    space: &ParamSpace,
    config: &Config,
    losses: &[f64],
) -> Result<FinalEvaluation, HarnessError> {
    if losses.is_empty() {
        return Err(HarnessError::InvalidSpec("no evaluation seeds".into()));
    }
    // Shifted by the first value so identical losses average exactly.
    let shift = losses[0];
    let mean_loss = shift + losses.iter().map(|l| l - shift).sum::<f64>() / losses.len() as f64;
    Ok(FinalEvaluation {
        mean_loss,
        true_loss: objective.true_loss(space, config)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tag {
    Trial(usize),
    Eval(usize),
}

struct Job {
    tag: Tag,
    config: Config,
    seed: u64,
    budget: f64,
}

type JobResult = (Tag, Result<f64, HarnessError>);

/// `n` evaluator threads fed from one job queue.
struct Pool {
    jobs: Option<mpsc::Sender<Job>>,
    results: mpsc::Receiver<JobResult>,
    stash: VecDeque<JobResult>,
    handles: Vec<thread::JoinHandle<()>>,
}

impl Pool {
    fn new(objective: &ObjectiveSpec, space: &ParamSpace, n: usize) -> Self {
        let (job_tx, job_rx) = mpsc::channel::<Job>();
        let job_rx = Arc::new(Mutex::new(job_rx));
        let (res_tx, results) = mpsc::channel();
        let handles = (0..n)
            .map(|_| {
                let mut evaluator = objective.evaluator(space);
                let job_rx = Arc::clone(&job_rx);
                let res_tx = res_tx.clone();
                thread::spawn(move || loop {
                    let job = match job_rx.lock() {
                        Ok(rx) => rx.recv(),
                        Err(_) => break,
                    };
                    let Ok(job) = job else { break };
                    let r = evaluator.evaluate(&job.config, job.seed, job.budget);
                    if res_tx.send((job.tag, r)).is_err() {
                        break;
                    }
                })
            })
            .collect();
        Self {
            jobs: Some(job_tx),
            results,
            stash: VecDeque::new(),
            handles,
        }
    }

    fn submit(&self, tag: Tag, config: Config, seed: u64, budget: f64) -> Result<(), HarnessError> {
        self.jobs
            .as_ref()
            .and_then(|tx| {
                tx.send(Job {
                    tag,
                    config,
                    seed,
                    budget,
                })
                .ok()
            })
            .ok_or_else(|| HarnessError::Log("evaluator pool stopped".into()))
    }

    fn recv(&self) -> Result<JobResult, HarnessError> {
        self.results
            .recv()
            .map_err(|_| HarnessError::Log("evaluator pool stopped".into()))
    }

    fn next_trial(&mut self) -> Result<(usize, Result<f64, HarnessError>), HarnessError> {
        if let Some((Tag::Trial(id), r)) = self.stash.pop_front() {
            return Ok((id, r));
        }
        loop {
            if let (Tag::Trial(id), r) = self.recv()? {
                return Ok((id, r));
            }
        }
    }

    /// Full-budget evaluations of one config, returned in seed order.
    /// Trial results arriving meanwhile are kept for [`Pool::next_trial`].
    fn evaluate_seeds(&mut self, config: &Config, seeds: &[u64]) -> Result<Vec<f64>, HarnessError> {
        for (i, &s) in seeds.iter().enumerate() {
            self.submit(Tag::Eval(i), config.clone(), s, 1.0)?;
        }
        let mut out: Vec<Option<Result<f64, HarnessError>>> = (0..seeds.len()).map(|_| None).collect();
        let mut pending = seeds.len();
        while pending > 0 {
            match self.recv()? {
                (Tag::Eval(i), r) => {
                    out[i] = Some(r);
                    pending -= 1;
                }
                trial => self.stash.push_back(trial),
            }
        }
        out.into_iter().map(|r| r.expect("every seed answered")).collect()
    }
}

impl Drop for Pool {
    fn drop(&mut self) {
        self.jobs.take();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

struct Run<'a, W: Write> {
    spec: &'a ExperimentSpec,
    run_index: usize,
    log: &'a mut EventLog<W>,
    optimizer: Optimizer,
    pool: Pool,
    eval_rng: ChaCha8Rng,
    eval_seeds: Vec<u64>,
    records: Vec<RunRecord>,
    finished: usize,
    finished_spend: f64,
}

impl<W: Write> Run<'_, W> {
    fn emit(&mut self, body: EventBody) -> Result<(), HarnessError> {
        Ok(self.log.emit(self.run_index, &self.spec.label, body)?)
    }

    fn checkpoint(&mut self, checkpoint: f64) -> Result<(), HarnessError> {
        let config = self.optimizer.select_incumbent()?;
        let best_observed = self.optimizer.best_observed().map(|(_, v)| -v);
        self.emit(EventBody::CheckpointRecommendation {
            checkpoint,
            config: config.clone(),
            spent: self.finished_spend,
            trials_used: self.finished,
        })?;
        let seeds: Vec<u64> = (0..self.spec.final_eval_seeds)
            .map(|_| EVAL_SEED_OFFSET + self.eval_rng.random::<u64>() % EVAL_SEED_OFFSET)
            .collect();
        let losses = self.pool.evaluate_seeds(&config, &seeds)?;
        self.eval_seeds.extend_from_slice(&seeds);
        let fe = finish_evaluation(&self.spec.objective, &self.spec.space, &config, &losses)?;
        let record = RunRecord {
            method: self.spec.label.clone(),
            run: self.run_index,
            checkpoint,
            config: config.clone(),
            final_mean: -fe.mean_loss,
            true_value: fe.true_loss.map(|l| -l),
            best_observed,
            trials_used: self.finished,
            regret: fe.true_loss.and_then(|l| self.spec.objective.regret(l)),
        };
        self.emit(EventBody::FinalEvaluation {
            checkpoint,
            config,
            final_mean: record.final_mean,
            true_value: record.true_value,
            best_observed,
            trials_used: self.finished,
            eval_seeds: seeds.len(),
        })?;
        self.records.push(record);
        Ok(())
    }

    fn drive(&mut self) -> Result<(), HarnessError> {
        let checkpoints = self.spec.checkpoints.clone();
        let mut next_cp = 0;
        let mut in_flight = 0;
        let mut exhausted = false;
        loop {
            while !exhausted && in_flight < self.spec.workers {
                match self.optimizer.suggest() {
                    Ok(s) => {
                        self.emit(EventBody::TrialStarted {
                            trial_id: s.trial_id,
                            config_id: s.config_id,
                            config: s.config.clone(),
                            seed: s.seed,
                            budget_fraction: s.budget_fraction,
                            rung: s.rung,
                        })?;
                        self.pool
                            .submit(Tag::Trial(s.trial_id), s.config, s.seed, s.budget_fraction)?;
                        in_flight += 1;
                    }
                    Err(OptimizerError::BudgetExhausted { .. }) => exhausted = true,
                    Err(e) => return Err(e.into()),
                }
            }
            if in_flight == 0 {
                break;
            }
            let (trial_id, result) = self.pool.next_trial()?;
            in_flight -= 1;
            let fraction = self.optimizer.ledger()[trial_id].budget_fraction;
            let body = match result {
                Ok(loss) => {
                    self.optimizer.observe(trial_id, loss)?;
                    EventBody::TrialCompleted {
                        trial_id,
                        status: TrialOutcome::Completed,
                        value: Some(loss),
                        reward: Some(-loss),
                        error: None,
                    }
                }
                Err(e) if e.is_trial_failure() => {
                    warn!("{} run {} trial {trial_id} failed: {e}", self.spec.label, self.run_index);
                    self.optimizer.fail(trial_id)?;
                    EventBody::TrialCompleted {
                        trial_id,
                        status: TrialOutcome::Failed,
                        value: None,
                        reward: None,
                        error: Some(e.to_string()),
                    }
                }
                Err(e) => return Err(e),
            };
            self.emit(body)?;
            self.finished += 1;
            self.finished_spend += fraction;
            while next_cp < checkpoints.len() && self.finished_spend >= checkpoints[next_cp] - BUDGET_EPS {
                self.checkpoint(checkpoints[next_cp])?;
                next_cp += 1;
            }
        }
        // Budgets that stop short of a checkpoint still get its snapshot.
        for &cp in &checkpoints[next_cp..] {
            self.checkpoint(cp)?;
        }
        Ok(())
    }
}

fn run_one<W: Write>(
    spec: &ExperimentSpec,
    run_index: usize,
    seed: u64,
    log: &mut EventLog<W>,
) -> Result<RunDetails, HarnessError> {
    let budget = BudgetAccount::new(spec.capacity, spec.checkpoints.clone())?;
    let optimizer = Optimizer::new(spec.settings.clone(), spec.space.clone(), budget, seed)?;
    let mut eval_rng = ChaCha8Rng::seed_from_u64(seed);
    eval_rng.set_stream(EVAL_STREAM);
    let mut run = Run {
        spec,
        run_index,
        log,
        optimizer,
        pool: Pool::new(&spec.objective, &spec.space, spec.workers),
        eval_rng,
        eval_seeds: Vec::new(),
        records: Vec::new(),
        finished: 0,
        finished_spend: 0.0,
    };
    run.drive()?;
    Ok(RunDetails {
        records: run.records,
        spent: run.optimizer.budget().spent(),
        ledger: run.optimizer.ledger().to_vec(),
        eval_seeds: run.eval_seeds,
    })
}

/// Runs every outer repetition of `spec`, logging each event. A failing run
/// is logged and skipped; only an invalid spec or a failing log write
/// aborts the experiment.
pub fn run_experiment<W: Write>(
    spec: &ExperimentSpec,
    log: &mut EventLog<W>,
) -> Result<ExperimentReport, HarnessError> {
    spec.validate()?;
    let mut runs = Vec::with_capacity(spec.hpo_runs);
    for run_index in 0..spec.hpo_runs {
        let seed = run_seed(spec.master_seed, run_index);
        info!("{}: run {}/{}", spec.label, run_index + 1, spec.hpo_runs);
        let result = match run_one(spec, run_index, seed, log) {
            Ok(details) => Ok(details),
            Err(HarnessError::Io(e)) => return Err(HarnessError::Io(e)),
            Err(e) => {
                warn!("{} run {run_index} failed: {e}", spec.label);
                log.emit(run_index, &spec.label, EventBody::RunFailed { error: e.to_string() })?;
                Err(e.to_string())
            }
        };
        runs.push(RunOutcome {
            run_index,
            seed,
            result,
        });
    }
    log.flush()?;
    Ok(ExperimentReport {
        label: spec.label.clone(),
        runs,
    })
}
