//! Rung bookkeeping for asynchronous successive halving.
//!
//! Rung `k` trains for `min(1, min_fraction * eta^k)` of the full budget; the
//! top rung always trains to completion. A completed result at rung `k` is
//! promotable once it ranks inside the top `floor(n_k / eta)` of the `n_k`
//! completed results at that rung, and every config is promoted from a rung
//! at most once.

use std::collections::BTreeSet;

use super::OptimizerError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RungResult {
    pub config_id: usize,
    pub trial_id: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Default)]
struct Rung {
    results: Vec<RungResult>,
    promoted: BTreeSet<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AshaAction {
    Promote { config_id: usize, to_rung: usize },
    NewConfig,
}

#[derive(Debug, Clone)]
pub struct RungLadder {
    eta: usize,
    min_fraction: f64,
    rungs: Vec<Rung>,
}

impl RungLadder {
    pub const DEFAULT_ETA: usize = 3;
    pub const DEFAULT_MIN_FRACTION: f64 = 1.0 / 9.0;

    /// Rung count is the smallest `k + 1` with `min_fraction * eta^k >= 1`.
    pub fn new(eta: usize, min_fraction: f64) -> Result<Self, OptimizerError> {
        if eta < 2 {
            return Err(OptimizerError::InvalidSettings(format!("eta must be >= 2, got {eta}")));
        }
        if !(min_fraction > 0.0 && min_fraction <= 1.0) {
            return Err(OptimizerError::InvalidSettings(format!(
                "min_fraction must be in (0, 1], got {min_fraction}"
            )));
        }
        let mut num_rungs = 1;
        let mut fraction = min_fraction;
        while fraction < 1.0 - 1e-9 {
            fraction *= eta as f64;
            num_rungs += 1;
        }
        Ok(Self {
            eta,
            min_fraction,
            rungs: vec![Rung::default(); num_rungs],
        })
    }

    pub fn eta(&self) -> usize {
        self.eta
    }

    pub fn num_rungs(&self) -> usize {
        self.rungs.len()
    }

    pub fn top_rung(&self) -> usize {
        self.rungs.len() - 1
    }

    pub fn fraction(&self, rung: usize) -> f64 {
        if rung >= self.top_rung() {
            1.0
        } else {
            (self.min_fraction * (self.eta as f64).powi(rung as i32)).min(1.0)
        }
    }

    pub fn results(&self, rung: usize) -> &[RungResult] {
        &self.rungs[rung].results
    }

    pub fn promoted(&self, rung: usize) -> &BTreeSet<usize> {
        &self.rungs[rung].promoted
    }

    pub fn record(&mut self, rung: usize, result: RungResult) {
        self.rungs[rung].results.push(result);
    }

    /// Results sorted best first; ties go to the earlier trial.
    pub fn ranked(&self, rung: usize) -> Vec<RungResult> {
        let mut r = self.rungs[rung].results.clone();
        r.sort_by(|a, b| a.value.total_cmp(&b.value).then(a.trial_id.cmp(&b.trial_id)));
        r
    }

    /// Scans from the highest promotable rung down; does not mutate.
    pub fn next_action(&self) -> AshaAction {
        for rung in (0..self.top_rung()).rev() {
            let quota = self.rungs[rung].results.len() / self.eta;
            if quota == 0 {
                continue;
            }
            if let Some(r) = self
                .ranked(rung)
                .into_iter()
                .take(quota)
                .find(|r| !self.rungs[rung].promoted.contains(&r.config_id))
            {
                return AshaAction::Promote {
                    config_id: r.config_id,
                    to_rung: rung + 1,
                };
            }
        }
        AshaAction::NewConfig
    }

    pub fn mark_promoted(&mut self, from_rung: usize, config_id: usize) {
        self.rungs[from_rung].promoted.insert(config_id);
    }

    /// Best result at the highest rung holding any completed result.
    pub fn best_at_highest_rung(&self) -> Option<(usize, RungResult)> {
        (0..self.rungs.len())
            .rev()
            .find_map(|rung| self.ranked(rung).first().map(|r| (rung, *r)))
    }
}
