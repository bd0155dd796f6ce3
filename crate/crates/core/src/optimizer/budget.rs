use serde::{Deserialize, Serialize};

use super::OptimizerError;

/// Slack for sums of fractional ASHA costs such as nine charges of 1/9.
pub const BUDGET_EPS: f64 = 1e-9;

/// Compute ledger in agent-equivalents: one full-budget training costs 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetAccount {
    capacity: f64,
    spent: f64,
    checkpoints: Vec<f64>,
}

impl BudgetAccount {
    pub fn new(capacity: f64, checkpoints: Vec<f64>) -> Result<Self, OptimizerError> {
        if !(capacity > 0.0) || !capacity.is_finite() {
            return Err(OptimizerError::InvalidSettings(format!(
                "capacity must be positive, got {capacity}"
            )));
        }
        if checkpoints.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(OptimizerError::InvalidSettings(
                "checkpoints must be strictly increasing".into(),
            ));
        }
        if let Some(&last) = checkpoints.last() {
            if last > capacity || !(checkpoints[0] > 0.0) {
                return Err(OptimizerError::InvalidSettings(format!(
                    "checkpoints must lie in (0, {capacity}]"
                )));
            }
        }
        Ok(Self {
            capacity,
            spent: 0.0,
            checkpoints,
        })
    }

    pub fn capacity(&self) -> f64 {
        self.capacity
    }

    pub fn spent(&self) -> f64 {
        self.spent
    }

    pub fn remaining(&self) -> f64 {
        (self.capacity - self.spent).max(0.0)
    }

    pub fn checkpoints(&self) -> &[f64] {
        &self.checkpoints
    }

    pub fn can_afford(&self, fraction: f64) -> bool {
        self.spent + fraction <= self.capacity + BUDGET_EPS
    }

    /// Charges one trial. Rejected charges leave the account unchanged.
    pub fn charge(&mut self, fraction: f64) -> Result<(), OptimizerError> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(OptimizerError::InvalidSettings(format!(
                "budget fraction must be in (0, 1], got {fraction}"
            )));
        }
        if !self.can_afford(fraction) {
            return Err(OptimizerError::BudgetExhausted {
                remaining: self.remaining(),
                cost: fraction,
            });
        }
        self.spent += fraction;
        Ok(())
    }
}
