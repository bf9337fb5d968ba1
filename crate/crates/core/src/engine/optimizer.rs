//! Adaptive-moment (Adam) ascent on a flat parameter vector.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub moment_decay_1: f64,
    pub moment_decay_2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.01,
            moment_decay_1: 0.9,
            moment_decay_2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.moment_decay_1)
            && (0.0..1.0).contains(&self.moment_decay_2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
    /// Updates refused because the gradient had non-finite entries.
    pub skipped: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    SkippedNonFinite,
}

impl OptimizerState {
    pub fn new(num_params: usize, config: AdamConfig) -> Self {
        OptimizerState {
            config,
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step: 0,
            skipped: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.first_moment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_moment.is_empty()
    }

    /// One bias-corrected ascent step. A gradient with any non-finite entry
    /// leaves both the parameters and the moments untouched.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<StepOutcome> {
        ensure_len("parameter vector", self.len(), params.len())?;
        ensure_len("gradient", self.len(), grad.len())?;
        if grad.iter().any(|g| !g.is_finite()) {
            self.skipped += 1;
            return Ok(StepOutcome::SkippedNonFinite);
        }
        let AdamConfig {
            learning_rate: lr,
            moment_decay_1: b1,
            moment_decay_2: b2,
            epsilon: eps,
        } = self.config;
        self.step += 1;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p += lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
        Ok(StepOutcome::Applied)
    }
}

/// Applies one update; free-function form of [`OptimizerState::step`].
pub fn optimizer_step(opt: &mut OptimizerState, params: &mut [f64], grad: &[f64]) -> Result<StepOutcome> {
    opt.step(params, grad)
}
