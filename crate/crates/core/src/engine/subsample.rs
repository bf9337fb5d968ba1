//! Recency-biased minibatch selection over the observation buffer.
//!
//! Index `i` of a buffer of length `t` is drawn with probability
//! `π_t(i) ∝ decay^(t−1−i)`. Draws use the closed-form inverse CDF of the
//! truncated geometric distribution, so each costs O(1) whatever `t` is.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsamplerConfig {
    pub n_s: usize,
    pub decay: f64,
    pub correct_bias: bool,
}

impl Default for SubsamplerConfig {
    fn default() -> Self {
        SubsamplerConfig {
            n_s: 64,
            decay: 0.9,
            correct_bias: false,
        }
    }
}

impl SubsamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_s == 0 {
            return Err(Error::InvalidArgument("n_s must be positive".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "decay must lie in (0, 1], got {}",
                self.decay
            )));
        }
        Ok(())
    }
}

/// Drawn buffer indices with the probability of each draw under `π_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Subsample {
    pub indices: Vec<usize>,
    pub probabilities: Vec<f64>,
}

/// `π_t(i)`, evaluated in log space so large `t` does not underflow the normalizer.
pub fn subsample_probability(i: usize, t: usize, decay: f64) -> f64 {
    debug_assert!(i < t);
    if decay >= 1.0 {
        return 1.0 / t as f64;
    }
    let ln_rho = decay.ln();
    let age = (t - 1 - i) as f64;
    // (1 − ρ) / (1 − ρ^t), both via expm1 for accuracy near ρ = 1
    let ln_norm = (-ln_rho.exp_m1()).ln() - (-(t as f64 * ln_rho).exp_m1()).ln();
    (age * ln_rho + ln_norm).exp()
}

fn draw_age(t: usize, decay: f64, rng: &mut impl Rng) -> usize {
    if decay >= 1.0 {
        return rng.random_range(0..t);
    }
    let ln_rho = decay.ln();
    let mass = -(t as f64 * ln_rho).exp_m1();
    let u: f64 = rng.random();
    let age = ((-u * mass).ln_1p() / ln_rho).floor();
    if age.is_finite() && age >= 0.0 {
        (age as usize).min(t - 1)
    } else {
        0
    }
}

/// Draws `n_s` indices in `[0, t)` i.i.d. with replacement from `π_t`.
pub fn subsample_indices(t: usize, cfg: &SubsamplerConfig, rng: &mut impl Rng) -> Result<Subsample> {
    if t == 0 {
        return Err(Error::InvalidArgument("cannot subsample an empty buffer".into()));
    }
    cfg.validate()?;
    let mut indices = Vec::with_capacity(cfg.n_s);
    let mut probabilities = Vec::with_capacity(cfg.n_s);
    for _ in 0..cfg.n_s {
        let i = t - 1 - draw_age(t, cfg.decay, rng);
        indices.push(i);
        probabilities.push(subsample_probability(i, t, cfg.decay));
    }
    Ok(Subsample {
        indices,
        probabilities,
    })
}

/// Likelihood weight for each drawn record.
///
/// With `correct_bias` the weights `1/(n_s·π_t(i))` make the weighted batch
/// likelihood an unbiased estimate of the full-buffer likelihood; otherwise
/// every record gets `t/n_s` and the recency bias of `π_t` is kept.
pub fn batch_weights(drawn: &Subsample, t: usize, cfg: &SubsamplerConfig) -> Result<Vec<f64>> {
    let n_s = cfg.n_s as f64;
    if !cfg.correct_bias {
        return Ok(vec![t as f64 / n_s; drawn.indices.len()]);
    }
    drawn
        .probabilities
        .iter()
        .map(|&p| {
            if p > 0.0 {
                Ok(1.0 / (n_s * p))
            } else {
                Err(Error::Numerical("subsample drawn with zero probability".into()))
            }
        })
        .collect()
}
