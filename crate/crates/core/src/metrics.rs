//! Predictive KL (PKL) evaluation and coverage fraction.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::geometry::{scaled_sq_dist, Location};
use crate::model::PredictiveDistribution;
use crate::observation::ObservationRecord;

/// Default additive smoothing applied to both KL arguments.
pub const DEFAULT_KL_EPSILON: f64 = 1e-3;

/// `KL(p ‖ q)` in nats after smoothing both arguments as `(x + ε)/(1 + W·ε)`.
pub fn kl_divergence(p: &[f64], q: &[f64], epsilon: f64) -> Result<f64> {
    ensure_len("distribution length", p.len(), q.len())?;
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be nonnegative, got {epsilon}")));
    }
    let norm = 1.0 + p.len() as f64 * epsilon;
    let mut kl = 0.0;
    for (&pw, &qw) in p.iter().zip(q) {
        let ps = (pw + epsilon) / norm;
        if ps == 0.0 {
            continue;
        }
        let qs = (qw + epsilon) / norm;
        kl += ps * (ps / qs).ln();
    }
    // rounding can leave tiny negatives when p ≈ q
    Ok(kl.max(0.0))
}

/// Linear-interpolation quantile of sorted data (the "type 7" definition).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Per-location PKL values and their quartiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PklStats {
    pub per_location_kl: Vec<f64>,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
}

impl PklStats {
    pub fn iqr(&self) -> f64 {
        self.q75 - self.q25
    }
}

/// One row of a PKL-versus-training-size table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PklSummary {
    pub checkpoint_t: usize,
    pub coverage_fraction: f64,
    pub stats: PklStats,
}

/// KL from each predicted row to the empirical frequencies of the matching
/// future record, summarized by quartiles.
pub fn pkl_checkpoint(
    model_predictions: &PredictiveDistribution,
    future_records: &[ObservationRecord],
    epsilon: f64,
) -> Result<PklStats> {
    if future_records.is_empty() {
        return Err(Error::InvalidArgument("PKL needs at least one future record".into()));
    }
    ensure_len("prediction rows", future_records.len(), model_predictions.len())?;
    let mut kls = Vec::with_capacity(future_records.len());
    for (i, rec) in future_records.iter().enumerate() {
        if model_predictions.locations[i] != *rec.location() {
            return Err(Error::InvalidArgument(format!(
                "prediction {i} is at {:?} but the record is at {:?}",
                model_predictions.locations[i].coords(),
                rec.location().coords()
            )));
        }
        ensure_len("record categories", model_predictions.w, rec.num_categories())?;
        let emp = rec.relative_abundance().ok_or_else(|| {
            Error::InvalidArgument(format!("future record {i} has zero total count"))
        })?;
        kls.push(kl_divergence(model_predictions.p_obs_row(i), &emp, epsilon)?);
    }
    let mut sorted = kls.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    Ok(PklStats {
        q25: quantile_sorted(&sorted, 0.25),
        median: quantile_sorted(&sorted, 0.5),
        q75: quantile_sorted(&sorted, 0.75),
        per_location_kl: kls,
    })
}

/// Fraction of `unobserved` points within one lengthscale (scaled distance ≤ 1)
/// of some `observed` point.
pub fn coverage_fraction(observed: &[Location], unobserved: &[Location], lengthscales: &[f64]) -> Result<f64> {
    if unobserved.is_empty() {
        return Err(Error::InvalidArgument("coverage of an empty set".into()));
    }
    if lengthscales.iter().any(|l| !(*l > 0.0)) {
        return Err(Error::InvalidArgument("lengthscales must be positive".into()));
    }
    for p in observed.iter().chain(unobserved) {
        ensure_len("location dimension", lengthscales.len(), p.dim())?;
    }
    let covered = unobserved
        .iter()
        .filter(|u| {
            observed
                .iter()
                .any(|o| scaled_sq_dist(u.coords(), o.coords(), lengthscales) <= 1.0)
        })
        .count();
    Ok(covered as f64 / unobserved.len() as f64)
}
