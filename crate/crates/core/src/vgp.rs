//! Baseline: an independent sparse variational GP regression per observation
//! category, fit offline on relative abundances with a fixed Gaussian noise,
//! whose predictions are clamped and renormalized into distributions.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::engine::{AdamConfig, OptimizerState};
use crate::error::{ensure_len, Error, Result};
use crate::geometry::Location;
use crate::gp::{dot, SparseGp};
use crate::model::{ModelHyperparams, PredictiveDistribution};
use crate::observation::ObservationRecord;
use crate::variational::GaussianVarParams;

/// Floor applied to per-category means before renormalizing.
pub const VGP_PROB_FLOOR: f64 = 1e-6;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VgpConfig {
    pub noise_var: f64,
    pub iterations: usize,
    pub adam: AdamConfig,
}

impl Default for VgpConfig {
    fn default() -> Self {
        VgpConfig {
            noise_var: 0.01,
            iterations: 1000,
            adam: AdamConfig {
                learning_rate: 0.05,
                ..AdamConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct VgpState {
    gp: SparseGp,
    pub noise_var: f64,
    /// Constant prior mean of every category's regression (`1/W`).
    pub prior_mean: f64,
    pub params: Vec<GaussianVarParams>,
}

/// `W·(m + m(m+1)/2) + W`: variational parameters plus a mean constant per category.
pub fn vgp_parameter_count(w: usize, m: usize) -> usize {
    w * GaussianVarParams::num_params(m) + w
}

impl VgpState {
    pub fn prior(hyper: &ModelHyperparams, noise_var: f64) -> Result<Self> {
        hyper.validate()?;
        if !(noise_var > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise variance must be positive, got {noise_var}"
            )));
        }
        let gp = SparseGp::new(hyper.kernel.clone(), hyper.inducing.clone())?;
        let m = gp.num_inducing();
        Ok(VgpState {
            gp,
            noise_var,
            prior_mean: 1.0 / hyper.w as f64,
            params: (0..hyper.w).map(|_| GaussianVarParams::init(m)).collect(),
        })
    }

    pub fn w(&self) -> usize {
        self.params.len()
    }

    pub fn m(&self) -> usize {
        self.gp.num_inducing()
    }

    pub fn parameter_count(&self) -> usize {
        vgp_parameter_count(self.w(), self.m())
    }

    pub fn gp(&self) -> &SparseGp {
        &self.gp
    }
}

/// Sufficient statistics of one regression problem in whitened coordinates.
struct RegressionStats {
    /// `BᵀB` with `B` the whitened projection of the training inputs.
    gram: DMatrix<f64>,
    /// `Bᵀ(y − M)` per category.
    cross: Vec<DVector<f64>>,
    /// `Σ (y − M)²` per category.
    sq: Vec<f64>,
    n: usize,
    prior_var: f64,
}

fn regression_stats(state: &VgpState, records: &[ObservationRecord]) -> Result<RegressionStats> {
    let w = state.w();
    let mut locs = Vec::new();
    let mut ys = Vec::new();
    for (i, r) in records.iter().enumerate() {
        ensure_len("record categories", w, r.num_categories())?;
        match r.relative_abundance() {
            Some(y) => {
                locs.push(r.location().clone());
                ys.push(y);
            }
            None => warn!("record {i} has zero total count; excluded from VGP fit"),
        }
    }
    let m = state.m();
    let n = locs.len();
    let mut gram = DMatrix::zeros(m, m);
    let mut cross = vec![DVector::zeros(m); w];
    let mut sq = vec![0.0; w];
    if n > 0 {
        let proj = state.gp.projection(&locs)?;
        let b = proj.to_matrix();
        gram = b.transpose() * &b;
        let mut resid = DMatrix::zeros(n, w);
        for (i, y) in ys.iter().enumerate() {
            for c in 0..w {
                let r = y[c] - state.prior_mean;
                resid[(i, c)] = r;
                sq[c] += r * r;
            }
        }
        let bt_r = b.transpose() * resid;
        for (c, col) in cross.iter_mut().enumerate() {
            *col = bt_r.column(c).into_owned();
        }
    }
    Ok(RegressionStats {
        gram,
        cross,
        sq,
        n,
        prior_var: state.gp.kernel().variance,
    })
}

fn lower(p: &GaussianVarParams) -> DMatrix<f64> {
    let m = p.dim();
    DMatrix::from_row_slice(m, m, &p.chol_dense())
}

/// Whitened sparse-regression ELBO of one category.
fn category_elbo(p: &GaussianVarParams, st: &RegressionStats, c: usize, noise_var: f64) -> f64 {
    let m = p.dim();
    let mean = DVector::from_column_slice(&p.mean);
    let l = lower(p);
    let s = &l * l.transpose();
    let quad = st.sq[c] - 2.0 * mean.dot(&st.cross[c]) + mean.dot(&(&st.gram * &mean));
    let trace_gs = (&st.gram * &s).trace();
    let data = -0.5 * st.n as f64 * (LN_2PI + noise_var.ln())
        - quad / (2.0 * noise_var)
        - (trace_gs + st.n as f64 * st.prior_var - st.gram.trace()) / (2.0 * noise_var);
    let log_det: f64 = (0..m).map(|i| 2.0 * l[(i, i)].ln()).sum();
    let kl = 0.5 * (s.trace() + mean.dot(&mean) - m as f64 - log_det);
    data - kl
}

/// Analytic ELBO gradient in the packed `[mean, chol_raw]` layout.
fn category_gradient(p: &GaussianVarParams, st: &RegressionStats, c: usize, noise_var: f64) -> Vec<f64> {
    let m = p.dim();
    let mean = DVector::from_column_slice(&p.mean);
    let g_mean = (&st.cross[c] - &st.gram * &mean) / noise_var - &mean;
    let l = lower(p);
    let mut prec = &st.gram / noise_var;
    for i in 0..m {
        prec[(i, i)] += 1.0;
    }
    let cl = prec * &l;
    let mut out = Vec::with_capacity(GaussianVarParams::num_params(m));
    out.extend(g_mean.iter());
    for i in 0..m {
        for j in 0..i {
            out.push(-cl[(i, j)]);
        }
        out.push(1.0 - cl[(i, i)] * l[(i, i)]);
    }
    out
}

fn fit_category(
    init: &GaussianVarParams,
    st: &RegressionStats,
    c: usize,
    cfg: &VgpConfig,
) -> Result<GaussianVarParams> {
    let mut p = init.clone();
    let mut flat = Vec::new();
    p.write_flat(&mut flat);
    let mut opt = OptimizerState::new(flat.len(), cfg.adam);
    for _ in 0..cfg.iterations {
        p.read_flat(&flat);
        let g = category_gradient(&p, st, c, cfg.noise_var);
        opt.step(&mut flat, &g)?;
    }
    p.read_flat(&flat);
    Ok(p)
}

/// Fits `W` independent regressions on relative abundances with full-batch Adam.
pub fn vgp_fit(records: &[ObservationRecord], hyper: &ModelHyperparams, cfg: &VgpConfig) -> Result<VgpState> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("VGP fit needs at least one record".into()));
    }
    cfg.adam.validate()?;
    let mut state = VgpState::prior(hyper, cfg.noise_var)?;
    if cfg.iterations == 0 {
        return Ok(state);
    }
    let stats = regression_stats(&state, records)?;
    let init = state.params[0].clone();
    state.params = (0..state.w())
        .into_par_iter()
        .map(|c| fit_category(&init, &stats, c, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(state)
}

/// Total ELBO across categories on `records`, for diagnostics and tests.
pub fn vgp_elbo(state: &VgpState, records: &[ObservationRecord]) -> Result<f64> {
    let st = regression_stats(state, records)?;
    Ok((0..state.w())
        .map(|c| category_elbo(&state.params[c], &st, c, state.noise_var))
        .sum())
}

/// Posterior means per category at `queries`, before clamping.
pub fn vgp_means(state: &VgpState, queries: &[Location]) -> Result<Vec<Vec<f64>>> {
    let proj = state.gp.projection(queries)?;
    Ok(proj
        .rows()
        .map(|row| {
            state
                .params
                .iter()
                .map(|p| state.prior_mean + dot(row, &p.mean))
                .collect()
        })
        .collect())
}

/// Clamped, renormalized category distributions; `theta` is left empty.
pub fn vgp_predict(state: &VgpState, queries: &[Location]) -> Result<PredictiveDistribution> {
    let w = state.w();
    let mut p_obs = Vec::with_capacity(queries.len() * w);
    for row in vgp_means(state, queries)? {
        let clamped: Vec<f64> = row.iter().map(|v| v.max(VGP_PROB_FLOOR)).collect();
        let s: f64 = clamped.iter().sum();
        p_obs.extend(clamped.into_iter().map(|v| v / s));
    }
    Ok(PredictiveDistribution {
        locations: queries.to_vec(),
        k: 0,
        w,
        theta: Vec::new(),
        p_obs,
    })
}
