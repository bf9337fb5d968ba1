//! Black-box gradient estimator of the ELBO.
//!
//! For draws `z_s ~ q_λ` the score-function estimate of `∇_λ ELBO` is
//! `(1/S) Σ_s ∇_λ log q(z_s) · (f_s − a)` with `f_s = log p(z_s, batch) − log q(z_s)`.
//! It needs nothing from the model beyond log densities and is always used
//! for the Dirichlet factors. The Gaussian factors can instead be
//! differentiated through `u = mean + L·ε` (pathwise), which only needs the
//! gradient of the likelihood in the community logits and has far lower
//! variance once `m` reaches the hundreds.
//!
//! Variance reductions, none of which moves the mean:
//!
//! * Rao-Blackwellization: the signal multiplying a factor's score keeps only
//!   the terms that involve that factor (the shared likelihood plus the
//!   factor's own prior and entropy terms).
//! * Per-coordinate control variates `a_d = Cov(h_d·f, h_d)/Var(h_d)`, each
//!   estimated with the current draw left out so it stays independent of it.
//! * Optionally, closed-form KL terms: the ELBO is written as expected log
//!   likelihood minus `KL(q ‖ prior)` per factor, the KL gradient is exact and
//!   only the likelihood expectation is estimated by score functions.
//! * Optionally, per-factor draws: every factor gets its own `S` draws while
//!   all other factors stay fixed at one shared draw, so their randomness
//!   cancels out of the centered signal instead of adding noise to it.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{dot, ConditionalWeights};
use crate::model::{
    log_joint_terms, log_prior_whitened, softmax_in_place, GdrfModel, PhiMatrix, PosteriorSample, PROB_FLOOR,
};
use statrs::function::gamma::digamma;
use crate::observation::ObservationRecord;
use crate::variational::{
    draw_joint, draw_noise, kl_dirichlet, JointDraw, kl_gaussian_standard, log_q_dirichlet, log_q_joint, log_q_parts,
    neg_kl_dirichlet_grad, neg_kl_gaussian_grad, score_from_draw,
    GaussianVarParams, VariationalState,
};

/// How posterior draws are shared between the variational factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrawScheme {
    /// `S` joint draws of every latent, shared by all factors.
    Joint,
    /// One shared base draw; each factor is redrawn `S` times on its own.
    PerFactor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorConfig {
    pub samples: usize,
    pub control_variates: bool,
    pub rao_blackwell: bool,
    pub analytic_kl: bool,
    pub scheme: DrawScheme,
    /// Differentiate the likelihood through `u = mean + L·ε` for the Gaussian
    /// factors instead of using their score functions.
    pub pathwise_gaussian: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            samples: 8,
            control_variates: true,
            rao_blackwell: true,
            analytic_kl: true,
            scheme: DrawScheme::PerFactor,
            pathwise_gaussian: true,
        }
    }
}

/// A minibatch: records, their likelihood weights, and their whitened projection rows.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub records: Vec<(&'a ObservationRecord, f64)>,
    pub weights: ConditionalWeights,
}

impl<'a> Batch<'a> {
    pub fn new(records: Vec<(&'a ObservationRecord, f64)>, weights: ConditionalWeights) -> Result<Self> {
        crate::error::ensure_len("batch projection rows", records.len(), weights.nrows())?;
        Ok(Batch { records, weights })
    }

    pub fn empty(m: usize) -> Self {
        Batch {
            records: Vec::new(),
            weights: ConditionalWeights::from_row_major(0, m, Vec::new()).expect("empty"),
        }
    }
}

/// Gradient estimate plus a Monte Carlo ELBO estimate.
#[derive(Debug, Clone)]
pub struct GradientEstimate {
    pub gradient: Vec<f64>,
    pub elbo: f64,
}

/// Single-draw ELBO: `log p(sample, batch) − log q(sample)`.
pub fn elbo_estimate(
    state: &VariationalState,
    sample: &PosteriorSample,
    batch: &Batch<'_>,
    model: &GdrfModel,
) -> Result<f64> {
    let lp = crate::model::log_joint(sample, &batch.records, &batch.weights, model)?;
    Ok(lp - log_q_joint(state, sample))
}

/// Parameter ranges `[start, end)` of each variational factor, in flat order.
fn factor_ranges(state: &VariationalState) -> Vec<(usize, usize)> {
    let g = GaussianVarParams::num_params(state.m());
    let w = state.w();
    let k = state.k();
    let mut out = Vec::with_capacity(2 * k);
    for i in 0..k {
        out.push((i * g, (i + 1) * g));
    }
    let off = k * g;
    for i in 0..k {
        out.push((off + i * w, off + (i + 1) * w));
    }
    out
}

/// `(1/S) Σ_s h_s (f_s − a)` per coordinate, where `scores` holds `S` rows of
/// width `out.len()` and `a` is the leave-one-out control variate (or zero).
fn combine(scores: &[f64], f: &[f64], control_variates: bool, out: &mut [f64]) {
    let s_count = f.len();
    let width = out.len();
    let inv_s = 1.0 / s_count as f64;
    for (d, g) in out.iter_mut().enumerate() {
        let h = |s: usize| scores[s * width + d];
        if !control_variates {
            *g = (0..s_count).map(|s| h(s) * f[s]).sum::<f64>() * inv_s;
            continue;
        }
        let (mut sh, mut shh, mut sg, mut sgh) = (0.0, 0.0, 0.0, 0.0);
        for (s, &fs) in f.iter().enumerate() {
            let hs = h(s);
            sh += hs;
            shh += hs * hs;
            sg += hs * fs;
            sgh += hs * hs * fs;
        }
        let n = (s_count - 1) as f64;
        let mut acc = 0.0;
        for (s, &fs) in f.iter().enumerate() {
            let hs = h(s);
            let (mh, mhh) = ((sh - hs) / n, (shh - hs * hs) / n);
            let (mg, mgh) = ((sg - hs * fs) / n, (sgh - hs * hs * fs) / n);
            let var = mhh - mh * mh;
            let a = if var > 1e-12 * mhh && var > f64::MIN_POSITIVE {
                (mgh - mg * mh) / var
            } else {
                0.0
            };
            acc += hs * (fs - a);
        }
        *g = acc * inv_s;
    }
}

pub fn bbvi_gradient(
    state: &VariationalState,
    batch: &Batch<'_>,
    cfg: &EstimatorConfig,
    rng: &mut impl Rng,
    model: &GdrfModel,
) -> Result<GradientEstimate> {
    if cfg.samples == 0 {
        return Err(Error::InvalidArgument("gradient estimator needs at least one sample".into()));
    }
    if cfg.control_variates && cfg.samples < 2 {
        return Err(Error::InvalidArgument(
            "control variates need at least two samples".into(),
        ));
    }
    state.check_dims(model.k(), model.m(), model.w())?;
    crate::error::ensure_len("batch projection rows", batch.records.len(), batch.weights.nrows())?;
    match cfg.scheme {
        DrawScheme::Joint => joint_gradient(state, batch, cfg, rng, model),
        DrawScheme::PerFactor => per_factor_gradient(state, batch, cfg, rng, model),
    }
}

fn joint_gradient(
    state: &VariationalState,
    batch: &Batch<'_>,
    cfg: &EstimatorConfig,
    rng: &mut impl Rng,
    model: &GdrfModel,
) -> Result<GradientEstimate> {
    let s_count = cfg.samples;
    let p = state.num_params();
    let k = state.k();
    let ranges = factor_ranges(state);
    let n_factors = ranges.len();

    // scores[s] is the flat score of draw s; signal[s][g] the f multiplying factor g
    let mut scores = vec![0.0; s_count * p];
    let mut signal = vec![0.0; s_count * n_factors];
    let mut elbo = 0.0;
    let mut gradient = vec![0.0; p];
    let mut logit_grad = vec![0.0; k];
    let mut theta = vec![0.0; k];
    let mut gu = vec![vec![0.0; state.m()]; k];
    for s in 0..s_count {
        let draw = draw_joint(state, rng);
        if cfg.pathwise_gaussian {
            pathwise_joint_draw(state, &draw, batch, cfg, model, &mut theta, &mut logit_grad, &mut gu);
            for (j, g) in state.gp.iter().enumerate() {
                let (start, end) = ranges[j];
                accumulate_pathwise(g, &draw.noise[j], &gu[j], 1.0 / s_count as f64, &mut gradient[start..end]);
            }
        }
        let terms = log_joint_terms(&draw.sample, &batch.records, &batch.weights, model)?;
        let (lq_u, lq_phi) = log_q_parts(state, &draw);
        let full = terms.total() - lq_u.iter().sum::<f64>() - lq_phi.iter().sum::<f64>();
        if !cfg.analytic_kl {
            elbo += full / s_count as f64;
        } else {
            elbo += terms.likelihood / s_count as f64;
        }
        let sig = &mut signal[s * n_factors..(s + 1) * n_factors];
        for i in 0..k {
            if cfg.analytic_kl {
                sig[i] = terms.likelihood;
                sig[k + i] = terms.likelihood;
            } else if cfg.rao_blackwell {
                sig[i] = terms.likelihood + terms.prior_u[i] - lq_u[i];
                sig[k + i] = terms.likelihood + terms.prior_phi[i] - lq_phi[i];
            } else {
                sig[i] = full;
                sig[k + i] = full;
            }
        }
        score_from_draw(state, &draw, &mut scores[s * p..(s + 1) * p]);
    }

    if cfg.pathwise_gaussian && !cfg.analytic_kl {
        for (j, g) in state.gp.iter().enumerate() {
            add_entropy_gradient(g.dim(), &mut gradient[ranges[j].0..ranges[j].1]);
        }
    }
    let mut factor_scores = Vec::new();
    for (g, &(start, end)) in ranges.iter().enumerate() {
        if cfg.pathwise_gaussian && g < k {
            continue;
        }
        let width = end - start;
        factor_scores.clear();
        for s in 0..s_count {
            factor_scores.extend_from_slice(&scores[s * p + start..s * p + end]);
        }
        let f: Vec<f64> = (0..s_count).map(|s| signal[s * n_factors + g]).collect();
        combine(&factor_scores[..s_count * width], &f, cfg.control_variates, &mut gradient[start..end]);
    }
    if cfg.analytic_kl {
        elbo -= add_kl_gradient(state, model, &ranges, &mut gradient);
    }
    Ok(GradientEstimate { gradient, elbo })
}

/// Adds `−∇ KL` of every factor to `gradient` and returns the total KL.
///
/// Factors are independent, so they are processed in parallel; the total is
/// summed in factor order to stay deterministic.
fn add_kl_gradient(
    state: &VariationalState,
    model: &GdrfModel,
    ranges: &[(usize, usize)],
    gradient: &mut [f64],
) -> f64 {
    let k = state.k();
    let beta = &model.hyper().beta;
    let (gauss, dir) = gradient.split_at_mut(ranges[k].0);
    let add = |out: &mut [f64], buf: &[f64]| out.iter_mut().zip(buf).for_each(|(a, b)| *a += b);
    let kl_u: Vec<f64> = gauss
        .par_chunks_mut(ranges[0].1 - ranges[0].0)
        .zip(state.gp.par_iter())
        .map(|(out, g)| {
            let mut buf = vec![0.0; out.len()];
            neg_kl_gaussian_grad(g, &mut buf);
            add(out, &buf);
            kl_gaussian_standard(g)
        })
        .collect();
    let kl_phi: Vec<f64> = dir
        .par_chunks_mut(state.w())
        .zip(state.phi.par_iter())
        .map(|(out, q)| {
            let mut buf = vec![0.0; out.len()];
            neg_kl_dirichlet_grad(q, beta, &mut buf);
            add(out, &buf);
            kl_dirichlet(q, beta)
        })
        .collect();
    kl_u.iter().chain(&kl_phi).sum()
}

/// `∇_u` of the batch likelihood (plus the prior unless KL is analytic) at a joint draw, per community.
#[allow(clippy::too_many_arguments)]
fn pathwise_joint_draw(
    state: &VariationalState,
    draw: &JointDraw,
    batch: &Batch<'_>,
    cfg: &EstimatorConfig,
    model: &GdrfModel,
    theta: &mut [f64],
    logit_grad: &mut [f64],
    gu: &mut [Vec<f64>],
) {
    let gp_mean = model.hyper().gp_mean;
    gu.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v = 0.0));
    for (i, (rec, wt)) in batch.records.iter().enumerate() {
        let row = batch.weights.row(i);
        for (t, u) in theta.iter_mut().zip(&draw.sample.u) {
            *t = gp_mean + dot(row, u);
        }
        softmax_in_place(theta);
        likelihood_logit_grad(theta, &draw.sample.phi, rec, logit_grad);
        for (g, &d) in gu.iter_mut().zip(logit_grad.iter()) {
            let scale = wt * d;
            for (a, b) in g.iter_mut().zip(row) {
                *a += scale * b;
            }
        }
    }
    if !cfg.analytic_kl {
        for (g, u) in gu.iter_mut().zip(&draw.sample.u) {
            for (a, b) in g.iter_mut().zip(u) {
                *a -= b;
            }
        }
    }
    debug_assert_eq!(gu.len(), state.k());
}

/// Adds `scale · ∂u/∂λ · g_u` for `u = mean + L·ε` to the `[mean, chol_raw]` gradient `out`.
fn accumulate_pathwise(g: &GaussianVarParams, eps: &[f64], gu: &[f64], scale: f64, out: &mut [f64]) {
    let m = g.dim();
    let (mean_part, chol_part) = out.split_at_mut(m);
    for (o, v) in mean_part.iter_mut().zip(gu) {
        *o += scale * v;
    }
    let mut idx = 0;
    for i in 0..m {
        let gi = scale * gu[i];
        for (c, e) in chol_part[idx..idx + i].iter_mut().zip(&eps[..i]) {
            *c += gi * e;
        }
        idx += i;
        chol_part[idx] += gi * eps[i] * g.chol(i, i);
        idx += 1;
    }
}

/// `+1` per log-diagonal entry: the gradient of the Gaussian entropy.
fn add_entropy_gradient(m: usize, out: &mut [f64]) {
    let chol_part = &mut out[m..];
    let mut idx = 0;
    for i in 0..m {
        idx += i;
        chol_part[idx] += 1.0;
        idx += 1;
    }
}

/// `∂/∂μ_j` of `Σ_w n_w log(θᵀΦ)_w` at one record, for every community `j`, into `out`.
fn likelihood_logit_grad(theta: &[f64], phi: &PhiMatrix, rec: &ObservationRecord, out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (c, cnt) in rec.nonzero() {
        let p: f64 = theta.iter().enumerate().map(|(j, t)| t * phi.get(j, c)).sum();
        if p > PROB_FLOOR {
            let n = cnt as f64;
            for (j, o) in out.iter_mut().enumerate() {
                *o += n * theta[j] * (phi.get(j, c) / p - 1.0);
            }
        }
    }
}

fn log_prob(p: f64) -> f64 {
    if p > PROB_FLOOR {
        p.ln()
    } else {
        PROB_FLOOR.ln()
    }
}

/// A minibatch with categories renumbered into the columns of a compact Φ.
struct CompactBatch {
    /// Original category of each compact column, except a trailing "rest" column.
    present: Vec<usize>,
    /// Whether the last column lumps together every category absent from the batch.
    has_rest: bool,
    /// Per record: likelihood weight and `(column, count)` pairs.
    records: Vec<(f64, Vec<(usize, f64)>)>,
}

impl CompactBatch {
    /// With `collapse`, only categories observed somewhere in the batch keep
    /// their own column; otherwise every category does.
    fn new(batch: &Batch<'_>, w: usize, collapse: bool) -> Self {
        let mut slot = vec![usize::MAX; w];
        let present: Vec<usize> = if collapse {
            let mut seen: Vec<usize> = Vec::new();
            for (rec, _) in &batch.records {
                for (c, _) in rec.nonzero() {
                    if slot[c] == usize::MAX {
                        slot[c] = 0;
                        seen.push(c);
                    }
                }
            }
            seen.sort_unstable();
            seen
        } else {
            (0..w).collect()
        };
        for (i, &c) in present.iter().enumerate() {
            slot[c] = i;
        }
        let records = batch
            .records
            .iter()
            .map(|(rec, wt)| (*wt, rec.nonzero().map(|(c, n)| (slot[c], n as f64)).collect()))
            .collect();
        CompactBatch {
            has_rest: present.len() < w,
            present,
            records,
        }
    }

    fn width(&self) -> usize {
        self.present.len() + usize::from(self.has_rest)
    }

    /// Dirichlet parameters of the compact row: present categories, then their complement's total.
    fn alpha(&self, gamma: &[f64]) -> Vec<f64> {
        let mut alpha: Vec<f64> = self.present.iter().map(|&c| gamma[c]).collect();
        if self.has_rest {
            let mut mark = vec![false; gamma.len()];
            self.present.iter().for_each(|&c| mark[c] = true);
            alpha.push(gamma.iter().zip(&mark).filter(|(_, &m)| !m).map(|(g, _)| g).sum());
        }
        alpha
    }
}

fn sample_compact(alpha: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    let mut x = crate::model::sample_dirichlet_raw(alpha, rng);
    crate::variational::clamp_simplex(&mut x);
    x
}

/// Weighted log likelihood of the compact batch given per-record community weights.
fn compact_log_lik(cb: &CompactBatch, thetas: &[f64], phi: &[Vec<f64>]) -> f64 {
    let k = phi.len();
    let mut ll = 0.0;
    for (i, (wt, cats)) in cb.records.iter().enumerate() {
        let t = &thetas[i * k..(i + 1) * k];
        let rec_ll: f64 = cats
            .iter()
            .map(|&(c, n)| n * log_prob(t.iter().zip(phi).map(|(tj, row)| tj * row[c]).sum()))
            .sum();
        ll += wt * rec_ll;
    }
    ll
}

/// Reparameterized gradient for Gaussian factor `kk`, other factors held at the base draw.
#[allow(clippy::too_many_arguments)]
fn pathwise_gaussian_grad(
    g: &GaussianVarParams,
    kk: usize,
    mu: &[f64],
    phi: &[Vec<f64>],
    cb: &CompactBatch,
    batch: &Batch<'_>,
    cfg: &EstimatorConfig,
    gp_mean: f64,
    rng: &mut impl Rng,
    out: &mut [f64],
) {
    let m = g.dim();
    let k = phi.len();
    let inv_s = 1.0 / cfg.samples as f64;
    let mut theta = vec![0.0; k];
    let mut gu = vec![0.0; m];
    out.iter_mut().for_each(|o| *o = 0.0);
    for _ in 0..cfg.samples {
        let eps = draw_noise(m, rng);
        let u = g.transform(&eps);
        gu.iter_mut().for_each(|v| *v = 0.0);
        for (i, (wt, cats)) in cb.records.iter().enumerate() {
            let row = batch.weights.row(i);
            theta.copy_from_slice(&mu[i * k..(i + 1) * k]);
            theta[kk] = gp_mean + dot(row, &u);
            softmax_in_place(&mut theta);
            // d/dμ_kk of Σ_w n_w log(θᵀΦ)_w is Σ_w n_w θ_kk (Φ_kk,w / p_w − 1)
            let mut d = 0.0;
            for &(c, n) in cats {
                let p: f64 = theta.iter().zip(phi).map(|(t, r)| t * r[c]).sum();
                if p > PROB_FLOOR {
                    d += n * theta[kk] * (phi[kk][c] / p - 1.0);
                }
            }
            let scale = wt * d;
            for (a, b) in gu.iter_mut().zip(row) {
                *a += scale * b;
            }
        }
        if !cfg.analytic_kl {
            // prior −u; the entropy adds +1 per log-diagonal below
            for (a, b) in gu.iter_mut().zip(&u) {
                *a -= b;
            }
        }
        accumulate_pathwise(g, &eps, &gu, inv_s, out);
    }
    if !cfg.analytic_kl {
        add_entropy_gradient(m, out);
    }
}

/// Per-factor draws around one shared base draw.
///
/// With analytic KL the sampled part of the objective only sees Φ at the
/// categories present in the batch, so each Dirichlet row is drawn in
/// aggregated form: present categories plus one lumped remainder `R`. The
/// score of an absent category `w` is replaced by its conditional
/// expectation given `R`, `γ_w (ψ(γ_0) − ψ(γ_rest) + ln R)`, which keeps the
/// estimator unbiased and makes its cost independent of `W`.
fn per_factor_gradient(
    state: &VariationalState,
    batch: &Batch<'_>,
    cfg: &EstimatorConfig,
    rng: &mut impl Rng,
    model: &GdrfModel,
) -> Result<GradientEstimate> {
    let s_count = cfg.samples;
    let (k, m, w) = (state.k(), state.m(), state.w());
    let n = batch.records.len();
    for (rec, wt) in &batch.records {
        crate::error::ensure_len("record categories", w, rec.num_categories())?;
        if !(*wt >= 0.0) {
            return Err(Error::InvalidArgument(format!("negative batch weight {wt}")));
        }
    }
    let gp_mean = model.hyper().gp_mean;
    let cb = CompactBatch::new(batch, w, cfg.analytic_kl);
    let width = cb.width();
    let gammas: Vec<Vec<f64>> = state.phi.iter().map(|q| q.gamma()).collect();
    let alphas: Vec<Vec<f64>> = gammas.iter().map(|g| cb.alpha(g)).collect();

    // shared base draw
    let base_eps: Vec<Vec<f64>> = (0..k).map(|_| draw_noise(m, rng)).collect();
    let base_u: Vec<Vec<f64>> = state.gp.iter().zip(&base_eps).map(|(g, e)| g.transform(e)).collect();
    let phi: Vec<Vec<f64>> = alphas.iter().map(|a| sample_compact(a, rng)).collect();

    // latent means per record at the base draw, n × K
    let mut mu = vec![0.0; n * k];
    for i in 0..n {
        let row = batch.weights.row(i);
        for (j, u) in base_u.iter().enumerate() {
            mu[i * k + j] = gp_mean + dot(row, u);
        }
    }
    let mut thetas = mu.clone();
    for row in thetas.chunks_exact_mut(k) {
        softmax_in_place(row);
    }
    let mut elbo = compact_log_lik(&cb, &thetas, &phi);
    if !cfg.analytic_kl {
        // without collapsing, compact rows are full rows
        for (g, e) in state.gp.iter().zip(&base_eps) {
            elbo -= g.log_density_from_noise(e);
        }
        elbo += base_u.iter().map(|u| log_prior_whitened(u)).sum::<f64>();
        for (q, row) in state.phi.iter().zip(&phi) {
            elbo += model.log_prior_phi(row) - log_q_dirichlet(q, row);
        }
    }

    let mut gradient = vec![0.0; state.num_params()];
    let ranges = factor_ranges(state);
    let gsize = GaussianVarParams::num_params(m);
    let mut scores = vec![0.0; s_count * gsize.max(width)];
    let mut f = vec![0.0; s_count];
    let mut theta = vec![0.0; k];

    for (kk, g) in state.gp.iter().enumerate() {
        let (start, end) = ranges[kk];
        if cfg.pathwise_gaussian {
            pathwise_gaussian_grad(g, kk, &mu, &phi, &cb, batch, cfg, gp_mean, rng, &mut gradient[start..end]);
            continue;
        }
        for s in 0..s_count {
            let eps = draw_noise(m, rng);
            let u = g.transform(&eps);
            let mut ll = 0.0;
            for (i, (wt, cats)) in cb.records.iter().enumerate() {
                theta.copy_from_slice(&mu[i * k..(i + 1) * k]);
                theta[kk] = gp_mean + dot(batch.weights.row(i), &u);
                softmax_in_place(&mut theta);
                let rec_ll: f64 = cats
                    .iter()
                    .map(|&(c, n)| n * log_prob(theta.iter().zip(&phi).map(|(t, r)| t * r[c]).sum()))
                    .sum();
                ll += wt * rec_ll;
            }
            f[s] = if cfg.analytic_kl {
                ll
            } else {
                ll + log_prior_whitened(&u) - g.log_density_from_noise(&eps)
            };
            g.score_from_noise(&eps, &mut scores[s * gsize..(s + 1) * gsize]);
        }
        combine(&scores[..s_count * gsize], &f, cfg.control_variates, &mut gradient[start..end]);
    }

    let mut combined = vec![0.0; width];
    for (kk, q) in state.phi.iter().enumerate() {
        let alpha = &alphas[kk];
        let psi_total = digamma(alpha.iter().sum());
        let psi: Vec<f64> = alpha.iter().map(|&a| digamma(a)).collect();
        // mixture mass from the other communities at each compact category
        let rest: Vec<Vec<f64>> = cb
            .records
            .iter()
            .enumerate()
            .map(|(i, (_, cats))| {
                let t = &thetas[i * k..(i + 1) * k];
                cats.iter()
                    .map(|&(c, _)| (0..k).filter(|&j| j != kk).map(|j| t[j] * phi[j][c]).sum())
                    .collect()
            })
            .collect();
        for s in 0..s_count {
            let row = sample_compact(alpha, rng);
            let mut ll = 0.0;
            for (i, (wt, cats)) in cb.records.iter().enumerate() {
                let tk = thetas[i * k + kk];
                let rec_ll: f64 = cats.iter().zip(&rest[i]).map(|(&(c, n), r)| n * log_prob(r + tk * row[c])).sum();
                ll += wt * rec_ll;
            }
            f[s] = if cfg.analytic_kl {
                ll
            } else {
                ll + model.log_prior_phi(&row) - log_q_dirichlet(q, &row)
            };
            let sc = &mut scores[s * width..(s + 1) * width];
            for (i, o) in sc.iter_mut().enumerate().take(cb.present.len()) {
                *o = alpha[i] * (psi_total - psi[i] + row[i].ln());
            }
            if cb.has_rest {
                // left unscaled: every absent category's score is γ_w times this
                let r = cb.present.len();
                sc[r] = psi_total - psi[r] + row[r].ln();
            }
        }
        combine(&scores[..s_count * width], &f, cfg.control_variates, &mut combined);
        let off = ranges[k + kk].0;
        if cb.has_rest {
            let lumped = combined[cb.present.len()];
            for (o, &gw) in gradient[off..off + w].iter_mut().zip(&gammas[kk]) {
                *o = gw * lumped;
            }
        }
        for (i, &c) in cb.present.iter().enumerate() {
            gradient[off + c] = combined[i];
        }
    }
    if cfg.analytic_kl {
        elbo -= add_kl_gradient(state, model, &ranges, &mut gradient);
    }
    Ok(GradientEstimate { gradient, elbo })
}
