//! The Gaussian-Dirichlet random field: K latent GP fields pushed through a
//! softmax give community weights θ(x); each community is a Dirichlet-drawn
//! distribution over W observation categories (a row of Φ); observations at
//! `x` are multinomial draws from θ(x)ᵀΦ. Per-observation community labels
//! are summed out analytically.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Gamma, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::error::{ensure_len, Error, Result};
use crate::geometry::{Location, RegularGrid};
use crate::gp::{cholesky_jittered, dot, gram, ConditionalWeights, KernelParams, SparseGp, BASE_JITTER};
use crate::observation::ObservationRecord;
use crate::variational::VariationalState;

/// Floor applied to observation probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelHyperparams {
    pub k: usize,
    pub w: usize,
    /// Dirichlet concentration, one entry per category.
    pub beta: Vec<f64>,
    pub gp_mean: f64,
    pub kernel: KernelParams,
    pub inducing: RegularGrid,
}

impl ModelHyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::InvalidArgument("K must be at least 1".into()));
        }
        if self.w < 2 {
            return Err(Error::InvalidArgument("W must be at least 2".into()));
        }
        ensure_len("beta", self.w, self.beta.len())?;
        if self.beta.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
            return Err(Error::InvalidArgument("beta entries must be positive".into()));
        }
        if !self.gp_mean.is_finite() {
            return Err(Error::InvalidArgument("gp_mean must be finite".into()));
        }
        self.kernel.validate()?;
        ensure_len("kernel lengthscales", self.inducing.dim(), self.kernel.dim())
    }
}

/// Hyperparameters plus the precomputed inducing-grid factor.
#[derive(Debug, Clone)]
pub struct GdrfModel {
    hyper: ModelHyperparams,
    gp: SparseGp,
    dirichlet_log_norm: f64,
}

impl GdrfModel {
    pub fn new(hyper: ModelHyperparams) -> Result<Self> {
        hyper.validate()?;
        let gp = SparseGp::new(hyper.kernel.clone(), hyper.inducing.clone())?;
        let dirichlet_log_norm = dirichlet_log_normalizer(&hyper.beta);
        Ok(GdrfModel {
            hyper,
            gp,
            dirichlet_log_norm,
        })
    }

    pub fn hyper(&self) -> &ModelHyperparams {
        &self.hyper
    }

    pub fn gp(&self) -> &SparseGp {
        &self.gp
    }

    pub fn k(&self) -> usize {
        self.hyper.k
    }

    pub fn w(&self) -> usize {
        self.hyper.w
    }

    pub fn m(&self) -> usize {
        self.gp.num_inducing()
    }

    pub fn projection(&self, queries: &[Location]) -> Result<ConditionalWeights> {
        self.gp.projection(queries)
    }

    /// `log p(Φ_k | β)` for one community row.
    pub fn log_prior_phi(&self, phi_row: &[f64]) -> f64 {
        self.dirichlet_log_norm
            + phi_row
                .iter()
                .zip(&self.hyper.beta)
                .filter(|(_, &b)| b != 1.0)
                .map(|(p, b)| (b - 1.0) * p.ln())
                .sum::<f64>()
    }
}

/// `ln Γ(Σβ) − Σ ln Γ(β_w)`.
pub(crate) fn dirichlet_log_normalizer(beta: &[f64]) -> f64 {
    ln_gamma(beta.iter().sum()) - beta.iter().map(|&b| ln_gamma(b)).sum::<f64>()
}

/// Standard-normal log density of a whitened inducing vector.
pub fn log_prior_whitened(u: &[f64]) -> f64 {
    -0.5 * dot(u, u) - 0.5 * u.len() as f64 * LN_2PI
}

/// K×W matrix whose rows are distributions over categories.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiMatrix {
    k: usize,
    w: usize,
    data: Vec<f64>,
}

impl PhiMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let k = rows.len();
        if k == 0 {
            return Err(Error::InvalidArgument("Φ needs at least one row".into()));
        }
        let w = rows[0].len();
        let mut data = Vec::with_capacity(k * w);
        for (i, r) in rows.into_iter().enumerate() {
            ensure_len(&format!("Φ row {i}"), w, r.len())?;
            let sum: f64 = r.iter().sum();
            if r.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "Φ row {i} is not on the simplex (sum {sum})"
                )));
            }
            data.extend(r);
        }
        Ok(PhiMatrix { k, w, data })
    }

    pub fn identity(k: usize) -> Self {
        let mut data = vec![0.0; k * k];
        for i in 0..k {
            data[i * k + i] = 1.0;
        }
        PhiMatrix { k, w: k, data }
    }

    pub(crate) fn from_raw(k: usize, w: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), k * w);
        PhiMatrix { k, w, data }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.w..(k + 1) * self.w]
    }

    #[inline]
    pub fn get(&self, k: usize, w: usize) -> f64 {
        self.data[k * self.w + w]
    }
}

/// One joint draw of the latents: whitened inducing deviations per community and Φ.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSample {
    pub u: Vec<Vec<f64>>,
    pub phi: PhiMatrix,
}

/// Community weights and observation distributions at a list of locations.
///
/// `theta` is empty (`k == 0`) for models without community structure.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDistribution {
    pub locations: Vec<Location>,
    pub k: usize,
    pub w: usize,
    pub theta: Vec<f64>,
    pub p_obs: Vec<f64>,
}

impl PredictiveDistribution {
    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn theta_row(&self, i: usize) -> &[f64] {
        &self.theta[i * self.k..(i + 1) * self.k]
    }

    pub fn p_obs_row(&self, i: usize) -> &[f64] {
        &self.p_obs[i * self.w..(i + 1) * self.w]
    }
}

/// Numerically stable softmax.
pub fn link_softmax(mu: &[f64]) -> Vec<f64> {
    let mut out = mu.to_vec();
    softmax_in_place(&mut out);
    out
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// `θᵀΦ`: the category distribution after marginalizing the community label.
pub fn observation_distribution(theta: &[f64], phi: &PhiMatrix) -> Result<Vec<f64>> {
    ensure_len("theta", phi.k(), theta.len())?;
    let mut out = vec![0.0; phi.w()];
    for (k, &t) in theta.iter().enumerate() {
        for (o, p) in out.iter_mut().zip(phi.row(k)) {
            *o += t * p;
        }
    }
    Ok(out)
}

/// Separate pieces of the log joint, so gradient estimators can pick the
/// terms that touch a given variational factor.
#[derive(Debug, Clone, PartialEq)]
pub struct LogJointTerms {
    pub prior_u: Vec<f64>,
    pub prior_phi: Vec<f64>,
    pub likelihood: f64,
}

impl LogJointTerms {
    pub fn total(&self) -> f64 {
        self.likelihood + self.prior_u.iter().sum::<f64>() + self.prior_phi.iter().sum::<f64>()
    }
}

fn check_sample(sample: &PosteriorSample, model: &GdrfModel) -> Result<()> {
    ensure_len("sample communities", model.k(), sample.u.len())?;
    ensure_len("Φ rows", model.k(), sample.phi.k())?;
    ensure_len("Φ columns", model.w(), sample.phi.w())?;
    for u in &sample.u {
        ensure_len("inducing values", model.m(), u.len())?;
    }
    Ok(())
}

/// Weighted multinomial log likelihood of `batch`, without the multinomial
/// coefficients (they do not depend on any latent). `weights` holds whitened
/// projection rows aligned with the batch.
pub fn log_likelihood(
    sample: &PosteriorSample,
    batch: &[(&ObservationRecord, f64)],
    weights: &ConditionalWeights,
    model: &GdrfModel,
) -> Result<f64> {
    check_sample(sample, model)?;
    ensure_len("weight rows", batch.len(), weights.nrows())?;
    let k = model.k();
    let mean = model.hyper.gp_mean;
    let log_floor = PROB_FLOOR.ln();
    let mut theta = vec![0.0; k];
    let mut total = 0.0;
    for (i, (rec, wt)) in batch.iter().enumerate() {
        ensure_len("record categories", model.w(), rec.num_categories())?;
        if !(*wt >= 0.0) {
            return Err(Error::InvalidArgument(format!("negative batch weight {wt}")));
        }
        let row = weights.row(i);
        for (t, u) in theta.iter_mut().zip(&sample.u) {
            *t = mean + dot(row, u);
        }
        softmax_in_place(&mut theta);
        let mut rec_ll = 0.0;
        for (w, n) in rec.nonzero() {
            let p: f64 = theta.iter().enumerate().map(|(j, t)| t * sample.phi.get(j, w)).sum();
            let lp = if p > PROB_FLOOR { p.ln() } else { log_floor };
            rec_ll += n as f64 * lp;
        }
        total += wt * rec_ll;
    }
    Ok(total)
}

pub fn log_joint_terms(
    sample: &PosteriorSample,
    batch: &[(&ObservationRecord, f64)],
    weights: &ConditionalWeights,
    model: &GdrfModel,
) -> Result<LogJointTerms> {
    let likelihood = log_likelihood(sample, batch, weights, model)?;
    Ok(LogJointTerms {
        prior_u: sample.u.iter().map(|u| log_prior_whitened(u)).collect(),
        prior_phi: (0..model.k()).map(|k| model.log_prior_phi(sample.phi.row(k))).collect(),
        likelihood,
    })
}

/// `log p(u) + log p(Φ|β) + Σ_i weight_i · Σ_w n_iw · log p(w | x_i)`.
pub fn log_joint(
    sample: &PosteriorSample,
    batch: &[(&ObservationRecord, f64)],
    weights: &ConditionalWeights,
    model: &GdrfModel,
) -> Result<f64> {
    Ok(log_joint_terms(sample, batch, weights, model)?.total())
}

/// How [`predict`] integrates over the variational posterior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PredictMode {
    /// Evaluate the model at variational means.
    PlugIn,
    /// Average `p(w|x)` over posterior samples.
    MonteCarlo { samples: usize, seed: u64 },
}

fn theta_rows(u: &[Vec<f64>], proj: &ConditionalWeights, mean: f64) -> Vec<f64> {
    let k = u.len();
    let mut theta = Vec::with_capacity(proj.nrows() * k);
    let mut row_buf = vec![0.0; k];
    for row in proj.rows() {
        for (t, uk) in row_buf.iter_mut().zip(u) {
            *t = mean + dot(row, uk);
        }
        softmax_in_place(&mut row_buf);
        theta.extend_from_slice(&row_buf);
    }
    theta
}

fn mix_rows(theta: &[f64], k: usize, phi: &PhiMatrix, out: &mut [f64], scale: f64) {
    let w = phi.w();
    for (t_row, o_row) in theta.chunks_exact(k).zip(out.chunks_exact_mut(w)) {
        for (j, &t) in t_row.iter().enumerate() {
            let s = t * scale;
            for (o, p) in o_row.iter_mut().zip(phi.row(j)) {
                *o += s * p;
            }
        }
    }
}

fn renormalize_rows(data: &mut [f64], width: usize) {
    for row in data.chunks_exact_mut(width) {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
}

/// Predictive community weights and category distributions at `queries`.
pub fn predict(
    state: &VariationalState,
    queries: &[Location],
    model: &GdrfModel,
    mode: PredictMode,
) -> Result<PredictiveDistribution> {
    state.check_dims(model.k(), model.m(), model.w())?;
    let (k, w) = (model.k(), model.w());
    let proj = model.projection(queries)?;
    let mean = model.hyper.gp_mean;
    let (mut theta, mut p_obs) = match mode {
        PredictMode::PlugIn => {
            let u: Vec<Vec<f64>> = state.gp.iter().map(|g| g.mean.clone()).collect();
            let theta = theta_rows(&u, &proj, mean);
            let phi = state.phi_mean();
            let mut p = vec![0.0; queries.len() * w];
            mix_rows(&theta, k, &phi, &mut p, 1.0);
            (theta, p)
        }
        PredictMode::MonteCarlo { samples, seed } => {
            if samples == 0 {
                return Err(Error::InvalidArgument(
                    "Monte Carlo prediction needs at least one sample".into(),
                ));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut theta_acc = vec![0.0; queries.len() * k];
            let mut p = vec![0.0; queries.len() * w];
            let scale = 1.0 / samples as f64;
            for _ in 0..samples {
                let s = crate::variational::sample_joint(state, &mut rng);
                let theta = theta_rows(&s.u, &proj, mean);
                for (a, t) in theta_acc.iter_mut().zip(&theta) {
                    *a += scale * t;
                }
                mix_rows(&theta, k, &s.phi, &mut p, scale);
            }
            (theta_acc, p)
        }
    };
    renormalize_rows(&mut theta, k);
    renormalize_rows(&mut p_obs, w);
    Ok(PredictiveDistribution {
        locations: queries.to_vec(),
        k,
        w,
        theta,
        p_obs,
    })
}

/// Output of [`generate_synthetic`].
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: Vec<ObservationRecord>,
    pub truth: PredictiveDistribution,
    pub phi_true: PhiMatrix,
}

pub(crate) fn sample_dirichlet_raw(alpha: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    let mut x: Vec<f64> = alpha
        .iter()
        .map(|&a| Gamma::new(a, 1.0).expect("positive shape").sample(rng))
        .collect();
    let s: f64 = x.iter().sum();
    if s > 0.0 && s.is_finite() {
        x.iter_mut().for_each(|v| *v /= s);
    } else {
        let n = x.len() as f64;
        x.iter_mut().for_each(|v| *v = 1.0 / n);
    }
    x
}

/// Multinomial counts via sequential conditional binomials.
pub(crate) fn sample_multinomial(n: u64, p: &[f64], rng: &mut impl Rng) -> Vec<u64> {
    let mut out = vec![0u64; p.len()];
    let mut remaining = n;
    let mut mass: f64 = p.iter().sum();
    for (o, &pw) in out.iter_mut().zip(p) {
        if remaining == 0 {
            break;
        }
        let q = if mass > 0.0 { (pw / mass).clamp(0.0, 1.0) } else { 0.0 };
        let draw = if q >= 1.0 {
            remaining
        } else {
            Binomial::new(remaining, q).expect("probability in [0, 1]").sample(rng)
        };
        *o = draw;
        remaining -= draw;
        mass -= pw;
    }
    if remaining > 0 {
        // rounding left mass unassigned; give it to the last category with weight
        if let Some(i) = p.iter().rposition(|&v| v > 0.0) {
            out[i] += remaining;
        }
    }
    out
}

/// Draws a dataset from the exact (dense, non-sparse) generative model.
///
/// Cost is dominated by a dense Cholesky of the `q×q` Gram matrix over
/// `sample_locations`, so keep `q` below a few thousand.
pub fn generate_synthetic(
    hyper: &ModelHyperparams,
    sample_locations: &[Location],
    count_per_location: u64,
    seed: u64,
) -> Result<SyntheticData> {
    hyper.validate()?;
    if count_per_location == 0 {
        return Err(Error::InvalidArgument("count_per_location must be positive".into()));
    }
    for loc in sample_locations {
        hyper.inducing.bounds().check(loc)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = sample_locations.len();
    let (k, w) = (hyper.k, hyper.w);
    let kxx = gram(sample_locations, sample_locations, &hyper.kernel)?;
    let chol = cholesky_jittered(&kxx, BASE_JITTER)?;
    let l = chol.matrix();

    let mut fields = vec![vec![0.0; q]; k];
    for field in fields.iter_mut() {
        let eps: Vec<f64> = (0..q).map(|_| rng.sample(StandardNormal)).collect();
        for i in 0..q {
            let mut v = hyper.gp_mean;
            for j in 0..=i {
                v += l[(i, j)] * eps[j];
            }
            field[i] = v;
        }
    }
    let mut theta = Vec::with_capacity(q * k);
    let mut buf = vec![0.0; k];
    for i in 0..q {
        for (b, f) in buf.iter_mut().zip(&fields) {
            *b = f[i];
        }
        softmax_in_place(&mut buf);
        theta.extend_from_slice(&buf);
    }

    let mut phi_data = Vec::with_capacity(k * w);
    for _ in 0..k {
        phi_data.extend(sample_dirichlet_raw(&hyper.beta, &mut rng));
    }
    let phi_true = PhiMatrix::from_raw(k, w, phi_data);

    let mut p_obs = vec![0.0; q * w];
    mix_rows(&theta, k, &phi_true, &mut p_obs, 1.0);
    renormalize_rows(&mut p_obs, w);

    let mut dataset = Vec::with_capacity(q);
    for (i, loc) in sample_locations.iter().enumerate() {
        let counts = sample_multinomial(count_per_location, &p_obs[i * w..(i + 1) * w], &mut rng);
        dataset.push(ObservationRecord::new(loc.clone(), &counts)?);
    }
    Ok(SyntheticData {
        dataset,
        truth: PredictiveDistribution {
            locations: sample_locations.to_vec(),
            k,
            w,
            theta,
            p_obs,
        },
        phi_true,
    })
}

/// Per-cell most probable community.
#[derive(Debug, Clone, PartialEq)]
pub struct CommunityMap {
    pub counts: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Argmax of θ at every grid cell, ties resolved toward the lowest index.
pub fn ml_community_map(pred: &PredictiveDistribution, grid: &RegularGrid) -> Result<CommunityMap> {
    ensure_len("prediction locations", grid.len(), pred.len())?;
    if pred.k == 0 {
        return Err(Error::InvalidArgument(
            "prediction carries no community weights".into(),
        ));
    }
    if pred.locations.iter().zip(grid.points()).any(|(a, b)| a != b) {
        return Err(Error::InvalidArgument(
            "prediction locations differ from the grid points".into(),
        ));
    }
    let labels = (0..pred.len())
        .map(|i| {
            let row = pred.theta_row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    Ok(CommunityMap {
        counts: grid.counts().to_vec(),
        labels,
    })
}
