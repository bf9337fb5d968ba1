//! Mean-field variational families: a full-covariance Gaussian per community
//! over whitened inducing values and a Dirichlet per row of Φ.
//!
//! All parameters are stored unconstrained. Gaussian factors keep a packed
//! row-major lower-triangular Cholesky factor whose diagonal is stored as a
//! log; Dirichlet factors keep `log γ`.

use rand::Rng;
use rand_distr::StandardNormal;
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{ensure_len, Result};
use crate::gp::dot;
use crate::model::{sample_dirichlet_raw, PhiMatrix, PosteriorSample};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Dirichlet draws are clamped into `[CLAMP, 1 − CLAMP]` and renormalized.
pub const DIRICHLET_CLAMP: f64 = 1e-12;
/// Initial Cholesky diagonal of every Gaussian factor.
pub const INIT_CHOL_SCALE: f64 = 0.1;

#[inline]
fn packed(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

/// `q(v) = N(mean, L·Lᵀ)` over whitened inducing values.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianVarParams {
    pub mean: Vec<f64>,
    /// Packed lower triangle, row-major; diagonal entries are `ln L_ii`.
    pub chol_raw: Vec<f64>,
}

impl GaussianVarParams {
    pub fn init(m: usize) -> Self {
        let mut chol_raw = vec![0.0; m * (m + 1) / 2];
        for i in 0..m {
            chol_raw[packed(i, i)] = INIT_CHOL_SCALE.ln();
        }
        GaussianVarParams {
            mean: vec![0.0; m],
            chol_raw,
        }
    }

    /// From a mean and a lower-triangular factor with positive diagonal (row-major `m×m`).
    pub fn from_mean_chol(mean: Vec<f64>, chol: &[f64]) -> Result<Self> {
        let m = mean.len();
        ensure_len("Cholesky entries", m * m, chol.len())?;
        let mut chol_raw = vec![0.0; m * (m + 1) / 2];
        for i in 0..m {
            for j in 0..i {
                chol_raw[packed(i, j)] = chol[i * m + j];
            }
            let d = chol[i * m + i];
            if !(d > 0.0) {
                return Err(crate::Error::InvalidArgument(format!(
                    "Cholesky diagonal entry {i} must be positive, got {d}"
                )));
            }
            chol_raw[packed(i, i)] = d.ln();
        }
        Ok(GaussianVarParams { mean, chol_raw })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn num_params(m: usize) -> usize {
        m + m * (m + 1) / 2
    }

    #[inline]
    pub fn chol(&self, i: usize, j: usize) -> f64 {
        if i == j {
            self.chol_raw[packed(i, i)].exp()
        } else if j < i {
            self.chol_raw[packed(i, j)]
        } else {
            0.0
        }
    }

    /// Dense row-major lower factor.
    pub fn chol_dense(&self) -> Vec<f64> {
        let m = self.dim();
        let mut out = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..=i {
                out[i * m + j] = self.chol(i, j);
            }
        }
        out
    }

    fn diag(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.chol_raw[packed(i, i)].exp()).collect()
    }

    /// `mean + L·ε`.
    pub fn transform(&self, eps: &[f64]) -> Vec<f64> {
        let m = self.dim();
        let diag = self.diag();
        let mut x = self.mean.clone();
        for i in 0..m {
            let row = &self.chol_raw[packed(i, 0)..packed(i, i)];
            x[i] += dot(row, &eps[..i]) + diag[i] * eps[i];
        }
        x
    }

    /// `L⁻¹(x − mean)` by forward substitution.
    pub fn whiten(&self, x: &[f64]) -> Vec<f64> {
        let m = self.dim();
        let diag = self.diag();
        let mut eps = vec![0.0; m];
        for i in 0..m {
            let row = &self.chol_raw[packed(i, 0)..packed(i, i)];
            eps[i] = (x[i] - self.mean[i] - dot(row, &eps[..i])) / diag[i];
        }
        eps
    }

    pub(crate) fn log_density_from_noise(&self, eps: &[f64]) -> f64 {
        let log_det: f64 = (0..self.dim()).map(|i| self.chol_raw[packed(i, i)]).sum();
        -0.5 * dot(eps, eps) - log_det - 0.5 * self.dim() as f64 * LN_2PI
    }

    /// Writes `∇ log q` w.r.t. `[mean, chol_raw]` into `out`, given `ε = L⁻¹(x − mean)`.
    pub fn score_from_noise(&self, eps: &[f64], out: &mut [f64]) {
        let m = self.dim();
        debug_assert_eq!(out.len(), Self::num_params(m));
        let diag = self.diag();
        // v = L⁻ᵀ ε by column-oriented back substitution
        let mut v = eps.to_vec();
        for j in (0..m).rev() {
            v[j] /= diag[j];
            let vj = v[j];
            let row = &self.chol_raw[packed(j, 0)..packed(j, j)];
            for (vi, l) in v[..j].iter_mut().zip(row) {
                *vi -= l * vj;
            }
        }
        let (mean_part, chol_part) = out.split_at_mut(m);
        mean_part.copy_from_slice(&v);
        for i in 0..m {
            let base = packed(i, 0);
            let vi = v[i];
            for j in 0..i {
                chol_part[base + j] = vi * eps[j];
            }
            chol_part[base + i] = vi * eps[i] * diag[i] - 1.0;
        }
    }

    pub(crate) fn write_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.mean);
        out.extend_from_slice(&self.chol_raw);
    }

    pub(crate) fn read_flat(&mut self, src: &[f64]) {
        let m = self.dim();
        self.mean.copy_from_slice(&src[..m]);
        self.chol_raw.copy_from_slice(&src[m..]);
    }
}

pub(crate) fn draw_noise(m: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..m).map(|_| rng.sample(StandardNormal)).collect()
}

/// `mean + L·ε` with `ε ~ N(0, I)`.
pub fn sample_gaussian(params: &GaussianVarParams, rng: &mut impl Rng) -> Vec<f64> {
    params.transform(&draw_noise(params.dim(), rng))
}

pub fn log_q_gaussian(params: &GaussianVarParams, x: &[f64]) -> f64 {
    params.log_density_from_noise(&params.whiten(x))
}

/// Gradient of `log q(x)` with respect to the unconstrained parameters, laid
/// out as `[mean (m), packed chol_raw (m(m+1)/2)]`.
pub fn score_q_gaussian(params: &GaussianVarParams, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; GaussianVarParams::num_params(params.dim())];
    params.score_from_noise(&params.whiten(x), &mut out);
    out
}

/// `q(φ) = Dirichlet(γ)` with `γ = exp(log_gamma)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletVarParams {
    pub log_gamma: Vec<f64>,
}

impl DirichletVarParams {
    pub fn from_gamma(gamma: &[f64]) -> Self {
        DirichletVarParams {
            log_gamma: gamma.iter().map(|g| g.ln()).collect(),
        }
    }

    pub fn gamma(&self) -> Vec<f64> {
        self.log_gamma.iter().map(|l| l.exp()).collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        let g = self.gamma();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect()
    }

    pub fn dim(&self) -> usize {
        self.log_gamma.len()
    }
}

/// Normalized Gamma draws, clamped away from the simplex boundary.
pub fn sample_dirichlet(params: &DirichletVarParams, rng: &mut impl Rng) -> Vec<f64> {
    let mut x = sample_dirichlet_raw(&params.gamma(), rng);
    clamp_simplex(&mut x);
    x
}

pub(crate) fn clamp_simplex(x: &mut [f64]) {
    let mut s = 0.0;
    for v in x.iter_mut() {
        *v = v.clamp(DIRICHLET_CLAMP, 1.0 - DIRICHLET_CLAMP);
        s += *v;
    }
    x.iter_mut().for_each(|v| *v /= s);
}

pub fn log_q_dirichlet(params: &DirichletVarParams, x: &[f64]) -> f64 {
    let g = params.gamma();
    ln_gamma(g.iter().sum())
        + g.iter()
            .zip(x)
            .map(|(&gw, &xw)| (gw - 1.0) * xw.ln() - ln_gamma(gw))
            .sum::<f64>()
}

pub(crate) fn score_dirichlet_into(params: &DirichletVarParams, x: &[f64], out: &mut [f64]) {
    let g = params.gamma();
    let psi_sum = digamma(g.iter().sum());
    for ((o, &gw), &xw) in out.iter_mut().zip(&g).zip(x) {
        *o = gw * (psi_sum - digamma(gw) + xw.ln());
    }
}

/// Gradient of `log q(x)` with respect to `log γ`.
pub fn score_q_dirichlet(params: &DirichletVarParams, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; params.dim()];
    score_dirichlet_into(params, x, &mut out);
    out
}

/// `KL(q ‖ N(0, I))` for a Gaussian factor over whitened values.
pub fn kl_gaussian_standard(params: &GaussianVarParams) -> f64 {
    let m = params.dim();
    let trace: f64 = (0..m).map(|i| (0..=i).map(|j| params.chol(i, j).powi(2)).sum::<f64>()).sum();
    let log_det: f64 = (0..m).map(|i| params.chol_raw[packed(i, i)]).sum();
    0.5 * (trace + dot(&params.mean, &params.mean) - m as f64) - log_det
}

/// Writes `−∇ KL(q ‖ N(0, I))` w.r.t. `[mean, chol_raw]` into `out`.
pub(crate) fn neg_kl_gaussian_grad(params: &GaussianVarParams, out: &mut [f64]) {
    let m = params.dim();
    let (mean_part, chol_part) = out.split_at_mut(m);
    for (o, mu) in mean_part.iter_mut().zip(&params.mean) {
        *o = -mu;
    }
    for i in 0..m {
        for j in 0..i {
            chol_part[packed(i, j)] = -params.chol_raw[packed(i, j)];
        }
        let d = params.chol_raw[packed(i, i)].exp();
        chol_part[packed(i, i)] = 1.0 - d * d;
    }
}

/// Trigamma function ψ′(x) for x > 0: upward recurrence then the asymptotic series.
pub(crate) fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let r = 1.0 / x;
    let r2 = r * r;
    acc + r + 0.5 * r2 + r * r2 * (1.0 / 6.0 - r2 * (1.0 / 30.0 - r2 * (1.0 / 42.0 - r2 / 30.0)))
}

/// `KL(Dirichlet(γ) ‖ Dirichlet(β))`.
pub fn kl_dirichlet(params: &DirichletVarParams, beta: &[f64]) -> f64 {
    let g = params.gamma();
    let g0: f64 = g.iter().sum();
    let b0: f64 = beta.iter().sum();
    let psi0 = digamma(g0);
    ln_gamma(g0) - ln_gamma(b0)
        + g.iter()
            .zip(beta)
            .map(|(&gw, &bw)| ln_gamma(bw) - ln_gamma(gw) + (gw - bw) * (digamma(gw) - psi0))
            .sum::<f64>()
}

/// Writes `−∇ KL(Dirichlet(γ) ‖ Dirichlet(β))` w.r.t. `log γ` into `out`.
pub(crate) fn neg_kl_dirichlet_grad(params: &DirichletVarParams, beta: &[f64], out: &mut [f64]) {
    let g = params.gamma();
    let g0: f64 = g.iter().sum();
    let excess: f64 = g.iter().zip(beta).map(|(a, b)| a - b).sum();
    let t0 = trigamma(g0);
    for ((o, &gw), &bw) in out.iter_mut().zip(&g).zip(beta) {
        *o = -gw * ((gw - bw) * trigamma(gw) - t0 * excess);
    }
}

/// Full mean-field variational posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    pub gp: Vec<GaussianVarParams>,
    pub phi: Vec<DirichletVarParams>,
    pub step_count: u64,
}

impl VariationalState {
    /// Gaussian means at zero with `0.1·I` factors; Dirichlet parameters at the prior.
    pub fn init(k: usize, m: usize, beta: &[f64]) -> Self {
        VariationalState {
            gp: (0..k).map(|_| GaussianVarParams::init(m)).collect(),
            phi: (0..k).map(|_| DirichletVarParams::from_gamma(beta)).collect(),
            step_count: 0,
        }
    }

    pub fn k(&self) -> usize {
        self.gp.len()
    }

    pub fn m(&self) -> usize {
        self.gp.first().map_or(0, |g| g.dim())
    }

    pub fn w(&self) -> usize {
        self.phi.first().map_or(0, |p| p.dim())
    }

    pub fn check_dims(&self, k: usize, m: usize, w: usize) -> Result<()> {
        ensure_len("K (Gaussian factors)", k, self.gp.len())?;
        ensure_len("K (Dirichlet factors)", k, self.phi.len())?;
        for g in &self.gp {
            ensure_len("m (inducing points)", m, g.dim())?;
        }
        for p in &self.phi {
            ensure_len("W (categories)", w, p.dim())?;
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        num_params(self.k(), self.m(), self.w())
    }

    /// Flat unconstrained vector: all Gaussian factors, then all Dirichlet factors.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.write_flat_into(&mut out);
        out
    }

    /// Same as [`to_flat`](Self::to_flat) but reuses `out`'s allocation.
    pub fn write_flat_into(&self, out: &mut Vec<f64>) {
        out.clear();
        for g in &self.gp {
            g.write_flat(out);
        }
        for p in &self.phi {
            out.extend_from_slice(&p.log_gamma);
        }
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        ensure_len("parameter vector", self.num_params(), flat.len())?;
        let gsize = GaussianVarParams::num_params(self.m());
        let mut offset = 0;
        for g in &mut self.gp {
            g.read_flat(&flat[offset..offset + gsize]);
            offset += gsize;
        }
        for p in &mut self.phi {
            let w = p.dim();
            p.log_gamma.copy_from_slice(&flat[offset..offset + w]);
            offset += w;
        }
        Ok(())
    }

    pub fn from_flat(k: usize, m: usize, w: usize, flat: &[f64], step_count: u64) -> Result<Self> {
        let mut s = VariationalState::init(k, m, &vec![1.0; w]);
        s.set_flat(flat)?;
        s.step_count = step_count;
        Ok(s)
    }

    /// Dirichlet means `γ/Σγ` stacked into Φ.
    pub fn phi_mean(&self) -> PhiMatrix {
        let data = self.phi.iter().flat_map(|p| p.mean()).collect();
        PhiMatrix::from_raw(self.k(), self.w(), data)
    }

    /// Offset of the first Dirichlet parameter in the flat layout.
    pub(crate) fn dirichlet_offset(&self) -> usize {
        self.k() * GaussianVarParams::num_params(self.m())
    }
}

/// `K·(m + m(m+1)/2) + K·W`.
pub fn num_params(k: usize, m: usize, w: usize) -> usize {
    k * GaussianVarParams::num_params(m) + k * w
}

/// A posterior sample together with the standard-normal noise behind each Gaussian draw.
#[derive(Debug, Clone)]
pub(crate) struct JointDraw {
    pub sample: PosteriorSample,
    pub noise: Vec<Vec<f64>>,
}

pub(crate) fn draw_joint(state: &VariationalState, rng: &mut impl Rng) -> JointDraw {
    let m = state.m();
    let mut noise = Vec::with_capacity(state.k());
    let mut u = Vec::with_capacity(state.k());
    for g in &state.gp {
        let eps = draw_noise(m, rng);
        u.push(g.transform(&eps));
        noise.push(eps);
    }
    let phi: Vec<f64> = state.phi.iter().flat_map(|p| sample_dirichlet(p, rng)).collect();
    JointDraw {
        sample: PosteriorSample {
            u,
            phi: PhiMatrix::from_raw(state.k(), state.w(), phi),
        },
        noise,
    }
}

pub fn sample_joint(state: &VariationalState, rng: &mut impl Rng) -> PosteriorSample {
    draw_joint(state, rng).sample
}

/// Per-factor log densities: `(gaussians, dirichlets)`.
pub(crate) fn log_q_parts(state: &VariationalState, draw: &JointDraw) -> (Vec<f64>, Vec<f64>) {
    let lq_u = state
        .gp
        .iter()
        .zip(&draw.noise)
        .map(|(g, eps)| g.log_density_from_noise(eps))
        .collect();
    let lq_phi = state
        .phi
        .iter()
        .enumerate()
        .map(|(k, p)| log_q_dirichlet(p, draw.sample.phi.row(k)))
        .collect();
    (lq_u, lq_phi)
}

pub fn log_q_joint(state: &VariationalState, sample: &PosteriorSample) -> f64 {
    let gauss: f64 = state.gp.iter().zip(&sample.u).map(|(g, u)| log_q_gaussian(g, u)).sum();
    let dir: f64 = state
        .phi
        .iter()
        .enumerate()
        .map(|(k, p)| log_q_dirichlet(p, sample.phi.row(k)))
        .sum();
    gauss + dir
}

pub(crate) fn score_from_draw(state: &VariationalState, draw: &JointDraw, out: &mut [f64]) {
    let gsize = GaussianVarParams::num_params(state.m());
    for (k, (g, eps)) in state.gp.iter().zip(&draw.noise).enumerate() {
        g.score_from_noise(eps, &mut out[k * gsize..(k + 1) * gsize]);
    }
    let off = state.dirichlet_offset();
    let w = state.w();
    for (k, p) in state.phi.iter().enumerate() {
        let start = off + k * w;
        score_dirichlet_into(p, draw.sample.phi.row(k), &mut out[start..start + w]);
    }
}

/// Concatenated scores of every factor, in the flat parameter layout.
pub fn score_q_joint(state: &VariationalState, sample: &PosteriorSample) -> Vec<f64> {
    let noise = state.gp.iter().zip(&sample.u).map(|(g, u)| g.whiten(u)).collect();
    let draw = JointDraw {
        sample: sample.clone(),
        noise,
    };
    let mut out = vec![0.0; state.num_params()];
    score_from_draw(state, &draw, &mut out);
    out
}
