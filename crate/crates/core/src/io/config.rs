//! Run configuration: a sectioned TOML file whose keys mirror every knob of
//! the world, model, kernel, inducing grid, inference, baseline, metrics and
//! evaluation schedule. Omitted sections and keys take recorded defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::{AdamConfig, DrawScheme, EngineConfig, EstimatorConfig, SubsamplerConfig};
use crate::error::{Error, Result};
use crate::geometry::{make_grid, WorldBounds};
use crate::gp::KernelParams;
use crate::metrics::DEFAULT_KL_EPSILON;
use crate::model::ModelHyperparams;
use crate::vgp::VgpConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSection {
    pub d: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Dirichlet concentration: one shared value or one per category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BetaSpec {
    Symmetric(f64),
    PerCategory(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub k: usize,
    pub w: usize,
    pub beta: BetaSpec,
    #[serde(default)]
    pub gp_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    pub variance: f64,
    pub lengthscales: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InducingSection {
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceSection {
    pub n_s: usize,
    pub decay: f64,
    pub correct_bias: bool,
    pub samples: usize,
    pub iters_per_obs: usize,
    pub lr: f64,
    pub moment_decay_1: f64,
    pub moment_decay_2: f64,
    pub adam_epsilon: f64,
    pub control_variates: bool,
    pub rao_blackwell: bool,
    pub analytic_kl: bool,
    pub draw_scheme: DrawScheme,
    pub pathwise_gaussian: bool,
    pub seed: u64,
}

impl Default for InferenceSection {
    fn default() -> Self {
        let sub = SubsamplerConfig::default();
        let est = EstimatorConfig::default();
        let adam = AdamConfig::default();
        InferenceSection {
            n_s: sub.n_s,
            decay: sub.decay,
            correct_bias: sub.correct_bias,
            samples: est.samples,
            iters_per_obs: EngineConfig::default().iters_per_obs,
            lr: adam.learning_rate,
            moment_decay_1: adam.moment_decay_1,
            moment_decay_2: adam.moment_decay_2,
            adam_epsilon: adam.epsilon,
            control_variates: est.control_variates,
            rao_blackwell: est.rao_blackwell,
            analytic_kl: est.analytic_kl,
            draw_scheme: est.scheme,
            pathwise_gaussian: est.pathwise_gaussian,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VgpSection {
    pub noise_var: f64,
    pub iterations: usize,
    pub lr: f64,
}

impl Default for VgpSection {
    fn default() -> Self {
        let v = VgpConfig::default();
        VgpSection {
            noise_var: v.noise_var,
            iterations: v.iterations,
            lr: v.adam.learning_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub epsilon: f64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection {
            epsilon: DEFAULT_KL_EPSILON,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub checkpoint_stride: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection { checkpoint_stride: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldSection,
    pub model: ModelSection,
    pub kernel: KernelSection,
    pub inducing: InducingSection,
    #[serde(default)]
    pub inference: InferenceSection,
    #[serde(default)]
    pub vgp: VgpSection,
    #[serde(default)]
    pub metrics: MetricsSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
}

fn bad(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_string(),
        message: message.into(),
    }
}

fn check_len(path: &str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(bad(path, format!("expected {expected} entries, found {got}")))
    }
}

fn check_positive(path: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(bad(path, format!("must be positive and finite, got {v}")))
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| bad("<config>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| bad(&path.display().to_string(), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical TOML text; `load(dump(c)) == c`.
    pub fn dump(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical dump.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.dump().as_bytes());
        hex::encode(digest)[..16].to_string()
    }

    /// Checks every constraint, reporting the offending key path.
    pub fn validate(&self) -> Result<()> {
        let d = self.world.d;
        if !(d == 1 || d == 2) {
            return Err(bad("world.d", format!("must be 1 or 2, got {d}")));
        }
        check_len("world.lower", d, self.world.lower.len())?;
        check_len("world.upper", d, self.world.upper.len())?;
        for i in 0..d {
            let (lo, hi) = (self.world.lower[i], self.world.upper[i]);
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(bad(&format!("world.upper[{i}]"), format!("must exceed lower bound {lo}, got {hi}")));
            }
        }
        if self.model.k < 1 {
            return Err(bad("model.k", "must be at least 1"));
        }
        if self.model.w < 2 {
            return Err(bad("model.w", "must be at least 2"));
        }
        match &self.model.beta {
            BetaSpec::Symmetric(b) => check_positive("model.beta", *b)?,
            BetaSpec::PerCategory(v) => {
                check_len("model.beta", self.model.w, v.len())?;
                for (i, b) in v.iter().enumerate() {
                    check_positive(&format!("model.beta[{i}]"), *b)?;
                }
            }
        }
        if !self.model.gp_mean.is_finite() {
            return Err(bad("model.gp_mean", "must be finite"));
        }
        check_positive("kernel.variance", self.kernel.variance)?;
        check_len("kernel.lengthscales", d, self.kernel.lengthscales.len())?;
        for (i, l) in self.kernel.lengthscales.iter().enumerate() {
            check_positive(&format!("kernel.lengthscales[{i}]"), *l)?;
        }
        check_len("inducing.counts", d, self.inducing.counts.len())?;
        for (i, c) in self.inducing.counts.iter().enumerate() {
            if *c == 0 {
                return Err(bad(&format!("inducing.counts[{i}]"), "must be positive"));
            }
        }
        let inf = &self.inference;
        if inf.n_s == 0 {
            return Err(bad("inference.n_s", "must be positive"));
        }
        if !(inf.decay > 0.0 && inf.decay <= 1.0) {
            return Err(bad("inference.decay", format!("must lie in (0, 1], got {}", inf.decay)));
        }
        if inf.samples == 0 || (inf.control_variates && inf.samples < 2) {
            return Err(bad(
                "inference.samples",
                "must be positive, and at least 2 with control variates",
            ));
        }
        check_positive("inference.lr", inf.lr)?;
        for (key, v) in [
            ("inference.moment_decay_1", inf.moment_decay_1),
            ("inference.moment_decay_2", inf.moment_decay_2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(bad(key, format!("must lie in [0, 1), got {v}")));
            }
        }
        check_positive("inference.adam_epsilon", inf.adam_epsilon)?;
        check_positive("vgp.noise_var", self.vgp.noise_var)?;
        check_positive("vgp.lr", self.vgp.lr)?;
        if !(self.metrics.epsilon >= 0.0 && self.metrics.epsilon.is_finite()) {
            return Err(bad("metrics.epsilon", "must be nonnegative"));
        }
        if self.evaluation.checkpoint_stride == 0 {
            return Err(bad("evaluation.checkpoint_stride", "must be positive"));
        }
        Ok(())
    }

    pub fn world_bounds(&self) -> Result<WorldBounds> {
        WorldBounds::new(self.world.lower.clone(), self.world.upper.clone())
    }

    pub fn beta_vector(&self) -> Vec<f64> {
        match &self.model.beta {
            BetaSpec::Symmetric(b) => vec![*b; self.model.w],
            BetaSpec::PerCategory(v) => v.clone(),
        }
    }

    pub fn model_hyper(&self) -> Result<ModelHyperparams> {
        let bounds = self.world_bounds()?;
        Ok(ModelHyperparams {
            k: self.model.k,
            w: self.model.w,
            beta: self.beta_vector(),
            gp_mean: self.model.gp_mean,
            kernel: KernelParams::new(self.kernel.variance, self.kernel.lengthscales.clone())?,
            inducing: make_grid(&bounds, &self.inducing.counts)?,
        })
    }

    pub fn engine_config(&self) -> EngineConfig {
        let inf = &self.inference;
        EngineConfig {
            subsampler: SubsamplerConfig {
                n_s: inf.n_s,
                decay: inf.decay,
                correct_bias: inf.correct_bias,
            },
            estimator: EstimatorConfig {
                samples: inf.samples,
                control_variates: inf.control_variates,
                rao_blackwell: inf.rao_blackwell,
                analytic_kl: inf.analytic_kl,
                scheme: inf.draw_scheme,
                pathwise_gaussian: inf.pathwise_gaussian,
            },
            iters_per_obs: inf.iters_per_obs,
            adam: AdamConfig {
                learning_rate: inf.lr,
                moment_decay_1: inf.moment_decay_1,
                moment_decay_2: inf.moment_decay_2,
                epsilon: inf.adam_epsilon,
            },
        }
    }

    pub fn vgp_config(&self) -> VgpConfig {
        VgpConfig {
            noise_var: self.vgp.noise_var,
            iterations: self.vgp.iterations,
            adam: AdamConfig {
                learning_rate: self.vgp.lr,
                ..AdamConfig::default()
            },
        }
    }
}
