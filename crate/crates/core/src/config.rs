//! Experiment configuration file (TOML).
//!
//! Every section and key is optional; missing values take the defaults
//! below. After loading, the effective configuration can be written back
//! with [`ExperimentConfig::to_toml`], which reproduces the same run.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregate::{AggregationPolicy, TiePolicy};
use crate::diffusion::{Arch, GaussianSource, NoiseSchedule, PretrainConfig};
use crate::dpo::LossMode;
use crate::error::{Error, Result};
use crate::evalkit::EvalConfig;
use crate::rewards::{circle_targets, default_specs, RewardRegistry, RewardSpec};
use crate::trainer::optimizer::OptimizerConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub d: usize,
    pub num_conditions: usize,
    /// Per-condition means; empty means equally spaced on a circle of `radius`.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub means: Vec<Vec<f64>>,
    pub radius: f64,
    /// Isotropic standard deviation of each condition's Gaussian.
    pub std: f64,
    pub pairs_per_condition: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            d: 2,
            num_conditions: 4,
            means: Vec::new(),
            radius: 2.0,
            std: 0.5,
            pairs_per_condition: 250,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub time_features: usize,
    pub hidden: usize,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        DiffusionSection {
            steps: 50,
            beta_start: 0.002,
            beta_end: 0.3,
            time_features: 8,
            hidden: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregationSection {
    pub tie_policy: TiePolicy,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub margins: Option<Vec<f64>>,
    pub inclusive_votes: bool,
}

impl Default for AggregationSection {
    fn default() -> Self {
        AggregationSection {
            tie_policy: TiePolicy::FirstMetric,
            weights: None,
            margins: None,
            inclusive_votes: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpoSection {
    pub beta: f64,
    /// Vanilla-loss weights; absent means `1/K`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

impl Default for DpoSection {
    fn default() -> Self {
        DpoSection {
            beta: 100.0,
            weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// 0 disables reference refresh.
    pub ref_update_interval: usize,
    pub optimizer: OptimizerConfig,
    /// Modes trained by the `train` stage.
    pub modes: Vec<LossMode>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            warmup_steps: t.warmup_steps,
            ref_update_interval: t.ref_update_interval.unwrap_or(0),
            optimizer: t.optimizer,
            modes: vec![LossMode::Balanced],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n_seeds: usize,
    /// Explicit prompt list (condition ids); empty means every condition
    /// repeated `prompts_per_condition` times.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub prompts: Vec<u32>,
    pub prompts_per_condition: usize,
    pub tie_value: f64,
    /// Also train and evaluate the reference-refresh x multi-metric grid.
    pub ablation: bool,
    /// Metric of the single-metric ablation cells; defaults to the first metric.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ablation_metric: Option<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            n_seeds: 5,
            prompts: Vec::new(),
            prompts_per_condition: 100,
            tie_value: 0.5,
            ablation: false,
            ablation_metric: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSection,
    pub diffusion: DiffusionSection,
    pub pretrain: PretrainConfig,
    pub aggregation: AggregationSection,
    pub dpo: DpoSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    /// Empty means the four built-in rewards.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub rewards: Vec<RewardSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            data: DataSection::default(),
            diffusion: DiffusionSection::default(),
            pretrain: PretrainConfig::default(),
            aggregation: AggregationSection::default(),
            dpo: DpoSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            rewards: Vec::new(),
        }
    }
}

/// Target circle radius of the built-in `target_proximity` reward.
pub const DEFAULT_TARGET_RADIUS: f64 = 1.5;
/// Ring radius of the built-in `ring_fit` reward.
pub const DEFAULT_RING_RADIUS: f64 = 1.5;

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config("<config>", e.to_string()))?;
        cfg.fill_defaults();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config { path: field, msg } => {
                Error::config(field, format!("{msg} (in {})", path.display()))
            }
            other => other,
        })
    }

    /// Materializes derived defaults (means, rewards, prompts) so the
    /// effective configuration is explicit.
    pub fn fill_defaults(&mut self) {
        let d = self.data.d;
        let c = self.data.num_conditions;
        if self.data.means.is_empty() {
            self.data.means = circle_targets(c, self.data.radius, d);
        }
        if self.rewards.is_empty() && d >= 1 {
            self.rewards = default_specs(c, d, DEFAULT_TARGET_RADIUS, DEFAULT_RING_RADIUS);
        }
        if self.eval.prompts.is_empty() {
            self.eval.prompts =
                EvalConfig::with_repeated_conditions(c, self.eval.prompts_per_condition).prompts;
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// First 16 hex digits of the SHA-256 of the effective configuration.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn provenance(&self) -> String {
        format!("config={} seed={}", self.hash(), self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.data.d;
        let c = self.data.num_conditions;
        if d == 0 {
            return Err(Error::config("data.d", "must be at least 1"));
        }
        if c == 0 {
            return Err(Error::config("data.num_conditions", "must be at least 1"));
        }
        if self.data.means.len() != c || self.data.means.iter().any(|m| m.len() != d) {
            return Err(Error::config(
                "data.means",
                format!("need {c} means of dimension {d}"),
            ));
        }
        if !(self.data.std > 0.0) {
            return Err(Error::config("data.std", "must be positive"));
        }
        self.registry()?.validate(d, c)?;
        self.schedule()?;
        let k = self.rewards.len();
        self.labeling_policy().validate(k)?;
        if let Some(w) = &self.dpo.weights {
            if w.len() != k {
                return Err(Error::config("dpo.weights", format!("{} weights for {k} metrics", w.len())));
            }
        }
        if self.diffusion.hidden == 0 {
            return Err(Error::config("diffusion.hidden", "must be at least 1"));
        }
        if self.pretrain.batch_size == 0 {
            return Err(Error::config("pretrain.batch_size", "must be at least 1"));
        }
        for mode in &self.train.modes {
            if let LossMode::Single(m) = mode {
                if !self.rewards.iter().any(|r| &r.metric_id == m) {
                    return Err(Error::config("train.modes", format!("unknown metric `{m}` in mode {mode}")));
                }
            }
            self.train_config(mode.clone()).validate()?;
        }
        if let Some(m) = &self.eval.ablation_metric {
            if !self.rewards.iter().any(|r| &r.metric_id == m) {
                return Err(Error::config("eval.ablation_metric", format!("unknown metric `{m}`")));
            }
        }
        self.eval_config().validate(c)?;
        Ok(())
    }

    pub fn arch(&self) -> Arch {
        Arch {
            d: self.data.d,
            m: self.diffusion.time_features,
            c: self.data.num_conditions,
            h: self.diffusion.hidden,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(
            self.diffusion.steps,
            self.diffusion.beta_start,
            self.diffusion.beta_end,
        )
        .map_err(|e| match e {
            Error::Config { path, msg } => Error::config(path, msg),
            other => Error::config("diffusion", other.to_string()),
        })
    }

    pub fn source(&self) -> GaussianSource {
        GaussianSource {
            means: self.data.means.clone(),
            std: self.data.std,
        }
    }

    pub fn registry(&self) -> Result<RewardRegistry> {
        RewardRegistry::new(self.rewards.clone())
    }

    /// Shared labeling settings; the mode is set per training mode.
    pub fn labeling_policy(&self) -> AggregationPolicy {
        AggregationPolicy {
            weights: self.aggregation.weights.clone(),
            tie_policy: self.aggregation.tie_policy,
            margins: self.aggregation.margins.clone(),
            inclusive_votes: self.aggregation.inclusive_votes,
            ..AggregationPolicy::default()
        }
    }

    pub fn train_config(&self, mode: LossMode) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            warmup_steps: t.warmup_steps,
            beta: self.dpo.beta,
            ref_update_interval: (t.ref_update_interval > 0).then_some(t.ref_update_interval),
            mode,
            weights: self.dpo.weights.clone(),
            optimizer: t.optimizer,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            n_seeds: self.eval.n_seeds,
            prompts: self.eval.prompts.clone(),
            tie_value: self.eval.tie_value,
        }
    }
}
