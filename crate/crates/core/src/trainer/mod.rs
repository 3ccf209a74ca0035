//! Batched preference optimization with periodic reference refresh.
//!
//! Step `t = 1..=N`: sample a batch with replacement, draw a timestep and two
//! noises per pair, evaluate the mode's loss gradient once, update with the
//! warmed-up learning rate, then copy theta into the reference when
//! `t % T_ref == 0`.

pub mod optimizer;

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{DenoiserParams, ModelPair, NoiseSchedule};
use crate::dpo::{loss_and_grad, DpoConfig, LossMode, PairLossInputs};
use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::prefcore::{PreferencePair, SeedStream};

use optimizer::{optimizer_step, OptimizerConfig, OptimizerState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub warmup_steps: usize,
    pub beta: f64,
    /// Reference refresh interval; `None` disables refreshing.
    #[serde(default)]
    pub ref_update_interval: Option<usize>,
    pub mode: LossMode,
    /// Vanilla-mode metric weights; `None` means `1/K`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1500,
            batch_size: 64,
            learning_rate: 1e-4,
            warmup_steps: 100,
            beta: 100.0,
            ref_update_interval: Some(100),
            mode: LossMode::Balanced,
            weights: None,
            optimizer: OptimizerConfig::adaptive(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.ref_update_interval == Some(0) {
            return Err(Error::config("train.ref_update_interval", "must be >= 1 or disabled"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be finite and >= 0"));
        }
        self.dpo().validate()
    }

    pub fn dpo(&self) -> DpoConfig {
        DpoConfig {
            beta: self.beta,
            loss_mode: self.mode.clone(),
            weights: self.weights.clone(),
        }
    }

    /// Learning rate at 1-based step `t`: linear warmup over the first
    /// `warmup_steps` steps.
    pub fn lr_at(&self, t: usize) -> f64 {
        if t <= self.warmup_steps {
            self.learning_rate * t as f64 / self.warmup_steps as f64
        } else {
            self.learning_rate
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRow {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub ref_refreshed: bool,
    pub lr_effective: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunRecord {
    pub rows: Vec<StepRow>,
    /// Number of batch loss-gradient evaluations performed.
    pub loss_evaluations: usize,
}

impl RunRecord {
    pub fn refresh_count(&self) -> usize {
        self.rows.iter().filter(|r| r.ref_refreshed).count()
    }

    /// Mean loss over the last `window` steps.
    pub fn tail_loss(&self, window: usize) -> Option<f64> {
        let n = self.rows.len().min(window);
        if n == 0 {
            return None;
        }
        Some(self.rows[self.rows.len() - n..].iter().map(|r| r.loss).sum::<f64>() / n as f64)
    }

    /// CSV with columns `step,loss,grad_norm,ref_refreshed,lr_effective`,
    /// preceded by an optional `# ...` provenance line.
    pub fn write_csv(&self, path: &Path, provenance: Option<&str>) -> Result<()> {
        write_atomic(path, |out: &mut dyn Write| {
            if let Some(p) = provenance {
                writeln!(out, "# {p}")?;
            }
            writeln!(out, "step,loss,grad_norm,ref_refreshed,lr_effective")?;
            for r in &self.rows {
                writeln!(
                    out,
                    "{},{:?},{:?},{},{:?}",
                    r.step, r.loss, r.grad_norm, r.ref_refreshed as u8, r.lr_effective
                )?;
            }
            Ok(())
        })
    }
}

/// Runs the loop with the loss selected by `cfg.mode`.
pub fn train(
    dataset: &[PreferencePair],
    init: DenoiserParams,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    stream: &SeedStream,
) -> Result<(DenoiserParams, RunRecord)> {
    let dpo = cfg.dpo();
    train_with(dataset, init, schedule, cfg, stream, |batch, models| {
        loss_and_grad(batch, models, schedule, &dpo)
    })
}

/// [`train`] with a caller-supplied batch loss.
pub fn train_with<F>(
    dataset: &[PreferencePair],
    init: DenoiserParams,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    stream: &SeedStream,
    mut loss_fn: F,
) -> Result<(DenoiserParams, RunRecord)>
where
    F: FnMut(&[PairLossInputs<'_>], &ModelPair) -> Result<(f64, DenoiserParams)>,
{
    cfg.validate()?;
    let mut record = RunRecord::default();
    if cfg.steps == 0 {
        return Ok((init, record));
    }
    if dataset.is_empty() {
        return Err(Error::validation("training dataset is empty"));
    }
    for p in dataset {
        let ok = if cfg.mode.uses_votes() {
            p.votes.is_some()
        } else {
            p.consensus.is_some()
        };
        if !ok {
            return Err(Error::validation(format!(
                "pair {} is not labeled for mode {}",
                p.pair_id, cfg.mode
            )));
        }
    }

    let mut models = ModelPair::from_init(init);
    let mut state = OptimizerState::new(models.theta.len());
    for t in 1..=cfg.steps {
        let step_stream = stream.split_index("train-step", t as u64);
        let mut pick = step_stream.split("batch").rng();
        let batch: Vec<PairLossInputs<'_>> = (0..cfg.batch_size)
            .map(|slot| {
                let pair = &dataset[pick.random_range(0..dataset.len())];
                PairLossInputs::draw(pair, schedule, &step_stream.split_index("pair", slot as u64))
            })
            .collect();

        let (loss, grad) = loss_fn(&batch, &models)?;
        record.loss_evaluations += 1;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("training loss is {loss} at step {t}")));
        }
        let lr = cfg.lr_at(t);
        optimizer_step(&mut models.theta.values, &grad.values, &mut state, &cfg.optimizer, lr)?;

        let refresh = cfg.ref_update_interval.is_some_and(|k| t % k == 0);
        if refresh {
            models.refresh_reference();
        }
        record.rows.push(StepRow {
            step: t,
            loss,
            grad_norm: grad.norm(),
            ref_refreshed: refresh,
            lr_effective: lr,
        });
    }
    Ok((models.theta, record))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_is_linear() {
        let cfg = TrainConfig {
            learning_rate: 0.01,
            warmup_steps: 10,
            ..Default::default()
        };
        for i in 0..10 {
            assert_eq!(cfg.lr_at(i + 1), 0.01 * (i + 1) as f64 / 10.0);
        }
        assert_eq!(cfg.lr_at(11), 0.01);
        let none = TrainConfig {
            warmup_steps: 0,
            ..cfg
        };
        assert_eq!(none.lr_at(1), 0.01);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        cfg.ref_update_interval = Some(0);
        assert!(cfg.validate().is_err());
        cfg.ref_update_interval = None;
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        cfg.batch_size = 1;
        cfg.beta = 0.0;
        assert!(cfg.validate().is_err());
    }
}
