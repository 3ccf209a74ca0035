//! Preference losses over the diffusion model.
//!
//! `l_theta` is the per-timestep DiffusionDPO surrogate for the log-ratio
//! difference between the two samples of a pair:
//!
//! ```text
//! l = -[ (|eps_a - theta(x_a)|^2 - |eps_a - ref(x_a)|^2)
//!      - (|eps_b - theta(x_b)|^2 - |eps_b - ref(x_b)|^2) ]
//! ```
//!
//! with `x_a`, `x_b` the two samples noised to a shared timestep `t`.
//! Constant factors (T, the timestep weight, 2) are folded into `beta`.
//!
//! The balanced loss labels each pair with its majority consensus `s`:
//! `-log sigma(beta s l)`, gradient `-beta s sigma(-beta s l) grad l`.
//! The direct-aggregation loss keeps one term per metric vote:
//! `-sum_k w_k log sigma(beta s_k l)`. A vote of 0 contributes the constant
//! `w_k ln 2` and no gradient.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregate::{AggregationMode, AggregationPolicy};
use crate::diffusion::{forward_noise, DenoiserParams, ModelPair, NoiseSchedule, Trace};
use crate::error::{Error, Result};
use crate::prefcore::rng::normal_vec;
use crate::prefcore::{PreferencePair, SeedStream};

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Bradley-Terry probability that the first item wins.
pub fn bt_probability(r_w: f64, r_l: f64) -> f64 {
    sigmoid(r_w - r_l)
}

/// Mean of `-log sigma(r_w - r_l)`.
pub fn bt_loss(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::validation("Bradley-Terry loss of an empty set"));
    }
    let total: f64 = pairs.iter().map(|(w, l)| softplus(-(w - l))).sum();
    Ok(total / pairs.len() as f64)
}

/// Which labels drive training and which loss form consumes them.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum LossMode {
    /// Majority consensus, consensus loss.
    Balanced,
    /// Per-metric votes, weighted per-metric loss.
    Vanilla,
    /// z-scored weighted-sum labels, consensus loss.
    Normalized,
    /// One random metric per pair, consensus loss.
    Random,
    /// One fixed metric, consensus loss.
    Single(String),
}

impl LossMode {
    pub fn uses_votes(&self) -> bool {
        matches!(self, LossMode::Vanilla)
    }

    /// Labeling policy that produces this mode's training labels.
    pub fn aggregation_mode(&self) -> AggregationMode {
        match self {
            LossMode::Balanced => AggregationMode::Majority,
            LossMode::Vanilla => AggregationMode::VanillaSum,
            LossMode::Normalized => AggregationMode::NormalizedSum,
            LossMode::Random => AggregationMode::RandomMetric,
            LossMode::Single(_) => AggregationMode::SingleMetric,
        }
    }

    /// `base` with the mode and chosen metric replaced.
    pub fn labeling_policy(&self, base: &AggregationPolicy) -> AggregationPolicy {
        AggregationPolicy {
            mode: self.aggregation_mode(),
            chosen_metric: match self {
                LossMode::Single(m) => Some(m.clone()),
                _ => None,
            },
            ..base.clone()
        }
    }

    /// File-name friendly form, e.g. `single-metric_1`.
    pub fn slug(&self) -> String {
        self.to_string().replace(':', "-")
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossMode::Balanced => f.write_str("balanced"),
            LossMode::Vanilla => f.write_str("vanilla"),
            LossMode::Normalized => f.write_str("normalized"),
            LossMode::Random => f.write_str("random"),
            LossMode::Single(m) => write!(f, "single:{m}"),
        }
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "balanced" => LossMode::Balanced,
            "vanilla" => LossMode::Vanilla,
            "normalized" => LossMode::Normalized,
            "random" => LossMode::Random,
            other => match other.split_once(':').or_else(|| other.split_once('-')) {
                Some(("single", m)) if !m.is_empty() => LossMode::Single(m.to_string()),
                _ => return Err(Error::config("train.modes", format!("unknown mode `{other}`"))),
            },
        })
    }
}

impl Serialize for LossMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for LossMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpoConfig {
    pub beta: f64,
    pub loss_mode: LossMode,
    /// Per-metric weights for the vanilla loss; `None` means `1/K`.
    pub weights: Option<Vec<f64>>,
}

impl DpoConfig {
    pub fn new(beta: f64, loss_mode: LossMode) -> Self {
        DpoConfig {
            beta,
            loss_mode,
            weights: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config("dpo.beta", "beta must be positive"));
        }
        Ok(())
    }
}

/// One pair with its shared timestep and the two injected noises.
#[derive(Debug, Clone, PartialEq)]
pub struct PairLossInputs<'a> {
    pub pair: &'a PreferencePair,
    pub t: usize,
    pub eps_a: Vec<f64>,
    pub eps_b: Vec<f64>,
}

impl<'a> PairLossInputs<'a> {
    /// Draws `t ~ U{1..T}`, then `eps_a`, then `eps_b` from `stream`.
    pub fn draw(pair: &'a PreferencePair, schedule: &NoiseSchedule, stream: &SeedStream) -> Self {
        let mut rng = stream.rng();
        let t = rng.random_range(1..=schedule.steps());
        let eps_a = normal_vec(&mut rng, pair.dim());
        let eps_b = normal_vec(&mut rng, pair.dim());
        PairLossInputs { pair, t, eps_a, eps_b }
    }

    /// The same draw seen from the swapped pair.
    pub fn swapped(&self, swapped_pair: &'a PreferencePair) -> Self {
        PairLossInputs {
            pair: swapped_pair,
            t: self.t,
            eps_a: self.eps_b.clone(),
            eps_b: self.eps_a.clone(),
        }
    }
}

/// Forward state of `l_theta` for one pair, kept for the backward pass.
struct LThetaEval {
    value: f64,
    trace_a: Trace,
    trace_b: Trace,
    resid_a: Vec<f64>,
    resid_b: Vec<f64>,
}

impl LThetaEval {
    fn new(inputs: &PairLossInputs<'_>, models: &ModelPair, schedule: &NoiseSchedule) -> Result<Self> {
        let p = inputs.pair;
        let x_a = forward_noise(schedule, &p.sample_a.0, inputs.t, &inputs.eps_a)?;
        let x_b = forward_noise(schedule, &p.sample_b.0, inputs.t, &inputs.eps_b)?;
        let trace_a = models.theta.forward(&x_a, inputs.t, p.condition)?;
        let trace_b = models.theta.forward(&x_b, inputs.t, p.condition)?;
        let ref_a = models.reference.denoise(&x_a, inputs.t, p.condition)?;
        let ref_b = models.reference.denoise(&x_b, inputs.t, p.condition)?;

        let resid = |eps: &[f64], out: &[f64]| -> Vec<f64> {
            eps.iter().zip(out).map(|(e, o)| e - o).collect()
        };
        let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        let resid_a = resid(&inputs.eps_a, &trace_a.out);
        let resid_b = resid(&inputs.eps_b, &trace_b.out);
        let gap_a = sq(&resid_a) - sq(&resid(&inputs.eps_a, &ref_a));
        let gap_b = sq(&resid_b) - sq(&resid(&inputs.eps_b, &ref_b));
        Ok(LThetaEval {
            value: -(gap_a - gap_b),
            trace_a,
            trace_b,
            resid_a,
            resid_b,
        })
    }

    /// Adds `coef * grad l` to `grad`.
    fn backprop(&self, theta: &DenoiserParams, coef: f64, grad: &mut [f64]) {
        // dl/d theta(x_a) = 2 (eps_a - theta(x_a)); dl/d theta(x_b) = -2 (eps_b - theta(x_b))
        let g_a: Vec<f64> = self.resid_a.iter().map(|r| 2.0 * coef * r).collect();
        let g_b: Vec<f64> = self.resid_b.iter().map(|r| -2.0 * coef * r).collect();
        theta.backward(&self.trace_a, &g_a, grad);
        theta.backward(&self.trace_b, &g_b, grad);
    }
}

/// Surrogate log-ratio difference and its gradient with respect to theta.
pub fn l_theta(
    inputs: &PairLossInputs<'_>,
    models: &ModelPair,
    schedule: &NoiseSchedule,
) -> Result<(f64, DenoiserParams)> {
    let eval = LThetaEval::new(inputs, models, schedule)?;
    let mut grad = DenoiserParams::zeros(models.theta.arch);
    eval.backprop(&models.theta, 1.0, &mut grad.values);
    Ok((eval.value, grad))
}

/// Batch mean of `-log sigma(beta s l)`.
pub fn balanced_loss_and_grad(
    batch: &[PairLossInputs<'_>],
    models: &ModelPair,
    schedule: &NoiseSchedule,
    beta: f64,
) -> Result<(f64, DenoiserParams)> {
    if batch.is_empty() {
        return Err(Error::validation("empty batch"));
    }
    let n = batch.len() as f64;
    let mut grad = DenoiserParams::zeros(models.theta.arch);
    let mut loss = 0.0;
    for inputs in batch {
        let s = inputs
            .pair
            .consensus
            .ok_or_else(|| {
                Error::validation(format!("pair {} has no consensus label", inputs.pair.pair_id))
            })?
            .sign();
        let eval = LThetaEval::new(inputs, models, schedule)?;
        let z = beta * s * eval.value;
        loss += softplus(-z);
        let coef = -beta * s * sigmoid(-z) / n;
        eval.backprop(&models.theta, coef, &mut grad.values);
    }
    Ok((loss / n, grad))
}

/// Batch mean of `-sum_k w_k log sigma(beta s_k l)`.
pub fn vanilla_loss_and_grad(
    batch: &[PairLossInputs<'_>],
    models: &ModelPair,
    schedule: &NoiseSchedule,
    beta: f64,
    weights: Option<&[f64]>,
) -> Result<(f64, DenoiserParams)> {
    if batch.is_empty() {
        return Err(Error::validation("empty batch"));
    }
    let n = batch.len() as f64;
    let mut grad = DenoiserParams::zeros(models.theta.arch);
    let mut loss = 0.0;
    for inputs in batch {
        let votes = inputs.pair.votes.as_ref().ok_or_else(|| {
            Error::validation(format!("pair {} has no votes", inputs.pair.pair_id))
        })?;
        let k = votes.len();
        let uniform;
        let w = match weights {
            Some(w) if w.len() != k => {
                return Err(Error::validation(format!("{} weights for {k} votes", w.len())))
            }
            Some(w) => w,
            None => {
                uniform = vec![1.0 / k as f64; k];
                &uniform
            }
        };
        let eval = LThetaEval::new(inputs, models, schedule)?;
        let mut dl = 0.0;
        for (wk, &sk) in w.iter().zip(&votes.0) {
            let z = beta * sk as f64 * eval.value;
            loss += wk * softplus(-z);
            dl += -wk * beta * sk as f64 * sigmoid(-z);
        }
        eval.backprop(&models.theta, dl / n, &mut grad.values);
    }
    Ok((loss / n, grad))
}

/// The loss selected by `cfg.loss_mode`.
pub fn loss_and_grad(
    batch: &[PairLossInputs<'_>],
    models: &ModelPair,
    schedule: &NoiseSchedule,
    cfg: &DpoConfig,
) -> Result<(f64, DenoiserParams)> {
    if cfg.loss_mode.uses_votes() {
        vanilla_loss_and_grad(batch, models, schedule, cfg.beta, cfg.weights.as_deref())
    } else {
        balanced_loss_and_grad(batch, models, schedule, cfg.beta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bt_values() {
        assert_eq!(bt_probability(0.3, 0.3), 0.5);
        assert!((bt_probability(50.0, 0.0) - 1.0).abs() < 1e-12);
        // 1 / (1 + e^-1)
        assert!((bt_probability(1.0, 0.0) - 0.7310585786300049).abs() < 1e-15);
        assert!((bt_loss(&[(2.0, 2.0), (-1.0, -1.0)]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bt_loss(&[(1.0, 0.0)]).unwrap() - 0.31326168751822286).abs() < 1e-15);
        assert!(bt_loss(&[]).is_err());
    }

    #[test]
    fn bt_loss_decreases_with_margin() {
        let mut prev = f64::INFINITY;
        for i in 0..50 {
            let l = bt_loss(&[(i as f64 * 0.2, 0.0)]).unwrap();
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn stable_at_extremes() {
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        assert_eq!(softplus(0.0), std::f64::consts::LN_2);
    }

    #[test]
    fn mode_parsing() {
        for s in ["balanced", "vanilla", "normalized", "random", "single:metric_2"] {
            assert_eq!(s.parse::<LossMode>().unwrap().to_string(), s);
        }
        assert_eq!(
            "single-metric_2".parse::<LossMode>().unwrap(),
            LossMode::Single("metric_2".into())
        );
        assert_eq!(LossMode::Single("m".into()).slug(), "single-m");
        assert!("single:".parse::<LossMode>().is_err());
        assert!("majority".parse::<LossMode>().is_err());
    }
}
