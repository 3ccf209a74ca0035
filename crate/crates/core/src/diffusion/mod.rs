//! Toy conditional diffusion model: schedule, denoiser, training loss,
//! ancestral sampler and pretraining on a per-condition Gaussian source.

pub mod checkpoint;
mod denoiser;
mod schedule;

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prefcore::rng::normal_vec;
use crate::prefcore::{Condition, Sample, SeedStream};
use crate::trainer::optimizer::{optimizer_step, OptimizerConfig, OptimizerState};

pub use checkpoint::Checkpoint;
pub use denoiser::{time_features, Arch, DenoiserParams, Trace};
pub use schedule::NoiseSchedule;

/// Trainable parameters and the frozen reference copy.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPair {
    pub theta: DenoiserParams,
    pub reference: DenoiserParams,
}

impl ModelPair {
    /// Both halves start from `init`.
    pub fn from_init(init: DenoiserParams) -> Self {
        ModelPair {
            reference: init.clone(),
            theta: init,
        }
    }

    pub fn new(theta: DenoiserParams, reference: DenoiserParams) -> Result<Self> {
        if !theta.same_shape(&reference) {
            return Err(Error::validation("theta and reference have different shapes"));
        }
        Ok(ModelPair { theta, reference })
    }

    pub fn refresh_reference(&mut self) {
        self.reference.values.copy_from_slice(&self.theta.values);
    }
}

/// `alpha_t x0 + sigma_t eps`.
pub fn forward_noise(schedule: &NoiseSchedule, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    if x0.len() != eps.len() {
        return Err(Error::validation("x0 and eps differ in dimension"));
    }
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
}

/// Per-timestep weight of the denoising loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaMode {
    /// `omega = 1`
    #[default]
    ConstantOne,
    /// `omega = lambda_t`, the signal-to-noise ratio.
    Snr,
}

impl OmegaMode {
    pub fn weight(self, schedule: &NoiseSchedule, t: usize) -> f64 {
        match self {
            OmegaMode::ConstantOne => 1.0,
            OmegaMode::Snr => schedule.snr(t),
        }
    }
}

impl FromStr for OmegaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant_one" => Ok(OmegaMode::ConstantOne),
            "snr" => Ok(OmegaMode::Snr),
            other => Err(Error::config("pretrain.omega", format!("unknown weighting `{other}`"))),
        }
    }
}

/// One term of the denoising loss with its timestep and noise already drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct DmItem {
    pub x0: Vec<f64>,
    pub c: Condition,
    pub t: usize,
    pub eps: Vec<f64>,
}

/// Mean of `omega(lambda_t) |eps - eps_theta(x_t, t, c)|^2` over `items` and
/// its gradient.
pub fn dm_loss_and_grad_fixed(
    params: &DenoiserParams,
    items: &[DmItem],
    schedule: &NoiseSchedule,
    omega: OmegaMode,
) -> Result<(f64, DenoiserParams)> {
    if items.is_empty() {
        return Err(Error::validation("empty batch"));
    }
    let n = items.len() as f64;
    let mut grad = DenoiserParams::zeros(params.arch);
    let mut loss = 0.0;
    let mut g_out = vec![0.0; params.arch.d];
    for it in items {
        let x_t = forward_noise(schedule, &it.x0, it.t, &it.eps)?;
        let trace = params.forward(&x_t, it.t, it.c)?;
        let w = omega.weight(schedule, it.t);
        let mut sq = 0.0;
        for j in 0..g_out.len() {
            let r = it.eps[j] - trace.out[j];
            sq += r * r;
            g_out[j] = -2.0 * w * r / n;
        }
        loss += w * sq;
        params.backward(&trace, &g_out, &mut grad.values);
    }
    Ok((loss / n, grad))
}

/// Draws `t ~ U{1..T}` and `eps ~ N(0, I)` for each batch element from
/// `stream`, in batch order.
pub fn draw_dm_items(
    batch: &[(Sample, Condition)],
    schedule: &NoiseSchedule,
    stream: &SeedStream,
) -> Vec<DmItem> {
    let mut rng = stream.rng();
    batch
        .iter()
        .map(|(x0, c)| {
            let t = rng.random_range(1..=schedule.steps());
            let eps = normal_vec(&mut rng, x0.dim());
            DmItem {
                x0: x0.0.clone(),
                c: *c,
                t,
                eps,
            }
        })
        .collect()
}

pub fn dm_loss_and_grad(
    params: &DenoiserParams,
    batch: &[(Sample, Condition)],
    schedule: &NoiseSchedule,
    omega: OmegaMode,
    stream: &SeedStream,
) -> Result<(f64, DenoiserParams)> {
    let items = draw_dm_items(batch, schedule, stream);
    dm_loss_and_grad_fixed(params, &items, schedule, omega)
}

/// Ancestral sampling from `x_T ~ N(0, I)` down to `x_0`.
///
/// Each step uses the posterior mean
/// `mu = (x_t - beta_t / sigma_t * eps_theta) / sqrt(1 - beta_t)` and adds
/// noise with variance `beta_tilde_t`, which vanishes at the last step.
pub fn sample(
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    c: Condition,
    stream: &SeedStream,
) -> Result<Sample> {
    let d = params.arch.d;
    let mut rng = stream.rng();
    let mut x = normal_vec(&mut rng, d);
    for t in (1..=schedule.steps()).rev() {
        let eps_hat = params.denoise(&x, t, c)?;
        let beta = schedule.beta(t);
        let coef = beta / schedule.sigma(t);
        let inv_sqrt_a = 1.0 / (1.0 - beta).sqrt();
        for j in 0..d {
            x[j] = inv_sqrt_a * (x[j] - coef * eps_hat[j]);
        }
        if t > 1 {
            let std = schedule.posterior_variance(t).sqrt();
            let z = normal_vec(&mut rng, d);
            for j in 0..d {
                x[j] += std * z[j];
            }
        }
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical(format!("sampler diverged for condition {c}")));
    }
    Ok(Sample(x))
}

/// Source distribution for pretraining: condition `c` draws from
/// `N(means[c], std^2 I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSource {
    pub means: Vec<Vec<f64>>,
    pub std: f64,
}

impl GaussianSource {
    pub fn draw<R: Rng + ?Sized>(&self, c: Condition, rng: &mut R) -> Sample {
        let mu = &self.means[c.index()];
        let z = normal_vec(rng, mu.len());
        Sample(mu.iter().zip(z).map(|(m, z)| m + self.std * z).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub omega: OmegaMode,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 3000,
            batch_size: 128,
            learning_rate: 2e-3,
            omega: OmegaMode::ConstantOne,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: DenoiserParams,
    /// Denoising loss at every step, before that step's update.
    pub losses: Vec<f64>,
}

/// Fits the denoiser to `source` with the adaptive-moment optimizer.
pub fn pretrain(
    init: DenoiserParams,
    source: &GaussianSource,
    schedule: &NoiseSchedule,
    cfg: &PretrainConfig,
    stream: &SeedStream,
) -> Result<PretrainOutcome> {
    if cfg.batch_size == 0 {
        return Err(Error::config("pretrain.batch_size", "must be at least 1"));
    }
    let mut params = init;
    let mut state = OptimizerState::new(params.len());
    let opt = OptimizerConfig::adaptive();
    let n_cond = params.arch.c;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let step_stream = stream.split_index("pretrain-step", step as u64);
        let mut rng = step_stream.split("data").rng();
        let batch: Vec<(Sample, Condition)> = (0..cfg.batch_size)
            .map(|_| {
                let c = Condition(rng.random_range(0..n_cond) as u32);
                (source.draw(c, &mut rng), c)
            })
            .collect();
        let (loss, grad) =
            dm_loss_and_grad(&params, &batch, schedule, cfg.omega, &step_stream.split("noise"))?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("pretraining loss is {loss} at step {step}")));
        }
        losses.push(loss);
        optimizer_step(&mut params.values, &grad.values, &mut state, &opt, cfg.learning_rate)?;
    }
    Ok(PretrainOutcome { params, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prefcore::seeded_rng;

    #[test]
    fn forward_noise_limits() {
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 1.0 - 1e-12, 0.5]).unwrap();
        let x0 = [1.5, -2.0];
        let y = forward_noise(&s, &x0, 1, &[0.3, -0.7]).unwrap();
        assert!(y.iter().zip(&x0).all(|(a, b)| (a - b).abs() < 1e-5));
        let z = forward_noise(&s, &x0, 2, &[0.0, 0.0]).unwrap();
        assert_eq!(z, vec![s.alpha(2) * 1.5, s.alpha(2) * -2.0]);
        assert!(forward_noise(&s, &x0, 0, &[0.0, 0.0]).is_err());
        assert!(forward_noise(&s, &x0, 3, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn zero_loss_when_prediction_is_exact() {
        // Output = b3 only (all weights zero); set b3 to the injected noise.
        let arch = Arch { d: 2, m: 2, c: 2, h: 3 };
        let mut p = DenoiserParams::zeros(arch);
        let eps = vec![0.25, -1.5];
        let n = p.len();
        p.values[n - 2..].copy_from_slice(&eps);
        let s = NoiseSchedule::linear(10, 0.01, 0.2).unwrap();
        let item = DmItem {
            x0: vec![1.0, 2.0],
            c: Condition(1),
            t: 4,
            eps,
        };
        let (loss, grad) = dm_loss_and_grad_fixed(&p, &[item], &s, OmegaMode::ConstantOne).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.values.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn sampler_single_step_and_determinism() {
        let arch = Arch { d: 2, m: 2, c: 2, h: 4 };
        let p = DenoiserParams::init(arch, &seeded_rng(1));
        let one = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        let x = sample(&p, &one, Condition(0), &seeded_rng(2)).unwrap();
        assert!(x.0.iter().all(|v| v.is_finite()));
        let s = NoiseSchedule::linear(20, 0.01, 0.3).unwrap();
        let a = sample(&p, &s, Condition(1), &seeded_rng(3)).unwrap();
        let b = sample(&p, &s, Condition(1), &seeded_rng(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_pretrain_steps_returns_init() {
        let arch = Arch { d: 2, m: 2, c: 2, h: 4 };
        let p = DenoiserParams::init(arch, &seeded_rng(1));
        let src = GaussianSource {
            means: vec![vec![1.0, 0.0], vec![-1.0, 0.0]],
            std: 0.5,
        };
        let s = NoiseSchedule::linear(10, 0.01, 0.3).unwrap();
        let cfg = PretrainConfig {
            steps: 0,
            ..Default::default()
        };
        let out = pretrain(p.clone(), &src, &s, &cfg, &seeded_rng(0)).unwrap();
        assert_eq!(out.params, p);
        assert!(out.losses.is_empty());
    }
}
