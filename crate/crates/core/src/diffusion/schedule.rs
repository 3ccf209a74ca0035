use crate::error::{Error, Result};

/// Variance-preserving noise schedule, stored as cumulative signal levels
/// `alpha_bar[0..=T]` with `alpha_bar[0] = 1`.
///
/// `alpha_t = sqrt(alpha_bar_t)`, `sigma_t = sqrt(1 - alpha_bar_t)`, so the
/// forward marginal is `x_t = alpha_t x_0 + sigma_t eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Per-step variances `beta_t` linear from `beta_start` to `beta_end`,
    /// `alpha_bar_t = prod_{s<=t} (1 - beta_s)`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("diffusion.steps", "need at least one step"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::config(
                "diffusion.beta_start",
                "need 0 < beta_start <= beta_end < 1",
            ));
        }
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut prod = 1.0;
        for i in 0..steps {
            let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
            let beta = beta_start + (beta_end - beta_start) * frac;
            prod *= 1.0 - beta;
            alpha_bar.push(prod);
        }
        NoiseSchedule::from_alpha_bar(alpha_bar)
    }

    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 || alpha_bar[0] != 1.0 {
            return Err(Error::validation("alpha_bar must start at 1 and have T >= 1 further entries"));
        }
        if alpha_bar.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::validation("alpha_bar must be strictly decreasing"));
        }
        if !(alpha_bar[alpha_bar.len() - 1] > 0.0) {
            return Err(Error::validation("alpha_bar_T must be positive"));
        }
        Ok(NoiseSchedule { alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha_bar[t].sqrt()
    }

    pub fn sigma(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar[t]).sqrt()
    }

    /// `lambda_t = alpha_t^2 / sigma_t^2`
    pub fn snr(&self, t: usize) -> f64 {
        self.alpha_bar[t] / (1.0 - self.alpha_bar[t])
    }

    /// Per-step variance `beta_t = 1 - alpha_bar_t / alpha_bar_{t-1}`.
    pub fn beta(&self, t: usize) -> f64 {
        1.0 - self.alpha_bar[t] / self.alpha_bar[t - 1]
    }

    /// Reverse-step variance, the lower-bound choice
    /// `beta_tilde_t = (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t`.
    /// Zero at `t = 1`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t]) * self.beta(t)
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if (1..=self.steps()).contains(&t) {
            Ok(())
        } else {
            Err(Error::validation(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )))
        }
    }
}
