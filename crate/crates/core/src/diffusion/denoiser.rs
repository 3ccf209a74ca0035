//! The noise-prediction network and its exact reverse-mode gradient.
//!
//! Input `u = [x_t ; time features ; one-hot(c)]`, then
//!
//! ```text
//! a1 = tanh(W1 u + b1)
//! a2 = tanh(W2 a1 + b2)
//! eps_hat = W3 a2 + b3
//! ```
//!
//! Parameters are one flat vector in the order W1, b1, W2, b2, W3, b3, with
//! weight matrices row-major (`W[out][in]`).

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prefcore::{Condition, SeedStream};

/// Layer sizes: data dimension `d`, `m` sinusoid frequencies (2m time
/// features), `c` conditions, hidden width `h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub d: usize,
    pub m: usize,
    pub c: usize,
    pub h: usize,
}

impl Arch {
    pub fn n_in(&self) -> usize {
        self.d + 2 * self.m + self.c
    }

    pub fn n_params(&self) -> usize {
        let (n, h, d) = (self.n_in(), self.h, self.d);
        h * n + h + h * h + h + d * h + d
    }

    fn offsets(&self) -> Offsets {
        let (n, h, d) = (self.n_in(), self.h, self.d);
        let w1 = 0;
        let b1 = w1 + h * n;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + d * h;
        Offsets { w1, b1, w2, b2, w3, b3 }
    }
}

#[derive(Debug, Clone, Copy)]
struct Offsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
}

/// Sinusoidal embedding of an integer timestep: `sin(t w_i), cos(t w_i)`
/// with `w_i = 1000^(-i/m)`.
pub fn time_features(t: usize, m: usize, out: &mut [f64]) {
    for i in 0..m {
        let freq = (-(1000f64.ln()) * i as f64 / m as f64).exp();
        let angle = t as f64 * freq;
        out[i] = angle.sin();
        out[m + i] = angle.cos();
    }
}

/// Weights and biases of one denoiser. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub arch: Arch,
    pub values: Vec<f64>,
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    input: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    pub out: Vec<f64>,
}

impl DenoiserParams {
    pub fn zeros(arch: Arch) -> Self {
        DenoiserParams {
            arch,
            values: vec![0.0; arch.n_params()],
        }
    }

    pub fn from_values(arch: Arch, values: Vec<f64>) -> Result<Self> {
        if values.len() != arch.n_params() {
            return Err(Error::validation(format!(
                "expected {} parameters for {arch:?}, got {}",
                arch.n_params(),
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::validation("parameters must be finite"));
        }
        Ok(DenoiserParams { arch, values })
    }

    /// Gaussian weights with variance `1/fan_in`, zero biases.
    pub fn init(arch: Arch, stream: &SeedStream) -> Self {
        let mut rng = stream.rng();
        let mut p = DenoiserParams::zeros(arch);
        let o = arch.offsets();
        let layers = [
            (o.w1, arch.h * arch.n_in(), arch.n_in()),
            (o.w2, arch.h * arch.h, arch.h),
            (o.w3, arch.d * arch.h, arch.h),
        ];
        for (start, len, fan_in) in layers {
            let dist = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("positive std");
            for v in &mut p.values[start..start + len] {
                *v = dist.sample(&mut rng);
            }
        }
        p
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn same_shape(&self, other: &DenoiserParams) -> bool {
        self.arch == other.arch && self.values.len() == other.values.len()
    }

    fn check_input(&self, x_t: &[f64], c: Condition) -> Result<()> {
        if x_t.len() != self.arch.d {
            return Err(Error::validation(format!(
                "input has dimension {}, model expects {}",
                x_t.len(),
                self.arch.d
            )));
        }
        if c.index() >= self.arch.c {
            return Err(Error::validation(format!(
                "condition {c} out of range for a model with {} conditions",
                self.arch.c
            )));
        }
        Ok(())
    }

    /// Predicted noise `eps_theta(x_t, t, c)`.
    pub fn denoise(&self, x_t: &[f64], t: usize, c: Condition) -> Result<Vec<f64>> {
        self.check_input(x_t, c)?;
        Ok(self.forward_unchecked(x_t, t, c).out)
    }

    pub fn forward(&self, x_t: &[f64], t: usize, c: Condition) -> Result<Trace> {
        self.check_input(x_t, c)?;
        Ok(self.forward_unchecked(x_t, t, c))
    }

    fn forward_unchecked(&self, x_t: &[f64], t: usize, c: Condition) -> Trace {
        let Arch { d, m, h, .. } = self.arch;
        let n = self.arch.n_in();
        let o = self.arch.offsets();
        let w = &self.values;

        let mut input = vec![0.0; n];
        input[..d].copy_from_slice(x_t);
        time_features(t, m, &mut input[d..d + 2 * m]);
        input[d + 2 * m + c.index()] = 1.0;

        let a1 = dense_tanh(&w[o.w1..o.b1], &w[o.b1..o.w2], &input, h);
        let a2 = dense_tanh(&w[o.w2..o.b2], &w[o.b2..o.w3], &a1, h);
        let mut out = w[o.b3..o.b3 + d].to_vec();
        for (i, o_i) in out.iter_mut().enumerate() {
            let row = &w[o.w3 + i * h..o.w3 + (i + 1) * h];
            *o_i += dot(row, &a2);
        }
        Trace { input, a1, a2, out }
    }

    /// Accumulates `J^T g_out` into `grad`, where `J` is the Jacobian of the
    /// output of `trace` with respect to the parameters.
    pub fn backward(&self, trace: &Trace, g_out: &[f64], grad: &mut [f64]) {
        let Arch { d, h, .. } = self.arch;
        let n = self.arch.n_in();
        let o = self.arch.offsets();
        let w = &self.values;

        let mut g_a2 = vec![0.0; h];
        for i in 0..d {
            let g = g_out[i];
            grad[o.b3 + i] += g;
            let row = o.w3 + i * h;
            for j in 0..h {
                grad[row + j] += g * trace.a2[j];
                g_a2[j] += g * w[row + j];
            }
        }
        let g_z2: Vec<f64> = g_a2
            .iter()
            .zip(&trace.a2)
            .map(|(g, a)| g * (1.0 - a * a))
            .collect();
        let mut g_a1 = vec![0.0; h];
        for i in 0..h {
            let g = g_z2[i];
            grad[o.b2 + i] += g;
            let row = o.w2 + i * h;
            for j in 0..h {
                grad[row + j] += g * trace.a1[j];
                g_a1[j] += g * w[row + j];
            }
        }
        for i in 0..h {
            let g = g_a1[i] * (1.0 - trace.a1[i] * trace.a1[i]);
            grad[o.b1 + i] += g;
            let row = o.w1 + i * n;
            for j in 0..n {
                grad[row + j] += g * trace.input[j];
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dense_tanh(w: &[f64], b: &[f64], x: &[f64], out_dim: usize) -> Vec<f64> {
    let n = x.len();
    (0..out_dim)
        .map(|i| (b[i] + dot(&w[i * n..(i + 1) * n], x)).tanh())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prefcore::seeded_rng;

    fn arch() -> Arch {
        Arch { d: 2, m: 3, c: 4, h: 5 }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let p = DenoiserParams::zeros(arch());
        assert_eq!(p.denoise(&[0.3, -1.0], 7, Condition(2)).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn init_is_deterministic() {
        let s = seeded_rng(3).split("init");
        let a = DenoiserParams::init(arch(), &s);
        let b = DenoiserParams::init(arch(), &s);
        assert_eq!(a, b);
        let ya = a.denoise(&[0.1, 0.2], 4, Condition(1)).unwrap();
        let yb = b.denoise(&[0.1, 0.2], 4, Condition(1)).unwrap();
        assert_eq!(ya[0].to_bits(), yb[0].to_bits());
        assert_eq!(ya[1].to_bits(), yb[1].to_bits());
    }

    #[test]
    fn shape_errors() {
        let p = DenoiserParams::zeros(arch());
        assert!(p.denoise(&[0.0], 1, Condition(0)).is_err());
        assert!(p.denoise(&[0.0, 0.0], 1, Condition(4)).is_err());
        assert!(DenoiserParams::from_values(arch(), vec![0.0; 3]).is_err());
    }

    #[test]
    fn single_weight_perturbation_matches_partial() {
        // Central difference on each parameter of the scalar u . eps_hat.
        let p = DenoiserParams::init(arch(), &seeded_rng(11));
        let x = [0.7, -0.4];
        let (t, c) = (9, Condition(3));
        let u = [0.6, -1.3];
        let trace = p.forward(&x, t, c).unwrap();
        let mut grad = vec![0.0; p.len()];
        p.backward(&trace, &u, &mut grad);
        let f = |q: &DenoiserParams| {
            let y = q.denoise(&x, t, c).unwrap();
            u[0] * y[0] + u[1] * y[1]
        };
        let step = 1e-6;
        for i in 0..p.len() {
            let mut plus = p.clone();
            plus.values[i] += step;
            let mut minus = p.clone();
            minus.values[i] -= step;
            let fd = (f(&plus) - f(&minus)) / (2.0 * step);
            assert!(
                (fd - grad[i]).abs() <= 1e-7 * (1.0 + fd.abs()),
                "param {i}: fd {fd} vs analytic {}",
                grad[i]
            );
        }
    }
}
