mod common;

use balanced_dpo::diffusion::{
    dm_loss_and_grad_fixed, forward_noise, sample, DmItem, NoiseSchedule, OmegaMode,
};
use balanced_dpo::prefcore::{normal_vec, seeded_rng, Condition};
use common::*;

#[test]
fn forward_noise_moments_match_the_marginal() {
    let sched = NoiseSchedule::linear(50, 0.002, 0.3).unwrap();
    let x0 = [1.5, -0.7];
    let n = 100_000;
    for t in [1usize, 10, 25, 50] {
        let mut r = seeded_rng(t as u64).rng();
        let mut sum = [0.0; 2];
        let mut sum_sq = [0.0; 2];
        for _ in 0..n {
            let eps = normal_vec(&mut r, 2);
            let x = forward_noise(&sched, &x0, t, &eps).unwrap();
            for j in 0..2 {
                sum[j] += x[j];
                sum_sq[j] += x[j] * x[j];
            }
        }
        let (a, s) = (sched.alpha(t), sched.sigma(t));
        for j in 0..2 {
            let mean = sum[j] / n as f64;
            let var = sum_sq[j] / n as f64 - mean * mean;
            let se_mean = s / (n as f64).sqrt();
            let se_var = s * s * (2.0 / n as f64).sqrt();
            assert!((mean - a * x0[j]).abs() < 3.0 * se_mean, "t={t} mean {mean} vs {}", a * x0[j]);
            assert!((var - s * s).abs() < 3.0 * se_var, "t={t} var {var} vs {}", s * s);
        }
    }
}

#[test]
fn snr_weighting_scales_each_term() {
    let sched = schedule();
    let params = random_models(&seeded_rng(3)).theta;
    let mut r = seeded_rng(4).rng();
    let items: Vec<DmItem> = (1..=sched.steps())
        .map(|t| DmItem {
            x0: normal_vec(&mut r, 2),
            c: Condition((t % 3) as u32),
            t,
            eps: normal_vec(&mut r, 2),
        })
        .collect();
    let n = items.len() as f64;
    let (snr_loss, snr_grad) = dm_loss_and_grad_fixed(&params, &items, &sched, OmegaMode::Snr).unwrap();
    let mut want = 0.0;
    let mut want_grad = vec![0.0; params.len()];
    for it in &items {
        let (l, g) = dm_loss_and_grad_fixed(&params, std::slice::from_ref(it), &sched, OmegaMode::ConstantOne).unwrap();
        let w = sched.snr(it.t);
        want += w * l / n;
        for (acc, gi) in want_grad.iter_mut().zip(&g.values) {
            *acc += w * gi / n;
        }
    }
    assert!((snr_loss - want).abs() <= 1e-10 * want.abs());
    for (a, b) in snr_grad.values.iter().zip(&want_grad) {
        assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
    }
    // High-noise steps are down-weighted relative to the unweighted loss.
    assert!(sched.snr(1) > 1.0 && sched.snr(sched.steps()) < 1.0);
}

#[test]
fn sampling_is_a_pure_function_of_the_stream() {
    let sched = schedule();
    let params = random_models(&seeded_rng(8)).theta;
    let s = seeded_rng(9).split("draw");
    let a = sample(&params, &sched, Condition(1), &s).unwrap();
    let b = sample(&params, &sched, Condition(1), &s).unwrap();
    assert_eq!(a, b);
    let c = sample(&params, &sched, Condition(1), &seeded_rng(10).split("draw")).unwrap();
    assert_ne!(a, c);
    assert!(sample(&params, &sched, Condition(7), &s).is_err());
}
