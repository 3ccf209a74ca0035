mod common;

use balanced_dpo::diffusion::{dm_loss_and_grad_fixed, DmItem, OmegaMode};
use balanced_dpo::dpo::{balanced_loss_and_grad, l_theta, vanilla_loss_and_grad, PairLossInputs};
use balanced_dpo::prefcore::{normal_vec, seeded_rng, Condition, PreferencePair};
use common::*;
use rand::Rng;

const TOL: f64 = 1e-4;
const INSTANCES: u64 = 10;

fn batch_inputs<'a>(pairs: &'a [PreferencePair], seed: u64) -> Vec<PairLossInputs<'a>> {
    let sched = schedule();
    let s = seeded_rng(seed);
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| PairLossInputs::draw(p, &sched, &s.split_index("pair", i as u64)))
        .collect()
}

#[test]
fn denoising_loss_gradient_matches_finite_differences() {
    let sched = schedule();
    for inst in 0..INSTANCES {
        let s = seeded_rng(100 + inst);
        let params = random_models(&s).theta;
        let mut r = s.split("items").rng();
        let items: Vec<DmItem> = (0..4)
            .map(|_| DmItem {
                x0: normal_vec(&mut r, TINY.d),
                c: Condition(r.random_range(0..TINY.c as u32)),
                t: r.random_range(1..=sched.steps()),
                eps: normal_vec(&mut r, TINY.d),
            })
            .collect();
        for omega in [OmegaMode::ConstantOne, OmegaMode::Snr] {
            let (_, g) = dm_loss_and_grad_fixed(&params, &items, &sched, omega).unwrap();
            let err = fd_rel_error(&params, &g.values, |p| {
                dm_loss_and_grad_fixed(p, &items, &sched, omega).unwrap().0
            });
            assert!(err < TOL, "instance {inst} {omega:?}: relative error {err}");
        }
    }
}

#[test]
fn l_theta_gradient_matches_finite_differences() {
    let sched = schedule();
    for inst in 0..INSTANCES {
        let s = seeded_rng(200 + inst);
        let models = random_models(&s);
        let pairs = vec![random_labeled(&mut s.split("pairs").rng(), inst, 3)];
        let inputs = &batch_inputs(&pairs, inst)[0];
        let (_, g) = l_theta(inputs, &models, &sched).unwrap();
        let err = fd_rel_error(&models.theta, &g.values, |p| {
            let m = balanced_dpo::diffusion::ModelPair::new(p.clone(), models.reference.clone()).unwrap();
            l_theta(inputs, &m, &sched).unwrap().0
        });
        assert!(err < TOL, "instance {inst}: relative error {err}");
    }
}

#[test]
fn consensus_loss_gradient_matches_finite_differences() {
    let sched = schedule();
    for inst in 0..INSTANCES {
        let s = seeded_rng(300 + inst);
        let models = random_models(&s);
        let mut r = s.split("pairs").rng();
        let pairs: Vec<_> = (0..5).map(|i| random_labeled(&mut r, i, 3)).collect();
        let batch = batch_inputs(&pairs, inst);
        let beta = [0.5, 2.0, 10.0][inst as usize % 3];
        let (_, g) = balanced_loss_and_grad(&batch, &models, &sched, beta).unwrap();
        let err = fd_rel_error(&models.theta, &g.values, |p| {
            let m = balanced_dpo::diffusion::ModelPair::new(p.clone(), models.reference.clone()).unwrap();
            balanced_loss_and_grad(&batch, &m, &sched, beta).unwrap().0
        });
        assert!(err < TOL, "instance {inst}: relative error {err}");
    }
}

#[test]
fn vote_loss_gradient_matches_finite_differences() {
    let sched = schedule();
    for inst in 0..INSTANCES {
        let s = seeded_rng(400 + inst);
        let models = random_models(&s);
        let mut r = s.split("pairs").rng();
        let pairs: Vec<_> = (0..5).map(|i| random_labeled(&mut r, i, 4)).collect();
        let batch = batch_inputs(&pairs, inst);
        let weights = [0.1, 0.2, 0.3, 0.4];
        let w = if inst % 2 == 0 { None } else { Some(&weights[..]) };
        let (_, g) = vanilla_loss_and_grad(&batch, &models, &sched, 3.0, w).unwrap();
        let err = fd_rel_error(&models.theta, &g.values, |p| {
            let m = balanced_dpo::diffusion::ModelPair::new(p.clone(), models.reference.clone()).unwrap();
            vanilla_loss_and_grad(&batch, &m, &sched, 3.0, w).unwrap().0
        });
        assert!(err < TOL, "instance {inst}: relative error {err}");
    }
}
