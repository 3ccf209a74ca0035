#![allow(dead_code)]

use balanced_dpo::diffusion::{Arch, DenoiserParams, ModelPair, NoiseSchedule};
use balanced_dpo::prefcore::{
    metric_ids, normal_vec, seeded_rng, Condition, ConsensusLabel, MetricIds, PreferencePair, Sample,
    ScoreVector, SeedStream, VoteVector,
};
use rand::Rng;

pub const TINY: Arch = Arch { d: 2, m: 3, c: 3, h: 6 };

pub fn ids(k: usize) -> MetricIds {
    let names: Vec<String> = (1..=k).map(|i| format!("metric_{i}")).collect();
    metric_ids(&names)
}

pub fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(20, 0.002, 0.3).unwrap()
}

/// Scores uniform in [0, 1) times the per-metric scale.
pub fn random_pair<R: Rng>(rng: &mut R, id: u64, scales: &[f64], d: usize, c: u32) -> PreferencePair {
    let ids = ids(scales.len());
    let draw = |rng: &mut R| -> Vec<f64> { scales.iter().map(|s| s * rng.random::<f64>()).collect() };
    let sa = ScoreVector::new(draw(rng), ids.clone()).unwrap();
    let sb = ScoreVector::new(draw(rng), ids).unwrap();
    let a = Sample(normal_vec(rng, d));
    let b = Sample(normal_vec(rng, d));
    PreferencePair::unlabeled(id, Condition(rng.random_range(0..c)), a, b, sa, sb).unwrap()
}

pub fn with_labels(mut p: PreferencePair, votes: Vec<i8>, s: i8) -> PreferencePair {
    p.votes = Some(VoteVector::new(votes).unwrap());
    p.consensus = Some(ConsensusLabel::new(s, false).unwrap());
    p
}

/// Random pair with random votes and a random consensus label.
pub fn random_labeled<R: Rng>(rng: &mut R, id: u64, k: usize) -> PreferencePair {
    let p = random_pair(rng, id, &vec![1.0; k], TINY.d, TINY.c as u32);
    let votes = (0..k).map(|_| rng.random_range(-1i8..=1)).collect();
    let s = if rng.random::<bool>() { 1 } else { -1 };
    with_labels(p, votes, s)
}

/// Theta and a distinct reference of the tiny architecture.
pub fn random_models(stream: &SeedStream) -> ModelPair {
    let theta = DenoiserParams::init(TINY, &stream.split("theta"));
    let reference = DenoiserParams::init(TINY, &stream.split("ref"));
    ModelPair::new(theta, reference).unwrap()
}

pub fn tied_models(stream: &SeedStream) -> ModelPair {
    ModelPair::from_init(DenoiserParams::init(TINY, &stream.split("theta")))
}

pub fn rng(seed: u64) -> balanced_dpo::prefcore::StreamRng {
    seeded_rng(seed).rng()
}

/// Largest relative error between an analytic gradient and central
/// differences of `f`, taken over the whole vector.
pub fn fd_rel_error<F>(params: &DenoiserParams, analytic: &[f64], mut f: F) -> f64
where
    F: FnMut(&DenoiserParams) -> f64,
{
    let h = 1e-6;
    let mut num = vec![0.0; params.len()];
    let mut p = params.clone();
    for i in 0..params.len() {
        let x = p.values[i];
        p.values[i] = x + h;
        let up = f(&p);
        p.values[i] = x - h;
        let down = f(&p);
        p.values[i] = x;
        num[i] = (up - down) / (2.0 * h);
    }
    let diff: f64 = analytic.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt()
        .max(num.iter().map(|a| a * a).sum::<f64>().sqrt())
        .max(1e-12);
    diff / scale
}
