//! Domain types shared by every stage: conditions, samples, reward scores,
//! per-metric votes and labeled preference pairs.
//!
//! The on-disk dataset format lives in [`dataset`], the deterministic random
//! streams in [`rng`].

pub mod dataset;
pub mod rng;

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

pub use dataset::{read_dataset, write_dataset, DatasetHeader};
pub use rng::{normal_vec, seeded_rng, SeedStream, StreamRng};

/// Class label standing in for a text prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Condition(pub u32);

impl Condition {
    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn check(self, num_conditions: usize) -> Result<Self> {
        if self.index() < num_conditions {
            Ok(self)
        } else {
            Err(Error::validation(format!(
                "condition {} out of range (num_conditions = {num_conditions})",
                self.0
            )))
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A clean data point `x_0` in `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample(pub Vec<f64>);

impl Sample {
    pub fn new(x: Vec<f64>) -> Result<Self> {
        if x.iter().all(|v| v.is_finite()) {
            Ok(Sample(x))
        } else {
            Err(Error::validation("sample has non-finite components"))
        }
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }
}

/// Ordered metric identifiers, shared between every score vector of a dataset.
pub type MetricIds = Arc<[String]>;

pub fn metric_ids<S: AsRef<str>>(ids: &[S]) -> MetricIds {
    ids.iter().map(|s| s.as_ref().to_string()).collect()
}

/// The K reward values of one (condition, sample).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub values: Vec<f64>,
    pub metric_ids: MetricIds,
}

impl ScoreVector {
    pub fn new(values: Vec<f64>, metric_ids: MetricIds) -> Result<Self> {
        if values.len() != metric_ids.len() {
            return Err(Error::validation(format!(
                "score vector has {} values for {} metrics",
                values.len(),
                metric_ids.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "score for metric `{}` is not finite",
                metric_ids[k]
            )));
        }
        Ok(ScoreVector { values, metric_ids })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn metric_index(&self, id: &str) -> Option<usize> {
        self.metric_ids.iter().position(|m| m == id)
    }
}

/// Per-metric votes in {-1, 0, +1}; 0 is an abstention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteVector(pub Vec<i8>);

impl VoteVector {
    pub fn new(votes: Vec<i8>) -> Result<Self> {
        if let Some(v) = votes.iter().find(|v| !matches!(v, -1..=1)) {
            return Err(Error::validation(format!("vote {v} not in {{-1, 0, +1}}")));
        }
        Ok(VoteVector(votes))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sum(&self) -> i64 {
        self.0.iter().map(|&v| v as i64).sum()
    }

    pub fn negated(&self) -> Self {
        VoteVector(self.0.iter().map(|v| -v).collect())
    }
}

/// Aggregated preference: `s = +1` prefers sample A, `s = -1` prefers sample B.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConsensusLabel {
    s: i8,
    pub tie_broken: bool,
}

impl ConsensusLabel {
    pub fn new(s: i8, tie_broken: bool) -> Result<Self> {
        match s {
            1 | -1 => Ok(ConsensusLabel { s, tie_broken }),
            _ => Err(Error::validation(format!("consensus {s} not in {{-1, +1}}"))),
        }
    }

    pub fn prefer_a(tie_broken: bool) -> Self {
        ConsensusLabel { s: 1, tie_broken }
    }

    pub fn prefer_b(tie_broken: bool) -> Self {
        ConsensusLabel { s: -1, tie_broken }
    }

    pub fn s(self) -> i8 {
        self.s
    }

    pub fn sign(self) -> f64 {
        self.s as f64
    }

    pub fn flipped(self) -> Self {
        ConsensusLabel {
            s: -self.s,
            tie_broken: self.tie_broken,
        }
    }
}

/// A condition with two candidate samples, their scores and (once labeled)
/// the per-metric votes and consensus.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub pair_id: u64,
    pub condition: Condition,
    pub sample_a: Sample,
    pub sample_b: Sample,
    pub scores_a: ScoreVector,
    pub scores_b: ScoreVector,
    pub votes: Option<VoteVector>,
    pub consensus: Option<ConsensusLabel>,
}

impl PreferencePair {
    pub fn unlabeled(
        pair_id: u64,
        condition: Condition,
        sample_a: Sample,
        sample_b: Sample,
        scores_a: ScoreVector,
        scores_b: ScoreVector,
    ) -> Result<Self> {
        let pair = PreferencePair {
            pair_id,
            condition,
            sample_a,
            sample_b,
            scores_a,
            scores_b,
            votes: None,
            consensus: None,
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn k(&self) -> usize {
        self.scores_a.len()
    }

    pub fn dim(&self) -> usize {
        self.sample_a.dim()
    }

    pub fn is_labeled(&self) -> bool {
        self.consensus.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let id = self.pair_id;
        if self.sample_a.dim() != self.sample_b.dim() {
            return Err(Error::validation(format!(
                "pair {id}: samples have different dimensions"
            )));
        }
        for (name, s) in [("a", &self.sample_a), ("b", &self.sample_b)] {
            if !s.0.iter().all(|v| v.is_finite()) {
                return Err(Error::validation(format!(
                    "pair {id}: sample_{name} has non-finite components"
                )));
            }
        }
        if self.scores_a.metric_ids != self.scores_b.metric_ids {
            return Err(Error::validation(format!(
                "pair {id}: scores_a and scores_b have different metric ids"
            )));
        }
        for (name, s) in [("a", &self.scores_a), ("b", &self.scores_b)] {
            if s.values.len() != s.metric_ids.len() || !s.values.iter().all(|v| v.is_finite()) {
                return Err(Error::validation(format!("pair {id}: invalid scores_{name}")));
            }
        }
        if let Some(votes) = &self.votes {
            if votes.len() != self.k() {
                return Err(Error::validation(format!(
                    "pair {id}: {} votes for {} metrics",
                    votes.len(),
                    self.k()
                )));
            }
        }
        if self.consensus.is_some() && self.votes.is_none() {
            return Err(Error::validation(format!(
                "pair {id}: consensus present without votes"
            )));
        }
        Ok(())
    }

    /// The same pair with A and B exchanged; votes and consensus are negated.
    pub fn swapped(&self) -> Self {
        PreferencePair {
            pair_id: self.pair_id,
            condition: self.condition,
            sample_a: self.sample_b.clone(),
            sample_b: self.sample_a.clone(),
            scores_a: self.scores_b.clone(),
            scores_b: self.scores_a.clone(),
            votes: self.votes.as_ref().map(VoteVector::negated),
            consensus: self.consensus.map(ConsensusLabel::flipped),
        }
    }

    pub fn without_labels(&self) -> Self {
        PreferencePair {
            votes: None,
            consensus: None,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair() -> PreferencePair {
        let ids = metric_ids(&["m1", "m2"]);
        PreferencePair::unlabeled(
            7,
            Condition(1),
            Sample(vec![0.0, 1.0]),
            Sample(vec![1.0, 0.0]),
            ScoreVector::new(vec![1.0, 2.0], ids.clone()).unwrap(),
            ScoreVector::new(vec![3.0, 0.5], ids).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn consensus_requires_votes() {
        let mut p = pair();
        p.consensus = Some(ConsensusLabel::prefer_a(false));
        assert!(p.validate().is_err());
        p.votes = Some(VoteVector(vec![1, -1]));
        assert!(p.validate().is_ok());
    }

    #[test]
    fn swapping_negates_labels() {
        let mut p = pair();
        p.votes = Some(VoteVector(vec![1, 0]));
        p.consensus = Some(ConsensusLabel::prefer_a(true));
        let q = p.swapped();
        assert_eq!(q.votes.as_ref().unwrap().0, vec![-1, 0]);
        assert_eq!(q.consensus.unwrap().s(), -1);
        assert_eq!(q.swapped(), p);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(VoteVector::new(vec![2]).is_err());
        assert!(ConsensusLabel::new(0, false).is_err());
        assert!(Sample::new(vec![f64::NAN]).is_err());
        assert!(ScoreVector::new(vec![1.0], metric_ids(&["a", "b"])).is_err());
        assert!(Condition(4).check(4).is_err());
        assert!(Condition(3).check(4).is_ok());
    }
}
