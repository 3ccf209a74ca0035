//! Turning per-metric scores into preference labels.
//!
//! The majority rule compares each metric separately, producing a vote in
//! {-1, 0, +1}, and labels the pair by the sign of the vote sum. The
//! baselines (weighted sum of raw rewards, weighted sum of z-scored rewards,
//! one random metric per pair, one fixed metric) are here as well so they
//! share the vote bookkeeping and tie handling.

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prefcore::{ConsensusLabel, MetricIds, PreferencePair, ScoreVector, SeedStream, VoteVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    Majority,
    VanillaSum,
    NormalizedSum,
    RandomMetric,
    SingleMetric,
}

impl FromStr for AggregationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "majority" => AggregationMode::Majority,
            "vanilla_sum" | "vanilla" => AggregationMode::VanillaSum,
            "normalized_sum" | "normalized" => AggregationMode::NormalizedSum,
            "random_metric" | "random" => AggregationMode::RandomMetric,
            "single_metric" | "single" => AggregationMode::SingleMetric,
            other => return Err(Error::config("aggregation.mode", format!("unknown mode `{other}`"))),
        })
    }
}

/// What to do when the aggregate preference is exactly zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TiePolicy {
    /// The first nonzero vote (in metric order) decides; all-zero skips.
    #[default]
    FirstMetric,
    SkipPair,
    FixedPlus,
}

impl FromStr for TiePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "first_metric" => TiePolicy::FirstMetric,
            "skip_pair" => TiePolicy::SkipPair,
            "fixed_plus" => TiePolicy::FixedPlus,
            other => {
                return Err(Error::config(
                    "aggregation.tie_policy",
                    format!("unknown tie policy `{other}`"),
                ))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregationPolicy {
    pub mode: AggregationMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen_metric: Option<String>,
    #[serde(default)]
    pub tie_policy: TiePolicy,
    /// Per-metric abstention margins; absent means all zero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margins: Option<Vec<f64>>,
    /// Use the two-valued `>=` vote instead of three-valued votes.
    #[serde(default)]
    pub inclusive_votes: bool,
}

impl Default for AggregationPolicy {
    fn default() -> Self {
        AggregationPolicy::new(AggregationMode::Majority)
    }
}

impl AggregationPolicy {
    pub fn new(mode: AggregationMode) -> Self {
        AggregationPolicy {
            mode,
            weights: None,
            chosen_metric: None,
            tie_policy: TiePolicy::default(),
            margins: None,
            inclusive_votes: false,
        }
    }

    pub fn single(metric_id: &str) -> Self {
        AggregationPolicy {
            chosen_metric: Some(metric_id.to_string()),
            ..AggregationPolicy::new(AggregationMode::SingleMetric)
        }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if let Some(w) = &self.weights {
            if w.len() != k {
                return Err(Error::config(
                    "aggregation.weights",
                    format!("{} weights for {k} metrics", w.len()),
                ));
            }
            if !w.iter().all(|v| v.is_finite()) || w.iter().all(|&v| v == 0.0) {
                return Err(Error::config(
                    "aggregation.weights",
                    "weights must be finite and not all zero",
                ));
            }
        }
        if let Some(m) = &self.margins {
            if m.len() != k || !m.iter().all(|v| v.is_finite() && *v >= 0.0) {
                return Err(Error::config(
                    "aggregation.margins",
                    format!("need {k} finite margins >= 0"),
                ));
            }
        }
        if self.mode == AggregationMode::SingleMetric && self.chosen_metric.is_none() {
            return Err(Error::config(
                "aggregation.chosen_metric",
                "single_metric mode requires chosen_metric",
            ));
        }
        Ok(())
    }

    /// Weights in effect: configured or uniform `1/K`.
    pub fn effective_weights(&self, k: usize) -> Vec<f64> {
        self.weights
            .clone()
            .unwrap_or_else(|| vec![1.0 / k as f64; k])
    }

    fn margin(&self, k: usize) -> f64 {
        self.margins.as_ref().map_or(0.0, |m| m[k])
    }
}

/// Per-metric vote on `(r_a, r_b)`.
///
/// Three-valued: +1 when `r_a` exceeds `r_b` by more than `margin`, -1 in
/// the mirrored case, 0 otherwise. With `inclusive` and zero margin the
/// vote is +1 iff `r_a >= r_b`.
pub fn vote_metric(r_a: f64, r_b: f64, margin: f64, inclusive: bool) -> i8 {
    if inclusive && margin == 0.0 {
        return if r_a >= r_b { 1 } else { -1 };
    }
    if r_a - r_b > margin {
        1
    } else if r_b - r_a > margin {
        -1
    } else {
        0
    }
}

/// `sign(sum of votes)`, with ties resolved by `tie_policy`. `None` means
/// the pair is skipped.
pub fn majority_consensus(votes: &VoteVector, tie_policy: TiePolicy) -> Result<Option<ConsensusLabel>> {
    if votes.is_empty() {
        return Err(Error::validation("cannot aggregate an empty vote vector"));
    }
    Ok(match votes.sum() {
        s if s > 0 => Some(ConsensusLabel::prefer_a(false)),
        s if s < 0 => Some(ConsensusLabel::prefer_b(false)),
        _ => break_tie(votes, tie_policy),
    })
}

fn break_tie(votes: &VoteVector, tie_policy: TiePolicy) -> Option<ConsensusLabel> {
    match tie_policy {
        TiePolicy::SkipPair => None,
        TiePolicy::FixedPlus => Some(ConsensusLabel::prefer_a(true)),
        TiePolicy::FirstMetric => votes.0.iter().find(|&&v| v != 0).map(|&v| {
            if v > 0 {
                ConsensusLabel::prefer_a(true)
            } else {
                ConsensusLabel::prefer_b(true)
            }
        }),
    }
}

fn sign_consensus(total: f64, votes: &VoteVector, tie_policy: TiePolicy) -> Option<ConsensusLabel> {
    if total > 0.0 {
        Some(ConsensusLabel::prefer_a(false))
    } else if total < 0.0 {
        Some(ConsensusLabel::prefer_b(false))
    } else {
        break_tie(votes, tie_policy)
    }
}

/// Per-metric mean and population standard deviation of a dataset's scores.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationStats {
    pub metric_ids: MetricIds,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    pub fn normalize(&self, scores: &ScoreVector) -> ScoreVector {
        let values = scores
            .values
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect();
        ScoreVector {
            values,
            metric_ids: scores.metric_ids.clone(),
        }
    }
}

/// Mean and standard deviation (dividing by the count, not count - 1) over
/// the pooled multiset of `scores_a` and `scores_b`.
pub fn compute_normalization(pairs: &[PreferencePair]) -> Result<NormalizationStats> {
    if pairs.len() < 2 {
        return Err(Error::validation("normalization needs at least two pairs"));
    }
    let ids = pairs[0].scores_a.metric_ids.clone();
    let k = ids.len();
    let n = (2 * pairs.len()) as f64;
    let mut mean = vec![0.0; k];
    for p in pairs {
        if p.scores_a.metric_ids != ids {
            return Err(Error::validation(format!("pair {} has different metric ids", p.pair_id)));
        }
        for j in 0..k {
            mean[j] += p.scores_a.values[j] + p.scores_b.values[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; k];
    for p in pairs {
        for j in 0..k {
            let da = p.scores_a.values[j] - mean[j];
            let db = p.scores_b.values[j] - mean[j];
            var[j] += da * da + db * db;
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / n).sqrt()).collect();
    if let Some(j) = std.iter().position(|&s| !(s > 0.0)) {
        return Err(Error::validation(format!(
            "metric `{}` has zero variance and cannot be normalized",
            ids[j]
        )));
    }
    Ok(NormalizationStats {
        metric_ids: ids,
        mean,
        std,
    })
}

/// Labels one pair. Returns `None` when the tie policy skips it.
pub fn label_pair(
    pair: &PreferencePair,
    policy: &AggregationPolicy,
    stats: Option<&NormalizationStats>,
    stream: &SeedStream,
) -> Result<Option<PreferencePair>> {
    let mut comparisons = 0;
    label_pair_counted(pair, policy, stats, stream, &mut comparisons)
}

/// [`label_pair`] that adds the number of per-metric comparisons performed
/// to `comparisons`.
pub fn label_pair_counted(
    pair: &PreferencePair,
    policy: &AggregationPolicy,
    stats: Option<&NormalizationStats>,
    stream: &SeedStream,
    comparisons: &mut usize,
) -> Result<Option<PreferencePair>> {
    let k = pair.k();
    policy.validate(k)?;
    let (a, b) = (&pair.scores_a.values, &pair.scores_b.values);
    let votes = VoteVector(
        (0..k)
            .map(|j| {
                *comparisons += 1;
                vote_metric(a[j], b[j], policy.margin(j), policy.inclusive_votes)
            })
            .collect(),
    );

    let consensus = match policy.mode {
        AggregationMode::Majority => majority_consensus(&votes, policy.tie_policy)?,
        AggregationMode::VanillaSum => {
            let w = policy.effective_weights(k);
            let total: f64 = (0..k).map(|j| w[j] * (a[j] - b[j])).sum();
            sign_consensus(total, &votes, policy.tie_policy)
        }
        AggregationMode::NormalizedSum => {
            let stats = stats.ok_or_else(|| {
                Error::validation("normalized_sum labeling requires normalization statistics")
            })?;
            if stats.metric_ids != pair.scores_a.metric_ids {
                return Err(Error::validation("normalization statistics cover different metrics"));
            }
            let (za, zb) = (stats.normalize(&pair.scores_a), stats.normalize(&pair.scores_b));
            let w = policy.effective_weights(k);
            let total: f64 = (0..k).map(|j| w[j] * (za.values[j] - zb.values[j])).sum();
            sign_consensus(total, &votes, policy.tie_policy)
        }
        AggregationMode::RandomMetric => {
            let j = stream.rng().random_range(0..k);
            sign_consensus(votes.0[j] as f64, &votes, policy.tie_policy)
        }
        AggregationMode::SingleMetric => {
            let id = policy.chosen_metric.as_deref().unwrap_or_default();
            let j = pair
                .scores_a
                .metric_index(id)
                .ok_or_else(|| Error::validation(format!("unknown metric id `{id}`")))?;
            sign_consensus(votes.0[j] as f64, &votes, policy.tie_policy)
        }
    };

    Ok(consensus.map(|c| PreferencePair {
        votes: Some(votes),
        consensus: Some(c),
        ..pair.clone()
    }))
}

/// Labels a dataset with per-pair substreams keyed by `pair_id`, dropping
/// skipped pairs. Statistics for normalized mode are computed from `pairs`.
pub fn label_dataset(
    pairs: &[PreferencePair],
    policy: &AggregationPolicy,
    stream: &SeedStream,
) -> Result<LabeledDataset> {
    let stats = match policy.mode {
        AggregationMode::NormalizedSum => Some(compute_normalization(pairs)?),
        _ => None,
    };
    let mut labeled = Vec::with_capacity(pairs.len());
    let mut skipped = 0;
    let mut comparisons = 0;
    for p in pairs {
        let sub = stream.split_index("label", p.pair_id);
        match label_pair_counted(p, policy, stats.as_ref(), &sub, &mut comparisons)? {
            Some(q) => labeled.push(q),
            None => skipped += 1,
        }
    }
    Ok(LabeledDataset {
        pairs: labeled,
        skipped,
        comparisons,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub pairs: Vec<PreferencePair>,
    pub skipped: usize,
    pub comparisons: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prefcore::{metric_ids, seeded_rng, Condition, Sample};

    fn pair_with(sa: Vec<f64>, sb: Vec<f64>) -> PreferencePair {
        let ids: Vec<String> = (1..=sa.len()).map(|i| format!("metric_{i}")).collect();
        let ids = metric_ids(&ids);
        PreferencePair::unlabeled(
            0,
            Condition(0),
            Sample(vec![0.0, 0.0]),
            Sample(vec![1.0, 1.0]),
            ScoreVector::new(sa, ids.clone()).unwrap(),
            ScoreVector::new(sb, ids).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn vote_examples() {
        assert_eq!(vote_metric(5.0, 3.0, 0.0, false), 1);
        assert_eq!(vote_metric(2.0, 2.0, 0.0, false), 0);
        assert_eq!(vote_metric(2.0, 2.0, 0.0, true), 1);
        assert_eq!(vote_metric(2.0, 2.4, 0.5, false), 0);
        assert_eq!(vote_metric(2.0, 2.6, 0.5, false), -1);
    }

    #[test]
    fn consensus_examples() {
        let v = |x: &[i8]| VoteVector(x.to_vec());
        let c = majority_consensus(&v(&[1, 1, -1, 1]), TiePolicy::FirstMetric).unwrap().unwrap();
        assert_eq!((c.s(), c.tie_broken), (1, false));
        let c = majority_consensus(&v(&[1, -1, 1, -1]), TiePolicy::FirstMetric).unwrap().unwrap();
        assert_eq!((c.s(), c.tie_broken), (1, true));
        let c = majority_consensus(&v(&[0, -1, 1, 0]), TiePolicy::FirstMetric).unwrap().unwrap();
        assert_eq!((c.s(), c.tie_broken), (-1, true));
        assert!(majority_consensus(&v(&[1, -1, 1, -1]), TiePolicy::SkipPair).unwrap().is_none());
        assert!(majority_consensus(&v(&[0, 0]), TiePolicy::FirstMetric).unwrap().is_none());
        assert_eq!(
            majority_consensus(&v(&[0, 0]), TiePolicy::FixedPlus).unwrap().unwrap().s(),
            1
        );
        assert!(majority_consensus(&v(&[]), TiePolicy::FirstMetric).is_err());
    }

    #[test]
    fn vanilla_is_dominated_by_largest_scale() {
        // Delta r = (0.5, 30, 0.004, -100): three metrics favour A, the
        // 1000-scaled one favours B by 1000 * 0.1.
        // Equal-weight sum: 0.25 * (0.5 + 30 + 0.004 - 100) = -17.3765 < 0.
        let p = pair_with(vec![1.5, 60.0, 0.014, 0.0], vec![1.0, 30.0, 0.01, 100.0]);
        let stream = seeded_rng(0);
        let vanilla = label_pair(&p, &AggregationPolicy::new(AggregationMode::VanillaSum), None, &stream)
            .unwrap()
            .unwrap();
        assert_eq!(vanilla.consensus.unwrap().s(), -1);
        assert_eq!(vanilla.votes.as_ref().unwrap().0, vec![1, 1, 1, -1]);
        let majority = label_pair(&p, &AggregationPolicy::default(), None, &stream).unwrap().unwrap();
        assert_eq!(majority.consensus.unwrap().s(), 1);
    }

    #[test]
    fn single_metric_follows_its_vote() {
        let p = pair_with(vec![1.0, 0.0, 3.0], vec![0.0, 1.0, 3.0]);
        let s = seeded_rng(1);
        let l = |m: &str| {
            label_pair(&p, &AggregationPolicy::single(m), None, &s)
                .unwrap()
                .unwrap()
                .consensus
                .unwrap()
        };
        assert_eq!(l("metric_1").s(), 1);
        assert_eq!(l("metric_2").s(), -1);
        // tie on metric_3 falls back to first nonzero vote
        assert_eq!((l("metric_3").s(), l("metric_3").tie_broken), (1, true));
        assert!(label_pair(&p, &AggregationPolicy::single("nope"), None, &s).is_err());
    }

    #[test]
    fn random_metric_is_reproducible() {
        let p = pair_with(vec![1.0, 0.0, 5.0, -1.0], vec![0.0, 1.0, 3.0, 0.0]);
        let policy = AggregationPolicy::new(AggregationMode::RandomMetric);
        let stream = seeded_rng(99).split_index("label", 0);
        let first = label_pair(&p, &policy, None, &stream).unwrap();
        for _ in 0..5 {
            assert_eq!(label_pair(&p, &policy, None, &stream).unwrap(), first);
        }
        // Over many streams every metric gets picked, so both labels appear.
        let labels: Vec<i8> = (0..200)
            .map(|i| {
                let s = seeded_rng(99).split_index("label", i);
                label_pair(&p, &policy, None, &s).unwrap().unwrap().consensus.unwrap().s()
            })
            .collect();
        let plus = labels.iter().filter(|&&s| s == 1).count();
        // metrics 1 and 3 favour A: expect about half
        assert!((60..140).contains(&plus), "{plus}");
    }

    #[test]
    fn normalization_stats() {
        let pairs = vec![
            pair_with(vec![0.0, 1.0], vec![0.0, 2.0]),
            pair_with(vec![2.0, 3.0], vec![2.0, 5.0]),
        ];
        let st = compute_normalization(&pairs).unwrap();
        // metric_1: {0,0,2,2} -> mean 1, population variance 1
        assert_eq!(st.mean[0], 1.0);
        assert_eq!(st.std[0], 1.0);
        // metric_2: {1,2,3,5} -> mean 2.75, variance (3.0625+0.5625+0.0625+5.0625)/4
        assert_eq!(st.mean[1], 2.75);
        assert!((st.std[1] - (8.75f64 / 4.0).sqrt()).abs() < 1e-15);

        let z: Vec<PreferencePair> = pairs
            .iter()
            .map(|p| PreferencePair {
                scores_a: st.normalize(&p.scores_a),
                scores_b: st.normalize(&p.scores_b),
                ..p.clone()
            })
            .collect();
        let st2 = compute_normalization(&z).unwrap();
        for j in 0..2 {
            assert!(st2.mean[j].abs() < 1e-12);
            assert!((st2.std[j] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_metric_rejected() {
        let pairs = vec![
            pair_with(vec![7.0, 1.0], vec![7.0, 2.0]),
            pair_with(vec![7.0, 3.0], vec![7.0, 4.0]),
        ];
        let err = compute_normalization(&pairs).unwrap_err();
        assert!(err.to_string().contains("metric_1"), "{err}");
        assert!(compute_normalization(&pairs[..1]).is_err());
        let policy = AggregationPolicy::new(AggregationMode::NormalizedSum);
        assert!(label_pair(&pairs[0], &policy, None, &seeded_rng(0)).is_err());
    }

    #[test]
    fn policy_validation() {
        let mut p = AggregationPolicy::new(AggregationMode::VanillaSum);
        p.weights = Some(vec![0.0, 0.0]);
        assert!(p.validate(2).is_err());
        p.weights = Some(vec![1.0]);
        assert!(p.validate(2).is_err());
        assert!(AggregationPolicy::new(AggregationMode::SingleMetric).validate(2).is_err());
        let mut m = AggregationPolicy::default();
        m.margins = Some(vec![-1.0, 0.0]);
        assert!(m.validate(2).is_err());
    }

    #[test]
    fn majority_counts_k_comparisons() {
        let p = pair_with(vec![1.0, 2.0, 3.0, 4.0, 5.0], vec![5.0, 4.0, 3.0, 2.0, 1.0]);
        let mut n = 0;
        label_pair_counted(&p, &AggregationPolicy::default(), None, &seeded_rng(0), &mut n).unwrap();
        assert_eq!(n, 5);
    }
}
