//! Synthetic reward functions over (condition, sample).
//!
//! The built-in kinds deliberately live on very different scales so that a
//! weighted sum of raw rewards is dominated by one of them, while their
//! orderings stay informative.

use std::f64::consts::TAU;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prefcore::{metric_ids, Condition, MetricIds, Sample, ScoreVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    /// `exp(-|x - mu_c|^2)`
    TargetProximity,
    /// `-|x|^2`
    Compactness,
    /// `x[axis]`
    AxisPreference,
    /// `-(|x| - radius)^2`
    RingFit,
}

impl FromStr for RewardKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target_proximity" => Ok(RewardKind::TargetProximity),
            "compactness" => Ok(RewardKind::Compactness),
            "axis_preference" => Ok(RewardKind::AxisPreference),
            "ring_fit" => Ok(RewardKind::RingFit),
            other => Err(Error::config("rewards.kind", format!("unknown reward kind `{other}`"))),
        }
    }
}

/// Kind-specific parameters. Unused fields are ignored by other kinds.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardParams {
    /// Per-condition target points (`target_proximity`).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub targets: Vec<Vec<f64>>,
    /// Ring radius (`ring_fit`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    /// Coordinate index (`axis_preference`), default 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSpec {
    pub metric_id: String,
    pub kind: RewardKind,
    pub scale: f64,
    #[serde(default)]
    pub params: RewardParams,
}

/// `num` points equally spaced on a circle of the given radius, starting on
/// the positive first axis. Extra dimensions are zero.
pub fn circle_targets(num: usize, radius: f64, d: usize) -> Vec<Vec<f64>> {
    (0..num)
        .map(|c| {
            let angle = TAU * c as f64 / num as f64;
            let mut p = vec![0.0; d];
            p[0] = radius * angle.cos();
            if d > 1 {
                p[1] = radius * angle.sin();
            }
            p
        })
        .collect()
}

impl RewardSpec {
    pub fn new(metric_id: &str, kind: RewardKind, scale: f64, params: RewardParams) -> Self {
        RewardSpec {
            metric_id: metric_id.to_string(),
            kind,
            scale,
            params,
        }
    }

    pub fn validate(&self, d: usize, num_conditions: usize) -> Result<()> {
        let at = |field: &str| format!("rewards.{}.{field}", self.metric_id);
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::config(at("scale"), "scale must be positive and finite"));
        }
        match self.kind {
            RewardKind::TargetProximity => {
                if self.params.targets.len() < num_conditions {
                    return Err(Error::config(
                        at("params.targets"),
                        format!(
                            "{} targets for {num_conditions} conditions",
                            self.params.targets.len()
                        ),
                    ));
                }
                if self.params.targets.iter().any(|t| t.len() != d) {
                    return Err(Error::config(at("params.targets"), format!("targets must have {d} components")));
                }
            }
            RewardKind::RingFit => {
                if self.params.radius.is_none_or(|r| !(r.is_finite() && r >= 0.0)) {
                    return Err(Error::config(at("params.radius"), "ring_fit needs a radius >= 0"));
                }
            }
            RewardKind::AxisPreference => {
                if self.params.axis.unwrap_or(0) >= d {
                    return Err(Error::config(at("params.axis"), format!("axis must be < d = {d}")));
                }
            }
            RewardKind::Compactness => {}
        }
        Ok(())
    }
}

/// Evaluates one reward on `(c, x)`.
pub fn evaluate(spec: &RewardSpec, c: Condition, x: &Sample) -> Result<f64> {
    let x = x.as_slice();
    let raw = match spec.kind {
        RewardKind::TargetProximity => {
            let mu = spec.params.targets.get(c.index()).ok_or_else(|| {
                Error::config(
                    format!("rewards.{}.params.targets", spec.metric_id),
                    format!("no target for condition {c}"),
                )
            })?;
            if mu.len() != x.len() {
                return Err(Error::validation(format!(
                    "target has {} components, sample has {}",
                    mu.len(),
                    x.len()
                )));
            }
            let dist_sq: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
            (-dist_sq).exp()
        }
        RewardKind::Compactness => -x.iter().map(|v| v * v).sum::<f64>(),
        RewardKind::AxisPreference => {
            let axis = spec.params.axis.unwrap_or(0);
            *x.get(axis)
                .ok_or_else(|| Error::validation(format!("axis {axis} out of range")))?
        }
        RewardKind::RingFit => {
            let radius = spec.params.radius.ok_or_else(|| {
                Error::config(format!("rewards.{}.params.radius", spec.metric_id), "missing radius")
            })?;
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            -(norm - radius) * (norm - radius)
        }
    };
    let value = spec.scale * raw;
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Numerical(format!(
            "reward `{}` is not finite",
            spec.metric_id
        )))
    }
}

/// Ordered list of reward functions; the order fixes the metric index.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardRegistry {
    specs: Vec<RewardSpec>,
    ids: MetricIds,
}

impl RewardRegistry {
    pub fn new(specs: Vec<RewardSpec>) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::config("rewards", "registry must contain at least one reward"));
        }
        for (i, s) in specs.iter().enumerate() {
            if specs[..i].iter().any(|o| o.metric_id == s.metric_id) {
                return Err(Error::config(
                    "rewards",
                    format!("duplicate metric id `{}`", s.metric_id),
                ));
            }
            if !(s.scale > 0.0) {
                return Err(Error::config(
                    format!("rewards.{}.scale", s.metric_id),
                    "scale must be positive",
                ));
            }
        }
        let ids = metric_ids(&specs.iter().map(|s| s.metric_id.as_str()).collect::<Vec<_>>());
        Ok(RewardRegistry { specs, ids })
    }

    /// The four built-in kinds with scales (1, 100, 0.01, 1000).
    pub fn default_for(num_conditions: usize, d: usize, target_radius: f64, ring_radius: f64) -> Self {
        let specs = default_specs(num_conditions, d, target_radius, ring_radius);
        RewardRegistry::new(specs).expect("default registry is valid")
    }

    pub fn specs(&self) -> &[RewardSpec] {
        &self.specs
    }

    pub fn metric_ids(&self) -> &MetricIds {
        &self.ids
    }

    pub fn k(&self) -> usize {
        self.specs.len()
    }

    pub fn index_of(&self, metric_id: &str) -> Option<usize> {
        self.ids.iter().position(|m| m == metric_id)
    }

    pub fn validate(&self, d: usize, num_conditions: usize) -> Result<()> {
        self.specs.iter().try_for_each(|s| s.validate(d, num_conditions))
    }

    pub fn score_all(&self, c: Condition, x: &Sample) -> Result<ScoreVector> {
        self.score_all_with(c, x, evaluate)
    }

    /// `score_all` with a caller-supplied evaluator, called once per metric
    /// in registry order.
    pub fn score_all_with<F>(&self, c: Condition, x: &Sample, mut eval: F) -> Result<ScoreVector>
    where
        F: FnMut(&RewardSpec, Condition, &Sample) -> Result<f64>,
    {
        let values = self
            .specs
            .iter()
            .map(|s| eval(s, c, x))
            .collect::<Result<Vec<_>>>()?;
        ScoreVector::new(values, self.ids.clone())
    }
}

pub fn default_specs(
    num_conditions: usize,
    d: usize,
    target_radius: f64,
    ring_radius: f64,
) -> Vec<RewardSpec> {
    vec![
        RewardSpec::new(
            "metric_1",
            RewardKind::TargetProximity,
            1.0,
            RewardParams {
                targets: circle_targets(num_conditions, target_radius, d),
                ..Default::default()
            },
        ),
        RewardSpec::new("metric_2", RewardKind::Compactness, 100.0, RewardParams::default()),
        RewardSpec::new(
            "metric_3",
            RewardKind::RingFit,
            0.01,
            RewardParams {
                radius: Some(ring_radius),
                ..Default::default()
            },
        ),
        RewardSpec::new(
            "metric_4",
            RewardKind::AxisPreference,
            1000.0,
            RewardParams {
                axis: Some(0),
                ..Default::default()
            },
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(kind: RewardKind) -> RewardSpec {
        let mut s = default_specs(4, 2, 2.0, 1.0)
            .into_iter()
            .find(|s| s.kind == kind)
            .unwrap();
        s.scale = 1.0;
        s
    }

    #[test]
    fn reference_points() {
        let prox = unit(RewardKind::TargetProximity);
        let mu = Sample(prox.params.targets[1].clone());
        assert_eq!(evaluate(&prox, Condition(1), &mu).unwrap(), 1.0);
        let zero = Sample(vec![0.0, 0.0]);
        assert_eq!(evaluate(&unit(RewardKind::Compactness), Condition(0), &zero).unwrap(), 0.0);
        let mut ring = unit(RewardKind::RingFit);
        ring.scale = 100.0;
        assert_eq!(evaluate(&ring, Condition(0), &Sample(vec![1.0, 0.0])).unwrap(), 0.0);
    }

    #[test]
    fn default_registry_at_origin() {
        // mu_0 = (2, 0), rho = 1, all scales 1:
        // exp(-4), -0, -(0 - 1)^2, 0
        let specs: Vec<_> = default_specs(4, 2, 2.0, 1.0)
            .into_iter()
            .map(|mut s| {
                s.scale = 1.0;
                s
            })
            .collect();
        let reg = RewardRegistry::new(specs).unwrap();
        let sv = reg.score_all(Condition(0), &Sample(vec![0.0, 0.0])).unwrap();
        assert_eq!(sv.values, vec![(-4.0f64).exp(), 0.0, -1.0, 0.0]);
    }

    #[test]
    fn score_all_calls_each_metric_once() {
        let reg = RewardRegistry::default_for(4, 2, 2.0, 1.0);
        let mut calls = 0;
        let sv = reg
            .score_all_with(Condition(2), &Sample(vec![0.3, -0.2]), |s, c, x| {
                calls += 1;
                evaluate(s, c, x)
            })
            .unwrap();
        assert_eq!(calls, 4);
        assert_eq!(sv.len(), 4);

        let single = RewardRegistry::new(vec![unit(RewardKind::Compactness)]).unwrap();
        assert_eq!(single.score_all(Condition(0), &Sample(vec![1.0, 1.0])).unwrap().len(), 1);
    }

    #[test]
    fn registry_validation() {
        assert!(RewardRegistry::new(vec![]).is_err());
        let a = unit(RewardKind::Compactness);
        assert!(RewardRegistry::new(vec![a.clone(), a.clone()]).is_err());
        let mut neg = a;
        neg.scale = -1.0;
        assert!(RewardRegistry::new(vec![neg]).is_err());
        assert!("bogus".parse::<RewardKind>().is_err());
        let prox = unit(RewardKind::TargetProximity);
        assert!(evaluate(&prox, Condition(9), &Sample(vec![0.0, 0.0])).is_err());
    }

    proptest! {
        #[test]
        fn scale_is_multiplicative(
            kind in 0usize..4, s in 1e-3f64..1e3,
            x0 in -5.0f64..5.0, x1 in -5.0f64..5.0, c in 0u32..4,
        ) {
            let kinds = [RewardKind::TargetProximity, RewardKind::Compactness,
                         RewardKind::AxisPreference, RewardKind::RingFit];
            let base = unit(kinds[kind]);
            let mut scaled = base.clone();
            scaled.scale = s;
            let x = Sample(vec![x0, x1]);
            let a = evaluate(&scaled, Condition(c), &x).unwrap();
            let b = evaluate(&base, Condition(c), &x).unwrap();
            prop_assert_eq!(a, s * b);
            prop_assert_eq!(a.to_bits(), evaluate(&scaled, Condition(c), &x).unwrap().to_bits());
        }

        #[test]
        fn ordering_survives_rescaling(
            kind in 0usize..4, s in 1e-3f64..1e3,
            x in prop::array::uniform2(-5.0f64..5.0), y in prop::array::uniform2(-5.0f64..5.0),
        ) {
            let kinds = [RewardKind::TargetProximity, RewardKind::Compactness,
                         RewardKind::AxisPreference, RewardKind::RingFit];
            let base = unit(kinds[kind]);
            let mut scaled = base.clone();
            scaled.scale = s;
            let (x, y) = (Sample(x.to_vec()), Sample(y.to_vec()));
            let c = Condition(1);
            let d1 = evaluate(&base, c, &x).unwrap() - evaluate(&base, c, &y).unwrap();
            let ds = evaluate(&scaled, c, &x).unwrap() - evaluate(&scaled, c, &y).unwrap();
            // Rounding can flip the sign only when the unscaled difference is
            // at the level of one ulp.
            prop_assume!(d1.abs() > 1e-12);
            prop_assert_eq!(d1.signum(), ds.signum());
        }
    }
}
