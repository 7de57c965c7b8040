//! The boosted metric: `s1 = w * s0 + (1 - w) * power_mean(attributions)`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::aggregate::aggregate;
use crate::corpus::{Dataset, EvalInstance};
use crate::error::{Error, Result};
use crate::explainers::{explain, explain_request, Attribution, ExplainerConfig};
use crate::metrics::{Metric, MetricError, MetricKind, MetricRequest};
use crate::parallel::try_map;
use crate::seed::{fnv1a, hash_tokens};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BmxParams {
    pub p: f64,
    pub w: f64,
    pub iterations: usize,
    pub explainer: ExplainerConfig,
}

impl BmxParams {
    pub fn new(p: f64, w: f64, explainer: ExplainerConfig) -> Self {
        BmxParams {
            p,
            w,
            iterations: 1,
            explainer,
        }
    }

    pub fn with_iterations(mut self, iterations: usize) -> Self {
        self.iterations = iterations;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.w) {
            return Err(Error::invalid(format!("w = {} is outside [0, 1]", self.w)));
        }
        if !self.p.is_finite() {
            return Err(Error::invalid(format!("p = {} is not finite", self.p)));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be at least 1"));
        }
        self.explainer.validate()
    }
}

/// Linear combination of original and aggregated scores. The endpoints return
/// their operand untouched so `w = 1` reproduces the original bit for bit.
pub fn combine(w: f64, s0: f64, s_hat: f64) -> f64 {
    if w == 1.0 {
        s0
    } else if w == 0.0 {
        s_hat
    } else {
        w * s0 + (1.0 - w) * s_hat
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationScore {
    /// Score of the metric being explained in this iteration.
    pub s: f64,
    pub s_hat: f64,
    /// Combined score produced by this iteration.
    pub combined: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredInstance {
    pub id: String,
    pub s0: f64,
    pub s_hat: f64,
    pub s1: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub history: Vec<IterationScore>,
}

/// One iteration's scores from a precomputed attribution.
pub fn score_from_attribution(id: &str, attribution: &Attribution, p: f64, w: f64) -> Result<ScoredInstance> {
    let s0 = attribution.base_score;
    let s_hat = aggregate(attribution, p)?;
    let s1 = combine(w, s0, s_hat);
    Ok(ScoredInstance {
        id: id.to_string(),
        s0,
        s_hat,
        s1,
        history: vec![IterationScore {
            s: s0,
            s_hat,
            combined: s1,
        }],
    })
}

/// A metric composed with one round of explanation, aggregation and linear
/// combination, usable wherever a plain metric is.
///
/// Explanations of arbitrary requests are seeded from the request content.
pub struct BoostedMetric<'a> {
    inner: Arc<dyn Metric + 'a>,
    p: f64,
    w: f64,
    explainer: ExplainerConfig,
    name: String,
}

impl<'a> BoostedMetric<'a> {
    pub fn new(inner: Arc<dyn Metric + 'a>, p: f64, w: f64, explainer: ExplainerConfig) -> Self {
        let name = format!("bmx({})", inner.name());
        BoostedMetric {
            inner,
            p,
            w,
            explainer,
            name,
        }
    }

    fn score_one(&self, request: &MetricRequest) -> Result<f64> {
        let mut key = fnv1a(b"bmx-request");
        for gt in &request.ground_truths {
            key = hash_tokens(key, gt);
        }
        key = hash_tokens(key, &request.hypothesis);
        let att = explain_request(self.inner.as_ref(), request, key, &self.explainer)?;
        if att.is_empty() {
            // nothing left to explain in a fully deleted input
            return Ok(att.base_score);
        }
        Ok(combine(self.w, att.base_score, aggregate(&att, self.p)?))
    }
}

impl Metric for BoostedMetric<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> MetricKind {
        self.inner.kind()
    }

    fn batch_capacity(&self) -> usize {
        self.inner.batch_capacity()
    }

    fn single_flight(&self) -> bool {
        self.inner.single_flight()
    }

    fn score_chunk(&self, chunk: &[MetricRequest]) -> Result<Vec<f64>, MetricError> {
        chunk
            .iter()
            .map(|r| {
                self.score_one(r).map_err(|e| match e {
                    Error::Metric(m) => m,
                    other => MetricError::ChunkFailed {
                        chunk: 0,
                        message: other.to_string(),
                    },
                })
            })
            .collect()
    }
}

/// Boosts one instance. With `iterations > 1` the combined metric of the
/// previous round is itself explained end to end.
pub fn boost(metric: &dyn Metric, instance: &EvalInstance, params: &BmxParams) -> Result<ScoredInstance> {
    params.validate()?;
    let attribution = explain(metric, instance, &params.explainer)?;
    let mut scored = score_from_attribution(&instance.id, &attribution, params.p, params.w)?;

    let mut current: Arc<dyn Metric + '_> = Arc::new(metric);
    for _ in 1..params.iterations {
        current = Arc::new(BoostedMetric::new(
            current,
            params.p,
            params.w,
            params.explainer.clone(),
        ));
        let attribution = explain(current.as_ref(), instance, &params.explainer)?;
        let s = attribution.base_score;
        let s_hat = aggregate(&attribution, params.p)?;
        let combined = combine(params.w, s, s_hat);
        scored.history.push(IterationScore { s, s_hat, combined });
        scored.s_hat = s_hat;
        scored.s1 = combined;
    }
    Ok(scored)
}

/// Explains every instance once. `jobs = 0` uses all cores.
pub fn explain_dataset(
    metric: &dyn Metric,
    dataset: &Dataset,
    config: &ExplainerConfig,
    jobs: usize,
) -> Result<Vec<Attribution>> {
    config.validate()?;
    try_map(jobs, metric.single_flight(), &dataset.instances, |inst| {
        explain(metric, inst, config)
    })
}

pub fn boost_dataset(
    metric: &dyn Metric,
    dataset: &Dataset,
    params: &BmxParams,
    jobs: usize,
) -> Result<Vec<ScoredInstance>> {
    params.validate()?;
    try_map(jobs, metric.single_flight(), &dataset.instances, |inst| {
        boost(metric, inst, params)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Segment;
    use crate::metrics::{Additive, TokenF1};
    use std::collections::BTreeMap;

    fn instance(id: &str, gt: &str, hyp: &str) -> EvalInstance {
        EvalInstance {
            id: id.into(),
            system: "s".into(),
            language_pair: String::new(),
            ground_truths: vec![Segment::new(gt)],
            hypothesis: Segment::new(hyp),
            human_scores: BTreeMap::new(),
        }
    }

    #[test]
    fn combine_endpoints_and_midpoint() {
        assert!((combine(0.5, 0.6, 0.3) - 0.45).abs() < 1e-15);
        assert_eq!(combine(1.0, -0.0, 7.0).to_bits(), (-0.0f64).to_bits());
        assert_eq!(combine(0.0, 0.6, 0.3), 0.3);
    }

    #[test]
    fn w_one_and_zero() {
        let inst = instance("a", "the cat sat", "the dog sat down");
        for explainer in [ExplainerConfig::erasure(), ExplainerConfig::lime(), ExplainerConfig::shap()] {
            let one = boost(&TokenF1, &inst, &BmxParams::new(3.0, 1.0, explainer.clone())).unwrap();
            assert_eq!(one.s1.to_bits(), one.s0.to_bits());
            let zero = boost(&TokenF1, &inst, &BmxParams::new(3.0, 0.0, explainer)).unwrap();
            assert_eq!(zero.s1, zero.s_hat);
        }
    }

    #[test]
    fn invalid_params() {
        let inst = instance("a", "x", "y");
        let e = ExplainerConfig::erasure();
        assert!(boost(&TokenF1, &inst, &BmxParams::new(1.0, 1.5, e.clone())).is_err());
        assert!(boost(&TokenF1, &inst, &BmxParams::new(f64::NAN, 0.5, e.clone())).is_err());
        assert!(boost(&TokenF1, &inst, &BmxParams::new(1.0, 0.5, e).with_iterations(0)).is_err());
    }

    #[test]
    fn second_iteration_explains_composite() {
        let metric = Additive::new([("a", 0.5), ("b", 0.25)]);
        let inst = instance("i", "g", "a b");
        let params = BmxParams::new(1.0, 0.5, ExplainerConfig::erasure()).with_iterations(2);
        let scored = boost(&metric, &inst, &params).unwrap();
        assert_eq!(scored.history.len(), 2);

        // Hand evaluation of the composite S1 = 0.5*S0 + 0.5*mean(reg(phi)).
        // phi over [g, a, b] is [0, a, b]; all non-negative.
        let s1 = |hyp: &[f64]| {
            let s0: f64 = hyp.iter().sum();
            let mut phi = vec![0.0];
            phi.extend_from_slice(hyp);
            let mean = phi.iter().map(|v| v + 1e-9).sum::<f64>() / phi.len() as f64;
            0.5 * s0 + 0.5 * mean
        };
        let full = s1(&[0.5, 0.25]);
        assert!((scored.history[1].s - full).abs() < 1e-12);
        assert!((scored.history[0].combined - full).abs() < 1e-12);
        // Erasure of the composite: S1(full) - S1(without token); deleting the
        // source token leaves an empty ground truth, which S1 scores as
        // 0.5*0.75 + 0.5*mean(reg([0.5, 0.25])).
        let no_src = 0.5 * 0.75 + 0.5 * ((0.5 + 0.25) / 2.0 + 1e-9);
        let phi = [full - no_src, full - s1(&[0.25]), full - s1(&[0.5])];
        // phi[0] is negative, so the whole vector is shifted before averaging
        let mean = crate::aggregate::regularize(&phi).iter().sum::<f64>() / 3.0;
        let expected = 0.5 * full + 0.5 * mean;
        assert!((scored.s1 - expected).abs() < 1e-12, "{} vs {}", scored.s1, expected);
    }

    #[test]
    fn deterministic_given_seed() {
        let inst = instance("x", "a b c d", "a c e f g");
        let params = BmxParams::new(-2.0, 0.4, ExplainerConfig::lime().with_seed(3));
        let a = boost(&TokenF1, &inst, &params).unwrap();
        let b = boost(&TokenF1, &inst, &params).unwrap();
        assert_eq!(a, b);
    }
}
