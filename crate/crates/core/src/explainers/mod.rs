//! Model-agnostic token attributions for a metric's score.
//!
//! Every segment (each ground truth, then the hypothesis) is explained on its
//! own while the other segments stay fixed. All perturbations of one segment
//! go to the metric as a single batch.

mod erasure;
mod lime;
mod shap;

use std::collections::{HashMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::EvalInstance;
use crate::error::{Error, Result};
use crate::metrics::{score_batch, Metric, MetricError, MetricRequest};
use crate::seed::{derive_seed, fnv1a};

pub use erasure::erasure;
pub use lime::{lime, LimeSettings};
pub use shap::{exact_shapley, shap};

pub const DEFAULT_REPLACEMENT_TOKEN: &str = "UNKWORDZ";
pub const DEFAULT_LIME_SAMPLES: usize = 100;
pub const DEFAULT_SHAP_PERMUTATIONS: usize = 10;
pub const DEFAULT_EXACT_SHAP_MAX_TOKENS: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExplainerKind {
    Erasure,
    Lime,
    Shap,
}

impl std::str::FromStr for ExplainerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "erasure" => Ok(ExplainerKind::Erasure),
            "lime" => Ok(ExplainerKind::Lime),
            "shap" => Ok(ExplainerKind::Shap),
            other => Err(Error::invalid(format!("unknown explainer `{other}`"))),
        }
    }
}

impl std::fmt::Display for ExplainerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ExplainerKind::Erasure => "erasure",
            ExplainerKind::Lime => "lime",
            ExplainerKind::Shap => "shap",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainerConfig {
    pub kind: ExplainerKind,
    /// LIME: samples per segment. SHAP: sampled permutations per segment
    /// (each walked forwards and backwards). Unused by erasure.
    pub permutations: usize,
    pub replacement_token: String,
    pub seed: u64,
    pub exact_shap_max_tokens: usize,
    /// Score identical perturbed inputs once per `explain` call. Off by
    /// default so every perturbation reaches the metric.
    #[serde(default)]
    pub memoize: bool,
    #[serde(default)]
    pub lime: LimeSettings,
}

impl ExplainerConfig {
    pub fn new(kind: ExplainerKind) -> Self {
        let permutations = match kind {
            ExplainerKind::Erasure => 1,
            ExplainerKind::Lime => DEFAULT_LIME_SAMPLES,
            ExplainerKind::Shap => DEFAULT_SHAP_PERMUTATIONS,
        };
        ExplainerConfig {
            kind,
            permutations,
            replacement_token: DEFAULT_REPLACEMENT_TOKEN.to_string(),
            seed: 0,
            exact_shap_max_tokens: DEFAULT_EXACT_SHAP_MAX_TOKENS,
            memoize: false,
            lime: LimeSettings::default(),
        }
    }

    pub fn erasure() -> Self {
        Self::new(ExplainerKind::Erasure)
    }

    pub fn lime() -> Self {
        Self::new(ExplainerKind::Lime)
    }

    pub fn shap() -> Self {
        Self::new(ExplainerKind::Shap)
    }

    pub fn with_permutations(mut self, n: usize) -> Self {
        self.permutations = n;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_memoize(mut self, memoize: bool) -> Self {
        self.memoize = memoize;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.permutations == 0 {
            return Err(Error::invalid("permutations must be at least 1"));
        }
        if self.exact_shap_max_tokens == 0 {
            return Err(Error::invalid("exact_shap_max_tokens must be at least 1"));
        }
        Ok(())
    }
}

/// Token-aligned importance scores, one vector per segment in the order
/// ground truths then hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub base_score: f64,
    pub per_segment: Vec<Vec<f64>>,
}

impl Attribution {
    /// All importance scores concatenated in segment order.
    pub fn concatenated(&self) -> Vec<f64> {
        self.per_segment.iter().flatten().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.per_segment.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Scores perturbed requests for one `explain` call, optionally caching
/// repeated inputs.
pub(crate) struct Scorer<'a> {
    metric: &'a dyn Metric,
    cache: Option<HashMap<MetricRequest, f64>>,
}

impl<'a> Scorer<'a> {
    pub(crate) fn new(metric: &'a dyn Metric, memoize: bool) -> Self {
        Scorer {
            metric,
            cache: memoize.then(HashMap::new),
        }
    }

    pub(crate) fn score(&mut self, batch: Vec<MetricRequest>) -> Result<Vec<f64>, MetricError> {
        let Some(cache) = self.cache.as_mut() else {
            return score_batch(self.metric, &batch);
        };
        let mut pending: Vec<MetricRequest> = Vec::new();
        let mut seen: HashSet<&MetricRequest> = HashSet::new();
        for req in &batch {
            if !cache.contains_key(req) && seen.insert(req) {
                pending.push(req.clone());
            }
        }
        if !pending.is_empty() {
            let scores = score_batch(self.metric, &pending)?;
            cache.extend(pending.into_iter().zip(scores));
        }
        Ok(batch.iter().map(|r| cache[r]).collect())
    }
}

/// Per-segment random generator: a function of the config seed, the seed key
/// (normally derived from the instance id) and the segment index only.
pub(crate) fn segment_rng(config_seed: u64, seed_key: u64, segment: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(config_seed, &[seed_key, segment as u64]))
}

pub fn instance_seed_key(id: &str) -> u64 {
    fnv1a(id.as_bytes())
}

/// Explains the metric's score for one instance.
pub fn explain(metric: &dyn Metric, instance: &EvalInstance, config: &ExplainerConfig) -> Result<Attribution> {
    let request = MetricRequest::from_instance(instance);
    explain_request(metric, &request, instance_seed_key(&instance.id), config)
}

/// Explains an arbitrary request. `seed_key` selects the random stream.
pub fn explain_request(
    metric: &dyn Metric,
    request: &MetricRequest,
    seed_key: u64,
    config: &ExplainerConfig,
) -> Result<Attribution> {
    config.validate()?;
    let mut scorer = Scorer::new(metric, config.memoize);
    let mut base_score = None;
    let mut per_segment = Vec::with_capacity(request.segment_count());
    for segment in 0..request.segment_count() {
        if request.segment(segment).is_empty() {
            per_segment.push(Vec::new());
            continue;
        }
        let (base, phi) = match config.kind {
            ExplainerKind::Erasure => erasure::erasure_with(&mut scorer, request, segment)?,
            ExplainerKind::Lime => {
                let mut rng = segment_rng(config.seed, seed_key, segment);
                lime::lime_with(&mut scorer, request, segment, config, &mut rng)?
            }
            ExplainerKind::Shap => {
                let mut rng = segment_rng(config.seed, seed_key, segment);
                shap::shap_with(&mut scorer, request, segment, config, &mut rng)?
            }
        };
        base_score.get_or_insert(base);
        per_segment.push(phi);
    }
    let base_score = match base_score {
        Some(b) => b,
        None => scorer.score(vec![request.clone()])?[0],
    };
    Ok(Attribution {
        base_score,
        per_segment,
    })
}

/// Replaces the tokens whose mask entry is `false`.
pub(crate) fn masked_tokens(tokens: &[String], keep: &[bool], replacement: &str) -> Vec<String> {
    tokens
        .iter()
        .zip(keep)
        .map(|(t, &k)| if k { t.clone() } else { replacement.to_string() })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Segment;
    use crate::metrics::{Additive, Constant, CountingMetric, TokenF1};
    use std::collections::BTreeMap;

    fn instance(gts: &[&str], hyp: &str) -> EvalInstance {
        EvalInstance {
            id: "x".into(),
            system: "s".into(),
            language_pair: String::new(),
            ground_truths: gts.iter().map(|g| Segment::new(*g)).collect(),
            hypothesis: Segment::new(hyp),
            human_scores: BTreeMap::new(),
        }
    }

    #[test]
    fn erasure_shape_over_source_and_hypothesis() {
        let inst = instance(&["Ich habe einen Hund"], "I have a cat");
        let att = explain(&TokenF1, &inst, &ExplainerConfig::erasure()).unwrap();
        assert_eq!(att.per_segment.iter().map(Vec::len).collect::<Vec<_>>(), [4, 4]);
        assert_eq!(att.base_score, 0.0);
    }

    #[test]
    fn single_token_hypothesis() {
        let inst = instance(&["a"], "a");
        let att = explain(&TokenF1, &inst, &ExplainerConfig::erasure()).unwrap();
        assert_eq!(att.per_segment[1], vec![1.0]);
    }

    #[test]
    fn memoization_deduplicates_within_a_call() {
        let inst = instance(&["a a a"], "b b");
        let counting = CountingMetric::new(Constant(0.3));
        explain(&counting, &inst, &ExplainerConfig::erasure().with_memoize(true)).unwrap();
        // base, gt with one "a" removed, hyp with one "b" removed
        assert_eq!(counting.requests(), 3);
        counting.reset();
        explain(&counting, &inst, &ExplainerConfig::erasure()).unwrap();
        assert_eq!(counting.requests(), 4 + 3);
    }

    #[test]
    fn lime_accounting_for_many_references() {
        let refs: Vec<String> = (0..11).map(|i| format!("ref {i} words here")).collect();
        let refs: Vec<&str> = refs.iter().map(String::as_str).collect();
        let inst = instance(&refs, "the hypothesis text");
        let counting = CountingMetric::new(TokenF1);
        let config = ExplainerConfig::lime();
        let att = explain(&counting, &inst, &config).unwrap();
        assert_eq!(att.per_segment.len(), 12);
        assert_eq!(counting.requests(), 12 * (100 + 1));
    }

    #[test]
    fn zero_permutations_rejected() {
        let inst = instance(&["a"], "a");
        let config = ExplainerConfig::lime().with_permutations(0);
        assert!(explain(&TokenF1, &inst, &config).is_err());
    }

    #[test]
    fn additive_recovery_by_all_explainers() {
        let metric = Additive::new([("a", 0.5), ("b", 0.4), ("c", 0.2), ("d", 0.0)]);
        let inst = instance(&["src"], "a b c d");
        let expected = [0.5, 0.4, 0.2, 0.0];
        for config in [ExplainerConfig::erasure(), ExplainerConfig::shap()] {
            let att = explain(&metric, &inst, &config).unwrap();
            for (got, want) in att.per_segment[1].iter().zip(expected) {
                assert!((got - want).abs() < 1e-12, "{:?}: {got} vs {want}", config.kind);
            }
            assert_eq!(att.per_segment[0], vec![0.0]);
        }
        let att = explain(&metric, &inst, &ExplainerConfig::lime().with_permutations(500)).unwrap();
        for (got, want) in att.per_segment[1].iter().zip(expected) {
            assert!((got - want).abs() < 0.05, "lime: {got} vs {want}");
        }
    }
}
