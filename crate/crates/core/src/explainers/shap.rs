//! Shapley values over the tokens of one segment. Absent tokens are replaced
//! by the replacement token; the value of a coalition is the metric score.
//!
//! Segments up to `exact_shap_max_tokens` tokens enumerate all `2^d`
//! coalitions. Longer segments average marginal contributions over sampled
//! permutations, each walked in both directions.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::corpus::EvalInstance;
use crate::error::Result;
use crate::metrics::{Metric, MetricRequest};

use super::{instance_seed_key, masked_tokens, segment_rng, ExplainerConfig, Scorer};

pub fn shap(
    metric: &dyn Metric,
    instance: &EvalInstance,
    segment: usize,
    config: &ExplainerConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    let request = MetricRequest::from_instance(instance);
    if request.segment(segment).is_empty() {
        return Ok(Vec::new());
    }
    let mut scorer = Scorer::new(metric, config.memoize);
    let mut rng = segment_rng(config.seed, instance_seed_key(&instance.id), segment);
    Ok(shap_with(&mut scorer, &request, segment, config, &mut rng)?.1)
}

fn mask_of(bits: usize, d: usize) -> Vec<bool> {
    (0..d).map(|i| bits & (1 << i) != 0).collect()
}

/// Shapley values from a full table of coalition values, where bit `i` of
/// the index marks player `i` as present.
pub fn exact_shapley(values: &[f64]) -> Vec<f64> {
    let d = values.len().trailing_zeros() as usize;
    assert_eq!(values.len(), 1 << d, "coalition table must have 2^d entries");
    // weight(s) = s! (d - s - 1)! / d!
    let mut fact = vec![1.0f64; d + 1];
    for i in 1..=d {
        fact[i] = fact[i - 1] * i as f64;
    }
    let weights: Vec<f64> = (0..d).map(|s| fact[s] * fact[d - s - 1] / fact[d]).collect();
    let mut phi = vec![0.0; d];
    for (coalition, &v) in values.iter().enumerate() {
        let size = coalition.count_ones() as usize;
        for (i, p) in phi.iter_mut().enumerate() {
            let bit = 1 << i;
            if coalition & bit == 0 {
                *p += weights[size] * (values[coalition | bit] - v);
            }
        }
    }
    phi
}

pub(crate) fn shap_with(
    scorer: &mut Scorer<'_>,
    request: &MetricRequest,
    segment: usize,
    config: &ExplainerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<f64>)> {
    let tokens = request.segment(segment);
    let d = tokens.len();
    let perturb = |keep: &[bool]| {
        request.with_segment(segment, masked_tokens(tokens, keep, &config.replacement_token))
    };

    if d <= config.exact_shap_max_tokens {
        let batch = (0..1usize << d).map(|bits| perturb(&mask_of(bits, d))).collect();
        let values = scorer.score(batch)?;
        let full = values[(1 << d) - 1];
        return Ok((full, exact_shapley(&values)));
    }

    // Each pass: coalitions grown from empty to full along one order.
    let mut orders = Vec::with_capacity(2 * config.permutations);
    let mut perm: Vec<usize> = (0..d).collect();
    for _ in 0..config.permutations {
        perm.shuffle(rng);
        orders.push(perm.clone());
        orders.push(perm.iter().rev().copied().collect());
    }
    let mut batch = Vec::with_capacity(1 + orders.len() * d);
    batch.push(request.clone());
    batch.push(perturb(&vec![false; d]));
    for order in &orders {
        let mut keep = vec![false; d];
        for &i in order {
            keep[i] = true;
            batch.push(perturb(&keep));
        }
    }
    let values = scorer.score(batch)?;
    let (full, empty) = (values[0], values[1]);
    let mut phi = vec![0.0; d];
    let mut cursor = 2;
    for order in &orders {
        let mut prev = empty;
        for &i in order {
            let v = values[cursor];
            phi[i] += v - prev;
            prev = v;
            cursor += 1;
        }
    }
    let passes = orders.len() as f64;
    phi.iter_mut().for_each(|p| *p /= passes);
    Ok((full, phi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Segment;
    use crate::metrics::{Additive, TokenF1};
    use std::collections::BTreeMap;

    fn instance(gt: &str, hyp: &str) -> EvalInstance {
        EvalInstance {
            id: "shap".into(),
            system: "s".into(),
            language_pair: String::new(),
            ground_truths: vec![Segment::new(gt)],
            hypothesis: Segment::new(hyp),
            human_scores: BTreeMap::new(),
        }
    }

    #[test]
    fn two_player_additive_game() {
        // v(∅)=0, v({a})=0.5, v({b})=0.4, v({a,b})=0.9
        let phi = exact_shapley(&[0.0, 0.5, 0.4, 0.9]);
        assert!((phi[0] - 0.5).abs() < 1e-15);
        assert!((phi[1] - 0.4).abs() < 1e-15);

        let metric = Additive::new([("a", 0.5), ("b", 0.4)]);
        let phi = shap(&metric, &instance("g", "a b"), 1, &ExplainerConfig::shap()).unwrap();
        assert!((phi[0] - 0.5).abs() < 1e-12 && (phi[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn single_player() {
        let phi = shap(&TokenF1, &instance("a b", "a"), 1, &ExplainerConfig::shap()).unwrap();
        // full: P=1, R=0.5 -> 2/3; masked: 0
        assert!((phi[0] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn symmetric_tokens_share_credit() {
        let metric = Additive::new([("a", 0.3), ("b", 0.1)]);
        let phi = shap(&metric, &instance("g", "a b a"), 1, &ExplainerConfig::shap()).unwrap();
        assert!((phi[0] - phi[2]).abs() < 1e-15);
    }

    #[test]
    fn sampled_path_is_efficient_and_additive_exact() {
        let words: Vec<String> = (0..10).map(|i| format!("w{i}")).collect();
        let metric = Additive::new(words.iter().enumerate().map(|(i, w)| (w.clone(), i as f64 / 10.0)));
        let config = ExplainerConfig::shap();
        let phi = shap(&metric, &instance("g", &words.join(" ")), 1, &config).unwrap();
        for (i, p) in phi.iter().enumerate() {
            assert!((p - i as f64 / 10.0).abs() < 1e-12);
        }

        let phi = shap(&TokenF1, &instance("w1 w3 w5 x", &words.join(" ")), 1, &config).unwrap();
        let full = crate::metrics::builtin_token_f1(&[vec!["w1".into(), "w3".into(), "w5".into(), "x".into()]], &words);
        let sum: f64 = phi.iter().sum();
        // all-masked hypothesis scores 0
        assert!((sum - full).abs() < 1e-12);
    }
}
