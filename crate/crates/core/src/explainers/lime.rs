//! Local linear surrogate over randomly masked copies of one segment.
//!
//! Sampling law: for each sample draw `k` uniformly from `1..=d`, then mask
//! `k` distinct positions chosen uniformly. Masked tokens become the
//! replacement token. The unmasked input is always the first row. Rows are
//! weighted by `exp(-D^2 / width^2)` with `D` the cosine distance between the
//! mask and the all-ones vector, and the surrogate is a ridge regression with
//! an unpenalized intercept.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::EvalInstance;
use crate::error::Result;
use crate::metrics::{Metric, MetricRequest};

use super::{instance_seed_key, masked_tokens, segment_rng, ExplainerConfig, Scorer};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimeSettings {
    pub kernel_width: f64,
    pub ridge_alpha: f64,
}

impl Default for LimeSettings {
    fn default() -> Self {
        LimeSettings {
            kernel_width: 25.0,
            ridge_alpha: 1.0,
        }
    }
}

/// LIME coefficients for one segment of an instance.
pub fn lime(
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
    Ok(lime_with(&mut scorer, &request, segment, config, &mut rng)?.1)
}

pub(crate) fn sample_masks(d: usize, samples: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<bool>> {
    let mut masks = Vec::with_capacity(samples + 1);
    masks.push(vec![true; d]);
    for _ in 0..samples {
        let k = rng.random_range(1..=d);
        let mut keep = vec![true; d];
        for pos in rand::seq::index::sample(rng, d, k) {
            keep[pos] = false;
        }
        masks.push(keep);
    }
    masks
}

fn proximity(mask: &[bool], width: f64) -> f64 {
    let ones = mask.iter().filter(|&&k| k).count() as f64;
    // cosine similarity with the all-ones vector; the all-zero mask gets 0
    let similarity = if ones == 0.0 {
        0.0
    } else {
        (ones / mask.len() as f64).sqrt()
    };
    let distance = 1.0 - similarity;
    (-(distance * distance) / (width * width)).exp()
}

/// Weighted ridge regression with an unpenalized intercept. Returns the
/// feature coefficients.
pub(crate) fn weighted_ridge(masks: &[Vec<bool>], targets: &[f64], weights: &[f64], alpha: f64) -> Vec<f64> {
    let d = masks[0].len();
    let total: f64 = weights.iter().sum();
    let mut x_mean = vec![0.0; d];
    let mut y_mean = 0.0;
    for ((mask, &y), &w) in masks.iter().zip(targets).zip(weights) {
        for (m, &bit) in x_mean.iter_mut().zip(mask) {
            if bit {
                *m += w;
            }
        }
        y_mean += w * y;
    }
    x_mean.iter_mut().for_each(|m| *m /= total);
    y_mean /= total;

    let mut gram = DMatrix::<f64>::zeros(d, d);
    let mut rhs = DVector::<f64>::zeros(d);
    let mut centered = vec![0.0; d];
    for ((mask, &y), &w) in masks.iter().zip(targets).zip(weights) {
        for (c, (&bit, &m)) in centered.iter_mut().zip(mask.iter().zip(&x_mean)) {
            *c = f64::from(u8::from(bit)) - m;
        }
        let dy = y - y_mean;
        for i in 0..d {
            let wi = w * centered[i];
            rhs[i] += wi * dy;
            for j in i..d {
                gram[(i, j)] += wi * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            gram[(i, j)] = gram[(j, i)];
        }
        gram[(i, i)] += alpha;
    }
    match gram.clone().cholesky() {
        Some(chol) => chol.solve(&rhs).iter().copied().collect(),
        None => gram
            .lu()
            .solve(&rhs)
            .map(|v| v.iter().copied().collect())
            .unwrap_or_else(|| vec![0.0; d]),
    }
}

pub(crate) fn lime_with(
    scorer: &mut Scorer<'_>,
    request: &MetricRequest,
    segment: usize,
    config: &ExplainerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<f64>)> {
    let tokens = request.segment(segment);
    let masks = sample_masks(tokens.len(), config.permutations, rng);
    let batch = masks
        .iter()
        .map(|keep| request.with_segment(segment, masked_tokens(tokens, keep, &config.replacement_token)))
        .collect();
    let scores = scorer.score(batch)?;
    let weights: Vec<f64> = masks
        .iter()
        .map(|m| proximity(m, config.lime.kernel_width))
        .collect();
    let coef = weighted_ridge(&masks, &scores, &weights, config.lime.ridge_alpha);
    Ok((scores[0], coef))
}
