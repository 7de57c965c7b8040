use std::collections::{HashMap, HashSet};

use super::{Metric, MetricError, MetricRequest};

pub const BUILTIN_NAMES: [&str; 3] = ["token-f1", "overlap", "length-overlap"];

/// Looks up a table-free builtin metric by its CLI name.
pub fn builtin_metric(name: &str) -> Option<Box<dyn Metric>> {
    match name {
        "token-f1" => Some(Box::new(TokenF1)),
        "overlap" => Some(Box::new(TokenOverlap)),
        "length-overlap" => Some(Box::new(LengthPenalizedOverlap)),
        _ => None,
    }
}

fn gt_vocab(gts: &[Vec<String>]) -> HashSet<&str> {
    gts.iter().flatten().map(String::as_str).collect()
}

/// Fraction of hypothesis tokens found in any ground truth. Empty hypothesis scores 0.
pub fn builtin_token_overlap(gts: &[Vec<String>], hyp: &[String]) -> f64 {
    if hyp.is_empty() {
        return 0.0;
    }
    let vocab = gt_vocab(gts);
    let hits = hyp.iter().filter(|t| vocab.contains(t.as_str())).count();
    hits as f64 / hyp.len() as f64
}

/// Harmonic mean of token precision (hypothesis tokens present in any ground
/// truth) and recall (best ground truth's tokens present in the hypothesis).
pub fn builtin_token_f1(gts: &[Vec<String>], hyp: &[String]) -> f64 {
    if hyp.is_empty() {
        return 0.0;
    }
    let precision = builtin_token_overlap(gts, hyp);
    let hyp_vocab: HashSet<&str> = hyp.iter().map(String::as_str).collect();
    let recall = gts
        .iter()
        .filter(|g| !g.is_empty())
        .map(|g| g.iter().filter(|t| hyp_vocab.contains(t.as_str())).count() as f64 / g.len() as f64)
        .fold(0.0, f64::max);
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Sum of per-token values over the hypothesis; unknown tokens add nothing.
pub fn builtin_additive(_gts: &[Vec<String>], hyp: &[String], table: &HashMap<String, f64>) -> f64 {
    hyp.iter().map(|t| table.get(t).copied().unwrap_or(0.0)).sum()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TokenF1;

impl Metric for TokenF1 {
    fn name(&self) -> &str {
        "token-f1"
    }
    fn score_chunk(&self, chunk: &[MetricRequest]) -> Result<Vec<f64>, MetricError> {
        Ok(chunk
            .iter()
            .map(|r| builtin_token_f1(&r.ground_truths, &r.hypothesis))
            .collect())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TokenOverlap;

impl Metric for TokenOverlap {
    fn name(&self) -> &str {
        "overlap"
    }
    fn score_chunk(&self, chunk: &[MetricRequest]) -> Result<Vec<f64>, MetricError> {
        Ok(chunk
            .iter()
            .map(|r| builtin_token_overlap(&r.ground_truths, &r.hypothesis))
            .collect())
    }
}

/// Token overlap times a brevity penalty `exp(1 - ref_len / hyp_len)` when the
/// hypothesis is shorter than the shortest non-empty ground truth.
#[derive(Debug, Clone, Copy, Default)]
pub struct LengthPenalizedOverlap;

impl Metric for LengthPenalizedOverlap {
    fn name(&self) -> &str {
        "length-overlap"
    }
    fn score_chunk(&self, chunk: &[MetricRequest]) -> Result<Vec<f64>, MetricError> {
        Ok(chunk
            .iter()
            .map(|r| {
                let overlap = builtin_token_overlap(&r.ground_truths, &r.hypothesis);
                let ref_len = r
                    .ground_truths
                    .iter()
                    .map(Vec::len)
                    .filter(|&l| l > 0)
                    .min()
                    .unwrap_or(0);
                let hyp_len = r.hypothesis.len();
                if hyp_len == 0 || hyp_len >= ref_len {
                    overlap
                } else {
                    overlap * (1.0 - ref_len as f64 / hyp_len as f64).exp()
                }
            })
            .collect())
    }
}

/// Exactly additive oracle metric over hypothesis tokens.
#[derive(Debug, Clone, Default)]
pub struct Additive {
    pub table: HashMap<String, f64>,
}

impl Additive {
    pub fn new<I, S>(entries: I) -> Self
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        Additive {
            table: entries.into_iter().map(|(k, v)| (k.into(), v)).collect(),
        }
    }
}

impl Metric for Additive {
    fn name(&self) -> &str {
        "additive"
    }
    fn score_chunk(&self, chunk: &[MetricRequest]) -> Result<Vec<f64>, MetricError> {
        Ok(chunk
            .iter()
            .map(|r| builtin_additive(&r.ground_truths, &r.hypothesis, &self.table))
            .collect())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Constant(pub f64);

impl Metric for Constant {
    fn name(&self) -> &str {
        "constant"
    }
    fn score_chunk(&self, chunk: &[MetricRequest]) -> Result<Vec<f64>, MetricError> {
        Ok(vec![self.0; chunk.len()])
    }
}
