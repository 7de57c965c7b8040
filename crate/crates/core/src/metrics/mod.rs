//! Black-box segment-level metrics.
//!
//! A metric maps a [`MetricRequest`] (tokenized ground truths plus a
//! tokenized hypothesis) to one real score. Explainers only ever talk to
//! metrics through [`score_batch`], which handles chunking and validation.

mod bridge;
mod builtin;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::EvalInstance;

pub use bridge::{BridgeMetric, BridgeOptions, Endpoint, PROTOCOL_VERSION};
pub use builtin::{
    builtin_additive, builtin_metric, builtin_token_f1, builtin_token_overlap, Additive, Constant,
    LengthPenalizedOverlap, TokenF1, TokenOverlap, BUILTIN_NAMES,
};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("metric failed on chunk {chunk}: {message}")]
    ChunkFailed { chunk: usize, message: String },
    #[error("metric returned non-finite score {value} for request {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("metric returned {got} scores for {expected} requests")]
    LengthMismatch { expected: usize, got: usize },
    #[error("bridge handshake failed: {0}")]
    Handshake(String),
    #[error("bridge timed out after {0:?}")]
    Timeout(std::time::Duration),
    #[error("bridge protocol violation: {0}")]
    Protocol(String),
    #[error("bridge I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Input to a metric: token lists, possibly perturbed by an explainer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MetricRequest {
    #[serde(rename = "gts")]
    pub ground_truths: Vec<Vec<String>>,
    #[serde(rename = "hyp")]
    pub hypothesis: Vec<String>,
}

impl MetricRequest {
    pub fn new(ground_truths: Vec<Vec<String>>, hypothesis: Vec<String>) -> Self {
        MetricRequest {
            ground_truths,
            hypothesis,
        }
    }

    pub fn from_instance(instance: &EvalInstance) -> Self {
        MetricRequest {
            ground_truths: instance
                .ground_truths
                .iter()
                .map(|g| g.token_strings())
                .collect(),
            hypothesis: instance.hypothesis.token_strings(),
        }
    }

    /// Segments in explanation order: ground truths first, hypothesis last.
    pub fn segment(&self, index: usize) -> &[String] {
        if index < self.ground_truths.len() {
            &self.ground_truths[index]
        } else {
            &self.hypothesis
        }
    }

    pub fn segment_count(&self) -> usize {
        self.ground_truths.len() + 1
    }

    /// Copy of the request with one segment swapped for `tokens`.
    pub fn with_segment(&self, index: usize, tokens: Vec<String>) -> Self {
        let mut out = self.clone();
        if index < out.ground_truths.len() {
            out.ground_truths[index] = tokens;
        } else {
            out.hypothesis = tokens;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Builtin,
    External,
}

pub const DEFAULT_BATCH_CAPACITY: usize = 4096;

/// A black-box scorer. Scoring must be a pure function of the request.
pub trait Metric: Send + Sync {
    fn name(&self) -> &str;

    fn kind(&self) -> MetricKind {
        MetricKind::Builtin
    }

    /// Largest chunk handed to [`Metric::score_chunk`] at once.
    fn batch_capacity(&self) -> usize {
        DEFAULT_BATCH_CAPACITY
    }

    /// Whether concurrent calls must be serialized by the caller.
    fn single_flight(&self) -> bool {
        false
    }

    fn score_chunk(&self, chunk: &[MetricRequest]) -> Result<Vec<f64>, MetricError>;
}

pub type MetricHandle = Arc<dyn Metric>;

/// Scores a batch, chunked to the metric's capacity. Output order matches input
/// order; every score is checked to be finite.
pub fn score_batch(metric: &dyn Metric, batch: &[MetricRequest]) -> Result<Vec<f64>, MetricError> {
    let capacity = metric.batch_capacity().max(1);
    let mut out = Vec::with_capacity(batch.len());
    for (chunk_idx, chunk) in batch.chunks(capacity).enumerate() {
        let scores = metric.score_chunk(chunk).map_err(|e| match e {
            MetricError::ChunkFailed { message, .. } => MetricError::ChunkFailed {
                chunk: chunk_idx,
                message,
            },
            other => other,
        })?;
        if scores.len() != chunk.len() {
            return Err(MetricError::LengthMismatch {
                expected: chunk.len(),
                got: scores.len(),
            });
        }
        let offset = out.len();
        if let Some((i, &v)) = scores.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(MetricError::NonFinite {
                index: offset + i,
                value: v,
            });
        }
        out.extend(scores);
    }
    Ok(out)
}

impl<M: Metric + ?Sized> Metric for Arc<M> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn kind(&self) -> MetricKind {
        (**self).kind()
    }
    fn batch_capacity(&self) -> usize {
        (**self).batch_capacity()
    }
    fn single_flight(&self) -> bool {
        (**self).single_flight()
    }
    fn score_chunk(&self, chunk: &[MetricRequest]) -> Result<Vec<f64>, MetricError> {
        (**self).score_chunk(chunk)
    }
}

impl<M: Metric + ?Sized> Metric for &M {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn kind(&self) -> MetricKind {
        (**self).kind()
    }
    fn batch_capacity(&self) -> usize {
        (**self).batch_capacity()
    }
    fn single_flight(&self) -> bool {
        (**self).single_flight()
    }
    fn score_chunk(&self, chunk: &[MetricRequest]) -> Result<Vec<f64>, MetricError> {
        (**self).score_chunk(chunk)
    }
}

/// A metric backed by a plain function of one request.
pub struct FnMetric<F> {
    name: String,
    f: F,
}

impl<F> FnMetric<F>
where
    F: Fn(&MetricRequest) -> f64 + Send + Sync,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        FnMetric { name: name.into(), f }
    }
}

impl<F> Metric for FnMetric<F>
where
    F: Fn(&MetricRequest) -> f64 + Send + Sync,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn score_chunk(&self, chunk: &[MetricRequest]) -> Result<Vec<f64>, MetricError> {
        Ok(chunk.iter().map(&self.f).collect())
    }
}

/// Wrapper counting how many requests and chunks reach the inner metric.
pub struct CountingMetric<M> {
    inner: M,
    requests: AtomicUsize,
    calls: AtomicUsize,
}

impl<M: Metric> CountingMetric<M> {
    pub fn new(inner: M) -> Self {
        CountingMetric {
            inner,
            requests: AtomicUsize::new(0),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.requests.store(0, Ordering::SeqCst);
        self.calls.store(0, Ordering::SeqCst);
    }

    pub fn inner(&self) -> &M {
        &self.inner
    }
}

impl<M: Metric> Metric for CountingMetric<M> {
    fn name(&self) -> &str {
        self.inner.name()
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
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.requests.fetch_add(chunk.len(), Ordering::SeqCst);
        self.inner.score_chunk(chunk)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(gts: &[&[&str]], hyp: &[&str]) -> MetricRequest {
        MetricRequest::new(
            gts.iter()
                .map(|g| g.iter().map(|s| s.to_string()).collect())
                .collect(),
            hyp.iter().map(|s| s.to_string()).collect(),
        )
    }

    struct Tiny;
    impl Metric for Tiny {
        fn name(&self) -> &str {
            "tiny"
        }
        fn batch_capacity(&self) -> usize {
            2
        }
        fn score_chunk(&self, chunk: &[MetricRequest]) -> Result<Vec<f64>, MetricError> {
            if chunk.iter().any(|r| r.hypothesis.is_empty()) {
                return Err(MetricError::ChunkFailed {
                    chunk: 0,
                    message: "empty".into(),
                });
            }
            Ok(chunk.iter().map(|r| r.hypothesis.len() as f64).collect())
        }
    }

    #[test]
    fn overlap_examples() {
        let m = TokenOverlap;
        let batch = vec![
            req(&[&["a", "b"]], &["a", "b"]),
            req(&[&["a", "b"]], &["c", "d"]),
            req(&[&["a", "b"]], &["a", "x"]),
        ];
        assert_eq!(score_batch(&m, &batch).unwrap(), vec![1.0, 0.0, 0.5]);
    }

    #[test]
    fn chunking_preserves_order_and_reports_chunk() {
        let counting = CountingMetric::new(Tiny);
        let batch: Vec<_> = (1..=5)
            .map(|n| req(&[&["g"]], &vec!["t"; n]))
            .collect();
        let scores = score_batch(&counting, &batch).unwrap();
        assert_eq!(scores, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(counting.calls(), 3);
        assert_eq!(counting.requests(), 5);

        let mut bad = batch.clone();
        bad[3] = req(&[&["g"]], &[]);
        match score_batch(&Tiny, &bad).unwrap_err() {
            MetricError::ChunkFailed { chunk, .. } => assert_eq!(chunk, 1),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn non_finite_scores_rejected() {
        let m = FnMetric::new("nan", |r: &MetricRequest| {
            if r.hypothesis.len() == 2 {
                f64::NAN
            } else {
                0.0
            }
        });
        let batch = vec![req(&[&["a"]], &["a"]), req(&[&["a"]], &["a", "b"])];
        assert!(matches!(
            score_batch(&m, &batch),
            Err(MetricError::NonFinite { index: 1, .. })
        ));
    }

    #[test]
    fn with_segment_targets_hypothesis_last() {
        let r = req(&[&["a"], &["b"]], &["c"]);
        assert_eq!(r.segment(2), ["c"]);
        let r2 = r.with_segment(1, vec![]);
        assert!(r2.ground_truths[1].is_empty());
        assert_eq!(r2.hypothesis, ["c"]);
    }
}
