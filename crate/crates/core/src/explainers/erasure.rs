use crate::corpus::EvalInstance;
use crate::error::Result;
use crate::metrics::{Metric, MetricRequest};

use super::Scorer;

/// Importance of each token as the score drop when that token is deleted
/// from the target segment. Issues one batch of `k + 1` requests for a
/// `k`-token segment.
pub fn erasure(metric: &dyn Metric, instance: &EvalInstance, segment: usize) -> Result<Vec<f64>> {
    let request = MetricRequest::from_instance(instance);
    let mut scorer = Scorer::new(metric, false);
    Ok(erasure_with(&mut scorer, &request, segment)?.1)
}

pub(crate) fn erasure_with(
    scorer: &mut Scorer<'_>,
    request: &MetricRequest,
    segment: usize,
) -> Result<(f64, Vec<f64>)> {
    let tokens = request.segment(segment);
    let mut batch = Vec::with_capacity(tokens.len() + 1);
    batch.push(request.clone());
    for i in 0..tokens.len() {
        let mut reduced = tokens.to_vec();
        reduced.remove(i);
        batch.push(request.with_segment(segment, reduced));
    }
    let scores = scorer.score(batch)?;
    let base = scores[0];
    Ok((base, scores[1..].iter().map(|s| base - s).collect()))
}
