//! Boosting black-box text generation metrics with their own explanations.
//!
//! A metric's score is explained with a model-agnostic explainer (erasure,
//! LIME or SHAP), the token importances are folded into one number with a
//! power mean, and that number is blended back into the original score.
//! Calibration picks the power-mean exponent and blend weight on annotated
//! data; evaluation measures correlation with human judgements and tests the
//! improvement for significance.

pub mod aggregate;
pub mod boost;
pub mod calibration;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod explainers;
pub mod metrics;
mod parallel;
pub mod seed;

pub use aggregate::{aggregate, power_mean, regularize};
pub use boost::{boost, boost_dataset, explain_dataset, BmxParams, BoostedMetric, ScoredInstance};
pub use corpus::{load_dataset, make_splits, tokenize, Dataset, EvalInstance, Format, Segment, SplitPlan};
pub use error::{Error, Result};
pub use explainers::{explain, Attribution, ExplainerConfig, ExplainerKind};
pub use metrics::{score_batch, Metric, MetricError, MetricHandle, MetricRequest};
