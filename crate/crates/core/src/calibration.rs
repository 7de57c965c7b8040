//! Grid search over the power-mean exponent `p` and blend weight `w`.
//!
//! Explanations are computed once per instance; every grid cell only
//! re-aggregates and re-combines them. A cell is "improving" for a setting
//! (language pair × objective) when its correlation beats the original
//! metric's there; the selected `p` and `w` are the medians of the improving
//! cells' values, taken independently.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::aggregate;
use crate::boost::{combine, explain_dataset, BmxParams};
use crate::corpus::{Dataset, EvalInstance};
use crate::error::{Error, Result};
use crate::evaluation::{by_language_pair, check_aspects, correlation, items, setting_label, CorrelationSpec};
use crate::explainers::{Attribution, ExplainerConfig};
use crate::metrics::Metric;

pub const DEFAULT_P_COUNT: usize = 600;
pub const DEFAULT_W_COUNT: usize = 6;
pub const P_RANGE: (f64, f64) = (-30.0, 30.0);

/// `n` equally spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let step = (hi - lo) / (n - 1) as f64;
            (0..n)
                .map(|i| if i == n - 1 { hi } else { lo + step * i as f64 })
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub p_values: Vec<f64>,
    pub w_values: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::with_counts(DEFAULT_P_COUNT, DEFAULT_W_COUNT)
    }
}

impl GridSpec {
    pub fn with_counts(p_count: usize, w_count: usize) -> Self {
        GridSpec {
            p_values: linspace(P_RANGE.0, P_RANGE.1, p_count),
            w_values: linspace(0.0, 1.0, w_count),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, values) in [("p", &self.p_values), ("w", &self.w_values)] {
            if values.is_empty() {
                return Err(Error::invalid(format!("{name} grid is empty")));
            }
            if values.iter().any(|v| !v.is_finite()) || values.windows(2).any(|w| w[0] > w[1]) {
                return Err(Error::invalid(format!("{name} grid must be finite and ascending")));
            }
        }
        if self.w_values.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::invalid("w grid must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Cells that differ from the original metric (`w != 1`).
    pub fn non_baseline_cells(&self) -> usize {
        self.p_values.len() * self.w_values.iter().filter(|&&w| w != 1.0).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovingCell {
    pub p: f64,
    pub w: f64,
    pub setting: String,
    pub spec: CorrelationSpec,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingBaseline {
    pub setting: String,
    pub spec: CorrelationSpec,
    pub correlation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub p: f64,
    pub w: f64,
    pub improving_cells: Vec<ImprovingCell>,
    pub baselines: Vec<SettingBaseline>,
    pub fallback_used: bool,
    /// Number of evaluated cells with `w != 1`.
    pub cells_evaluated: usize,
}

/// Standard median; even lengths average the two middle values.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    Some(if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    })
}

/// Fallback when nothing improves: keep the original metric.
pub const FALLBACK: (f64, f64) = (1.0, 1.0);

/// Medians of the improving cells' `p` and `w`, or [`FALLBACK`].
/// Returns `(p, w, fallback_used)`.
pub fn select_parameters(cells: &[ImprovingCell]) -> (f64, f64, bool) {
    let ps: Vec<f64> = cells.iter().map(|c| c.p).collect();
    let ws: Vec<f64> = cells.iter().map(|c| c.w).collect();
    match (median(&ps), median(&ws)) {
        (Some(p), Some(w)) => (p, w, false),
        _ => (FALLBACK.0, FALLBACK.1, true),
    }
}

/// Explains every instance once and sweeps the grid.
pub fn grid_search(
    metric: &dyn Metric,
    dataset: &Dataset,
    explainer: &ExplainerConfig,
    grid: &GridSpec,
    objectives: &[CorrelationSpec],
    jobs: usize,
) -> Result<CalibrationResult> {
    grid.validate()?;
    if objectives.is_empty() {
        return Err(Error::invalid("at least one calibration objective is required"));
    }
    check_aspects(dataset, objectives)?;
    let attributions = explain_dataset(metric, dataset, explainer, jobs)?;
    grid_search_cached(dataset, &attributions, grid, objectives)
}

struct Setting<'a> {
    label: String,
    spec: &'a CorrelationSpec,
    instances: Vec<&'a EvalInstance>,
    idx: Vec<usize>,
    baseline: Option<f64>,
}

/// Grid sweep over precomputed attributions (aligned with the dataset).
pub fn grid_search_cached(
    dataset: &Dataset,
    attributions: &[Attribution],
    grid: &GridSpec,
    objectives: &[CorrelationSpec],
) -> Result<CalibrationResult> {
    grid.validate()?;
    if attributions.len() != dataset.len() {
        return Err(Error::invalid("attributions must align with the dataset"));
    }
    if dataset.is_empty() {
        return Err(Error::invalid("cannot calibrate on an empty dataset"));
    }
    check_aspects(dataset, objectives)?;
    let s0: Vec<f64> = attributions.iter().map(|a| a.base_score).collect();

    let mut settings = Vec::new();
    for (lp, idx) in by_language_pair(dataset) {
        let instances: Vec<&EvalInstance> = idx.iter().map(|&i| &dataset.instances[i]).collect();
        let base: Vec<f64> = idx.iter().map(|&i| s0[i]).collect();
        for spec in objectives {
            let view = items(&instances, &[&base], &spec.aspect, spec.level)?;
            let baseline = match correlation(spec.coefficient, &view.columns[0], &view.human) {
                Ok(c) => Some(c),
                Err(Error::UndefinedCorrelation(_)) => None,
                Err(e) => return Err(e),
            };
            settings.push(Setting {
                label: setting_label(lp),
                spec,
                instances: instances.clone(),
                idx: idx.clone(),
                baseline,
            });
        }
    }

    let per_p: Vec<(Vec<ImprovingCell>, usize)> = grid
        .p_values
        .par_iter()
        .map(|&p| -> Result<(Vec<ImprovingCell>, usize)> {
            let s_hat: Vec<f64> = attributions
                .iter()
                .map(|a| aggregate(a, p))
                .collect::<Result<_>>()?;
            let mut found = Vec::new();
            let mut swept = 0;
            for &w in &grid.w_values {
                if w != 1.0 {
                    swept += 1;
                }
                let s1: Vec<f64> = s0.iter().zip(&s_hat).map(|(&a, &b)| combine(w, a, b)).collect();
                for setting in &settings {
                    let Some(baseline) = setting.baseline else { continue };
                    let col: Vec<f64> = setting.idx.iter().map(|&i| s1[i]).collect();
                    let view = items(&setting.instances, &[&col], &setting.spec.aspect, setting.spec.level)?;
                    let corr = match correlation(setting.spec.coefficient, &view.columns[0], &view.human) {
                        Ok(c) => c,
                        Err(Error::UndefinedCorrelation(_)) => continue,
                        Err(e) => return Err(e),
                    };
                    if corr > baseline {
                        found.push(ImprovingCell {
                            p,
                            w,
                            setting: setting.label.clone(),
                            spec: setting.spec.clone(),
                            delta: corr - baseline,
                        });
                    }
                }
            }
            Ok((found, swept))
        })
        .collect::<Result<_>>()?;

    let cells_evaluated = per_p.iter().map(|(_, n)| n).sum();
    let improving_cells: Vec<ImprovingCell> = per_p.into_iter().flat_map(|(c, _)| c).collect();
    let (p, w, fallback_used) = select_parameters(&improving_cells);
    Ok(CalibrationResult {
        p,
        w,
        improving_cells,
        baselines: settings
            .iter()
            .map(|s| SettingBaseline {
                setting: s.label.clone(),
                spec: s.spec.clone(),
                correlation: s.baseline,
            })
            .collect(),
        fallback_used,
        cells_evaluated,
    })
}

/// Averages the selected parameters of several calibration runs.
pub fn merge_calibrations(results: &[CalibrationResult]) -> Result<(f64, f64)> {
    if results.is_empty() {
        return Err(Error::invalid("no calibration results to merge"));
    }
    let n = results.len() as f64;
    Ok((
        results.iter().map(|r| r.p).sum::<f64>() / n,
        results.iter().map(|r| r.w).sum::<f64>() / n,
    ))
}

/// Reusable calibration outcome, written as JSON by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub p: f64,
    pub w: f64,
    pub explainer: ExplainerConfig,
    pub metric: String,
    pub objective: Vec<CorrelationSpec>,
    /// Unix seconds.
    pub created: u64,
    #[serde(default)]
    pub fallback_used: bool,
}

impl Profile {
    pub fn params(&self, iterations: usize) -> BmxParams {
        BmxParams::new(self.p, self.w, self.explainer.clone()).with_iterations(iterations)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}
