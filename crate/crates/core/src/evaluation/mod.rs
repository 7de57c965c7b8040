//! Meta-evaluation against human judgements.

mod significance;
mod stats;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::boost::{boost_dataset, BmxParams, ScoredInstance};
use crate::corpus::{Dataset, EvalInstance};
use crate::error::{Error, Result};
use crate::metrics::Metric;

pub use significance::{bonferroni, permute_both_test, Resampling, ALPHA, DEFAULT_RESAMPLES, MAX_EXACT_ITEMS};
pub use stats::{fractional_ranks, kendall, pearson, spearman};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coefficient {
    Pearson,
    Spearman,
    Kendall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Segment,
    System,
}

pub fn correlation(coefficient: Coefficient, x: &[f64], y: &[f64]) -> Result<f64> {
    match coefficient {
        Coefficient::Pearson => pearson(x, y),
        Coefficient::Spearman => spearman(x, y),
        Coefficient::Kendall => kendall(x, y),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CorrelationSpec {
    pub coefficient: Coefficient,
    pub level: Level,
    pub aspect: String,
}

impl CorrelationSpec {
    pub fn new(coefficient: Coefficient, level: Level, aspect: impl Into<String>) -> Self {
        CorrelationSpec {
            coefficient,
            level,
            aspect: aspect.into(),
        }
    }
}

impl std::str::FromStr for Coefficient {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pearson" => Ok(Coefficient::Pearson),
            "spearman" => Ok(Coefficient::Spearman),
            "kendall" => Ok(Coefficient::Kendall),
            other => Err(Error::invalid(format!("unknown coefficient `{other}`"))),
        }
    }
}

impl std::str::FromStr for CorrelationSpec {
    type Err = Error;

    /// `coefficient:level:aspect`, e.g. `kendall:system:coherence`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.splitn(3, ':').collect();
        let [coef, level, aspect] = parts.as_slice() else {
            return Err(Error::invalid(format!(
                "correlation spec `{s}` must look like coefficient:level:aspect"
            )));
        };
        let coefficient = coef.parse()?;
        let level = match *level {
            "segment" => Level::Segment,
            "system" => Level::System,
            other => return Err(Error::invalid(format!("unknown level `{other}`"))),
        };
        Ok(CorrelationSpec::new(coefficient, level, *aspect))
    }
}

impl std::fmt::Display for CorrelationSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let coef = match self.coefficient {
            Coefficient::Pearson => "pearson",
            Coefficient::Spearman => "spearman",
            Coefficient::Kendall => "kendall",
        };
        let level = match self.level {
            Level::Segment => "segment",
            Level::System => "system",
        };
        write!(f, "{coef}:{level}:{}", self.aspect)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemScore {
    pub system: String,
    pub metric: f64,
    pub human: f64,
    pub count: usize,
}

/// Per-system means of metric and human scores, ordered by system name.
pub fn system_scores(instances: &[&EvalInstance], scores: &[f64], aspect: &str) -> Result<Vec<SystemScore>> {
    if instances.len() != scores.len() {
        return Err(Error::invalid("one score per instance is required"));
    }
    let mut acc: BTreeMap<&str, (f64, f64, usize)> = BTreeMap::new();
    for (inst, &s) in instances.iter().zip(scores) {
        let h = inst.human(aspect)?;
        let e = acc.entry(inst.system.as_str()).or_default();
        e.0 += s;
        e.1 += h;
        e.2 += 1;
    }
    Ok(acc
        .into_iter()
        .map(|(system, (m, h, c))| SystemScore {
            system: system.to_string(),
            metric: m / c as f64,
            human: h / c as f64,
            count: c,
        })
        .collect())
}

/// Aligned item-level vectors (segments or systems) for several score columns.
pub(crate) struct Items {
    pub human: Vec<f64>,
    pub columns: Vec<Vec<f64>>,
}

pub(crate) fn items(
    instances: &[&EvalInstance],
    columns: &[&[f64]],
    aspect: &str,
    level: Level,
) -> Result<Items> {
    match level {
        Level::Segment => Ok(Items {
            human: instances
                .iter()
                .map(|i| i.human(aspect))
                .collect::<Result<_>>()?,
            columns: columns.iter().map(|c| c.to_vec()).collect(),
        }),
        Level::System => {
            let mut human = Vec::new();
            let mut out = Vec::with_capacity(columns.len());
            for (k, col) in columns.iter().enumerate() {
                let sys = system_scores(instances, col, aspect)?;
                if k == 0 {
                    human = sys.iter().map(|s| s.human).collect();
                }
                out.push(sys.iter().map(|s| s.metric).collect());
            }
            if columns.is_empty() {
                human = system_scores(instances, &vec![0.0; instances.len()], aspect)?
                    .iter()
                    .map(|s| s.human)
                    .collect();
            }
            Ok(Items { human, columns: out })
        }
    }
}

/// Instances grouped by language pair, in sorted order.
pub(crate) fn by_language_pair(dataset: &Dataset) -> BTreeMap<&str, Vec<usize>> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, inst) in dataset.instances.iter().enumerate() {
        groups.entry(inst.language_pair.as_str()).or_default().push(i);
    }
    groups
}

pub(crate) fn setting_label(language_pair: &str) -> String {
    if language_pair.is_empty() {
        "all".to_string()
    } else {
        language_pair.to_string()
    }
}

pub(crate) fn check_aspects(dataset: &Dataset, specs: &[CorrelationSpec]) -> Result<()> {
    for spec in specs {
        for inst in &dataset.instances {
            inst.human(&spec.aspect)?;
        }
    }
    Ok(())
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedCorrelation(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub setting: String,
    pub language_pair: String,
    pub spec: CorrelationSpec,
    pub items: usize,
    /// `None` when the correlation is undefined (e.g. constant scores).
    pub baseline: Option<f64>,
    pub boosted: Option<f64>,
    pub delta: Option<f64>,
    pub p_value: Option<f64>,
    pub significant: bool,
    pub significant_corrected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub alpha: f64,
    pub family_size: usize,
    pub significant_before: usize,
    pub significant_after: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub resamples: usize,
    pub seed: u64,
    /// Overrides the Bonferroni family size (defaults to the number of tests).
    pub family_size: Option<usize>,
    pub jobs: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            resamples: DEFAULT_RESAMPLES,
            seed: 0,
            family_size: None,
            jobs: 0,
        }
    }
}

/// Boosts the dataset with `params` and compares boosted against original
/// correlations for every language pair and spec.
pub fn evaluate(
    metric: &dyn Metric,
    dataset: &Dataset,
    params: &BmxParams,
    specs: &[CorrelationSpec],
    options: &EvalOptions,
) -> Result<EvalReport> {
    check_aspects(dataset, specs)?;
    let scored = boost_dataset(metric, dataset, params, options.jobs)?;
    evaluate_scores(dataset, &scored, specs, options)
}

/// Report from already boosted scores (aligned with the dataset instances).
pub fn evaluate_scores(
    dataset: &Dataset,
    scored: &[ScoredInstance],
    specs: &[CorrelationSpec],
    options: &EvalOptions,
) -> Result<EvalReport> {
    if scored.len() != dataset.len() {
        return Err(Error::invalid("scored instances must align with the dataset"));
    }
    check_aspects(dataset, specs)?;
    let mut rows = Vec::new();
    for (lp, idx) in by_language_pair(dataset) {
        let instances: Vec<&EvalInstance> = idx.iter().map(|&i| &dataset.instances[i]).collect();
        let s0: Vec<f64> = idx.iter().map(|&i| scored[i].s0).collect();
        let s1: Vec<f64> = idx.iter().map(|&i| scored[i].s1).collect();
        for (k, spec) in specs.iter().enumerate() {
            let view = items(&instances, &[&s0, &s1], &spec.aspect, spec.level)?;
            let (base, boosted) = (&view.columns[0], &view.columns[1]);
            let baseline = defined(correlation(spec.coefficient, base, &view.human))?;
            let boosted_corr = defined(correlation(spec.coefficient, boosted, &view.human))?;
            let delta = baseline.zip(boosted_corr).map(|(b, s)| s - b);
            let p_value = match delta {
                Some(_) => defined(permute_both_test(
                    base,
                    boosted,
                    &view.human,
                    spec.coefficient,
                    Resampling::Random {
                        resamples: options.resamples,
                        seed: crate::seed::derive_seed(options.seed, &[crate::seed::fnv1a(lp.as_bytes()), k as u64]),
                    },
                ))?,
                None => None,
            };
            rows.push(ReportRow {
                setting: setting_label(lp),
                language_pair: lp.to_string(),
                spec: spec.clone(),
                items: view.human.len(),
                baseline,
                boosted: boosted_corr,
                delta,
                p_value,
                significant: p_value.is_some_and(|p| p <= ALPHA),
                significant_corrected: false,
            });
        }
    }

    let tested: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].p_value.is_some()).collect();
    let family_size = options.family_size.unwrap_or(tested.len()).max(1);
    let p_values: Vec<f64> = tested.iter().map(|&i| rows[i].p_value.unwrap_or(1.0)).collect();
    let flags = bonferroni(&p_values, family_size.max(p_values.len()))?;
    for (&i, flag) in tested.iter().zip(flags) {
        rows[i].significant_corrected = flag;
    }
    Ok(EvalReport {
        significant_before: rows.iter().filter(|r| r.significant).count(),
        significant_after: rows.iter().filter(|r| r.significant_corrected).count(),
        rows,
        alpha: ALPHA,
        family_size: family_size.max(p_values.len()),
    })
}

impl EvalReport {
    /// Plain-text table: ORIG and BMX columns, `+` marks an improvement, `*`
    /// significance at α and `**` significance after Bonferroni correction.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "null".to_string(), |x| format!("{x:.4}"));
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12} {:<14} {:<9} {:<8} {:>8} {:>9} {:>8} {:>9}",
            "setting", "aspect", "corr", "level", "ORIG", "BMX", "delta", "p"
        );
        for r in &self.rows {
            let improved = if r.delta.is_some_and(|d| d > 0.0) { "+" } else { " " };
            let stars = if r.significant_corrected {
                "**"
            } else if r.significant {
                "*"
            } else {
                ""
            };
            let spec = r.spec.to_string();
            let mut parts = spec.splitn(3, ':');
            let (coef, level) = (parts.next().unwrap_or(""), parts.next().unwrap_or(""));
            let _ = writeln!(
                out,
                "{:<12} {:<14} {:<9} {:<8} {:>8} {:>8}{} {:>8} {:>7}{:<2}",
                r.setting,
                r.spec.aspect,
                coef,
                level,
                fmt(r.baseline),
                fmt(r.boosted),
                improved,
                r.delta.map_or_else(|| "null".to_string(), |d| format!("{d:+.4}")),
                r.p_value.map_or_else(|| "null".to_string(), |p| format!("{p:.4}")),
                stars,
            );
        }
        let _ = writeln!(
            out,
            "significant: {} before / {} after Bonferroni (family size {}, alpha {})",
            self.significant_before, self.significant_after, self.family_size, self.alpha
        );
        out
    }
}

/// Runs the boost pipeline once per seed and returns the mean pairwise Pearson
/// correlation between the boosted score vectors.
pub fn stability_check(
    metric: &dyn Metric,
    dataset: &Dataset,
    params: &BmxParams,
    seeds: &[u64],
    jobs: usize,
) -> Result<f64> {
    if seeds.len() < 2 {
        return Err(Error::invalid("stability needs at least two runs"));
    }
    let runs = seeds
        .iter()
        .map(|&seed| {
            let mut p = params.clone();
            p.explainer.seed = seed;
            Ok(boost_dataset(metric, dataset, &p, jobs)?
                .into_iter()
                .map(|s| s.s1)
                .collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..runs.len() {
        for j in i + 1..runs.len() {
            total += pearson(&runs[i], &runs[j])?;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}
