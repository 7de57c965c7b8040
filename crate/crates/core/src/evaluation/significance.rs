//! Paired permutation test for a difference of correlations, and Bonferroni
//! correction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{correlation, Coefficient};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

pub const DEFAULT_RESAMPLES: usize = 1000;
pub const ALPHA: f64 = 0.05;
const MAX_REDRAWS: u64 = 16;
/// Largest item count accepted by exact enumeration.
pub const MAX_EXACT_ITEMS: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum Resampling {
    /// Monte Carlo swaps; `p = (#{δ* ≥ δ} + 1) / (resamples + 1)`.
    Random { resamples: usize, seed: u64 },
    /// All `2^n` swap patterns; `p = #{δ* ≥ δ} / #defined patterns`.
    Exact,
}

fn swapped(a: &[f64], b: &[f64], swap: impl Fn(usize) -> bool) -> (Vec<f64>, Vec<f64>) {
    (0..a.len())
        .map(|i| if swap(i) { (b[i], a[i]) } else { (a[i], b[i]) })
        .unzip()
}

fn delta(coef: Coefficient, a: &[f64], b: &[f64], human: &[f64]) -> Result<f64> {
    Ok(correlation(coef, b, human)? - correlation(coef, a, human)?)
}

/// One-sided permute-both test that `scores_b` correlates better with
/// `human` than `scores_a`. Each resample swaps the two metrics' scores on
/// every item independently with probability 1/2.
pub fn permute_both_test(
    scores_a: &[f64],
    scores_b: &[f64],
    human: &[f64],
    coefficient: Coefficient,
    resampling: Resampling,
) -> Result<f64> {
    if scores_a.len() != scores_b.len() || scores_a.len() != human.len() {
        return Err(Error::invalid("permutation test inputs must be aligned"));
    }
    let observed = delta(coefficient, scores_a, scores_b, human)?;
    match resampling {
        Resampling::Random { resamples, seed } => {
            if resamples == 0 {
                return Err(Error::invalid("resamples must be at least 1"));
            }
            let exceed = (0..resamples)
                .into_par_iter()
                .map(|r| -> Result<bool> {
                    for attempt in 0..MAX_REDRAWS {
                        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[r as u64, attempt]));
                        let flips: Vec<bool> = (0..scores_a.len()).map(|_| rng.random_bool(0.5)).collect();
                        let (a, b) = swapped(scores_a, scores_b, |i| flips[i]);
                        match delta(coefficient, &a, &b, human) {
                            Ok(d) => return Ok(d >= observed),
                            Err(Error::UndefinedCorrelation(_)) => continue,
                            Err(e) => return Err(e),
                        }
                    }
                    Err(Error::UndefinedCorrelation(format!(
                        "resample {r} stayed undefined after {MAX_REDRAWS} redraws"
                    )))
                })
                .collect::<Result<Vec<bool>>>()?
                .into_iter()
                .filter(|&b| b)
                .count();
            Ok((exceed + 1) as f64 / (resamples + 1) as f64)
        }
        Resampling::Exact => {
            let n = scores_a.len();
            if n > MAX_EXACT_ITEMS {
                return Err(Error::invalid(format!(
                    "exact enumeration limited to {MAX_EXACT_ITEMS} items, got {n}"
                )));
            }
            let (defined, exceed) = (0u64..1 << n)
                .into_par_iter()
                .map(|pattern| {
                    let (a, b) = swapped(scores_a, scores_b, |i| pattern & (1 << i) != 0);
                    match delta(coefficient, &a, &b, human) {
                        Ok(d) => Ok((1u64, u64::from(d >= observed))),
                        Err(Error::UndefinedCorrelation(_)) => Ok((0, 0)),
                        Err(e) => Err(e),
                    }
                })
                .try_reduce(|| (0, 0), |x, y| Ok((x.0 + y.0, x.1 + y.1)))?;
            Ok(exceed as f64 / defined as f64)
        }
    }
}

/// Significance flags at α = 0.05 after dividing by `family_size`.
pub fn bonferroni(p_values: &[f64], family_size: usize) -> Result<Vec<bool>> {
    if family_size < p_values.len() || family_size == 0 {
        return Err(Error::invalid(format!(
            "family size {family_size} is smaller than the {} tests",
            p_values.len()
        )));
    }
    let threshold = ALPHA / family_size as f64;
    Ok(p_values.iter().map(|&p| p <= threshold).collect())
}
