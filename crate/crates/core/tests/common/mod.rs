#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use bmx_core::metrics::{MetricError, MetricRequest};
use bmx_core::{Dataset, EvalInstance, Metric, Segment};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ASPECT: &str = "quality";
/// Metric scores are the raw quality sum divided by this.
pub const SUM_SCALE: f64 = 10.0;

/// Sum of token qualities over every ground truth and the hypothesis.
/// Tokens outside the table (including the replacement token) add nothing.
pub struct QualitySum {
    pub table: HashMap<String, f64>,
}

impl QualitySum {
    pub fn score(&self, request: &MetricRequest) -> f64 {
        let q = |t: &String| self.table.get(t).copied().unwrap_or(0.0);
        let gts: f64 = request.ground_truths.iter().flatten().map(q).sum();
        let hyp: f64 = request.hypothesis.iter().map(q).sum();
        (gts + hyp) / SUM_SCALE
    }
}

impl Metric for QualitySum {
    fn name(&self) -> &str {
        "quality-sum"
    }

    fn score_chunk(&self, chunk: &[MetricRequest]) -> Result<Vec<f64>, MetricError> {
        Ok(chunk.iter().map(|r| self.score(r)).collect())
    }
}

pub struct Fixture {
    pub dataset: Dataset,
    pub metric: QualitySum,
}

fn words(rng: &mut ChaCha8Rng, vocab: &[&String], n: usize) -> String {
    (0..n)
        .map(|_| vocab[rng.random_range(0..vocab.len())].as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Short segments scored by the length-confounded quality sum. Human score
/// is the mean token quality over all tokens plus small noise. Each system
/// draws its hypothesis tokens from its own band of the quality range.
pub fn quality_fixture(sources: usize, systems: usize, seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab: Vec<String> = (0..60).map(|i| format!("w{i:02}")).collect();
    let table: HashMap<String, f64> = vocab
        .iter()
        .map(|w| (w.clone(), rng.random_range(0.1..1.0)))
        .collect();
    let mut by_quality: Vec<&String> = vocab.iter().collect();
    by_quality.sort_by(|a, b| table[*a].total_cmp(&table[*b]));
    let all: Vec<&String> = vocab.iter().collect();
    let mut instances = Vec::new();
    for s in 0..sources {
        let gt_len = rng.random_range(1..=2);
        let gt = words(&mut rng, &all, gt_len);
        for sys in 0..systems {
            let lo = sys * 30 / systems.max(1);
            let band = &by_quality[lo..lo + 30];
            let hyp_len = rng.random_range(1..=6);
            let hyp = words(&mut rng, band, hyp_len);
            let tokens: Vec<&str> = gt.split(' ').chain(hyp.split(' ')).collect();
            let mean = tokens.iter().map(|t| table[*t]).sum::<f64>() / tokens.len() as f64;
            let human = mean + rng.random_range(-0.01..0.01);
            instances.push(EvalInstance {
                id: format!("src{s:03}-sys{sys}"),
                system: format!("sys{sys}"),
                language_pair: String::new(),
                ground_truths: vec![Segment::new(gt.clone())],
                hypothesis: Segment::new(hyp),
                human_scores: BTreeMap::from([(ASPECT.to_string(), human)]),
            });
        }
    }
    Fixture {
        dataset: Dataset::new("quality-fixture", instances).unwrap(),
        metric: QualitySum { table },
    }
}

// Independent reference implementations.

pub fn oracle_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx.sqrt() * syy.sqrt())
}

/// Average rank by counting: rank = #smaller + (#equal + 1) / 2.
pub fn oracle_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|v| {
            let less = x.iter().filter(|u| *u < v).count() as f64;
            let equal = x.iter().filter(|u| *u == v).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn oracle_spearman(x: &[f64], y: &[f64]) -> f64 {
    oracle_pearson(&oracle_ranks(x), &oracle_ranks(y))
}

/// Tau-b by enumerating every pair.
pub fn oracle_kendall(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let (mut concordant, mut discordant, mut tie_x, mut tie_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i] - x[j];
            let dy = y[i] - y[j];
            if dx == 0.0 && dy == 0.0 {
                continue;
            } else if dx == 0.0 {
                tie_x += 1;
            } else if dy == 0.0 {
                tie_y += 1;
            } else if (dx > 0.0) == (dy > 0.0) {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let n1 = (concordant + discordant + tie_x) as f64;
    let n2 = (concordant + discordant + tie_y) as f64;
    (concordant - discordant) as f64 / (n1 * n2).sqrt()
}
