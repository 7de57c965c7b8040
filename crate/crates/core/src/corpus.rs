//! Evaluation datasets: segments, annotated instances, loading and
//! source-stratified cross-validation splits.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::seed::fnv1a;

/// A whitespace token and its byte offset into the owning text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub offset: usize,
}

/// Splits on Unicode whitespace. Offsets are byte offsets into `text`.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                tokens.push(Token {
                    text: text[s..i].to_string(),
                    offset: s,
                });
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        tokens.push(Token {
            text: text[s..].to_string(),
            offset: s,
        });
    }
    tokens
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub text: String,
    pub tokens: Vec<Token>,
}

impl Segment {
    pub fn new(text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        Segment { text, tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token_strings(&self) -> Vec<String> {
        self.tokens.iter().map(|t| t.text.clone()).collect()
    }

    /// The text with whitespace runs collapsed to single spaces.
    pub fn normalized(&self) -> String {
        self.token_strings().join(" ")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalInstance {
    pub id: String,
    pub system: String,
    /// Empty for summarization data.
    pub language_pair: String,
    /// Sources and/or references.
    pub ground_truths: Vec<Segment>,
    pub hypothesis: Segment,
    pub human_scores: BTreeMap<String, f64>,
}

impl EvalInstance {
    pub fn human(&self, aspect: &str) -> Result<f64> {
        self.human_scores
            .get(aspect)
            .copied()
            .ok_or_else(|| Error::MissingAspect {
                id: self.id.clone(),
                aspect: aspect.to_string(),
            })
    }

    /// Number of explainable segments (ground truths plus the hypothesis).
    pub fn segment_count(&self) -> usize {
        self.ground_truths.len() + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LevelHint {
    Segment,
    System,
    #[default]
    Both,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub name: String,
    pub instances: Vec<EvalInstance>,
    pub level_hint: LevelHint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Jsonl,
    Tsv,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" => Ok(Format::Jsonl),
            "tsv" => Ok(Format::Tsv),
            other => Err(Error::invalid(format!("unknown dataset format `{other}`"))),
        }
    }
}

impl Dataset {
    /// Builds a dataset, checking instance invariants and id uniqueness.
    pub fn new(name: impl Into<String>, instances: Vec<EvalInstance>) -> Result<Self> {
        let mut seen = HashSet::new();
        for inst in &instances {
            if inst.ground_truths.is_empty() {
                return Err(Error::invalid(format!("instance `{}` has no ground truth", inst.id)));
            }
            if inst.hypothesis.is_empty() {
                return Err(Error::invalid(format!("instance `{}` has an empty hypothesis", inst.id)));
            }
            if !seen.insert(inst.id.as_str()) {
                return Err(Error::DuplicateId(inst.id.clone()));
            }
        }
        Ok(Dataset {
            name: name.into(),
            instances,
            level_hint: LevelHint::Both,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&EvalInstance> {
        self.instances.iter().find(|i| i.id == id)
    }

    /// A new dataset holding only the listed ids, in dataset order.
    pub fn subset(&self, ids: &[String]) -> Dataset {
        let keep: HashSet<&str> = ids.iter().map(String::as_str).collect();
        Dataset {
            name: self.name.clone(),
            instances: self
                .instances
                .iter()
                .filter(|i| keep.contains(i.id.as_str()))
                .cloned()
                .collect(),
            level_hint: self.level_hint,
        }
    }

    /// Writes the dataset in the JSONL interchange schema.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for inst in &self.instances {
            let record = Record {
                id: inst.id.clone(),
                system: inst.system.clone(),
                lp: inst.language_pair.clone(),
                gts: inst.ground_truths.iter().map(|g| g.text.clone()).collect(),
                hyp: inst.hypothesis.text.clone(),
                human: inst.human_scores.clone(),
            };
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct Record {
    id: String,
    system: String,
    lp: String,
    gts: Vec<String>,
    hyp: String,
    human: BTreeMap<String, f64>,
}

pub fn load_dataset(path: impl AsRef<Path>, format: Format) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_dataset(BufReader::new(file), format, name)
}

pub fn read_dataset<R: BufRead>(reader: R, format: Format, name: String) -> Result<Dataset> {
    let mut instances = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = match format {
            Format::Jsonl => parse_jsonl_record(&line, line_no)?,
            Format::Tsv => {
                if line_no == 1 && line.starts_with("id\t") {
                    continue;
                }
                parse_tsv_record(&line, line_no)?
            }
        };
        instances.push(parsed);
    }
    Dataset::new(name, instances)
}

fn parse_err(line: usize, field: &str, message: impl fmt::Display) -> Error {
    Error::Parse {
        line,
        field: field.to_string(),
        message: message.to_string(),
    }
}

fn str_field(obj: &serde_json::Map<String, serde_json::Value>, key: &str, line: usize) -> Result<String> {
    match obj.get(key) {
        Some(serde_json::Value::String(s)) => Ok(s.clone()),
        Some(other) => Err(parse_err(line, key, format!("expected string, got {other}"))),
        None => Err(parse_err(line, key, "missing")),
    }
}

/// Map visitor that rejects repeated keys, which `serde_json::Value` would
/// silently collapse.
struct UniqueScores(BTreeMap<String, f64>);

impl<'de> Deserialize<'de> for UniqueScores {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = UniqueScores;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object of aspect -> number")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Self::Value, A::Error> {
                let mut out = BTreeMap::new();
                while let Some((k, v)) = map.next_entry::<String, f64>()? {
                    if out.insert(k.clone(), v).is_some() {
                        return Err(serde::de::Error::custom(format!("aspect `{k}` appears twice")));
                    }
                }
                Ok(UniqueScores(out))
            }
        }
        deserializer.deserialize_map(V)
    }
}

#[derive(Deserialize)]
struct HumanOnly {
    human: UniqueScores,
}

fn parse_jsonl_record(line: &str, line_no: usize) -> Result<EvalInstance> {
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| parse_err(line_no, "<record>", e))?;
    let obj = value
        .as_object()
        .ok_or_else(|| parse_err(line_no, "<record>", "expected a JSON object"))?;

    let id = str_field(obj, "id", line_no)?;
    let system = str_field(obj, "system", line_no)?;
    let lp = str_field(obj, "lp", line_no)?;
    let hyp = str_field(obj, "hyp", line_no)?;

    let gts = match obj.get("gts") {
        Some(serde_json::Value::Array(items)) => items
            .iter()
            .map(|v| {
                v.as_str()
                    .map(Segment::new)
                    .ok_or_else(|| parse_err(line_no, "gts", "expected an array of strings"))
            })
            .collect::<Result<Vec<_>>>()?,
        Some(_) => return Err(parse_err(line_no, "gts", "expected an array of strings")),
        None => return Err(parse_err(line_no, "gts", "missing")),
    };
    if gts.is_empty() {
        return Err(parse_err(line_no, "gts", "at least one ground truth is required"));
    }

    let human = match obj.get("human") {
        Some(_) => {
            serde_json::from_str::<HumanOnly>(line)
                .map_err(|e| parse_err(line_no, "human", e))?
                .human
                .0
        }
        None => return Err(parse_err(line_no, "human", "missing")),
    };
    if let Some((aspect, _)) = human.iter().find(|(_, v)| !v.is_finite()) {
        return Err(parse_err(line_no, "human", format!("aspect `{aspect}` is not finite")));
    }

    let hypothesis = Segment::new(hyp);
    if hypothesis.is_empty() {
        return Err(parse_err(line_no, "hyp", "hypothesis has no tokens"));
    }
    Ok(EvalInstance {
        id,
        system,
        language_pair: lp,
        ground_truths: gts,
        hypothesis,
        human_scores: human,
    })
}

/// TSV columns: id, system, lp, gt, hyp, score. The score is stored under the
/// aspect name `score`.
fn parse_tsv_record(line: &str, line_no: usize) -> Result<EvalInstance> {
    const COLUMNS: [&str; 6] = ["id", "system", "lp", "gt", "hyp", "score"];
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != COLUMNS.len() {
        let field = COLUMNS.get(cols.len()).copied().unwrap_or("<extra>");
        return Err(parse_err(
            line_no,
            field,
            format!("expected {} tab-separated columns, got {}", COLUMNS.len(), cols.len()),
        ));
    }
    let score: f64 = cols[5]
        .trim()
        .parse()
        .map_err(|e| parse_err(line_no, "score", e))?;
    if !score.is_finite() {
        return Err(parse_err(line_no, "score", "not finite"));
    }
    let hypothesis = Segment::new(cols[4]);
    if hypothesis.is_empty() {
        return Err(parse_err(line_no, "hyp", "hypothesis has no tokens"));
    }
    Ok(EvalInstance {
        id: cols[0].to_string(),
        system: cols[1].to_string(),
        language_pair: cols[2].to_string(),
        ground_truths: vec![Segment::new(cols[3])],
        hypothesis,
        human_scores: BTreeMap::from([("score".to_string(), score)]),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub calibration_ids: Vec<String>,
    pub evaluation_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub folds: Vec<Fold>,
}

/// Key identifying the source text of an instance: hash of its first ground truth.
pub fn source_key(instance: &EvalInstance) -> u64 {
    instance
        .ground_truths
        .first()
        .map(|g| fnv1a(g.text.as_bytes()))
        .unwrap_or(0)
}

/// Cross-validation splits stratified by source text.
///
/// Source groups are shuffled with `seed` and cut into `n_folds` consecutive
/// calibration parts of `ceil(groups / n_folds)` groups each, with the last
/// part taking the remainder (never leaving a part empty). Each fold evaluates
/// on the complement of its calibration part, so no source text is shared
/// between the two sides of a fold.
pub fn make_splits(dataset: &Dataset, n_folds: usize, seed: u64) -> Result<SplitPlan> {
    if n_folds < 2 {
        return Err(Error::invalid("n_folds must be at least 2"));
    }
    let mut groups: BTreeMap<u64, Vec<String>> = BTreeMap::new();
    for inst in &dataset.instances {
        groups.entry(source_key(inst)).or_default().push(inst.id.clone());
    }
    if groups.len() < n_folds {
        return Err(Error::invalid(format!(
            "{} source groups cannot fill {} folds",
            groups.len(),
            n_folds
        )));
    }

    let mut groups: Vec<Vec<String>> = groups.into_values().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups.shuffle(&mut rng);

    let chunk = groups.len().div_ceil(n_folds);
    let mut parts: Vec<Vec<String>> = Vec::with_capacity(n_folds);
    let mut remaining = groups.len();
    let mut iter = groups.into_iter();
    for fold in 0..n_folds {
        let folds_after = n_folds - fold - 1;
        let take = chunk.min(remaining - folds_after);
        remaining -= take;
        parts.push(iter.by_ref().take(take).flatten().collect());
    }

    let order: HashMap<&str, usize> = dataset
        .instances
        .iter()
        .enumerate()
        .map(|(i, inst)| (inst.id.as_str(), i))
        .collect();
    let folds = parts
        .iter()
        .map(|cal| {
            let mut calibration_ids = cal.clone();
            calibration_ids.sort_by_key(|id| order[id.as_str()]);
            let cal_set: HashSet<&str> = cal.iter().map(String::as_str).collect();
            let evaluation_ids = dataset
                .instances
                .iter()
                .filter(|i| !cal_set.contains(i.id.as_str()))
                .map(|i| i.id.clone())
                .collect();
            Fold {
                calibration_ids,
                evaluation_ids,
            }
        })
        .collect();
    Ok(SplitPlan { folds })
}
