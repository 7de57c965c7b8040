use std::collections::BTreeMap;
use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bmx(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bmx"))
        .args(args)
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = bmx(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    bmx(args).status.code().unwrap()
}

fn jsonl(text: &str) -> Vec<Value> {
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

struct Lcg(u64);

impl Lcg {
    fn next(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }
    fn below(&mut self, n: usize) -> usize {
        (self.next() * n as f64) as usize % n
    }
}

/// Additive-metric corpus whose human score is the mean token value of the
/// hypothesis, so length inflates the metric but not the humans.
fn write_fixture(dir: &Path, sources: usize, systems: usize) -> (PathBuf, PathBuf) {
    let mut rng = Lcg(7);
    let vocab: Vec<(String, f64)> = (0..40).map(|i| (format!("w{i:02}"), 0.1 + 0.9 * rng.next())).collect();
    let mut sorted = vocab.clone();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1));
    let mut lines = String::new();
    for s in 0..sources {
        let gt: Vec<&str> = (0..3).map(|_| vocab[rng.below(40)].0.as_str()).collect();
        for sys in 0..systems {
            let lo = sys * 20 / systems;
            let len = 1 + rng.below(6);
            let toks: Vec<&(String, f64)> = (0..len).map(|_| &sorted[lo + rng.below(20)]).collect();
            let mean = toks.iter().map(|t| t.1).sum::<f64>() / len as f64;
            let hyp: Vec<&str> = toks.iter().map(|t| t.0.as_str()).collect();
            let rec = json!({
                "id": format!("s{s:03}-m{sys}"),
                "system": format!("m{sys}"),
                "lp": "",
                "gts": [gt.join(" ")],
                "hyp": hyp.join(" "),
                "human": {"quality": mean + 0.02 * (rng.next() - 0.5)},
            });
            lines.push_str(&rec.to_string());
            lines.push('\n');
        }
    }
    let data = dir.join("fixture.jsonl");
    fs::write(&data, lines).unwrap();
    let table: BTreeMap<String, f64> = vocab.into_iter().collect();
    let table_path = dir.join("table.json");
    fs::write(&table_path, serde_json::to_string(&table).unwrap()).unwrap();
    (data, table_path)
}

fn small_dataset(dir: &Path) -> PathBuf {
    let path = dir.join("small.jsonl");
    let rows = [
        json!({"id": "a", "system": "x", "lp": "de-en", "gts": ["the cat sat on the mat"], "hyp": "a cat sat on a mat", "human": {"da": 0.7}}),
        json!({"id": "b", "system": "y", "lp": "de-en", "gts": ["the cat sat on the mat", "there is a cat on the mat"], "hyp": "the cat is on the mat", "human": {"da": 0.9}}),
        json!({"id": "c", "system": "x", "lp": "de-en", "gts": ["it rained all day"], "hyp": "rain fell", "human": {"da": 0.3}}),
        json!({"id": "d", "system": "y", "lp": "de-en", "gts": ["it rained all day"], "hyp": "it rained the whole day", "human": {"da": 0.8}}),
    ];
    let text: String = rows.iter().map(|r| format!("{r}\n")).collect();
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn score_matches_direct_token_f1() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let rows = jsonl(&ok(&["score", "--dataset", s(&data), "--metric", "token-f1"]));
    assert_eq!(rows.len(), 4);
    let tok = |t: &str| -> Vec<String> { t.split_whitespace().map(str::to_string).collect() };
    let expected = [
        bmx_core::metrics::builtin_token_f1(&[tok("the cat sat on the mat")], &tok("a cat sat on a mat")),
        bmx_core::metrics::builtin_token_f1(
            &[tok("the cat sat on the mat"), tok("there is a cat on the mat")],
            &tok("the cat is on the mat"),
        ),
    ];
    assert_eq!(rows[0]["id"], "a");
    assert_eq!(rows[0]["s0"].as_f64().unwrap(), expected[0]);
    assert_eq!(rows[1]["s0"].as_f64().unwrap(), expected[1]);
}

#[test]
fn identical_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    for args in [
        vec!["explain", "--explainer", "lime", "--samples", "50", "--seed", "3"],
        vec!["boost", "--explainer", "shap", "--samples", "20", "--seed", "3", "--p", "-2", "--w", "0.5"],
        vec!["calibrate", "--explainer", "lime", "--seed", "1", "--objective", "pearson:segment:da", "--p-count", "30"],
        vec!["evaluate", "--p", "2", "--w", "0.5", "--spec", "kendall:segment:da", "--resamples", "200"],
    ] {
        let mut full = args.clone();
        full.extend(["--dataset", s(&data), "--quiet"]);
        let one = ok(&full);
        full.extend(["--jobs", "1"]);
        assert_eq!(one, ok(&full), "{args:?}");
    }
}

#[test]
fn w_one_returns_original_scores() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let score = jsonl(&ok(&["score", "--dataset", s(&data)]));
    for explainer in ["erasure", "lime", "shap"] {
        let rows = jsonl(&ok(&[
            "boost", "--dataset", s(&data), "--explainer", explainer, "--p", "-7", "--w", "1",
        ]));
        for (b, o) in rows.iter().zip(&score) {
            assert_eq!(b["s1"].as_f64().unwrap().to_bits(), o["s0"].as_f64().unwrap().to_bits());
            assert_eq!(b["s0"], b["s1"]);
        }
    }
}

#[test]
fn lime_explains_every_segment() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("multi.jsonl");
    let gts: Vec<String> = (0..11).map(|k| format!("reference {k} with words")).collect();
    let rec = json!({"id": "m", "system": "s", "lp": "", "gts": gts, "hyp": "some words here", "human": {}});
    fs::write(&path, format!("{rec}\n")).unwrap();
    let rows = jsonl(&ok(&["explain", "--dataset", s(&path), "--explainer", "lime", "--samples", "30"]));
    let segs = rows[0]["per_segment"].as_array().unwrap();
    assert_eq!(segs.len(), 12);
    assert_eq!(segs[0].as_array().unwrap().len(), 4);
    assert_eq!(segs[11].as_array().unwrap().len(), 3);
}

#[test]
fn calibrate_then_evaluate_on_held_out_fold() {
    let dir = tempfile::tempdir().unwrap();
    let (data, table) = write_fixture(dir.path(), 60, 6);
    let plan = dir.path().join("plan.json");
    let profile = dir.path().join("profile.json");
    let report = dir.path().join("report.json");
    let table_txt = dir.path().join("report.txt");
    ok(&["split", "--dataset", s(&data), "--folds", "2", "--seed", "4", "--out", s(&plan)]);
    let plan_json: Value = serde_json::from_str(&fs::read_to_string(&plan).unwrap()).unwrap();
    assert_eq!(plan_json["folds"].as_array().unwrap().len(), 2);

    let metric = ["--metric", "additive", "--token-table", s(&table), "--quiet"];
    let mut args = vec!["calibrate", "--dataset", s(&data), "--split", s(&plan), "--fold", "0"];
    args.extend(["--objective", "pearson:segment:quality", "--p-count", "120", "--out", s(&profile)]);
    args.extend(metric);
    ok(&args);
    let prof: Value = serde_json::from_str(&fs::read_to_string(&profile).unwrap()).unwrap();
    assert_eq!(prof["created"], 1_700_000_000);
    assert_eq!(prof["metric"], "additive");
    assert_eq!(prof["fallback_used"], false);
    assert!(prof["w"].as_f64().unwrap() < 1.0);

    let mut args = vec!["evaluate", "--dataset", s(&data), "--split", s(&plan), "--fold", "0"];
    args.extend(["--profile", s(&profile), "--spec", "pearson:segment:quality", "--resamples", "500"]);
    args.extend(["--out", s(&report), "--table", s(&table_txt)]);
    args.extend(metric);
    ok(&args);
    let rep: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let row = &rep["rows"][0];
    assert!(row["delta"].as_f64().unwrap() > 0.0, "{row}");
    assert!(fs::read_to_string(&table_txt).unwrap().contains("pearson"));
}

#[test]
fn explicit_flags_override_profile_only_together() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let profile = dir.path().join("p.json");
    let prof = json!({
        "p": 1.0, "w": 1.0, "explainer": bmx_core::ExplainerConfig::erasure(), "metric": "token-f1",
        "objective": [{"coefficient": "pearson", "level": "segment", "aspect": "da"}], "created": 0
    });
    fs::write(&profile, prof.to_string()).unwrap();
    let base = ["boost", "--dataset", s(&data), "--profile", s(&profile), "--quiet"];
    let from_profile = jsonl(&ok(&base));
    assert!(from_profile.iter().all(|r| r["s0"] == r["s1"]));
    let mut one = base.to_vec();
    one.extend(["--w", "0"]);
    assert_eq!(jsonl(&ok(&one)), from_profile);
    let mut both = base.to_vec();
    both.extend(["--p", "1", "--w", "0"]);
    let overridden = jsonl(&ok(&both));
    assert!(overridden.iter().all(|r| r["s1"] == r["s_hat"]));
}

#[test]
fn stability_and_split_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let out: Value = serde_json::from_str(&ok(&[
        "stability", "--dataset", s(&data), "--p", "1", "--w", "0.5", "--repeats", "3",
    ]))
    .unwrap();
    assert_eq!(out["mean_pairwise_pearson"], 1.0);
    assert_eq!(out["seeds"], json!([0, 1, 2]));

    let plan: Value = serde_json::from_str(&ok(&["split", "--dataset", s(&data), "--folds", "2"])).unwrap();
    let ids: Vec<&str> = plan["folds"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|f| f["calibration_ids"].as_array().unwrap())
        .map(|v| v.as_str().unwrap())
        .collect();
    assert_eq!(ids.len(), 4);
}

#[test]
fn empty_dataset_gives_empty_output() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    assert_eq!(ok(&["score", "--dataset", s(&empty)]), "");
    assert_eq!(ok(&["boost", "--dataset", s(&empty), "--p", "1", "--w", "0.5"]), "");
    assert_eq!(ok(&["explain", "--dataset", s(&empty)]), "");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let d = s(&data);
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["boost", "--dataset", d]), 1);
    assert_eq!(code(&["boost", "--dataset", d, "--p", "1", "--w", "2"]), 1);
    assert_eq!(code(&["score", "--dataset", d, "--metric", "bleurt"]), 1);
    assert_eq!(code(&["score", "--dataset", d, "--metric", "token-f1", "--endpoint", "tcp://127.0.0.1:1"]), 1);
    assert_eq!(code(&["score", "--dataset", "/nonexistent/data.jsonl"]), 2);
    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{\"id\": 1}\n").unwrap();
    let out = bmx(&["score", "--dataset", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
    assert_eq!(code(&["evaluate", "--dataset", d, "--p", "1", "--w", "0.5", "--spec", "pearson:segment:mqm"]), 2);

    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let endpoint = format!("tcp://{addr}");
    assert_eq!(code(&["score", "--dataset", d, "--endpoint", &endpoint, "--timeout-ms", "500"]), 3);
}
