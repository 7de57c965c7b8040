use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context};
use bmx_core::calibration::{grid_search, GridSpec, Profile};
use bmx_core::corpus::SplitPlan;
use bmx_core::evaluation::{evaluate, stability_check, CorrelationSpec, EvalOptions, DEFAULT_RESAMPLES};
use bmx_core::metrics::{builtin_metric, Additive, BridgeMetric, BridgeOptions, Endpoint, BUILTIN_NAMES};
use bmx_core::{
    boost_dataset, explain_dataset, load_dataset, make_splits, score_batch, BmxParams, Dataset, ExplainerConfig,
    ExplainerKind, Format, Metric, MetricError, MetricRequest,
};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "bmx", version, about = "Boost black-box text generation metrics with their own explanations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score every instance with the original metric
    Score(Common),
    /// Token attributions per segment
    Explain(Common),
    /// Original, aggregated and combined scores
    Boost {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        params: ParamArgs,
    },
    /// Grid-search p and w on annotated data and write a profile
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Correlation objective `coefficient:level:aspect`; repeatable
        #[arg(long = "objective", required = true)]
        objectives: Vec<CorrelationSpec>,
        #[command(flatten)]
        fold: FoldArgs,
        #[arg(long, default_value_t = 600)]
        p_count: usize,
        #[arg(long, default_value_t = 6)]
        w_count: usize,
    },
    /// Compare boosted and original correlations with human scores
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        params: ParamArgs,
        /// Correlation spec `coefficient:level:aspect`; repeatable
        #[arg(long = "spec", required = true)]
        specs: Vec<CorrelationSpec>,
        #[command(flatten)]
        fold: FoldArgs,
        #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
        resamples: usize,
        /// Bonferroni family size (defaults to the number of tests)
        #[arg(long)]
        family_size: Option<usize>,
        /// Also write the plain-text table here (otherwise it goes to stderr)
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Mean pairwise Pearson of boosted scores across explainer seeds
    Stability {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        params: ParamArgs,
        /// Number of runs; seeds are --seed, --seed + 1, ...
        #[arg(long, default_value_t = 2)]
        repeats: usize,
    },
    /// Source-grouped calibration/evaluation folds
    Split {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        format: Option<Format>,
        #[arg(long, default_value_t = 8)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    dataset: PathBuf,
    /// jsonl or tsv; inferred from the extension when omitted
    #[arg(long)]
    format: Option<Format>,
    /// Builtin metric (token-f1, overlap, length-overlap, additive)
    #[arg(long)]
    metric: Option<String>,
    /// Token value table (JSON object) for the additive metric
    #[arg(long = "token-table")]
    token_table: Option<PathBuf>,
    /// External metric: tcp://host:port or cmd:program args
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long, default_value_t = 60_000)]
    timeout_ms: u64,
    #[arg(long)]
    explainer: Option<ExplainerKind>,
    /// LIME samples or SHAP permutations per segment
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    replacement_token: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads; 0 uses every core
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
struct ParamArgs {
    #[arg(long, allow_hyphen_values = true)]
    p: Option<f64>,
    #[arg(long)]
    w: Option<f64>,
    #[arg(long, default_value_t = 1)]
    iterations: usize,
    /// Profile written by `bmx calibrate`
    #[arg(long)]
    profile: Option<PathBuf>,
}

#[derive(Args)]
struct FoldArgs {
    /// Split plan written by `bmx split`
    #[arg(long, requires = "fold")]
    split: Option<PathBuf>,
    #[arg(long, requires = "split")]
    fold: Option<usize>,
}

/// Wrong or conflicting flags; exit code 1.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if cause.is::<MetricError>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<bmx_core::Error>() {
            return if e.is_metric_error() { 3 } else { 2 };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

impl Common {
    fn progress(&self, msg: impl std::fmt::Display) {
        if !self.quiet {
            eprintln!("{msg}");
        }
    }

    fn load(&self) -> anyhow::Result<Dataset> {
        read(&self.dataset, self.format)
    }

    fn metric_descriptor(&self) -> String {
        match (&self.endpoint, &self.metric) {
            (Some(e), _) => e.clone(),
            (None, Some(m)) => m.clone(),
            (None, None) => "token-f1".into(),
        }
    }

    fn open_metric(&self) -> anyhow::Result<Box<dyn Metric>> {
        if let Some(endpoint) = &self.endpoint {
            if self.metric.is_some() {
                return Err(usage("give either --metric or --endpoint, not both"));
            }
            let endpoint: Endpoint = endpoint.parse()?;
            let options = BridgeOptions {
                timeout: Duration::from_millis(self.timeout_ms),
                ..BridgeOptions::default()
            };
            let metric = BridgeMetric::connect(&endpoint, options)?;
            self.progress(format_args!("connected to external metric `{}`", metric.name()));
            return Ok(Box::new(metric));
        }
        let name = self.metric.as_deref().unwrap_or("token-f1");
        if name == "additive" {
            let path = self
                .token_table
                .as_ref()
                .ok_or_else(|| usage("the additive metric needs --token-table"))?;
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let table: HashMap<String, f64> =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            return Ok(Box::new(Additive { table }));
        }
        builtin_metric(name).ok_or_else(|| {
            usage(format!(
                "unknown metric `{name}` (builtin: {}, additive)",
                BUILTIN_NAMES.join(", ")
            ))
        })
    }

    /// Explainer from the flags, starting from `base` (e.g. a profile's).
    fn explainer(&self, base: Option<&ExplainerConfig>) -> ExplainerConfig {
        let mut config = match (base, self.explainer) {
            (Some(b), None) => b.clone(),
            (Some(b), Some(kind)) if b.kind == kind => b.clone(),
            (_, kind) => ExplainerConfig::new(kind.unwrap_or(ExplainerKind::Erasure)),
        };
        if let Some(n) = self.samples {
            config.permutations = n;
        }
        if let Some(token) = &self.replacement_token {
            config.replacement_token = token.clone();
        }
        if base.is_none() || self.seed != 0 {
            config.seed = self.seed;
        }
        config
    }

    fn writer(&self) -> anyhow::Result<Box<dyn Write>> {
        output(self.out.as_deref())
    }
}

fn read(path: &Path, format: Option<Format>) -> anyhow::Result<Dataset> {
    let format = match format {
        Some(f) => f,
        None => match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") => Format::Tsv,
            _ => Format::Jsonl,
        },
    };
    load_dataset(path, format).with_context(|| format!("loading {}", path.display()))
}

fn output(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_jsonl<T: Serialize>(out: &mut dyn Write, rows: impl IntoIterator<Item = T>) -> anyhow::Result<()> {
    for row in rows {
        serde_json::to_writer(&mut *out, &row)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(out: &mut dyn Write, value: &T) -> anyhow::Result<()> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

/// Resolves p, w and explainer from a profile and/or flags. A profile's p and
/// w are replaced only when both flags are given.
fn resolve_params(common: &Common, args: &ParamArgs) -> anyhow::Result<BmxParams> {
    let profile = args
        .profile
        .as_ref()
        .map(|path| Profile::load(path).with_context(|| format!("loading profile {}", path.display())))
        .transpose()?;
    let (p, w) = match (&profile, args.p, args.w) {
        (_, Some(p), Some(w)) => (p, w),
        (Some(profile), p, w) => {
            if p.is_some() || w.is_some() {
                common.progress("note: --p/--w override a profile only when both are given; using the profile");
            }
            (profile.p, profile.w)
        }
        (None, _, _) => return Err(usage("give --p and --w, or --profile")),
    };
    if let Some(profile) = &profile {
        if profile.metric != common.metric_descriptor() {
            common.progress(format_args!(
                "note: profile was calibrated for `{}`, running `{}`",
                profile.metric,
                common.metric_descriptor()
            ));
        }
    }
    let params = BmxParams::new(p, w, common.explainer(profile.as_ref().map(|p| &p.explainer)))
        .with_iterations(args.iterations);
    params.validate().map_err(|e| usage(e.to_string()))?;
    Ok(params)
}

fn select_fold(ds: Dataset, fold: &FoldArgs, calibration: bool) -> anyhow::Result<Dataset> {
    let (Some(path), Some(k)) = (&fold.split, fold.fold) else {
        return Ok(ds);
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let plan: SplitPlan = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let fold = plan
        .folds
        .get(k)
        .ok_or_else(|| usage(format!("fold {k} out of range (plan has {})", plan.folds.len())))?;
    let ids = if calibration { &fold.calibration_ids } else { &fold.evaluation_ids };
    let subset = ds.subset(ids);
    if subset.len() != ids.len() {
        bail!(bmx_core::Error::InvalidInput(format!(
            "split plan lists {} ids but only {} are in the dataset",
            ids.len(),
            subset.len()
        )));
    }
    Ok(subset)
}

fn created_timestamp() -> u64 {
    if let Some(epoch) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.parse().ok()) {
        return epoch;
    }
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Serialize)]
struct ScoreRow<'a> {
    id: &'a str,
    s0: f64,
}

#[derive(Serialize)]
struct ExplainRow<'a> {
    id: &'a str,
    base_score: f64,
    per_segment: &'a [Vec<f64>],
}

#[derive(Serialize)]
struct BoostRow<'a> {
    id: &'a str,
    s0: f64,
    s_hat: f64,
    s1: f64,
}

#[derive(Serialize)]
struct StabilityReport {
    mean_pairwise_pearson: f64,
    seeds: Vec<u64>,
    explainer: ExplainerConfig,
    instances: usize,
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Score(common) => {
            let ds = common.load()?;
            let metric = common.open_metric()?;
            let requests: Vec<MetricRequest> = ds.instances.iter().map(MetricRequest::from_instance).collect();
            let scores = if requests.is_empty() {
                Vec::new()
            } else {
                score_batch(metric.as_ref(), &requests)?
            };
            let rows = ds.instances.iter().zip(scores).map(|(i, s0)| ScoreRow { id: &i.id, s0 });
            write_jsonl(&mut *common.writer()?, rows)
        }
        Command::Explain(common) => {
            let ds = common.load()?;
            let metric = common.open_metric()?;
            let config = common.explainer(None);
            common.progress(format_args!("explaining {} instances with {}", ds.len(), config.kind));
            let atts = explain_dataset(metric.as_ref(), &ds, &config, common.jobs)?;
            let rows = ds.instances.iter().zip(&atts).map(|(i, a)| ExplainRow {
                id: &i.id,
                base_score: a.base_score,
                per_segment: &a.per_segment,
            });
            write_jsonl(&mut *common.writer()?, rows)
        }
        Command::Boost { common, params } => {
            let params = resolve_params(&common, &params)?;
            let ds = common.load()?;
            let metric = common.open_metric()?;
            common.progress(format_args!(
                "boosting {} instances (p = {}, w = {}, {})",
                ds.len(),
                params.p,
                params.w,
                params.explainer.kind
            ));
            let scored = boost_dataset(metric.as_ref(), &ds, &params, common.jobs)?;
            let rows = scored.iter().map(|s| BoostRow {
                id: &s.id,
                s0: s.s0,
                s_hat: s.s_hat,
                s1: s.s1,
            });
            write_jsonl(&mut *common.writer()?, rows)
        }
        Command::Calibrate {
            common,
            objectives,
            fold,
            p_count,
            w_count,
        } => {
            let ds = select_fold(common.load()?, &fold, true)?;
            let metric = common.open_metric()?;
            let explainer = common.explainer(None);
            let grid = GridSpec::with_counts(p_count, w_count);
            grid.validate().map_err(|e| usage(e.to_string()))?;
            common.progress(format_args!(
                "calibrating on {} instances over {} x {} grid",
                ds.len(),
                p_count,
                w_count
            ));
            let result = grid_search(metric.as_ref(), &ds, &explainer, &grid, &objectives, common.jobs)?;
            common.progress(format_args!(
                "{} improving cells of {}; p = {}, w = {}{}",
                result.improving_cells.len(),
                result.cells_evaluated,
                result.p,
                result.w,
                if result.fallback_used { " (fallback)" } else { "" }
            ));
            let profile = Profile {
                p: result.p,
                w: result.w,
                explainer,
                metric: common.metric_descriptor(),
                objective: objectives,
                created: created_timestamp(),
                fallback_used: result.fallback_used,
            };
            write_json(&mut *common.writer()?, &profile)
        }
        Command::Evaluate {
            common,
            params,
            specs,
            fold,
            resamples,
            family_size,
            table,
        } => {
            let params = resolve_params(&common, &params)?;
            let ds = select_fold(common.load()?, &fold, false)?;
            let metric = common.open_metric()?;
            common.progress(format_args!("evaluating on {} instances", ds.len()));
            let options = EvalOptions {
                resamples,
                seed: common.seed,
                family_size,
                jobs: common.jobs,
            };
            let report = evaluate(metric.as_ref(), &ds, &params, &specs, &options)?;
            write_json(&mut *common.writer()?, &report)?;
            let text = report.to_table();
            match table {
                Some(path) => std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?,
                None => eprint!("{text}"),
            }
            Ok(())
        }
        Command::Stability {
            common,
            params,
            repeats,
        } => {
            if repeats < 2 {
                return Err(usage("--repeats must be at least 2"));
            }
            let params = resolve_params(&common, &params)?;
            let ds = common.load()?;
            let metric = common.open_metric()?;
            let seeds: Vec<u64> = (0..repeats as u64).map(|k| common.seed.wrapping_add(k)).collect();
            common.progress(format_args!("{} boost runs over {} instances", repeats, ds.len()));
            let r = stability_check(metric.as_ref(), &ds, &params, &seeds, common.jobs)?;
            let report = StabilityReport {
                mean_pairwise_pearson: r,
                seeds,
                explainer: params.explainer,
                instances: ds.len(),
            };
            write_json(&mut *common.writer()?, &report)
        }
        Command::Split {
            dataset,
            format,
            folds,
            seed,
            out,
        } => {
            let ds = read(&dataset, format)?;
            let plan = make_splits(&ds, folds, seed)?;
            write_json(&mut *output(out.as_deref())?, &plan)
        }
    }
}
