//! Command-line front end: `phantom-gen`, `train`, `pseudolabel`, `eval`, `report`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. Failures are
//! printed to stderr as one JSON object `{"error": kind, "message": ...}`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::classifier::{train, TrainingSet};
use crate::clustering::ClusterSet;
use crate::config::RunConfig;
use crate::error::Error;
use crate::evaluation::{evaluate_dataset, metrics_table, MatchMode, MetricsReport, StudyTruth};
use crate::io::{self, ValueSemantics, MANIFEST_FILE};
use crate::phantom::generate_dataset;
use crate::pipeline::{generate_pseudolabels, linear_grid, sweep_high_threshold, LabeledStudy, StudyReport};
use crate::report::{self, IterationCounts};
use crate::volume::Dims;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

const RUN_FILE: &str = "run.json";
const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Parser)]
#[command(name = "explainseg", version, about = "Voxel pseudo-labels from slice-level labels")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset.
    PhantomGen(PhantomGenArgs),
    /// Train the slice classifier on a dataset.
    Train(TrainArgs),
    /// Produce voxel pseudo-labels for every study of a dataset.
    Pseudolabel(PseudolabelArgs),
    /// Score predicted clusters against ground truth.
    Eval(EvalArgs),
    /// Summarize one or more pseudolabel runs as CSV tables and SVG plots.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct PhantomGenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    /// Fraction of studies with lesions; exactly floor(count * positivity) are positive.
    #[arg(long, default_value_t = 0.5)]
    positivity: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Study size as WxHxD, e.g. 128x128x40.
    #[arg(long)]
    dims: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Model descriptor path (JSON); weights go to a sibling `.bin`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct PseudolabelArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Upper hysteresis threshold on the attribution map.
    #[arg(long, conflicts_with = "sweep")]
    t_high: Option<f32>,
    /// Pick the upper threshold by F1 over the grid LO:HI:N on this dataset.
    #[arg(long)]
    sweep: Option<String>,
    #[arg(long)]
    iter_limit: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Directory with `<id>.clusters.json` files.
    #[arg(long)]
    pred: PathBuf,
    /// Dataset directory with ground-truth masks.
    #[arg(long)]
    gt: PathBuf,
    /// Metrics JSON path; a CSV table is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Require IoU above this value instead of any overlap.
    #[arg(long)]
    strict_iou: Option<f64>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn emit_error(kind: &str, message: &str) {
    eprintln!("{}", json!({ "error": kind, "message": message }));
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return EXIT_OK;
        }
        Err(e) => {
            emit_error("usage", e.to_string().trim());
            return EXIT_USAGE;
        }
    };
    let result = match cli.jobs {
        Some(0) => Err(usage("--jobs must be at least 1")),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(cli.command)),
            Err(e) => Err(usage(format!("cannot build thread pool: {e}"))),
        },
        None => dispatch(cli.command),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            emit_error("usage", &m);
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            emit_error(e.kind(), &e.to_string());
            EXIT_RUNTIME
        }
    }
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::PhantomGen(a) => phantom_gen(a),
        Command::Train(a) => train_cmd(a),
        Command::Pseudolabel(a) => pseudolabel(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report_cmd(a),
    }
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) if !p.is_file() => Err(usage(format!("config file {} not found", p.display()))),
        Some(p) => RunConfig::load(p).map_err(|e| usage(e.to_string())),
    }
}

fn validated(cfg: RunConfig) -> CliResult<RunConfig> {
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn require_dataset(dir: &Path) -> CliResult<()> {
    if dir.join(MANIFEST_FILE).is_file() {
        Ok(())
    } else {
        Err(usage(format!("{} is not a dataset directory (no {MANIFEST_FILE})", dir.display())))
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(Error::io(dir, e)))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    io::write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn print_summary(v: serde_json::Value) {
    println!("{v}");
}

fn parse_dims(s: &str) -> CliResult<Dims> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| usage(format!("--dims expects WxHxD, got '{s}'")))?;
    match parts[..] {
        [w, h, d] => Ok(Dims::new(w, h, d)),
        _ => Err(usage(format!("--dims expects WxHxD, got '{s}'"))),
    }
}

fn parse_grid(s: &str) -> CliResult<Vec<f32>> {
    let bad = || usage(format!("--sweep expects LO:HI:N, got '{s}'"));
    let parts: Vec<&str> = s.split(':').collect();
    let [lo, hi, n] = parts[..] else {
        return Err(bad());
    };
    let lo: f32 = lo.parse().map_err(|_| bad())?;
    let hi: f32 = hi.parse().map_err(|_| bad())?;
    let n: usize = n.parse().map_err(|_| bad())?;
    linear_grid(lo, hi, n).map_err(|e| usage(e.to_string()))
}

fn phantom_gen(a: PhantomGenArgs) -> CliResult<()> {
    if !(0.0..=1.0).contains(&a.positivity) {
        return Err(usage(format!("--positivity must lie in [0, 1], got {}", a.positivity)));
    }
    if a.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    let mut cfg = load_config(a.config.as_deref())?;
    cfg.phantom.seed = a.seed;
    if let Some(d) = &a.dims {
        cfg.phantom.dims = parse_dims(d)?;
    }
    let cfg = validated(cfg)?;
    let hash = cfg.hash();
    let studies = generate_dataset(&cfg.phantom, a.count, a.positivity)?;
    create_dir(&a.out)?;
    let manifest = io::save_dataset(&a.out, &studies, &cfg.phantom, a.positivity, Some(&hash))?;
    write_text(&a.out.join(CONFIG_FILE), &cfg.to_toml_string()?)?;
    print_summary(json!({
        "out": a.out,
        "count": manifest.count,
        "positives": manifest.positives(),
        "config_hash": hash,
    }));
    Ok(())
}

fn train_cmd(a: TrainArgs) -> CliResult<()> {
    require_dataset(&a.data)?;
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(n) = a.iterations {
        cfg.train.iterations = n;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let cfg = validated(cfg)?;
    let hash = cfg.hash();
    let (_, studies) = io::load_dataset(&a.data)?;
    let set = TrainingSet::from_studies(&studies)?;
    let outcome = train(&set, &cfg.train)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let prov = json!({ "config_hash": hash, "train": cfg.train, "data": a.data });
    let desc = io::save_params(&outcome.params, &a.out, Some(prov))?;
    let mut curve = String::from("iteration,loss,grad_norm\n");
    for s in &outcome.curve {
        let _ = writeln!(curve, "{},{:.6},{:.6}", s.iteration, s.loss, s.grad_norm);
    }
    write_text(&a.out.with_extension("curve.csv"), &curve)?;
    print_summary(json!({
        "model": a.out,
        "param_count": desc.param_count,
        "final_loss": outcome.curve.last().map(|s| s.loss),
        "config_hash": hash,
    }));
    Ok(())
}

fn pseudolabel(a: PseudolabelArgs) -> CliResult<()> {
    require_dataset(&a.data)?;
    if !a.model.is_file() {
        return Err(usage(format!("model {} not found", a.model.display())));
    }
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(t) = a.t_high {
        cfg.pipeline.t_high = Some(t);
    }
    if let Some(k) = a.iter_limit {
        cfg.pipeline.iter_limit = k;
    }
    let grid = a.sweep.as_deref().map(parse_grid).transpose()?;
    if grid.is_none() && cfg.pipeline.t_high.is_none() {
        return Err(usage("no upper threshold: pass --t-high, --sweep or set pipeline.t_high"));
    }
    let mut cfg = validated(cfg)?;
    let (params, desc) = io::load_params(&a.model)?;
    let (_, phantoms) = io::load_dataset(&a.data)?;
    let studies: Vec<LabeledStudy> = phantoms.iter().map(LabeledStudy::from_phantom).collect::<Result<_, _>>()?;
    drop(phantoms);
    create_dir(&a.out)?;

    let mut sweep_out = None;
    if let Some(grid) = grid {
        let s = sweep_high_threshold(&studies, &grid, &params, &cfg.attribution, &cfg.pipeline)?;
        let mut csv = String::from("t_high,tp,fp,fn,sensitivity,ppv,f1\n");
        for p in &s.curve {
            let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.1}"));
            let _ = writeln!(csv, "{},{},{},{},{},{},{:.1}", p.value, p.tp, p.fp, p.fn_, f(p.sensitivity), f(p.ppv), p.f1);
        }
        write_text(&a.out.join("sweep.csv"), &csv)?;
        cfg.pipeline.t_high = Some(s.best);
        sweep_out = Some(s);
    }
    let hash = cfg.hash();
    let mode = cfg.eval.match_mode();
    let prov = json!({ "config_hash": hash });

    let mut preds = Vec::with_capacity(studies.len());
    let mut per_study_counts = Vec::with_capacity(studies.len());
    let mut histogram = vec![0usize; cfg.pipeline.iter_limit + 1];
    for s in &studies {
        let mut labels = generate_pseudolabels(&s.id, &s.volume, &params, &cfg.attribution, &cfg.pipeline)?;
        let counts = report::iteration_counts(&labels, &s.truth, &cfg.pipeline, mode)?;
        labels.report.config_hash = Some(hash.clone());
        labels.report.iteration_counts = counts.clone();
        for (k, n) in labels.report.iteration_histogram.iter().enumerate() {
            histogram[k] += n;
        }
        io::save_volume(&labels.mask, ValueSemantics::Mask, &a.out.join(format!("{}_mask.json", s.id)), Some(prov.clone()))?;
        io::save_clusters(&labels.clusters, &a.out.join(format!("{}.clusters.json", s.id)), Some(&hash))?;
        io::save_json(&labels.report, &a.out.join(format!("{}.report.json", s.id)))?;
        per_study_counts.push(counts);
        preds.push((s.id.clone(), labels.clusters));
    }
    let truths: Vec<StudyTruth> = studies.iter().map(|s| s.truth.clone()).collect();
    let mut metrics = evaluate_dataset(&preds, &truths, mode)?;
    metrics.config_hash = Some(hash.clone());
    io::save_json(&metrics, &a.out.join("metrics.json"))?;
    write_text(&a.out.join("iteration_histogram.csv"), &report::histogram_csv(&histogram))?;
    let curve = report::pool_curve(&per_study_counts);
    write_text(&a.out.join("iteration_metrics.csv"), &report::curve_csv(&curve))?;
    write_text(&a.out.join(CONFIG_FILE), &cfg.to_toml_string()?)?;
    io::save_json(
        &json!({
            "config_hash": hash,
            "config": cfg,
            "data": a.data,
            "model": a.model,
            "model_checksum": desc.checksum,
            "studies": studies.iter().map(|s| &s.id).collect::<Vec<_>>(),
            "t_high": cfg.pipeline.t_high,
            "sweep": sweep_out,
        }),
        &a.out.join(RUN_FILE),
    )?;
    print_summary(json!({
        "out": a.out,
        "studies": studies.len(),
        "t_high": cfg.pipeline.t_high,
        "tp": metrics.tp,
        "fp": metrics.fp,
        "fn": metrics.fn_,
        "f1": metrics.f1,
        "config_hash": hash,
    }));
    Ok(())
}

/// Files in `dir` whose names end with `suffix`, sorted, paired with the stripped stem.
fn files_with_suffix(dir: &Path, suffix: &str) -> CliResult<Vec<(String, PathBuf)>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Failure::Runtime(Error::io(dir, e)))?;
    let mut out = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Failure::Runtime(Error::io(dir, e)))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(suffix) {
            out.push((stem.to_string(), entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

fn eval(a: EvalArgs) -> CliResult<()> {
    if !a.pred.is_dir() {
        return Err(usage(format!("prediction directory {} not found", a.pred.display())));
    }
    require_dataset(&a.gt)?;
    let mode = match a.strict_iou {
        Some(t) if !(0.0..1.0).contains(&t) => return Err(usage(format!("--strict-iou must lie in [0, 1), got {t}"))),
        Some(threshold) => MatchMode::StrictIou { threshold },
        None => MatchMode::Intersect,
    };
    let manifest = io::load_manifest(&a.gt)?;
    let mut truths = Vec::with_capacity(manifest.studies.len());
    for e in &manifest.studies {
        let (mask, _) = io::load_volume(&a.gt.join(&e.gt_mask))?;
        truths.push(StudyTruth::from_mask(e.id.clone(), &mask)?);
    }
    let files = files_with_suffix(&a.pred, ".clusters.json")?;
    let mut hashes = std::collections::BTreeSet::new();
    let preds: Vec<(String, ClusterSet)> = if files.is_empty() {
        truths.iter().map(|t| (t.id.clone(), ClusterSet::empty(t.dims))).collect()
    } else {
        let mut v = Vec::with_capacity(files.len());
        for (id, path) in files {
            let (cs, h) = io::load_clusters(&path)?;
            hashes.insert(h);
            v.push((id, cs));
        }
        v
    };
    let mut metrics = evaluate_dataset(&preds, &truths, mode)?;
    if let (1, Some(Some(h))) = (hashes.len(), hashes.first()) {
        metrics.config_hash = Some(h.clone());
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    io::save_json(&metrics, &a.out)?;
    let name = run_name(&a.pred);
    write_text(&a.out.with_extension("csv"), &metrics_table(&[(name, &metrics)]))?;
    print_summary(json!({
        "tp": metrics.tp,
        "fp": metrics.fp,
        "fn": metrics.fn_,
        "sensitivity": metrics.sensitivity,
        "ppv": metrics.ppv,
        "f1": metrics.f1,
    }));
    Ok(())
}

fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn report_cmd(a: ReportArgs) -> CliResult<()> {
    let runs: Vec<&PathBuf> = a.runs.iter().filter(|d| d.join(RUN_FILE).is_file()).collect();
    if runs.is_empty() {
        return Err(usage("no pseudolabel runs (directories with run.json) among --runs"));
    }
    create_dir(&a.out)?;
    let mut summary: Vec<(String, MetricsReport)> = Vec::new();
    let mut iterations = format!("run,{}\n", report::CURVE_CSV_HEADER);
    for dir in runs {
        let name = run_name(dir);
        let mut per_study: Vec<Vec<IterationCounts>> = Vec::new();
        for (_, path) in files_with_suffix(dir, ".report.json")? {
            let r: StudyReport = io::load_json(&path)?;
            per_study.push(r.iteration_counts);
        }
        let curve = report::pool_curve(&per_study);
        for line in report::curve_csv(&curve).lines().skip(1) {
            let _ = writeln!(iterations, "{name},{line}");
        }
        if !curve.is_empty() {
            let svg = report::curve_svg(&name, &curve)?;
            write_text(&a.out.join(format!("{name}_iterations.svg")), &svg)?;
        }
        let metrics_path = dir.join("metrics.json");
        if metrics_path.is_file() {
            summary.push((name, io::load_json(&metrics_path)?));
        }
    }
    let rows: Vec<(String, &MetricsReport)> = summary.iter().map(|(n, m)| (n.clone(), m)).collect();
    write_text(&a.out.join("summary.csv"), &metrics_table(&rows))?;
    write_text(&a.out.join("iterations.csv"), &iterations)?;
    print_summary(json!({ "out": a.out, "runs": summary.len() }));
    Ok(())
}
