//! The `probssl` subcommands. Each returns what it wrote so callers can
//! inspect results without re-reading files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use probssl::config::RunConfig;
use probssl::data::{stratified_subset, DataSpec, Dataset, Splits};
use probssl::evalprobe::{sigma_by_correctness, train_probe, FinetuneConfig, ProbeConfig, ProbeResult, ProbeSource};
use probssl::mi::{mine_train, probe_pairs, MineConfig, PairKind};
use probssl::models::{Model, PriorSpec, Variant};
use probssl::ood::{evaluate_detectors, Detector, OodConfig};
use probssl::params::{load_checkpoint, save_checkpoint, ParamStore};
use probssl::rng::{stream, tag};
use probssl::trainer::{model_from_checkpoint, train_with, MetricsRow, MetricsWriter, TrainOutcome};
use probssl::error::ConfigIssue;
use probssl::{Error, Result};

use crate::rundir::{
    prepare_out_dir, write_atomic, RunLock, RunManifest, RunStatus, CHECKPOINT_DIR, CONFIG, METRICS, RESULTS_DIR,
};

pub const PROBE_RESULT: &str = "probe_result.csv";
pub const PROBE_PER_CLASS: &str = "probe_per_class.csv";
pub const SIGMA_SAMPLES: &str = "sigma_samples.csv";
pub const OOD_AUROC: &str = "ood_auroc.csv";
pub const OOD_SCORES: &str = "ood_scores.csv";
pub const MI_SUMMARY: &str = "mi_summary.csv";
pub const MI_CURVE: &str = "mi_curve.csv";

fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

fn config_issue(key: &str, message: impl Into<String>) -> Error {
    Error::Config(vec![ConfigIssue { key: key.into(), message: message.into() }])
}

/// 0 success, 2 configuration or usage, 3 numeric abort, 4 I/O.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Usage(_) | Error::InvalidArgument(_) | Error::Variant(_) => 2,
        Error::NonFinite { .. } => 3,
        Error::Io(_) | Error::Json(_) | Error::Csv(_) | Error::Checkpoint(_) => 4,
        _ => 1,
    }
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    write_atomic(path, &csv_bytes(header, rows)?)
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<_, _>>()?;
    Ok((header, rows))
}

/// Replaces the rows whose first `key_cols` columns match any of `new`,
/// then sorts, so re-running a command rewrites the file identically.
fn upsert_csv(path: &Path, header: &[&str], key_cols: usize, new: Vec<Vec<String>>) -> Result<()> {
    let mut rows = if path.exists() {
        let (h, rows) = read_csv(path)?;
        if h != header {
            return Err(Error::Checkpoint(format!("{} has an unexpected header", path.display())));
        }
        rows
    } else {
        Vec::new()
    };
    rows.retain(|r| !new.iter().any(|n| n[..key_cols] == r[..key_cols]));
    rows.extend(new);
    rows.sort_by(|a, b| a[..key_cols].cmp(&b[..key_cols]));
    write_csv(path, header, &rows)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn data_root_of(config_path: &Path) -> Result<PathBuf> {
    let parent = config_path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    Ok(fs::canonicalize(parent)?)
}

#[derive(Clone, Debug)]
pub struct PretrainSummary {
    pub run_dir: PathBuf,
    pub last: Option<MetricsRow>,
    pub steps: usize,
}

pub fn pretrain(config_path: &Path, out_dir: &Path, force: bool) -> Result<PretrainSummary> {
    let config = RunConfig::from_path(config_path)?;
    pretrain_config(&config, &data_root_of(config_path)?, out_dir, force)
}

/// Validates, trains and writes config snapshot, streamed metrics,
/// checkpoint and manifest. An aborted run keeps its partial metrics and
/// records the error in the manifest.
pub fn pretrain_config(config: &RunConfig, data_root: &Path, out_dir: &Path, force: bool) -> Result<PretrainSummary> {
    config.validate()?;
    prepare_out_dir(out_dir, force)?;
    let _lock = RunLock::acquire(out_dir)?;
    let mut manifest = RunManifest::start(config, data_root);
    write_atomic(&out_dir.join(CONFIG), config.to_json_pretty().as_bytes())?;
    manifest.save(out_dir)?;

    let outcome = (|| -> Result<TrainOutcome> {
        let splits = config.data.load(data_root)?;
        let mut writer = MetricsWriter::create(&out_dir.join(METRICS))?;
        let out = train_with(config, &splits.train, |row, _, _| writer.write(row))?;
        writer.into_inner()?;
        save_checkpoint(&out_dir.join(CHECKPOINT_DIR), &out.checkpoint(config))?;
        Ok(out)
    })();
    match outcome {
        Ok(out) => {
            manifest.finish(out_dir, None)?;
            Ok(PretrainSummary {
                run_dir: out_dir.to_path_buf(),
                steps: out.history.len(),
                last: out.history.last().cloned(),
            })
        }
        Err(e) => {
            manifest.finish(out_dir, Some(e.to_string()))?;
            Err(e)
        }
    }
}

/// A completed run reloaded from disk.
pub struct LoadedRun {
    pub manifest: RunManifest,
    pub config: RunConfig,
    pub model: Model,
    pub store: ParamStore,
    pub splits: Splits,
}

pub fn open_run(dir: &Path) -> Result<LoadedRun> {
    let manifest = RunManifest::load(dir)?;
    if manifest.status != RunStatus::Complete {
        return Err(usage(format!("{} is not a completed run (status {:?})", dir.display(), manifest.status)));
    }
    let ckpt = load_checkpoint(&dir.join(CHECKPOINT_DIR))?;
    let (config, model) = model_from_checkpoint(&ckpt)?;
    let splits = config.data.load(&manifest.data_root)?;
    Ok(LoadedRun { manifest, config, model, store: ckpt.store, splits })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeMode {
    Freeze,
    Finetune,
}

impl ProbeMode {
    pub fn name(self) -> &'static str {
        match self {
            ProbeMode::Freeze => "freeze",
            ProbeMode::Finetune => "finetune",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProbeArgs {
    pub mode: ProbeMode,
    pub label_fraction: f64,
    /// Overrides the probe or fine-tuning epoch count.
    pub epochs: Option<usize>,
}

impl Default for ProbeArgs {
    fn default() -> Self {
        Self { mode: ProbeMode::Freeze, label_fraction: 1.0, epochs: None }
    }
}

#[derive(Clone, Debug)]
pub struct ProbeSummary {
    pub train_samples: usize,
    pub result: ProbeResult,
}

fn probe_configs(config: &RunConfig, epochs: Option<usize>) -> (ProbeConfig, FinetuneConfig) {
    let mut pc = ProbeConfig { seed: config.seed, ..Default::default() };
    let mut fc = FinetuneConfig { seed: config.seed, ..Default::default() };
    if let Some(e) = epochs {
        pc.epochs = e;
        fc.epochs = e;
    }
    (pc, fc)
}

/// The labelled training subset for a label fraction, stratified by class.
pub fn label_subset(train: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if fraction == 1.0 {
        return Ok(train.clone());
    }
    let idx = stratified_subset(&train.labels, train.classes, fraction, &mut stream(seed, &[tag::PROBE, 1]))?;
    Ok(train.select(&idx))
}

pub fn probe(dir: &Path, args: &ProbeArgs) -> Result<ProbeSummary> {
    let run = open_run(dir)?;
    let _lock = RunLock::acquire(dir)?;
    let train = label_subset(&run.splits.train, args.label_fraction, run.config.seed)?;
    let (pc, fc) = probe_configs(&run.config, args.epochs);
    let source = ProbeSource::Model { model: &run.model, store: &run.store };
    let (result, _) = train_probe(source, &train, &run.splits.test, &pc, &fc, args.mode == ProbeMode::Freeze)?;

    let results = dir.join(RESULTS_DIR);
    fs::create_dir_all(&results)?;
    let key = vec![args.mode.name().to_string(), args.label_fraction.to_string()];
    let row = [key.clone(), vec![train.len().to_string(), run.splits.test.len().to_string(), result.accuracy.to_string()]].concat();
    upsert_csv(
        &results.join(PROBE_RESULT),
        &["mode", "label_fraction", "train_samples", "test_samples", "accuracy"],
        2,
        vec![row],
    )?;
    let per_class = result
        .per_class
        .iter()
        .zip(&result.class_counts)
        .enumerate()
        .map(|(c, (acc, n))| [key.clone(), vec![c.to_string(), n.to_string(), opt(*acc)]].concat())
        .collect();
    upsert_csv(&results.join(PROBE_PER_CLASS), &["mode", "label_fraction", "class", "count", "accuracy"], 2, per_class)?;

    if args.mode == ProbeMode::Freeze && args.label_fraction == 1.0 && run.config.variant.is_stochastic() {
        let sigma = sigma_by_correctness(&run.model, &run.store, &result.probe, &run.splits.test)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &sigma.rows {
            w.serialize(r)?;
        }
        write_atomic(&results.join(SIGMA_SAMPLES), &w.into_inner().map_err(|e| Error::Io(e.into_error()))?)?;
    }
    let mut manifest = run.manifest;
    manifest.save(dir)?;
    Ok(ProbeSummary { train_samples: train.len(), result })
}

pub fn parse_detector(s: &str) -> Result<Detector> {
    let norm = |x: &str| x.to_ascii_lowercase().replace(['_', '-'], "");
    Detector::ALL
        .into_iter()
        .find(|d| norm(d.name()) == norm(s.trim()))
        .ok_or_else(|| {
            let names: Vec<_> = Detector::ALL.iter().map(|d| d.name()).collect();
            usage(format!("unknown detector {s:?}; expected one of {}", names.join(", ")))
        })
}

fn is_applicable(d: Detector, variant: Variant) -> bool {
    variant.is_stochastic() || !matches!(d, Detector::SigmaMean | Detector::SigmaStd)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OodRow {
    pub split: String,
    pub detector: Detector,
    /// `None` is written as N/A.
    pub auroc: Option<f64>,
    pub warning: Option<String>,
}

/// OUT splits named by file stem. Each file holds a data section; its OOD
/// split is used when present, otherwise its test split.
fn out_splits(run: &LoadedRun, specs: &[PathBuf]) -> Result<Vec<(String, Dataset)>> {
    if specs.is_empty() {
        let ood = run.splits.ood.clone().filter(|d| !d.is_empty());
        let ood = ood.ok_or_else(|| usage("the run's dataset has no OOD split; pass --out-spec"))?;
        return Ok(vec![("ood".into(), ood)]);
    }
    let mut out = Vec::new();
    for path in specs {
        let spec: DataSpec = serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| config_issue("out-spec", format!("{}: {e}", path.display())))?;
        let splits = spec.load(&data_root_of(path)?)?;
        let set = match splits.ood {
            Some(o) if !o.is_empty() => o,
            _ => splits.test,
        };
        if set.layout != run.config.input_layout() {
            return Err(Error::Shape(format!("{} has layout {:?}, the run expects {:?}", path.display(), set.layout, run.config.input_layout())));
        }
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
        out.push((name, set));
    }
    Ok(out)
}

/// Runs the requested detectors (all applicable ones by default) against
/// every OUT split. Detectors that do not apply to the run give N/A rows.
pub fn ood(dir: &Path, detectors: Option<&[Detector]>, out_specs: &[PathBuf]) -> Result<Vec<OodRow>> {
    let run = open_run(dir)?;
    let _lock = RunLock::acquire(dir)?;
    let wanted: Vec<Detector> = match detectors {
        Some(d) => d.to_vec(),
        None => Detector::ALL.into_iter().filter(|&d| is_applicable(d, run.config.variant)).collect(),
    };
    let splits = out_splits(&run, out_specs)?;
    let (pc, fc) = probe_configs(&run.config, None);
    let source = ProbeSource::Model { model: &run.model, store: &run.store };
    let (probe, _) = train_probe(source, &run.splits.train, &run.splits.test, &pc, &fc, true)?;

    let mut rows = Vec::new();
    let mut score_rows = Vec::new();
    for (name, set) in &splits {
        let results = evaluate_detectors(
            &run.model,
            &run.store,
            Some(&probe.probe),
            &run.splits.train.x,
            &run.splits.test.x,
            &set.x,
            &OodConfig::default(),
        )?;
        for &d in &wanted {
            let r = results.iter().find(|r| r.detector == d).expect("every detector is evaluated");
            for (label, scores) in [("in", &r.in_scores), ("out", &r.out_scores)] {
                for (i, s) in scores.iter().enumerate() {
                    score_rows.push(vec![name.clone(), d.name().into(), label.into(), i.to_string(), s.to_string()]);
                }
            }
            rows.push(OodRow { split: name.clone(), detector: d, auroc: r.auroc, warning: r.warning.clone() });
        }
    }
    let results = dir.join(RESULTS_DIR);
    fs::create_dir_all(&results)?;
    let summary: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let auroc = r.auroc.map(|a| a.to_string()).unwrap_or_else(|| "N/A".into());
            vec![r.split.clone(), r.detector.name().into(), auroc, r.warning.clone().unwrap_or_default()]
        })
        .collect();
    write_csv(&results.join(OOD_AUROC), &["out_split", "detector", "auroc", "warning"], &summary)?;
    write_csv(&results.join(OOD_SCORES), &["out_split", "detector", "set", "sample", "score"], &score_rows)?;
    let mut manifest = run.manifest;
    manifest.save(dir)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiRow {
    pub pair: PairKind,
    /// Training step of the checkpoint the estimate belongs to.
    pub step: usize,
    pub nats: f64,
    pub window: usize,
    pub curve: Vec<f64>,
}

fn last_metrics_step(dir: &Path) -> Result<usize> {
    let (header, rows) = read_csv(&dir.join(METRICS))?;
    let col = header.iter().position(|h| h == "step").ok_or_else(|| Error::Checkpoint("metrics.csv has no step column".into()))?;
    let last = rows.last().ok_or_else(|| Error::Checkpoint("metrics.csv is empty".into()))?;
    last[col].parse().map_err(|_| Error::Checkpoint(format!("bad step {:?}", last[col])))
}

pub fn mi(dir: &Path, pairs: &[PairKind], mine: &MineConfig) -> Result<Vec<MiRow>> {
    let run = open_run(dir)?;
    let _lock = RunLock::acquire(dir)?;
    if let Some((k, m)) = mine.issues().first() {
        return Err(config_issue(k, m.clone()));
    }
    let step = last_metrics_step(dir)?;
    let mut unique: Vec<PairKind> = Vec::new();
    for &p in pairs {
        if !unique.contains(&p) {
            unique.push(p);
        }
    }
    let cfg = MineConfig { seed: run.config.seed, ..mine.clone() };
    let mut rows = Vec::new();
    for kind in unique {
        let mut src = probe_pairs(&run.model, &run.store, &run.splits.train, kind, run.config.augment.clone(), run.config.seed)?;
        let est = mine_train(&mut src, kind.label(), &cfg)?;
        rows.push(MiRow { pair: kind, step, nats: est.value, window: est.window, curve: est.curve });
    }
    let results = dir.join(RESULTS_DIR);
    fs::create_dir_all(&results)?;
    let summary = rows
        .iter()
        .map(|r| vec![r.pair.label().into(), r.step.to_string(), r.nats.to_string(), r.window.to_string(), cfg.steps.to_string()])
        .collect();
    upsert_csv(&results.join(MI_SUMMARY), &["pair", "step", "mi_nats", "window", "mine_steps"], 1, summary)?;
    let curve = rows
        .iter()
        .flat_map(|r| {
            r.curve
                .iter()
                .enumerate()
                .map(|(i, b)| vec![r.pair.label().to_string(), i.to_string(), b.to_string()])
        })
        .collect();
    upsert_csv(&results.join(MI_CURVE), &["pair", "iteration", "bound"], 1, curve)?;
    let mut manifest = run.manifest;
    manifest.save(dir)?;
    Ok(rows)
}

/// One `key=v1,v2,...` axis of an ablation grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridAxis {
    pub key: String,
    pub values: Vec<String>,
}

impl FromStr for GridAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (key, vals) = s.split_once('=').ok_or_else(|| usage(format!("grid axis {s:?} is not key=v1,v2,...")))?;
        let values: Vec<String> = vals.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
        if key.trim().is_empty() || values.is_empty() {
            return Err(usage(format!("grid axis {s:?} needs a key and at least one value")));
        }
        Ok(Self { key: key.trim().to_string(), values })
    }
}

/// Cartesian product of the axes, last axis varying fastest.
pub fn grid_points(axes: &[GridAxis]) -> Vec<Vec<String>> {
    axes.iter().fold(vec![Vec::new()], |acc, axis| {
        acc.iter()
            .flat_map(|p| axis.values.iter().map(move |v| [p.clone(), vec![v.clone()]].concat()))
            .collect()
    })
}

/// Seeds for `n` repetitions: 1..=n.
pub fn seed_list(n: u64) -> Vec<u64> {
    (1..=n).collect()
}

fn dir_name(axes: &[GridAxis], point: &[String], seed: u64) -> String {
    let mut parts: Vec<String> = axes.iter().zip(point).map(|(a, v)| format!("{}={v}", a.key)).collect();
    parts.push(format!("seed={seed}"));
    parts
        .join("_")
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "=.-+".contains(c) { c } else { '-' })
        .collect()
}

/// Sample mean and n-1 standard deviation; the deviation is `None` below
/// two values.
pub fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = (xs.len() > 1).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(mean), sd)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRun {
    pub dir: PathBuf,
    pub point: Vec<String>,
    pub seed: u64,
    pub loss_total: f64,
    pub mean_sigma: Option<f64>,
    pub probe_accuracy: f64,
}

/// Pretrains and probes every grid point for every seed, then writes
/// `ablation.csv` (one row per run) and `ablation_summary.csv` (mean and
/// n-1 std over seeds per grid point).
pub fn ablate(base_config: &Path, axes: &[GridAxis], seeds: &[u64], out_root: &Path, force: bool, probe_epochs: Option<usize>) -> Result<Vec<AblationRun>> {
    let base = RunConfig::from_path(base_config)?;
    let root = data_root_of(base_config)?;
    if seeds.is_empty() {
        return Err(usage("at least one seed is required"));
    }
    let mut keys: Vec<String> = Vec::new();
    for a in axes {
        let k = RunConfig::resolve_key(&a.key);
        if k == "seed" {
            return Err(usage("seed is set by --seeds, not --grid"));
        }
        if keys.contains(&k) {
            return Err(usage(format!("grid key {} given twice", a.key)));
        }
        keys.push(k);
    }
    let mut plan = Vec::new();
    for point in grid_points(axes) {
        for &seed in seeds {
            let mut cfg = base.with_override("seed", &seed.to_string())?;
            for (a, v) in axes.iter().zip(&point) {
                cfg = cfg.with_override(&a.key, v)?;
            }
            plan.push((point.clone(), seed, cfg));
        }
    }
    fs::create_dir_all(out_root)?;
    let mut runs = Vec::new();
    for (point, seed, cfg) in plan {
        let dir = out_root.join(dir_name(axes, &point, seed));
        let summary = pretrain_config(&cfg, &root, &dir, force)?;
        let probe = probe(&dir, &ProbeArgs { epochs: probe_epochs, ..Default::default() })?;
        let last = summary.last.expect("a completed run has at least one step");
        runs.push(AblationRun {
            dir,
            point,
            seed,
            loss_total: last.loss.total,
            mean_sigma: last.mean_sigma,
            probe_accuracy: probe.result.accuracy,
        });
    }

    let keys: Vec<&str> = axes.iter().map(|a| a.key.as_str()).collect();
    let header: Vec<&str> = [&["run"][..], &keys, &["seed", "loss_total", "mean_sigma", "probe_accuracy"]].concat();
    let rows: Vec<Vec<String>> = runs
        .iter()
        .map(|r| {
            let name = r.dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            [vec![name], r.point.clone(), vec![r.seed.to_string(), r.loss_total.to_string(), opt(r.mean_sigma), r.probe_accuracy.to_string()]].concat()
        })
        .collect();
    write_csv(&out_root.join("ablation.csv"), &header, &rows)?;

    let mut groups: BTreeMap<usize, (Vec<String>, Vec<&AblationRun>)> = BTreeMap::new();
    for (i, r) in runs.iter().enumerate() {
        groups.entry(i / seeds.len()).or_insert_with(|| (r.point.clone(), Vec::new())).1.push(r);
    }
    let header: Vec<&str> = [&keys[..], &["seeds", "accuracy_mean", "accuracy_std", "mean_sigma_mean", "mean_sigma_std"]].concat();
    let rows: Vec<Vec<String>> = groups
        .values()
        .map(|(point, rs)| {
            let (am, asd) = mean_std(&rs.iter().map(|r| r.probe_accuracy).collect::<Vec<_>>());
            let (sm, ssd) = mean_std(&rs.iter().filter_map(|r| r.mean_sigma).collect::<Vec<_>>());
            [point.clone(), vec![rs.len().to_string(), opt(am), opt(asd), opt(sm), opt(ssd)]].concat()
        })
        .collect();
    write_csv(&out_root.join("ablation_summary.csv"), &header, &rows)?;
    Ok(runs)
}

fn column(header: &[String], name: &str) -> Result<usize> {
    header.iter().position(|h| h == name).ok_or_else(|| Error::Checkpoint(format!("missing column {name}")))
}

fn prior_name(p: PriorSpec) -> String {
    match p {
        PriorSpec::StandardNormal => "standard_normal".into(),
        PriorSpec::Mog { components } => format!("mog{components}"),
    }
}

/// Aggregates run directories into `runs.csv`, `sigma_density.csv`
/// (per-sample mean sigma) and `mi_vs_loss.csv` (MI joined with the
/// metrics row of the same step). Returns the files written.
pub fn report(run_dirs: &[PathBuf], emit: &str, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if run_dirs.is_empty() {
        return Err(usage("no run directories given"));
    }
    if emit != "csv" {
        return Err(usage(format!("unsupported --emit {emit:?}; only csv is available")));
    }
    let mut runs = Vec::new();
    let mut density = Vec::new();
    let mut joined = Vec::new();
    for dir in run_dirs {
        let manifest = RunManifest::load(dir)?;
        let c = &manifest.config;
        let name = dir.display().to_string();
        let (mh, metrics) = read_csv(&dir.join(METRICS))?;
        let step_col = column(&mh, "step")?;
        let get = |row: &Vec<String>, col: &str| -> Result<String> { Ok(row[column(&mh, col)?].clone()) };

        let mut acc = BTreeMap::new();
        let probe_path = dir.join(RESULTS_DIR).join(PROBE_RESULT);
        if probe_path.exists() {
            let (h, rows) = read_csv(&probe_path)?;
            let (m, f, a) = (column(&h, "mode")?, column(&h, "label_fraction")?, column(&h, "accuracy")?);
            for r in rows.iter().filter(|r| r[f] == "1") {
                acc.insert(r[m].clone(), r[a].clone());
            }
        }
        let last = metrics.last();
        runs.push(vec![
            name.clone(),
            c.method.name().into(),
            c.variant.name().into(),
            prior_name(c.prior),
            c.loss.beta.to_string(),
            c.loss.mc_samples.to_string(),
            c.seed.to_string(),
            metrics.len().to_string(),
            last.map(|r| get(r, "loss_total")).transpose()?.unwrap_or_default(),
            last.map(|r| get(r, "mean_sigma")).transpose()?.unwrap_or_default(),
            acc.get("freeze").cloned().unwrap_or_default(),
            acc.get("finetune").cloned().unwrap_or_default(),
        ]);

        let sigma_path = dir.join(RESULTS_DIR).join(SIGMA_SAMPLES);
        if sigma_path.exists() {
            let (_, rows) = read_csv(&sigma_path)?;
            density.extend(rows.into_iter().map(|r| [vec![name.clone()], r].concat()));
        }

        let mi_path = dir.join(RESULTS_DIR).join(MI_SUMMARY);
        if mi_path.exists() {
            let (h, rows) = read_csv(&mi_path)?;
            let (p, s, v) = (column(&h, "pair")?, column(&h, "step")?, column(&h, "mi_nats")?);
            for r in rows {
                if let Some(m) = metrics.iter().find(|m| m[step_col] == r[s]) {
                    let mut row = vec![name.clone(), r[p].clone(), r[s].clone(), r[v].clone()];
                    for col in ["loss_total", "loss_inv", "loss_reg", "loss_div"] {
                        row.push(get(m, col)?);
                    }
                    joined.push(row);
                }
            }
        }
    }
    fs::create_dir_all(out_dir)?;
    let files = [
        (
            "runs.csv",
            vec![
                "run", "method", "variant", "prior", "beta", "mc_samples", "seed", "steps", "loss_total", "mean_sigma",
                "freeze_accuracy", "finetune_accuracy",
            ],
            runs,
        ),
        ("sigma_density.csv", vec!["run", "sample", "label", "predicted", "correct", "mean_sigma"], density),
        (
            "mi_vs_loss.csv",
            vec!["run", "pair", "step", "mi_nats", "loss_total", "loss_inv", "loss_reg", "loss_div"],
            joined,
        ),
    ];
    let mut written = Vec::new();
    for (file, header, rows) in files {
        let path = out_dir.join(file);
        write_csv(&path, &header, &rows)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_product_order_and_size() {
        let axes = vec!["beta=1e-4,1e-3,1e-2".parse::<GridAxis>().unwrap(), "K=1,12".parse().unwrap()];
        let pts = grid_points(&axes);
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[0], ["1e-4", "1"]);
        assert_eq!(pts[1], ["1e-4", "12"]);
        assert_eq!(pts[5], ["1e-2", "12"]);
        assert_eq!(grid_points(&[]).len(), 1);
        assert!("beta".parse::<GridAxis>().is_err());
        assert!("beta=".parse::<GridAxis>().is_err());
    }

    #[test]
    fn mean_std_hand_values() {
        // 0.5, 0.6, 0.7: mean 0.6, sample variance 0.01
        let (m, s) = mean_std(&[0.5, 0.6, 0.7]);
        assert!((m.unwrap() - 0.6).abs() < 1e-12);
        assert!((s.unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(mean_std(&[0.3]), (Some(0.3), None));
        assert_eq!(mean_std(&[]), (None, None));
    }

    #[test]
    fn detector_names_parse() {
        for d in Detector::ALL {
            assert_eq!(parse_detector(d.name()).unwrap(), d);
        }
        assert_eq!(parse_detector("sigma_mean").unwrap(), Detector::SigmaMean);
        assert_eq!(parse_detector("odin").unwrap(), Detector::Odin);
        assert!(parse_detector("energy").is_err());
    }

    #[test]
    fn dir_names_are_path_safe() {
        let axes = vec!["prior={\"kind\":\"mog\"}".parse::<GridAxis>().unwrap()];
        let name = dir_name(&axes, &axes[0].values, 2);
        assert!(!name.contains('/') && !name.contains('"') && name.ends_with("seed=2"));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&config_issue("beta", "negative")), 2);
        assert_eq!(exit_code(&Error::NonFinite { term: "inv".into(), step: 0 }), 3);
        assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))), 4);
    }

    #[test]
    fn upsert_replaces_matching_keys() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("t.csv");
        let h = ["mode", "frac", "acc"];
        let row = |a: &str, b: &str, c: &str| vec![a.to_string(), b.to_string(), c.to_string()];
        upsert_csv(&p, &h, 2, vec![row("freeze", "1", "0.5"), row("freeze", "0.1", "0.4")]).unwrap();
        upsert_csv(&p, &h, 2, vec![row("freeze", "1", "0.6")]).unwrap();
        let (_, rows) = read_csv(&p).unwrap();
        assert_eq!(rows, vec![row("freeze", "0.1", "0.4"), row("freeze", "1", "0.6")]);
    }
}
