use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use probssl::mi::{MineConfig, PairKind};
use probssl::ood::Detector;
use probssl_cli::commands::{self, GridAxis, ProbeArgs, ProbeMode};
use probssl_cli::rundir::{RunManifest, RunStatus};
use serde_json::{json, Value};

fn tiny(method: &str, variant: &str, seed: u64) -> Value {
    json!({
        "method": method,
        "variant": variant,
        "seed": seed,
        "loss": { "mc_samples": 2, "beta": 1e-3 },
        "model": { "hidden_dim": 16, "rep_dim": 8, "proj_hidden": 8, "proj_dim": 8 },
        "schedule": { "epochs": 2, "warmup_epochs": 1, "batch_size": 32, "steps_per_epoch": 4 },
        "data": {
            "kind": "synthetic", "classes": 4, "latent_dim": 4, "observed_dim": 12,
            "train_samples": 200, "test_samples": 120, "ood_samples": 80
        }
    })
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_probssl")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_rows(p: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(p).unwrap();
    let h = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect();
    (h, rows)
}

fn col(h: &[String], name: &str) -> usize {
    h.iter().position(|x| x == name).unwrap()
}

#[test]
fn pretrain_writes_run_directory() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "c.json", &tiny("barlow", "zprob", 1));
    let out = d.path().join("run");
    let o = bin(&["pretrain", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["manifest.json", "config.json", "metrics.csv", "checkpoint/checkpoint.json", "checkpoint/checkpoint.bin"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    assert!(!out.join(".lock").exists());
    let m = RunManifest::load(&out).unwrap();
    assert_eq!(m.status, RunStatus::Complete);
    assert_eq!(m.seed, 1);
    assert!(m.finished_unix.unwrap() >= m.started_unix);
    assert!(m.stale_files(&out).unwrap().is_empty());
    assert_eq!(m.files.len(), 4);
    let (_, rows) = read_rows(&out.join("metrics.csv"));
    assert_eq!(rows.len(), 8);
}

#[test]
fn invalid_config_names_the_key() {
    let d = tempfile::tempdir().unwrap();
    let mut v = tiny("vicreg", "hprob", 1);
    v["loss"]["beta"] = json!(-0.5);
    v["schedule"]["batch_size"] = json!(1);
    let cfg = write_config(d.path(), "c.json", &v);
    let o = bin(&["pretrain", "--config", s(&cfg), "--out", s(&d.path().join("run"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("beta"), "{err}");
    assert!(err.contains("batch_size"), "{err}");
    assert!(!d.path().join("run").exists());
}

#[test]
fn future_schema_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    let mut v = tiny("barlow", "deterministic", 1);
    v["schema_version"] = json!(99);
    let cfg = write_config(d.path(), "c.json", &v);
    let o = bin(&["pretrain", "--config", s(&cfg), "--out", s(&d.path().join("run"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("schema_version"));
}

#[test]
fn same_seed_same_outputs_and_force_is_idempotent() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "c.json", &tiny("vicreg", "hprob", 3));
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    commands::pretrain(&cfg, &a, false).unwrap();
    commands::pretrain(&cfg, &b, false).unwrap();
    for f in ["metrics.csv", "config.json", "checkpoint/checkpoint.bin", "checkpoint/checkpoint.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let before = fs::read(a.join("metrics.csv")).unwrap();
    let o = bin(&["pretrain", "--config", s(&cfg), "--out", s(&a)]);
    assert_eq!(o.status.code(), Some(4), "non-empty out dir needs --force");
    let o = bin(&["pretrain", "--config", s(&cfg), "--out", s(&a), "--force"]);
    assert!(o.status.success());
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), before);
}

#[test]
fn locked_run_dir_is_refused() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "c.json", &tiny("barlow", "deterministic", 1));
    let out = d.path().join("run");
    commands::pretrain(&cfg, &out, false).unwrap();
    fs::write(out.join(".lock"), "123\n").unwrap();
    assert_eq!(bin(&["pretrain", "--config", s(&cfg), "--out", s(&out), "--force"]).status.code(), Some(4));
    assert_eq!(bin(&["probe", "--run", s(&out)]).status.code(), Some(4));
}

#[test]
fn divergent_run_exits_with_numeric_abort() {
    let d = tempfile::tempdir().unwrap();
    let mut v = tiny("vicreg", "deterministic", 1);
    v["optimizer"] = json!({ "lr_peak": 1e200, "lr_final": 1e200 });
    v["schedule"]["warmup_epochs"] = json!(0);
    let cfg = write_config(d.path(), "c.json", &v);
    let out = d.path().join("run");
    let o = bin(&["pretrain", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("non-finite"));
    let m = RunManifest::load(&out).unwrap();
    assert_eq!(m.status, RunStatus::Aborted);
    assert!(m.error.unwrap().contains("non-finite"));
    // rows up to the abort are kept
    assert!(out.join("metrics.csv").exists());
    assert_eq!(bin(&["probe", "--run", s(&out)]).status.code(), Some(2));
}

#[test]
fn probe_freeze_and_label_fraction() {
    let d = tempfile::tempdir().unwrap();
    let mut v = tiny("barlow", "zprob", 1);
    v["data"]["train_samples"] = json!(1000);
    let cfg = write_config(d.path(), "c.json", &v);
    let run = d.path().join("run");
    commands::pretrain(&cfg, &run, false).unwrap();

    let o = bin(&["probe", "--run", s(&run), "--freeze", "--epochs", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = bin(&["probe", "--run", s(&run), "--label-fraction", "0.01", "--epochs", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let (h, rows) = read_rows(&run.join("results/probe_result.csv"));
    assert_eq!(rows.len(), 2);
    for r in &rows {
        let acc: f64 = r[col(&h, "accuracy")].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
    // stratified 1%: per class round(n_c / 100), at least one
    let data = probssl::data::synth_multiview_dataset(
        &serde_json::from_value(json!({ "classes": 4, "latent_dim": 4, "observed_dim": 12, "train_samples": 1000, "test_samples": 120, "ood_samples": 80 })).unwrap(),
        0,
    )
    .unwrap();
    let mut counts = [0usize; 4];
    data.train.labels.iter().for_each(|&l| counts[l] += 1);
    let expected: usize = counts.iter().map(|&c| ((c as f64 * 0.01).round() as usize).max(1)).sum();
    let frac = rows.iter().find(|r| r[col(&h, "label_fraction")] == "0.01").unwrap();
    assert_eq!(frac[col(&h, "train_samples")].parse::<usize>().unwrap(), expected);
    let sub = commands::label_subset(&data.train, 0.01, 1).unwrap();
    let mut sub_counts = [0usize; 4];
    sub.labels.iter().for_each(|&l| sub_counts[l] += 1);
    for c in 0..4 {
        assert_eq!(sub_counts[c], ((counts[c] as f64 * 0.01).round() as usize).max(1));
    }

    // stochastic run: per-sample sigma export for density plots
    let (h, rows) = read_rows(&run.join("results/sigma_samples.csv"));
    assert_eq!(h, ["sample", "label", "predicted", "correct", "mean_sigma"]);
    assert_eq!(rows.len(), 120);

    assert_eq!(bin(&["probe", "--run", s(&run), "--label-fraction", "0"]).status.code(), Some(2));
    assert_eq!(bin(&["probe", "--run", s(&run), "--freeze", "--finetune"]).status.code(), Some(2));
    assert!(RunManifest::load(&run).unwrap().stale_files(&run).unwrap().is_empty());
}

#[test]
fn finetune_at_least_matches_frozen_probe() {
    let d = tempfile::tempdir().unwrap();
    let (mut frozen, mut tuned) = (0.0, 0.0);
    for seed in 1..=3 {
        let mut v = tiny("barlow", "deterministic", seed);
        v["data"]["center_scale"] = json!(0.8);
        v["data"]["train_samples"] = json!(600);
        let cfg = write_config(d.path(), &format!("c{seed}.json"), &v);
        let run = d.path().join(format!("run{seed}"));
        commands::pretrain(&cfg, &run, false).unwrap();
        frozen += commands::probe(&run, &ProbeArgs { epochs: Some(10), ..Default::default() }).unwrap().result.accuracy;
        tuned += commands::probe(&run, &ProbeArgs { mode: ProbeMode::Finetune, epochs: Some(10), ..Default::default() })
            .unwrap()
            .result
            .accuracy;
    }
    println!("mean accuracy: frozen {:.4}, fine-tuned {:.4}", frozen / 3.0, tuned / 3.0);
    assert!(tuned >= frozen, "fine-tuned {tuned} < frozen {frozen} (sums over 3 seeds)");
}

#[test]
fn ood_na_rows_and_row_counts() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "c.json", &tiny("barlow", "deterministic", 1));
    let run = d.path().join("run");
    commands::pretrain(&cfg, &run, false).unwrap();

    // default list skips detectors that do not apply
    let rows = commands::ood(&run, None, &[]).unwrap();
    let names: Vec<_> = rows.iter().map(|r| r.detector).collect();
    assert_eq!(names, [Detector::Mahalanobis, Detector::MaxSoftmax, Detector::Entropy, Detector::Odin]);
    assert!(rows.iter().all(|r| r.auroc.is_some()));

    // requested sigma detectors on a deterministic run give N/A rows
    let spec = json!({ "kind": "synthetic", "classes": 4, "latent_dim": 4, "observed_dim": 12,
        "train_samples": 40, "test_samples": 40, "ood_samples": 60, "ood_shift": 3.0, "seed": 9 });
    let far = write_config(d.path(), "far.json", &spec);
    let near = write_config(d.path(), "near.json", &tiny("barlow", "deterministic", 1)["data"]);
    let o = bin(&["ood", "--run", s(&run), "--detectors", "SigmaMean,sigma_std,Mahalanobis", "--out-spec", s(&near), "--out-spec", s(&far)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (h, rows) = read_rows(&run.join("results/ood_auroc.csv"));
    assert_eq!(rows.len(), 3 * 2);
    for r in &rows {
        let a = &r[col(&h, "auroc")];
        if r[col(&h, "detector")].starts_with("Sigma") {
            assert_eq!(a, "N/A");
        } else {
            assert!((0.0..=1.0).contains(&a.parse::<f64>().unwrap()));
        }
    }
    let splits: std::collections::BTreeSet<_> = rows.iter().map(|r| r[col(&h, "out_split")].clone()).collect();
    assert_eq!(splits.into_iter().collect::<Vec<_>>(), ["far", "near"]);
    assert_eq!(bin(&["ood", "--run", s(&run), "--detectors", "energy"]).status.code(), Some(2));
}

#[test]
fn mi_pairs_and_report_join() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "c.json", &tiny("vicreg", "zprob", 2));
    let run = d.path().join("run");
    commands::pretrain(&cfg, &run, false).unwrap();
    commands::probe(&run, &ProbeArgs { epochs: Some(2), ..Default::default() }).unwrap();

    let o = bin(&["mi", "--run", s(&run), "--pairs", "v:h,z:z'", "--steps", "30", "--hidden", "8"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (h, rows) = read_rows(&run.join("results/mi_summary.csv"));
    let pairs: Vec<_> = rows.iter().map(|r| r[col(&h, "pair")].clone()).collect();
    assert_eq!(pairs, ["v:h", "z:z'"]);
    assert!(rows.iter().all(|r| r[col(&h, "step")] == "7"));
    let (_, curve) = read_rows(&run.join("results/mi_curve.csv"));
    assert_eq!(curve.len(), 60);
    assert_eq!(bin(&["mi", "--run", s(&run), "--pairs", "v:q"]).status.code(), Some(2));

    // a rerun of one pair replaces only that pair
    let cfg_mi = MineConfig { steps: 10, hidden: 8, ..Default::default() };
    commands::mi(&run, &[PairKind::HZ], &cfg_mi).unwrap();
    let (_, rows) = read_rows(&run.join("results/mi_summary.csv"));
    assert_eq!(rows.len(), 3);

    let out = d.path().join("report");
    let o = bin(&["report", s(&run), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (h, rows) = read_rows(&out.join("mi_vs_loss.csv"));
    assert_eq!(rows.len(), 3);
    let (mh, metrics) = read_rows(&run.join("metrics.csv"));
    let last = metrics.last().unwrap();
    for r in &rows {
        assert_eq!(r[col(&h, "loss_total")], last[col(&mh, "loss_total")]);
        assert_eq!(r[col(&h, "step")], last[col(&mh, "step")]);
    }
    let (h, rows) = read_rows(&out.join("runs.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][col(&h, "variant")], "zprob");
    assert!(!rows[0][col(&h, "freeze_accuracy")].is_empty());
    let (_, density) = read_rows(&out.join("sigma_density.csv"));
    assert_eq!(density.len(), 120);

    let o = bin(&["report", "--out", s(&d.path().join("empty"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!d.path().join("empty/runs.csv").exists());
}

#[test]
fn ablation_grid_runs_product_and_summarizes() {
    let d = tempfile::tempdir().unwrap();
    let mut v = tiny("barlow", "hprob", 0);
    v["schedule"]["epochs"] = json!(1);
    v["schedule"]["warmup_epochs"] = json!(0);
    v["schedule"]["steps_per_epoch"] = json!(2);
    let cfg = write_config(d.path(), "base.json", &v);
    let out = d.path().join("grid");
    let o = bin(&["ablate", "--config", s(&cfg), "--grid", "beta=1e-4,1e-3,1e-2", "--seeds", "3", "--out", s(&out), "--probe-epochs", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (h, rows) = read_rows(&out.join("ablation.csv"));
    assert_eq!(rows.len(), 9);
    let seeds: Vec<_> = rows.iter().map(|r| r[col(&h, "seed")].as_str()).collect();
    assert_eq!(seeds, ["1", "2", "3", "1", "2", "3", "1", "2", "3"]);
    for r in &rows {
        assert!(out.join(&r[0]).join("manifest.json").exists());
    }

    // summary mean / n-1 std recomputed by hand from the per-run table
    let (sh, summary) = read_rows(&out.join("ablation_summary.csv"));
    assert_eq!(summary.len(), 3);
    for srow in &summary {
        let accs: Vec<f64> = rows
            .iter()
            .filter(|r| r[col(&h, "beta")] == srow[col(&sh, "beta")])
            .map(|r| r[col(&h, "probe_accuracy")].parse().unwrap())
            .collect();
        assert_eq!(accs.len(), 3);
        let m = (accs[0] + accs[1] + accs[2]) / 3.0;
        let sd = (((accs[0] - m).powi(2) + (accs[1] - m).powi(2) + (accs[2] - m).powi(2)) / 2.0).sqrt();
        let got_m: f64 = srow[col(&sh, "accuracy_mean")].parse().unwrap();
        let got_sd: f64 = srow[col(&sh, "accuracy_std")].parse().unwrap();
        assert!((got_m - m).abs() < 1e-12 && (got_sd - sd).abs() < 1e-12);
        assert_eq!(srow[col(&sh, "seeds")], "3");
    }
}

#[test]
fn ablation_mc_axis_and_bad_keys() {
    let d = tempfile::tempdir().unwrap();
    let mut v = tiny("vicreg", "hprob", 0);
    v["schedule"]["epochs"] = json!(1);
    v["schedule"]["warmup_epochs"] = json!(0);
    v["schedule"]["steps_per_epoch"] = json!(1);
    let cfg = write_config(d.path(), "base.json", &v);
    let axes = vec!["K=1,12".parse::<GridAxis>().unwrap()];
    let runs = commands::ablate(&cfg, &axes, &[1], &d.path().join("g"), false, Some(1)).unwrap();
    assert_eq!(runs.len(), 2);
    let k: Vec<_> = runs
        .iter()
        .map(|r| RunManifest::load(&r.dir).unwrap().config.loss.mc_samples)
        .collect();
    assert_eq!(k, [1, 12]);

    let o = bin(&["ablate", "--config", s(&cfg), "--grid", "loss.nope=1", "--seeds", "1", "--out", s(&d.path().join("h"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!d.path().join("h").exists());
}
