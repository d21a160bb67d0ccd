use iwavb_cli::commands::eval::{cmd_eval, REPORT_FILE};
use iwavb_cli::commands::fit::{FitResult, DIAGNOSTICS_FILE, FIT_FILE};
use iwavb_cli::commands::heldout::{HeldoutReport, HELDOUT_FILE};
use iwavb_cli::commands::scree::{ScreeReport, SCREE_CSV, SCREE_JSON};
use iwavb_cli::commands::simulate::{TruthDocument, RESPONSES_FILE, TRUTH_FILE};
use iwavb_cli::manifest::MANIFEST_FILE;
use iwavb_core::estimators::{EstimatorKind, FitConfig, FitStatus, Structure};
use iwavb_core::io::{read_json, read_responses_path, write_json};
use iwavb_core::GrmParams;
use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use tempfile::TempDir;

fn iwavb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iwavb")).args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn write(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_vec_pretty(v).unwrap()).unwrap();
    path
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn design(n: usize, m: usize, p: usize, c: usize) -> Value {
    json!({
        "n_respondents": n,
        "n_items": m,
        "n_factors": p,
        "categories": c,
        "structure": "simple",
        "latent": {"kind": "normal"},
        "seed": 17
    })
}

/// Simulates one replication and returns its directory.
fn simulated(dir: &Path, d: Value) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let path = write(dir, "design.json", &d);
    let out = dir.join("sim");
    assert_exit(&iwavb(&["simulate", "--design", p(&path), "--out", p(&out)]), 0);
    out.join("rep_000")
}

fn small_fit(kind: &str, n_factors: usize) -> Value {
    json!({
        "kind": kind,
        "n_factors": n_factors,
        "structure": "simple",
        "free_corr": n_factors > 1,
        "batch_size": 32,
        "max_iterations": 200,
        "encoder_hidden": [16],
        "disc_hidden": [16, 8],
        "seed": 5
    })
}

fn fit_into(dir: &Path, data: &Path, cfg: &Value, name: &str) -> (Output, PathBuf) {
    let config = write(dir, &format!("{name}.json"), cfg);
    let out = dir.join(name);
    (iwavb(&["fit", "--config", p(&config), "--data", p(data), "--out", p(&out)]), out)
}

#[test]
fn simulate_writes_design_shaped_responses() {
    let dir = TempDir::new().unwrap();
    let rep = simulated(dir.path(), design(500, 50, 5, 5));
    let x = read_responses_path(&rep.join(RESPONSES_FILE), None).unwrap();
    assert_eq!((x.n_respondents(), x.n_items()), (500, 50));
    assert!(x.codes().iter().all(|&c| (0..5).contains(&c)));
    let truth = TruthDocument::read(&rep.join(TRUTH_FILE)).unwrap();
    assert_eq!(truth.parameters.loadings.len(), 50);
    assert!(dir.path().join("sim").join(MANIFEST_FILE).is_file());
}

#[test]
fn simulate_single_respondent() {
    let dir = TempDir::new().unwrap();
    let rep = simulated(dir.path(), design(1, 4, 1, 3));
    let text = std::fs::read_to_string(rep.join(RESPONSES_FILE)).unwrap();
    assert_eq!(text.lines().count(), 2, "{text}");
}

#[test]
fn simulate_reruns_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let path = write(dir.path(), "design.json", &design(40, 6, 2, 4));
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        assert_exit(
            &iwavb(&["simulate", "--design", p(&path), "--out", p(&out), "--set", "replications=3", "--jobs", "2"]),
            0,
        );
        let rep = out.join("rep_002");
        files.push((std::fs::read(rep.join(RESPONSES_FILE)).unwrap(), std::fs::read(rep.join(TRUTH_FILE)).unwrap()));
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn invalid_design_exits_2_naming_the_field() {
    let dir = TempDir::new().unwrap();
    let path = write(dir.path(), "design.json", &design(10, 4, 1, 1));
    let out = iwavb(&["simulate", "--design", p(&path), "--out", p(&dir.path().join("o"))]);
    assert_exit(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("categories"));
}

#[test]
fn unreadable_csv_exits_2() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("bad.csv");
    std::fs::write(&data, "item_1,item_2\n0,x\n").unwrap();
    let (out, _) = fit_into(dir.path(), &data, &small_fit("iwae", 1), "fit");
    assert_exit(&out, 2);
    let (out, _) = fit_into(dir.path(), &dir.path().join("missing.csv"), &small_fit("iwae", 1), "fit2");
    assert_exit(&out, 2);
}

#[test]
fn invalid_config_exits_2() {
    let dir = TempDir::new().unwrap();
    let rep = simulated(dir.path(), design(30, 4, 1, 3));
    let mut cfg = small_fit("iwae", 1);
    cfg["batch_size"] = json!(0);
    let (out, _) = fit_into(dir.path(), &rep.join(RESPONSES_FILE), &cfg, "fit");
    assert_exit(&out, 2);
    let mut cfg = small_fit("iwae", 1);
    cfg["unknown_key"] = json!(1);
    let (out, _) = fit_into(dir.path(), &rep.join(RESPONSES_FILE), &cfg, "fit2");
    assert_exit(&out, 2);
}

#[test]
fn divergent_fit_exits_3_with_last_good_iteration() {
    let dir = TempDir::new().unwrap();
    let rep = simulated(dir.path(), design(60, 6, 1, 3));
    let mut cfg = small_fit("iwae", 1);
    cfg["lr_gen"] = json!(1e300);
    let (out, fit_dir) = fit_into(dir.path(), &rep.join(RESPONSES_FILE), &cfg, "fit");
    assert_exit(&out, 3);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("iteration"), "{stderr}");
    assert!(fit_dir.join(DIAGNOSTICS_FILE).is_file());
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let dir = TempDir::new().unwrap();
    let rep = simulated(dir.path(), design(60, 6, 2, 3));
    let mut cfg = small_fit("iwavb", 2);
    cfg["lr_gen"] = json!(0.0);
    cfg["lr_disc"] = json!(0.0);
    cfg["max_iterations"] = json!(50);
    let (out, fit_dir) = fit_into(dir.path(), &rep.join(RESPONSES_FILE), &cfg, "fit");
    assert_exit(&out, 0);
    let fit = FitResult::read(&fit_dir.join(FIT_FILE)).unwrap();
    assert_eq!(fit.status, FitStatus::MaxIterations);
    assert_eq!(fit.iterations, 50);
    let x = read_responses_path(&rep.join(RESPONSES_FILE), None).unwrap();
    let init = fit.config.init_model::<f64>(x.categories(), fit.indicators).unwrap();
    assert_eq!(fit.parameters.raw, init.decoder);
    assert_eq!(fit.encoder, init.encoder);
    assert_eq!(fit.discriminator, init.discriminator);
}

#[test]
fn identical_config_gives_identical_fit() {
    let dir = TempDir::new().unwrap();
    let rep = simulated(dir.path(), design(60, 6, 1, 3));
    let data = rep.join(RESPONSES_FILE);
    let (a, da) = fit_into(dir.path(), &data, &small_fit("avb", 1), "a");
    let (b, db) = fit_into(dir.path(), &data, &small_fit("avb", 1), "b");
    assert_exit(&a, 0);
    assert_exit(&b, 0);
    assert_eq!(std::fs::read(da.join(FIT_FILE)).unwrap(), std::fs::read(db.join(FIT_FILE)).unwrap());
    // A manifest is a valid config and reproduces the run.
    let c = dir.path().join("c");
    let out = iwavb(&["fit", "--config", p(&da.join(MANIFEST_FILE)), "--data", p(&data), "--out", p(&c)]);
    assert_exit(&out, 0);
    assert_eq!(std::fs::read(da.join(FIT_FILE)).unwrap(), std::fs::read(c.join(FIT_FILE)).unwrap());
}

#[test]
fn iwae_converges_on_the_one_factor_toy() {
    let dir = TempDir::new().unwrap();
    let mut d = design(500, 20, 1, 3);
    d["latent"] = json!({"kind": "mixture", "weights": [0.4, 0.2, 0.4], "means": [-1.5, 0.0, 1.5], "var": 0.5});
    let rep = simulated(dir.path(), d);
    let cfg = json!({
        "kind": "iwae",
        "n_factors": 1,
        "iw_samples": 10,
        "lr_gen": 5e-4,
        "window": 50,
        "patience": 10,
        "max_iterations": 20000,
        "seed": 3
    });
    let (out, fit_dir) = fit_into(dir.path(), &rep.join(RESPONSES_FILE), &cfg, "fit");
    assert_exit(&out, 0);
    let fit = FitResult::read(&fit_dir.join(FIT_FILE)).unwrap();
    assert_eq!(fit.status, FitStatus::Converged);
    assert!(fit.iterations < 20000);
}

/// A fit on simulated data and the matching truth file.
fn fit_and_truth(dir: &Path) -> (PathBuf, PathBuf) {
    let rep = simulated(dir, design(80, 8, 2, 3));
    let (out, fit_dir) = fit_into(dir, &rep.join(RESPONSES_FILE), &small_fit("iwae", 2), "fit");
    assert_exit(&out, 0);
    (fit_dir.join(FIT_FILE), rep.join(TRUTH_FILE))
}

fn with_parameters(fit: &Path, params: &GrmParams, out: &Path) {
    let mut v: Value = read_json(fit).unwrap();
    v["parameters"] = serde_json::to_value(params.to_document()).unwrap();
    write_json(out, &v).unwrap();
}

#[test]
fn eval_of_the_truth_has_zero_error() {
    let dir = TempDir::new().unwrap();
    let (fit, truth) = fit_and_truth(dir.path());
    let t = TruthDocument::read(&truth).unwrap().parameters.into_params();
    let exact = dir.path().join("exact.json");
    with_parameters(&fit, &t, &exact);
    let report = cmd_eval(&exact, &truth, &dir.path().join("eval")).unwrap();
    let names: Vec<&str> = report.blocks.keys().map(String::as_str).collect();
    assert_eq!(names, ["correlations", "intercepts", "loadings"]);
    for b in report.blocks.values() {
        assert_eq!((b.mse, b.bias), (0.0, 0.0));
    }
    assert!(dir.path().join("eval").join(REPORT_FILE).is_file());
}

#[test]
fn eval_bias_follows_an_injected_shift() {
    let dir = TempDir::new().unwrap();
    let (fit, truth) = fit_and_truth(dir.path());
    let t = TruthDocument::read(&truth).unwrap().parameters.into_params();
    let shifted: Vec<Vec<f64>> = t.intercepts().iter().map(|a| a.iter().map(|v| v + 0.1).collect()).collect();
    let moved = GrmParams::from_values(&t.loadings(), &shifted, &t.factor_corr(), t.pattern().clone(), t.free_corr())
        .unwrap();
    let path = dir.path().join("shifted.json");
    with_parameters(&fit, &moved, &path);
    let report = cmd_eval(&path, &truth, &dir.path().join("eval")).unwrap();
    let b = &report.blocks["intercepts"];
    assert!((b.bias - 0.1).abs() < 1e-9 && (b.mse - 0.01).abs() < 1e-9, "{b:?}");
    assert!(report.blocks["loadings"].mse < 1e-20);
}

#[test]
fn eval_shape_mismatch_exits_2() {
    let dir = TempDir::new().unwrap();
    let (fit, _) = fit_and_truth(dir.path());
    let other = simulated(&dir.path().join("other"), design(20, 10, 2, 3));
    let out = iwavb(&[
        "eval",
        "--fits",
        p(&fit),
        "--truths",
        p(&other.join(TRUTH_FILE)),
        "--out",
        p(&dir.path().join("e")),
    ]);
    assert_exit(&out, 2);
}

#[test]
fn heldout_quarter_of_500_is_125_and_shared_between_estimators() {
    let dir = TempDir::new().unwrap();
    let rep = simulated(dir.path(), design(500, 6, 1, 3));
    let data = rep.join(RESPONSES_FILE);
    let mut ids = Vec::new();
    for kind in ["iwae", "iwavb"] {
        let mut cfg = small_fit(kind, 1);
        cfg["max_iterations"] = json!(50);
        cfg["holdout_fraction"] = json!(0.25);
        let (out, fit_dir) = fit_into(dir.path(), &data, &cfg, kind);
        assert_exit(&out, 0);
        let h = dir.path().join(format!("{kind}_heldout"));
        let out = iwavb(&["heldout", "--fit", p(&fit_dir.join(FIT_FILE)), "--data", p(&data), "--r-eval", "50", "--out", p(&h)]);
        assert_exit(&out, 0);
        let report: HeldoutReport = read_json(&h.join(HELDOUT_FILE)).unwrap();
        assert_eq!(report.ids.len(), 125);
        assert_eq!(report.per_respondent.len(), 125);
        assert!(report.total.is_finite() && !report.high_variance);
        ids.push(report.ids);
    }
    assert_eq!(ids[0], ids[1]);
}

#[test]
fn heldout_single_draw_is_flagged() {
    let dir = TempDir::new().unwrap();
    let rep = simulated(dir.path(), design(40, 6, 1, 3));
    let data = rep.join(RESPONSES_FILE);
    let (out, fit_dir) = fit_into(dir.path(), &data, &small_fit("iwae", 1), "fit");
    assert_exit(&out, 0);
    let fit = fit_dir.join(FIT_FILE);
    let h = dir.path().join("h");
    let out = iwavb(&["heldout", "--fit", p(&fit), "--data", p(&data), "--ids", "0,3,7", "--r-eval", "1", "--out", p(&h)]);
    assert_exit(&out, 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("high variance"));
    let report: HeldoutReport = read_json(&h.join(HELDOUT_FILE)).unwrap();
    assert!(report.high_variance);
    assert_eq!(report.ids, [0, 3, 7]);
    for bad in ["1.5", "0", "1"] {
        let out = iwavb(&["heldout", "--fit", p(&fit), "--data", p(&data), "--fraction", bad, "--out", p(&h)]);
        assert_exit(&out, 2);
    }
    // Without a split in the fit there is nothing to default to.
    let out = iwavb(&["heldout", "--fit", p(&fit), "--data", p(&data), "--out", p(&h)]);
    assert_exit(&out, 2);
}

#[test]
fn scree_emits_one_row_per_factor_count() {
    let dir = TempDir::new().unwrap();
    let rep = simulated(dir.path(), design(200, 8, 2, 3));
    let cfg = FitConfig {
        structure: Structure::Exploratory,
        batch_size: 32,
        max_iterations: 300,
        encoder_hidden: Some(vec![16]),
        seed: 4,
        ..FitConfig::new(EstimatorKind::Iwae, 1)
    };
    let config = write(dir.path(), "scree.json", &serde_json::to_value(&cfg).unwrap());
    let out_dir = dir.path().join("scree");
    let out = iwavb(&[
        "scree",
        "--data",
        p(&rep.join(RESPONSES_FILE)),
        "--factors",
        "1,2",
        "--config",
        p(&config),
        "--r-eval",
        "100",
        "--out",
        p(&out_dir),
        "--jobs",
        "2",
    ]);
    assert_exit(&out, 0);
    let csv = std::fs::read_to_string(out_dir.join(SCREE_CSV)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "P,heldout_loglik");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,") && lines[2].starts_with("2,"));
    let report: ScreeReport = read_json(&out_dir.join(SCREE_JSON)).unwrap();
    let train: Vec<f64> = report.points.iter().map(|pt| pt.train_objective.unwrap()).collect();
    assert!(train[1] > train[0] - 5.0, "{train:?}");
    assert_eq!(report.holdout_ids.len(), 50);
}
