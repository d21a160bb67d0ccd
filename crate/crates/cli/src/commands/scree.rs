use super::fit::{fit_responses, read_data, training_rows};
use super::heldout::evaluate_heldout;
use super::simulate::thread_pool;
use crate::config::{load_run_config, RunConfig};
use crate::error::{CliError, CliResult, WithPath};
use crate::manifest::RunManifest;
use iwavb_core::estimators::{heldout_loglik, substream, FitStatus, Stream};
use iwavb_core::io::write_json;
use iwavb_core::ResponseMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

pub const SCREE_CSV: &str = "scree.csv";
pub const SCREE_JSON: &str = "scree.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreePoint {
    pub n_factors: usize,
    pub status: Option<FitStatus>,
    /// Summed over the holdout respondents.
    pub heldout_loglik: Option<f64>,
    /// Mean per training respondent, at the fit's own `R`.
    pub train_objective: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreeReport {
    pub r_eval: usize,
    pub holdout_ids: Vec<usize>,
    pub points: Vec<ScreePoint>,
}

fn scree_point(x: &ResponseMatrix, cfg: &RunConfig, p: usize, r_eval: usize) -> CliResult<(FitStatus, f64, f64)> {
    let mut c = cfg.clone();
    c.fit.n_factors = p;
    c.validate()?;
    let (train, holdout) = training_rows(x, &c)?;
    let holdout = holdout.expect("scree configs carry a holdout fraction");
    let (fit, _) = fit_responses(&train, &c, |_| {}).map_err(|f| f.error)?;
    let model = fit.model();
    let held = evaluate_heldout(&model, fit.kind, x, holdout, r_eval, c.fit.seed)?;
    let mut rng = substream(c.fit.seed, Stream::Holdout);
    let r_train = c.fit.estimator().iw_samples;
    let tr = heldout_loglik(&model, &train, fit.kind, r_train, &mut rng)?;
    Ok((fit.status, held.total, tr.iter().sum::<f64>() / tr.len() as f64))
}

/// Fits every factor count on the same training split and scores the
/// shared holdout set. Failed factor counts are recorded in their point and
/// returned alongside the report.
pub fn scree(
    x: &ResponseMatrix,
    cfg: &RunConfig,
    factors: &[usize],
    r_eval: usize,
    jobs: usize,
) -> CliResult<(ScreeReport, Vec<CliError>)> {
    if factors.is_empty() {
        return Err(CliError::input("factor list is empty"));
    }
    let mut cfg = cfg.clone();
    let fraction = *cfg.holdout_fraction.get_or_insert(0.25);
    let split = crate::split::holdout_split(x.n_respondents(), fraction, cfg.fit.seed)?;
    let results = thread_pool(jobs)?.install(|| {
        factors
            .par_iter()
            .map(|&p| (p, scree_point(x, &cfg, p, r_eval)))
            .collect::<Vec<_>>()
    });
    let mut points = Vec::new();
    let mut failures = Vec::new();
    for (p, r) in results {
        points.push(match r {
            Ok((status, held, train)) => ScreePoint {
                n_factors: p,
                status: Some(status),
                heldout_loglik: Some(held),
                train_objective: Some(train),
                error: None,
            },
            Err(e) => {
                let e = e.context(format!("P={p}"));
                let point = ScreePoint {
                    n_factors: p,
                    status: None,
                    heldout_loglik: None,
                    train_objective: None,
                    error: Some(e.to_string()),
                };
                failures.push(e);
                point
            }
        });
    }
    let report = ScreeReport {
        r_eval,
        holdout_ids: split.holdout,
        points,
    };
    Ok((report, failures))
}

pub fn write_scree_csv(path: &Path, report: &ScreeReport) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).at(path)?;
    w.write_record(["P", "heldout_loglik"]).at(path)?;
    for pt in &report.points {
        if let Some(v) = pt.heldout_loglik {
            w.write_record([pt.n_factors.to_string(), v.to_string()]).at(path)?;
        }
    }
    w.flush().at(path)?;
    Ok(())
}

pub struct ScreeArgs<'a> {
    pub data: &'a Path,
    pub factors: &'a [usize],
    pub config: Option<&'a Path>,
    pub overrides: &'a [String],
    pub r_eval: usize,
    pub out: &'a Path,
    pub jobs: usize,
}

/// Writes `scree.csv`, `scree.json` and the manifest. When factor counts
/// failed, returns the most severe failure after writing them.
pub fn cmd_scree(args: &ScreeArgs<'_>) -> CliResult<ScreeReport> {
    let start = Instant::now();
    let mut cfg = load_run_config(args.config, args.overrides)?;
    cfg.holdout_fraction.get_or_insert(0.25);
    let x = read_data(args.data, &cfg)?;
    let (report, failures) = scree(&x, &cfg, args.factors, args.r_eval, args.jobs)?;
    std::fs::create_dir_all(args.out).at(args.out)?;
    write_scree_csv(&args.out.join(SCREE_CSV), &report)?;
    let jp = args.out.join(SCREE_JSON);
    write_json(&jp, &report).at(&jp)?;
    let mut manifest = RunManifest::new("scree").with_config(&cfg)?;
    if let Some(c) = args.config {
        manifest.add_input(c)?;
    }
    manifest.add_input(args.data)?;
    manifest.seeds.insert("seed".into(), cfg.fit.seed);
    manifest.holdout_ids = Some(report.holdout_ids.clone());
    manifest.add_artifact(args.out, SCREE_CSV)?;
    manifest.add_artifact(args.out, SCREE_JSON)?;
    manifest.wall_time_seconds = start.elapsed().as_secs_f64();
    manifest.write(args.out)?;
    match failures.into_iter().max_by_key(CliError::exit_code) {
        Some(worst) => Err(worst),
        None => Ok(report),
    }
}
