use crate::config::{load_run_config, RunConfig};
use crate::error::{CliError, CliResult, WithPath};
use crate::manifest::RunManifest;
use crate::split::holdout_split;
use iwavb_core::estimators::{fit, EstimatorKind, Encoder, FitConfig, FitStatus, Model, StepRecord, WindowRecord};
use iwavb_core::grm::GrmDocument;
use iwavb_core::io::{read_json, read_responses_path, write_json};
use iwavb_core::nets::Discriminator;
use iwavb_core::ResponseMatrix;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

pub const FIT_FILE: &str = "fit.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";

/// Fitted parameters, networks and convergence record. Contains nothing that
/// varies between identical reruns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub kind: EstimatorKind,
    pub config: FitConfig,
    pub holdout_fraction: Option<f64>,
    pub status: FitStatus,
    pub iterations: usize,
    /// Respondents used for training.
    pub n_train: usize,
    pub final_window_average: Option<f64>,
    pub best_window_average: Option<f64>,
    pub parameters: GrmDocument,
    pub encoder: Encoder<f64>,
    pub discriminator: Option<Discriminator<f64>>,
    pub indicators: bool,
    pub windows: Vec<WindowRecord>,
}

impl FitResult {
    pub fn model(&self) -> Model<f64> {
        Model {
            decoder: self.parameters.raw.clone(),
            encoder: self.encoder.clone(),
            discriminator: self.discriminator.clone(),
            indicators: self.indicators,
        }
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        read_json(path).at(path)
    }
}

/// Reads responses with the category override of `cfg`, if any.
pub fn read_data(path: &Path, cfg: &RunConfig) -> CliResult<ResponseMatrix> {
    let cats = match &cfg.categories {
        None => None,
        Some(c) => {
            let header = csv::Reader::from_path(path).at(path)?.headers().at(path)?.len();
            Some(c.resolve(header)?)
        }
    };
    read_responses_path(path, cats.as_deref()).at(path)
}

/// The training rows of `x` under the config's holdout split, with the
/// withheld ids.
pub fn training_rows(x: &ResponseMatrix, cfg: &RunConfig) -> CliResult<(ResponseMatrix, Option<Vec<usize>>)> {
    match cfg.holdout_fraction {
        None => Ok((x.clone(), None)),
        Some(f) => {
            let split = holdout_split(x.n_respondents(), f, cfg.fit.seed)?;
            Ok((x.subset(&split.train), Some(split.holdout)))
        }
    }
}

/// A failed fit together with the trace recorded before the failure.
#[derive(Debug)]
pub struct FitFailure {
    pub error: CliError,
    pub trace: Vec<StepRecord>,
}

/// Trains on `x` and collects the per-iteration trace. `on_window` sees
/// every closed monitoring window.
pub fn fit_responses(
    x: &ResponseMatrix,
    cfg: &RunConfig,
    mut on_window: impl FnMut(&WindowRecord),
) -> Result<(FitResult, Vec<StepRecord>), FitFailure> {
    let mut trace = Vec::new();
    let outcome = fit::<f64>(x, &cfg.fit, |p| {
        trace.push(p.step.clone());
        if let Some(w) = p.window {
            on_window(w);
        }
    });
    let out = match outcome {
        Ok(o) => o,
        Err(e) => {
            return Err(FitFailure {
                error: e.into(),
                trace,
            })
        }
    };
    let result = FitResult {
        kind: cfg.fit.kind,
        config: cfg.fit.clone(),
        holdout_fraction: cfg.holdout_fraction,
        status: out.status,
        iterations: out.iterations,
        n_train: x.n_respondents(),
        final_window_average: out.windows.last().map(|w| w.average),
        best_window_average: out.windows.last().map(|w| w.best),
        parameters: out.model.decoder.to_document(),
        encoder: out.model.encoder,
        discriminator: out.model.discriminator,
        indicators: out.model.indicators,
        windows: out.windows,
    };
    Ok((result, trace))
}

pub fn write_diagnostics(path: &Path, trace: &[StepRecord]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).at(path)?;
    w.write_record(["iteration", "batch_iw_elbo", "disc_loss", "lr_encoder", "lr_disc"])
        .at(path)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    for r in trace {
        w.write_record([
            r.iteration.to_string(),
            r.objective.to_string(),
            opt(r.disc_loss),
            r.lr_gen.to_string(),
            opt(r.lr_disc),
        ])
        .at(path)?;
    }
    w.flush().at(path)?;
    Ok(())
}

pub struct FitArgs<'a> {
    pub config: Option<&'a Path>,
    pub overrides: &'a [String],
    pub data: &'a Path,
    pub out: &'a Path,
    pub verbose: bool,
}

/// Writes `fit.json`, `diagnostics.csv` and the manifest under `out`. On a
/// numerical failure the diagnostics up to the failing iteration are still
/// written.
pub fn cmd_fit(args: &FitArgs<'_>) -> CliResult<FitResult> {
    let start = Instant::now();
    let cfg = load_run_config(args.config, args.overrides)?;
    let x = read_data(args.data, &cfg)?;
    let (train, holdout) = training_rows(&x, &cfg)?;
    std::fs::create_dir_all(args.out).at(args.out)?;
    let diag = args.out.join(DIAGNOSTICS_FILE);
    let verbose = args.verbose;
    let (result, trace) = match fit_responses(&train, &cfg, |w| {
        if verbose {
            eprintln!(
                "window {:>4}  iteration {:>6}  average {:.4}  best {:.4}  stale {}",
                w.index, w.end_iteration, w.average, w.best, w.windows_since_improvement
            );
        }
    }) {
        Ok(v) => v,
        Err(f) => {
            write_diagnostics(&diag, &f.trace)?;
            return Err(f.error);
        }
    };
    write_diagnostics(&diag, &trace)?;
    let fp = args.out.join(FIT_FILE);
    write_json(&fp, &result).at(&fp)?;

    let mut manifest = RunManifest::new("fit").with_config(&cfg)?;
    if let Some(c) = args.config {
        manifest.add_input(c)?;
    }
    manifest.add_input(args.data)?;
    manifest.seeds.insert("seed".into(), cfg.fit.seed);
    manifest.holdout_ids = holdout;
    manifest.add_artifact(args.out, FIT_FILE)?;
    manifest.add_artifact(args.out, DIAGNOSTICS_FILE)?;
    manifest.wall_time_seconds = start.elapsed().as_secs_f64();
    manifest.write(args.out)?;
    Ok(result)
}
