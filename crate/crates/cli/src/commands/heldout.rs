use super::fit::FitResult;
use crate::error::{CliError, CliResult, WithPath};
use crate::manifest::RunManifest;
use crate::split::{complement, holdout_split};
use iwavb_core::estimators::{heldout_loglik, substream, EstimatorKind, Model, Stream};
use iwavb_core::io::{read_responses_path, write_json};
use iwavb_core::ResponseMatrix;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

pub const HELDOUT_FILE: &str = "heldout.json";
pub const DEFAULT_R_EVAL: usize = 5000;

/// Which respondents form the holdout set.
#[derive(Clone, Debug, PartialEq)]
pub enum Selection {
    Fraction(f64),
    Ids(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldoutReport {
    pub kind: EstimatorKind,
    pub r_eval: usize,
    /// Set for `r_eval = 1`, where the estimate is a single importance draw.
    pub high_variance: bool,
    pub seed: u64,
    pub ids: Vec<usize>,
    pub total: f64,
    pub mean: f64,
    pub per_respondent: Vec<f64>,
}

/// Importance-sampled log-likelihood of the rows `ids` of `x`.
pub fn evaluate_heldout(
    model: &Model<f64>,
    kind: EstimatorKind,
    x: &ResponseMatrix,
    ids: Vec<usize>,
    r_eval: usize,
    seed: u64,
) -> CliResult<HeldoutReport> {
    if ids.is_empty() {
        return Err(CliError::input("holdout set is empty"));
    }
    complement(x.n_respondents(), &ids)?;
    let xh = x.subset(&ids);
    let mut rng = substream(seed, Stream::Noise);
    let per = heldout_loglik(model, &xh, kind, r_eval, &mut rng)?;
    let total: f64 = per.iter().sum();
    Ok(HeldoutReport {
        kind,
        r_eval,
        high_variance: r_eval == 1,
        seed,
        mean: total / per.len() as f64,
        total,
        ids,
        per_respondent: per,
    })
}

pub struct HeldoutArgs<'a> {
    pub fit: &'a Path,
    pub data: &'a Path,
    /// Defaults to the fraction the model was trained with.
    pub selection: Option<Selection>,
    pub r_eval: usize,
    /// Defaults to the fit's seed, which reproduces its training split.
    pub seed: Option<u64>,
    pub out: &'a Path,
}

pub fn cmd_heldout(args: &HeldoutArgs<'_>) -> CliResult<HeldoutReport> {
    let start = Instant::now();
    let fit = FitResult::read(args.fit)?;
    let seed = args.seed.unwrap_or(fit.config.seed);
    let x = read_responses_path(args.data, Some(fit.parameters.raw.categories())).at(args.data)?;
    let selection = match (&args.selection, fit.holdout_fraction) {
        (Some(s), _) => s.clone(),
        (None, Some(f)) => Selection::Fraction(f),
        (None, None) => {
            return Err(CliError::input(
                "no holdout selection: pass --fraction or --ids (the fit used no holdout split)",
            ))
        }
    };
    let ids = match selection {
        Selection::Fraction(f) => holdout_split(x.n_respondents(), f, seed)?.holdout,
        Selection::Ids(ids) => ids,
    };
    let report = evaluate_heldout(&fit.model(), fit.kind, &x, ids, args.r_eval, seed)?;
    std::fs::create_dir_all(args.out).at(args.out)?;
    let hp = args.out.join(HELDOUT_FILE);
    write_json(&hp, &report).at(&hp)?;
    let mut manifest = RunManifest::new("heldout").with_config(&serde_json::json!({
        "r_eval": args.r_eval,
        "seed": seed,
    }))?;
    manifest.add_input(args.fit)?;
    manifest.add_input(args.data)?;
    manifest.seeds.insert("seed".into(), seed);
    manifest.holdout_ids = Some(report.ids.clone());
    manifest.add_artifact(args.out, HELDOUT_FILE)?;
    manifest.wall_time_seconds = start.elapsed().as_secs_f64();
    manifest.write(args.out)?;
    Ok(report)
}
