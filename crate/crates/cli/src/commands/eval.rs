use super::fit::{FitResult, FIT_FILE};
use super::simulate::{TruthDocument, TRUTH_FILE};
use crate::error::{CliError, CliResult, WithPath};
use crate::manifest::{RunManifest, MANIFEST_FILE};
use iwavb_core::align::{align_to_reference, GeominConfig};
use iwavb_core::estimators::{substream, Stream};
use iwavb_core::io::{read_json, write_json};
use iwavb_core::simlab::{mse_bias, BlockError};
use iwavb_core::GrmParams;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const REPORT_FILE: &str = "recovery.json";

/// Comparable parameter vectors of one solution.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Blocks {
    /// Free loadings in row-major order (every entry when exploratory).
    pub loadings: Vec<f64>,
    pub intercepts: Vec<f64>,
    /// Strict lower triangle of the factor correlation matrix.
    pub correlations: Vec<f64>,
}

/// How a fitted solution was matched to the truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub permutation: Vec<usize>,
    pub signs: Vec<i8>,
    pub congruence: Vec<f64>,
    pub equivalent: bool,
    pub rotation_converged: bool,
}

fn lower(c: &iwavb_core::Tensor) -> Vec<f64> {
    let p = c.rows();
    (0..p).flat_map(|i| (0..i).map(move |j| (i, j))).map(|(i, j)| c[(i, j)]).collect()
}

/// Extracts estimate and truth blocks. Exploratory estimates are rotated by
/// Geomin, reflected and column-matched to the true loadings first.
pub fn paired_blocks(
    estimate: &GrmParams,
    truth: &GrmParams,
    geomin: &GeominConfig,
    seed: u64,
) -> CliResult<(Blocks, Blocks, Option<Alignment>)> {
    if estimate.n_items() != truth.n_items()
        || estimate.n_factors() != truth.n_factors()
        || estimate.categories() != truth.categories()
    {
        return Err(CliError::input(format!(
            "fit has {} items, {} factors and categories {:?}; truth has {}, {} and {:?}",
            estimate.n_items(),
            estimate.n_factors(),
            estimate.categories(),
            truth.n_items(),
            truth.n_factors(),
            truth.categories()
        )));
    }
    let flat = |v: Vec<Vec<f64>>| v.into_iter().flatten().collect::<Vec<_>>();
    let tl = truth.loadings();
    let mut est = Blocks {
        intercepts: flat(estimate.intercepts()),
        ..Default::default()
    };
    let mut tru = Blocks {
        intercepts: flat(truth.intercepts()),
        correlations: lower(&truth.factor_corr()),
        ..Default::default()
    };
    let mut alignment = None;
    if estimate.pattern().is_exploratory() {
        let mut rng = substream(seed, Stream::Init);
        let rotate = (estimate.n_factors() > 1).then_some(geomin);
        let rep = align_to_reference(&estimate.loadings(), &estimate.factor_corr(), &tl, rotate, &mut rng)?;
        est.loadings = rep.loadings.data().to_vec();
        tru.loadings = tl.data().to_vec();
        est.correlations = lower(&rep.factor_corr);
        alignment = Some(Alignment {
            permutation: rep.map.permutation.clone(),
            signs: rep.map.signs.clone(),
            congruence: rep.congruence.clone(),
            equivalent: rep.equivalent,
            rotation_converged: rep.rotation_converged,
        });
    } else {
        let el = estimate.loadings();
        let pat = truth.pattern();
        for j in 0..truth.n_items() {
            for p in 0..truth.n_factors() {
                if pat.is_free(j, p) {
                    est.loadings.push(el[(j, p)]);
                    tru.loadings.push(tl[(j, p)]);
                }
            }
        }
        est.correlations = lower(&estimate.factor_corr());
    }
    Ok((est, tru, alignment))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecovery {
    pub fit: String,
    pub truth: String,
    pub status: iwavb_core::estimators::FitStatus,
    pub final_window_average: Option<f64>,
    pub wall_time_seconds: Option<f64>,
    pub alignment: Option<Alignment>,
    pub loadings_mse: f64,
    pub intercepts_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub replications: usize,
    /// `loadings`, `intercepts` and, for more than one factor, `correlations`.
    pub blocks: BTreeMap<String, BlockError>,
    pub runs: Vec<RunRecovery>,
}

impl RecoveryReport {
    pub fn table(&self) -> String {
        let mut s = format!("{:<14}{:>12}{:>12}{:>12}{:>9}\n", "block", "mse", "bias", "rmse", "entries");
        for (name, b) in &self.blocks {
            s += &format!("{name:<14}{:>12.6}{:>12.6}{:>12.6}{:>9}\n", b.mse, b.bias, b.rmse, b.entries);
        }
        s += &format!("replications: {}\n", self.replications);
        s
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64
}

/// One fit file and the truth it is scored against.
pub struct Pair {
    pub fit: PathBuf,
    pub truth: PathBuf,
}

/// Pairs fits with truths. Either both paths are files, or both are
/// directories whose subdirectories (or themselves) hold `fit.json` and
/// `truth.json` under the same names.
pub fn pair_up(fits: &Path, truths: &Path) -> CliResult<Vec<Pair>> {
    if fits.is_file() || truths.is_file() {
        if !(fits.is_file() && truths.is_file()) {
            return Err(CliError::input("--fits and --truths must both be files or both directories"));
        }
        return Ok(vec![Pair {
            fit: fits.to_path_buf(),
            truth: truths.to_path_buf(),
        }]);
    }
    if fits.join(FIT_FILE).is_file() {
        return Ok(vec![Pair {
            fit: fits.join(FIT_FILE),
            truth: truths.join(TRUTH_FILE),
        }]);
    }
    let mut names: Vec<String> = std::fs::read_dir(fits)
        .at(fits)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join(FIT_FILE).is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(CliError::input(format!("no {FIT_FILE} found under {}", fits.display())));
    }
    names
        .into_iter()
        .map(|n| {
            let truth = truths.join(&n).join(TRUTH_FILE);
            if !truth.is_file() {
                return Err(CliError::input(format!("fit `{n}` has no {}", truth.display())));
            }
            Ok(Pair {
                fit: fits.join(&n).join(FIT_FILE),
                truth,
            })
        })
        .collect()
}

fn wall_time(fit: &Path) -> Option<f64> {
    let m: RunManifest = read_json(&fit.parent()?.join(MANIFEST_FILE)).ok()?;
    Some(m.wall_time_seconds)
}

pub fn recover(pairs: &[Pair], geomin: &GeominConfig) -> CliResult<RecoveryReport> {
    let mut est = Vec::new();
    let mut tru: Option<Blocks> = None;
    let mut runs = Vec::new();
    for (k, pair) in pairs.iter().enumerate() {
        let fit = FitResult::read(&pair.fit)?;
        let truth = TruthDocument::read(&pair.truth)?;
        let tp = truth.parameters.clone().into_params();
        let (e, t, alignment) =
            paired_blocks(&fit.parameters.raw, &tp, geomin, k as u64).map_err(|e| e.context(pair.fit.display()))?;
        if let Some(prev) = &tru {
            if prev.loadings != t.loadings || prev.intercepts != t.intercepts {
                return Err(CliError::input(format!(
                    "{}: truths differ between replications",
                    pair.truth.display()
                )));
            }
        }
        runs.push(RunRecovery {
            fit: pair.fit.display().to_string(),
            truth: pair.truth.display().to_string(),
            status: fit.status,
            final_window_average: fit.final_window_average,
            wall_time_seconds: wall_time(&pair.fit),
            alignment,
            loadings_mse: mse(&e.loadings, &t.loadings),
            intercepts_mse: mse(&e.intercepts, &t.intercepts),
        });
        est.push(e);
        tru = Some(t);
    }
    let tru = tru.ok_or_else(|| CliError::input("no fits to evaluate"))?;
    let mut blocks = BTreeMap::new();
    let col = |f: fn(&Blocks) -> &Vec<f64>| est.iter().map(|b| f(b).clone()).collect::<Vec<_>>();
    blocks.insert("loadings".to_string(), mse_bias(&col(|b| &b.loadings), &tru.loadings)?);
    blocks.insert("intercepts".to_string(), mse_bias(&col(|b| &b.intercepts), &tru.intercepts)?);
    if !tru.correlations.is_empty() {
        blocks.insert("correlations".to_string(), mse_bias(&col(|b| &b.correlations), &tru.correlations)?);
    }
    Ok(RecoveryReport {
        replications: pairs.len(),
        blocks,
        runs,
    })
}

/// Writes `recovery.json` and the manifest under `out` and returns the report.
pub fn cmd_eval(fits: &Path, truths: &Path, out: &Path) -> CliResult<RecoveryReport> {
    let start = Instant::now();
    let pairs = pair_up(fits, truths)?;
    let geomin = GeominConfig::default();
    let report = recover(&pairs, &geomin)?;
    std::fs::create_dir_all(out).at(out)?;
    let rp = out.join(REPORT_FILE);
    write_json(&rp, &report).at(&rp)?;
    let mut manifest = RunManifest::new("eval").with_config(&geomin)?;
    for p in &pairs {
        manifest.add_input(&p.fit)?;
        manifest.add_input(&p.truth)?;
    }
    manifest.add_artifact(out, REPORT_FILE)?;
    manifest.wall_time_seconds = start.elapsed().as_secs_f64();
    manifest.write(out)?;
    Ok(report)
}
