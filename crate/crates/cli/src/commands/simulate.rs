use crate::config::load_design;
use crate::error::{CliResult, WithPath};
use crate::manifest::RunManifest;
use iwavb_core::grm::GrmDocument;
use iwavb_core::io::{read_json, write_json, write_responses_path};
use iwavb_core::simlab::{simulate, SimDesign, SimTruth};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const RESPONSES_FILE: &str = "responses.csv";
pub const TRUTH_FILE: &str = "truth.json";

/// Generating parameters and latents of one replication.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthDocument {
    pub design: SimDesign,
    pub replication: usize,
    pub parameters: GrmDocument,
    pub latents: Vec<Vec<f64>>,
}

impl TruthDocument {
    pub fn new(design: &SimDesign, replication: usize, truth: &SimTruth) -> Self {
        Self {
            design: design.clone(),
            replication,
            parameters: truth.params.to_document(),
            latents: truth.latents.to_rows(),
        }
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        read_json(path).at(path)
    }
}

pub fn replication_dir(rep: usize) -> String {
    format!("rep_{rep:03}")
}

pub(crate) fn thread_pool(jobs: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| crate::CliError::input(format!("thread pool: {e}")))
}

/// Writes `rep_XXX/responses.csv` and `rep_XXX/truth.json` for every
/// replication of the design under `out`, plus the manifest.
pub fn cmd_simulate(design_path: &Path, overrides: &[String], out: &Path, jobs: usize) -> CliResult<Vec<PathBuf>> {
    let start = Instant::now();
    let design = load_design(design_path, overrides)?;
    std::fs::create_dir_all(out).at(out)?;
    let reps: Vec<usize> = (0..design.replications).collect();
    let dirs = thread_pool(jobs)?.install(|| {
        reps.par_iter()
            .map(|&rep| -> CliResult<PathBuf> {
                let truth = simulate(&design, rep)?;
                let dir = out.join(replication_dir(rep));
                std::fs::create_dir_all(&dir).at(&dir)?;
                let csv = dir.join(RESPONSES_FILE);
                write_responses_path(&csv, &truth.responses).at(&csv)?;
                let tp = dir.join(TRUTH_FILE);
                write_json(&tp, &TruthDocument::new(&design, rep, &truth)).at(&tp)?;
                Ok(dir)
            })
            .collect::<CliResult<Vec<_>>>()
    })?;

    let mut manifest = RunManifest::new("simulate").with_config(&design)?;
    manifest.add_input(design_path)?;
    manifest.seeds.insert("design".into(), design.seed);
    for &rep in &reps {
        let name = replication_dir(rep);
        manifest.seeds.insert(format!("{name}.responses"), design.seed.wrapping_add(rep as u64));
        manifest.add_artifact(out, &format!("{name}/{RESPONSES_FILE}"))?;
        manifest.add_artifact(out, &format!("{name}/{TRUTH_FILE}"))?;
    }
    manifest.wall_time_seconds = start.elapsed().as_secs_f64();
    manifest.write(out)?;
    Ok(dirs)
}
