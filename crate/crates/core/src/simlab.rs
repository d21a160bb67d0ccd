//! Ground truth for simulation studies and the recovery metrics.

use crate::diffkernel::Tensor2;
use crate::error::{Error, Result};
use crate::estimators::{substream, Stream};
use crate::grm::{GrmParams, LoadingPattern, ResponseMatrix, INTERCEPT_GAP};
use crate::linalg::cholesky;
use rand::Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Beta, Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DesignStructure {
    /// `M/P` consecutive items per factor.
    Simple,
    Mask(Vec<Vec<bool>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LatentKind {
    /// `N(0, Σ)` with Σ drawn from LKJ.
    Normal,
    /// Components place every coordinate at `means[c]`, with covariance `var·Σ`.
    Mixture {
        weights: Vec<f64>,
        means: Vec<f64>,
        var: f64,
    },
}

impl LatentKind {
    pub fn trimodal() -> Self {
        Self::Mixture {
            weights: vec![0.4, 0.2, 0.4],
            means: vec![-1.5, 0.0, 1.5],
            var: 0.5,
        }
    }
}

fn one() -> f64 {
    1.0
}

fn half() -> f64 {
    0.5
}

fn one_rep() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimDesign {
    pub n_respondents: usize,
    pub n_items: usize,
    pub n_factors: usize,
    /// Response categories per item.
    pub categories: usize,
    pub structure: DesignStructure,
    pub latent: LatentKind,
    #[serde(default = "one")]
    pub lkj_eta: f64,
    /// Variance of the normal whose exponential gives the loadings.
    #[serde(default = "half")]
    pub loading_log_var: f64,
    #[serde(default = "one_rep")]
    pub replications: usize,
    pub seed: u64,
}

impl SimDesign {
    /// Confirmatory normal-latent design with ten items per factor.
    pub fn confirmatory(n: usize, p: usize, categories: usize, seed: u64) -> Self {
        Self {
            n_respondents: n,
            n_items: 10 * p,
            n_factors: p,
            categories,
            structure: DesignStructure::Simple,
            latent: LatentKind::Normal,
            lkj_eta: 1.0,
            loading_log_var: 0.5,
            replications: 1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_respondents == 0 {
            return Err(Error::config("n_respondents", "must be at least 1"));
        }
        if self.n_items == 0 || self.n_factors == 0 {
            return Err(Error::config("n_items/n_factors", "must be at least 1"));
        }
        if self.categories < 2 || self.categories > i16::MAX as usize {
            return Err(Error::config("categories", "must be at least 2"));
        }
        if !(self.lkj_eta > 0.0) {
            return Err(Error::config("lkj_eta", "must be positive"));
        }
        if !(self.loading_log_var >= 0.0) {
            return Err(Error::config("loading_log_var", "must be non-negative"));
        }
        if self.replications == 0 {
            return Err(Error::config("replications", "must be at least 1"));
        }
        self.pattern()?;
        if let LatentKind::Mixture { weights, means, var } = &self.latent {
            if weights.is_empty() || weights.len() != means.len() {
                return Err(Error::config("latent.weights", "needs one weight per mean"));
            }
            if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::config("latent.weights", "must be non-negative and sum to 1"));
            }
            if !(*var > 0.0) {
                return Err(Error::config("latent.var", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn pattern(&self) -> Result<LoadingPattern> {
        let pat = match &self.structure {
            DesignStructure::Simple => LoadingPattern::simple(self.n_items, self.n_factors)?,
            DesignStructure::Mask(mask) => LoadingPattern::from_mask(mask)?,
        };
        if pat.n_items != self.n_items || pat.n_factors != self.n_factors {
            return Err(Error::config("structure", "mask shape does not match n_items × n_factors"));
        }
        Ok(pat)
    }
}

/// True parameters, latents and one generated response matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SimTruth {
    pub params: GrmParams<f64>,
    pub latents: Tensor2<f64>,
    pub responses: ResponseMatrix,
}

/// LKJ(η) correlation matrix by the onion method.
pub fn sample_lkj(p: usize, eta: f64, rng: &mut impl Rng) -> Result<Tensor2<f64>> {
    if !(eta > 0.0) {
        return Err(Error::config("lkj_eta", "must be positive"));
    }
    let mut r = Tensor2::identity(p.max(1));
    if p < 2 {
        return Ok(r);
    }
    let mut beta = eta + (p as f64 - 2.0) / 2.0;
    let b = Beta::new(beta, beta).map_err(|e| Error::config("lkj_eta", e.to_string()))?;
    let r12 = 2.0 * b.sample(rng) - 1.0;
    r[(0, 1)] = r12;
    r[(1, 0)] = r12;
    for k in 2..p {
        beta -= 0.5;
        let y = Beta::new(k as f64 / 2.0, beta)
            .map_err(|e| Error::config("lkj_eta", e.to_string()))?
            .sample(rng);
        let mut u: Vec<f64> = (0..k).map(|_| StandardNormal.sample(rng)).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        u.iter_mut().for_each(|v| *v *= y.sqrt() / norm);
        let sub = Tensor2::from_fn(k, k, |i, j| r[(i, j)]);
        let a = cholesky(&sub)?;
        for i in 0..k {
            let zi: f64 = (0..=i).map(|j| a[(i, j)] * u[j]).sum();
            r[(i, k)] = zi;
            r[(k, i)] = zi;
        }
    }
    Ok(r)
}

/// Log-normal loadings on the free pattern cells, per-item intercepts drawn
/// from `N(0, LKJ)` in dimension `C−1` and sorted decreasing, and an LKJ
/// factor correlation.
pub fn sample_true_params(design: &SimDesign, rng: &mut impl Rng) -> Result<GrmParams<f64>> {
    design.validate()?;
    let pattern = design.pattern()?;
    let (m, p) = (design.n_items, design.n_factors);
    let ln = LogNormal::new(0.0, design.loading_log_var.sqrt()).map_err(|e| Error::config("loading_log_var", e.to_string()))?;
    let loadings = Tensor2::from_fn(m, p, |j, k| if pattern.is_free(j, k) { ln.sample(rng) } else { 0.0 });
    let k = design.categories - 1;
    let mut intercepts = Vec::with_capacity(m);
    for _ in 0..m {
        let cov = sample_lkj(k, design.lkj_eta, rng)?;
        let l = cholesky(&cov)?;
        let e: Vec<f64> = (0..k).map(|_| StandardNormal.sample(rng)).collect();
        let mut a: Vec<f64> = (0..k).map(|i| (0..=i).map(|c| l[(i, c)] * e[c]).sum()).collect();
        a.sort_by(|x, y| y.total_cmp(x));
        for l in 1..k {
            a[l] = a[l].min(a[l - 1] - 2.0 * INTERCEPT_GAP);
        }
        intercepts.push(a);
    }
    let corr = sample_lkj(p, design.lkj_eta, rng)?;
    GrmParams::from_values(&loadings, &intercepts, &corr, pattern, p > 1)
}

/// Latent scores for the design, using `corr` as Σ.
pub fn sample_latents(design: &SimDesign, corr: &Tensor2<f64>, rng: &mut impl Rng) -> Result<Tensor2<f64>> {
    let (n, p) = (design.n_respondents, design.n_factors);
    let l = cholesky(corr)?;
    let correlated = |rng: &mut dyn rand::RngCore| -> Vec<f64> {
        let e: Vec<f64> = (0..p).map(|_| StandardNormal.sample(rng)).collect();
        (0..p).map(|i| (0..=i).map(|c| l[(i, c)] * e[c]).sum()).collect()
    };
    let mut z = Tensor2::zeros(n, p);
    match &design.latent {
        LatentKind::Normal => {
            for i in 0..n {
                z.row_mut(i).copy_from_slice(&correlated(rng));
            }
        }
        LatentKind::Mixture { weights, means, var } => {
            let pick = WeightedIndex::new(weights).map_err(|e| Error::config("latent.weights", e.to_string()))?;
            let sd = var.sqrt();
            for i in 0..n {
                let c = pick.sample(rng);
                let e = correlated(rng);
                for (d, v) in z.row_mut(i).iter_mut().enumerate() {
                    *v = means[c] + sd * e[d];
                }
            }
        }
    }
    Ok(z)
}

/// Categorical draws from the model probabilities at `z`.
pub fn sample_responses(params: &GrmParams<f64>, z: &Tensor2<f64>, rng: &mut impl Rng) -> Result<ResponseMatrix> {
    let lp = params.category_logprob(z)?;
    let cats = params.categories().to_vec();
    let cmax = cats.iter().copied().max().unwrap_or(2);
    let (n, m) = (z.rows(), cats.len());
    let mut codes = Vec::with_capacity(n * m);
    for i in 0..n {
        let row = lp.row(i);
        for (j, &c) in cats.iter().enumerate() {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = c - 1;
            for k in 0..c {
                acc += row[j * cmax + k].exp();
                if u < acc {
                    pick = k;
                    break;
                }
            }
            codes.push(pick as i16);
        }
    }
    ResponseMatrix::new(n, m, cats, codes)
}

/// Truth shared by every replication of a design.
pub fn sample_truth_params(design: &SimDesign) -> Result<(GrmParams<f64>, Tensor2<f64>)> {
    let mut rng = substream(design.seed, Stream::Data);
    let params = sample_true_params(design, &mut rng)?;
    let latents = sample_latents(design, &params.factor_corr(), &mut rng)?;
    Ok((params, latents))
}

/// Replication `rep` of a design: shared truth, fresh responses.
pub fn simulate(design: &SimDesign, rep: usize) -> Result<SimTruth> {
    let (params, latents) = sample_truth_params(design)?;
    let mut rng = substream(design.seed.wrapping_add(rep as u64), Stream::Responses);
    let responses = sample_responses(&params, &latents, &mut rng)?;
    Ok(SimTruth {
        params,
        latents,
        responses,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockError {
    pub mse: f64,
    pub bias: f64,
    pub rmse: f64,
    pub entries: usize,
    pub replications: usize,
}

/// MSE and bias over replications, averaged over the block's entries.
pub fn mse_bias(estimates: &[Vec<f64>], truth: &[f64]) -> Result<BlockError> {
    if estimates.is_empty() {
        return Err(Error::Data("need at least one replication".into()));
    }
    if let Some(bad) = estimates.iter().find(|e| e.len() != truth.len()) {
        return Err(Error::Data(format!(
            "estimate has {} entries, truth has {}",
            bad.len(),
            truth.len()
        )));
    }
    let count = (estimates.len() * truth.len()).max(1) as f64;
    let (mut se, mut e) = (0.0, 0.0);
    for est in estimates {
        for (a, t) in est.iter().zip(truth) {
            se += (a - t) * (a - t);
            e += a - t;
        }
    }
    let mse = se / count;
    Ok(BlockError {
        mse,
        bias: e / count,
        rmse: mse.sqrt(),
        entries: truth.len(),
        replications: estimates.len(),
    })
}

/// Root mean squared deviation of `runs` from `reference`, which must not be
/// among the runs.
pub fn rmse_vs_reference(runs: &[Vec<f64>], reference: &[f64]) -> Result<f64> {
    if runs.is_empty() {
        return Err(Error::Data("need at least one non-reference run".into()));
    }
    let mut se = 0.0;
    for run in runs {
        if run.len() != reference.len() {
            return Err(Error::Data("run and reference differ in length".into()));
        }
        se += run.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok((se / (runs.len() * reference.len()).max(1) as f64).sqrt())
}
