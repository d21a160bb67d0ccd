//! Variational objectives for the GRM: ELBO (VAE), importance-weighted ELBO
//! (IWAE), the adversarial game (AVB) and its importance-weighted,
//! adaptive-contrast form (IWAVB).
//!
//! Samples for respondent `i`, Monte Carlo draw `s` and importance draw `r`
//! live on row `(i·S + s)·R + r` of every per-sample matrix, so a reshape to
//! `(B·S)×R` groups each importance set on one row.
//!
//! Gradients come from two tapes. The decoder tape takes the latent draws as
//! leaves and yields `∂/∂θ` together with the upstream gradient on the draws;
//! the encoder tape is then swept once with that gradient as its seed. The
//! doubly reparameterized estimator only changes the seed: each draw's
//! gradient is rescaled by its normalized weight and the path through the
//! Gaussian heads is dropped.

pub mod quadrature;
mod train;

pub use train::{
    fit, substream, FitConfig, FitOutcome, FitStatus, Progress, StepRecord, Stream, Structure, TrainState,
    WindowRecord,
};

use crate::diffkernel::{Tape, Tensor2, Var};
use crate::error::{Error, Result};
use crate::grm::{GrmParams, ResponseMatrix};
use crate::nets::{encode_responses, BlackBoxEncoder, Discriminator, GaussianEncoder};
use crate::scalar::{lit, ln_2pi, log_sigmoid, Real};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Vae,
    Iwae,
    Avb,
    Iwavb,
}

impl EstimatorKind {
    pub fn adversarial(self) -> bool {
        matches!(self, Self::Avb | Self::Iwavb)
    }

    pub fn importance_weighted(self) -> bool {
        matches!(self, Self::Iwae | Self::Iwavb)
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vae" => Ok(Self::Vae),
            "iwae" => Ok(Self::Iwae),
            "avb" => Ok(Self::Avb),
            "iwavb" => Ok(Self::Iwavb),
            other => Err(Error::config("kind", format!("unknown estimator `{other}`"))),
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Vae => "vae",
            Self::Iwae => "iwae",
            Self::Avb => "avb",
            Self::Iwavb => "iwavb",
        })
    }
}

/// How the VAE objective treats `KL[q ‖ p]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlMode {
    /// Closed form for a diagonal Gaussian against `N(0, Σ)`.
    Analytic,
    /// Single-draw estimate `ln q(z|x) − ln p(z)` on the same draws as the
    /// reconstruction term.
    Sampled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    /// Importance samples `R`.
    pub iw_samples: usize,
    /// Monte Carlo samples `S`.
    pub mc_samples: usize,
    pub adaptive_contrast: bool,
    pub dreg: bool,
    pub kl: KlMode,
}

impl EstimatorConfig {
    pub fn new(kind: EstimatorKind) -> Self {
        Self {
            kind,
            iw_samples: if kind.importance_weighted() { 25 } else { 1 },
            mc_samples: 1,
            adaptive_contrast: kind == EstimatorKind::Iwavb,
            dreg: false,
            kl: KlMode::Analytic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iw_samples == 0 {
            return Err(Error::config("iw_samples", "must be at least 1"));
        }
        if self.mc_samples == 0 {
            return Err(Error::config("mc_samples", "must be at least 1"));
        }
        if matches!(self.kind, EstimatorKind::Vae | EstimatorKind::Avb) && self.iw_samples != 1 {
            return Err(Error::config(
                "iw_samples",
                format!("{} uses a single importance sample; use the importance-weighted variant for R > 1", self.kind),
            ));
        }
        if self.kind == EstimatorKind::Iwavb && !self.adaptive_contrast {
            return Err(Error::config("adaptive_contrast", "always on for iwavb"));
        }
        if !self.kind.adversarial() && self.adaptive_contrast {
            return Err(Error::config("adaptive_contrast", "only applies to adversarial estimators"));
        }
        if self.dreg && self.uses_analytic_kl() {
            return Err(Error::config("dreg", "needs sampled weights; set kl to sampled"));
        }
        Ok(())
    }

    fn uses_analytic_kl(&self) -> bool {
        self.kind == EstimatorKind::Vae && self.kl == KlMode::Analytic
    }

    /// Encoder draws per respondent: `R·S`, topped up to 8 for moment estimates.
    pub fn encoder_draws(&self) -> usize {
        let rs = self.iw_samples * self.mc_samples;
        if self.adaptive_contrast {
            rs.max(8)
        } else {
            rs
        }
    }
}

/// Inference network of either family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Encoder<T> {
    Gaussian(GaussianEncoder<T>),
    BlackBox(BlackBoxEncoder<T>),
}

impl<T: Real> Encoder<T> {
    pub fn tensors(&self) -> Vec<&Tensor2<T>> {
        match self {
            Self::Gaussian(e) => e.tensors(),
            Self::BlackBox(e) => e.tensors(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2<T>> {
        match self {
            Self::Gaussian(e) => e.tensors_mut(),
            Self::BlackBox(e) => e.tensors_mut(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Self::Gaussian(e) => e.input_dim(),
            Self::BlackBox(e) => e.input_dim(),
        }
    }
}

/// Decoder, encoder and (for adversarial kinds) discriminator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model<T> {
    pub decoder: GrmParams<T>,
    pub encoder: Encoder<T>,
    pub discriminator: Option<Discriminator<T>>,
    /// Whether the encoder input carries missingness indicator columns.
    pub indicators: bool,
}

impl<T: Real> Model<T> {
    fn check_family(&self, kind: EstimatorKind) -> Result<()> {
        let ok = match (&self.encoder, kind.adversarial()) {
            (Encoder::Gaussian(_), false) => true,
            (Encoder::BlackBox(_), true) => self.discriminator.is_some(),
            _ => false,
        };
        if !ok {
            return Err(Error::config("kind", format!("model networks do not match estimator {kind}")));
        }
        Ok(())
    }

    pub fn encode_input(&self, x: &ResponseMatrix) -> Tensor2<T> {
        encode_responses(x, self.indicators)
    }
}

/// Random inputs for one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise<T> {
    /// Gaussian encoder: `u`, `(B·S·R)×P`. Black-box encoder: `ε`,
    /// `(B·D)×noise_dim` with `D` = [`EstimatorConfig::encoder_draws`].
    pub encoder: Tensor2<T>,
    /// Prior draws `ζ`, `(B·S·R)×P`, for the discriminator; empty otherwise.
    pub prior: Tensor2<T>,
}

impl<T: Real> Noise<T> {
    pub fn sample(model: &Model<T>, batch: usize, cfg: &EstimatorConfig, rng: &mut impl Rng) -> Self {
        let p = model.decoder.n_factors();
        let rs = cfg.iw_samples * cfg.mc_samples;
        let mut normal = |rows: usize, cols: usize| {
            Tensor2::from_fn(rows, cols, |_, _| lit::<T>(StandardNormal.sample(&mut *rng)))
        };
        match &model.encoder {
            Encoder::Gaussian(_) => Self {
                encoder: normal(batch * rs, p),
                prior: Tensor2::zeros(0, p),
            },
            Encoder::BlackBox(e) => {
                let encoder = normal(batch * cfg.encoder_draws(), e.noise_dim);
                let prior = normal(batch * rs, p);
                Self { encoder, prior }
            }
        }
    }
}

/// Importance weights and their by-products for one batch.
#[derive(Clone, Debug)]
pub struct WeightBundle<T> {
    /// `(B·S)×R` log weights.
    pub log_w: Tensor2<T>,
    /// Row-normalized weights, same shape.
    pub weights: Tensor2<T>,
    /// Latent draws used by the objective, `(B·S·R)×P`.
    pub z: Tensor2<T>,
    /// Standardized draws (adaptive contrast only).
    pub z_std: Option<Tensor2<T>>,
    /// Per-respondent moment estimates, `B×P` (adaptive contrast only).
    pub moments: Option<(Tensor2<T>, Tensor2<T>)>,
    /// Gaussian encoder heads `(μ, log σ)`, `B×P`.
    pub heads: Option<(Tensor2<T>, Tensor2<T>)>,
}

/// Gradients of the loss (negative objective) for every trainable tensor.
#[derive(Clone, Debug)]
pub struct ModelGrads<T> {
    pub decoder: Vec<Tensor2<T>>,
    pub encoder: Vec<Tensor2<T>>,
    pub discriminator: Vec<Tensor2<T>>,
}

#[derive(Clone, Debug)]
pub struct BatchEval<T> {
    /// Batch mean of the objective: the IW-ELBO, or the ELBO with analytic KL.
    pub objective: T,
    /// Per-respondent objective, averaged over Monte Carlo draws.
    pub per_respondent: Vec<T>,
    pub bundle: WeightBundle<T>,
    /// Discriminator loss on the same draws (adversarial kinds).
    pub disc_loss: Option<T>,
    pub grads: Option<ModelGrads<T>>,
}

/// Evaluates the objective of `cfg.kind` on a batch and, when `with_grads`,
/// the gradients of its negative for decoder, encoder and discriminator.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    x: &ResponseMatrix,
    cfg: &EstimatorConfig,
    noise: &Noise<T>,
    with_grads: bool,
) -> Result<BatchEval<T>> {
    model.check_family(cfg.kind)?;
    cfg.validate()?;
    evaluate_inner(model, x, cfg, noise, None, with_grads)
}

/// Encoder density quantities to hold at given values during an evaluation.
#[derive(Clone, Debug, Default)]
pub struct Frozen<T> {
    /// Gaussian heads `(μ, log σ)`, `B×P` each.
    pub heads: Option<(Tensor2<T>, Tensor2<T>)>,
    /// Adaptive-contrast moments `(μ̂, σ̂)`, `B×P` each.
    pub moments: Option<(Tensor2<T>, Tensor2<T>)>,
}

/// [`evaluate`] with the variational density parameters pinned, so only the
/// sampling path depends on the encoder. Differentiating this objective by
/// finite differences reproduces the path-derivative gradients.
pub fn evaluate_frozen<T: Real>(
    model: &Model<T>,
    x: &ResponseMatrix,
    cfg: &EstimatorConfig,
    noise: &Noise<T>,
    frozen: &Frozen<T>,
) -> Result<BatchEval<T>> {
    model.check_family(cfg.kind)?;
    cfg.validate()?;
    evaluate_inner(model, x, cfg, noise, Some(frozen), false)
}

fn evaluate_inner<T: Real>(
    model: &Model<T>,
    x: &ResponseMatrix,
    cfg: &EstimatorConfig,
    noise: &Noise<T>,
    frozen: Option<&Frozen<T>>,
    with_grads: bool,
) -> Result<BatchEval<T>> {
    let b = x.n_respondents();
    let p = model.decoder.n_factors();
    let (r, s) = (cfg.iw_samples, cfg.mc_samples);
    let rs = r * s;
    let n = b * rs;
    let xe = model.encode_input(x);
    if xe.cols() != model.encoder.input_dim() {
        return Err(Error::Shape {
            op: "encoder input",
            left: xe.shape(),
            right: (b, model.encoder.input_dim()),
        });
    }

    // Encoder tape.
    let mut et = Tape::new();
    let enc_params: Vec<Var> = match &model.encoder {
        Encoder::Gaussian(e) => e.record(&mut et, with_grads),
        Encoder::BlackBox(e) => e.record(&mut et, with_grads),
    };
    let xv = et.constant(xe.clone());
    let draws = cfg.encoder_draws();
    let (z_all, heads) = match &model.encoder {
        Encoder::Gaussian(e) => {
            expect_shape(&noise.encoder, (n, p), "gaussian noise")?;
            let h = e.heads(&mut et, xv, &enc_params)?;
            let mu = et.repeat_rows(h.mean, rs);
            let ls = et.repeat_rows(h.log_std, rs);
            let sd = et.exp(ls);
            let u = et.constant(noise.encoder.clone());
            let su = et.mul(sd, u)?;
            (et.add(mu, su)?, Some(h))
        }
        Encoder::BlackBox(e) => {
            expect_shape(&noise.encoder, (b * draws, e.noise_dim), "encoder noise")?;
            let xr = et.repeat_rows(xv, draws);
            let eps = et.constant(noise.encoder.clone());
            (e.forward(&mut et, xr, eps, &enc_params)?, None)
        }
    };
    let z_all_val = et.value(z_all).clone();
    let used_row = |k: usize| (k / rs) * draws + k % rs;
    let z = if draws == rs {
        z_all_val.clone()
    } else {
        Tensor2::from_fn(n, p, |k, c| z_all_val[(used_row(k), c)])
    };
    if !z.all_finite() {
        return Err(Error::NonFiniteGradient("encoder output".into()));
    }

    // Adaptive-contrast moments.
    let moments = if let Some(m) = frozen.and_then(|f| f.moments.clone()) {
        Some(m)
    } else if cfg.adaptive_contrast {
        Some(moments(&z_all_val, b, draws)?)
    } else {
        None
    };

    // Decoder tape.
    let mut dt = Tape::new();
    let zv = if with_grads { dt.leaf(z.clone()) } else { dt.constant(z.clone()) };
    let dec = model.decoder.record(&mut dt, with_grads)?;
    let eta = dt.matmul_bt(zv, dec.loadings)?;
    let cond = dt.ordinal_loglik(eta, dec.thresholds, x.targets(rs))?;
    let prior = dt.mvn_logpdf_chol(zv, dec.chol)?;
    let half_p_ln2pi: T = lit::<T>(0.5 * p as f64) * ln_2pi::<T>();

    let mut gauss_leaves = None;
    let mut heads_val = None;
    let mut disc_const = None;
    let mut z_std = None;
    let log_q = match &model.encoder {
        Encoder::Gaussian(_) => {
            let h = heads.expect("gaussian heads");
            let (mu_val, ls_val) = match frozen.and_then(|f| f.heads.clone()) {
                Some(fixed) => fixed,
                None => (et.value(h.mean).clone(), et.value(h.log_std).clone()),
            };
            heads_val = Some((mu_val.clone(), ls_val.clone()));
            let (mu, ls) = if with_grads {
                (dt.leaf(mu_val), dt.leaf(ls_val))
            } else {
                (dt.constant(mu_val), dt.constant(ls_val))
            };
            gauss_leaves = Some((mu, ls));
            let mu_r = dt.repeat_rows(mu, rs);
            let ls_r = dt.repeat_rows(ls, rs);
            let diff = dt.sub(zv, mu_r)?;
            let neg_ls = dt.neg(ls_r);
            let inv_sd = dt.exp(neg_ls);
            let u = dt.mul(diff, inv_sd)?;
            let u2 = dt.square(u);
            let q = dt.sum_rows(u2);
            let q = dt.scale(q, lit(-0.5));
            let sls = dt.sum_rows(ls_r);
            let lq = dt.sub(q, sls)?;
            dt.add_scalar(lq, -half_p_ln2pi)
        }
        Encoder::BlackBox(_) => {
            let disc = model.discriminator.as_ref().expect("checked");
            let dp = disc.record(&mut dt, false);
            let xr_val = repeat_rows_val(&xe, rs);
            let xr = dt.constant(xr_val.clone());
            match &moments {
                Some((mu_hat, sd_hat)) => {
                    let mu_c = dt.constant(repeat_rows_val(mu_hat, rs));
                    let inv_c = dt.constant(repeat_rows_val(&sd_hat.map(|v| T::one() / v), rs));
                    let diff = dt.sub(zv, mu_c)?;
                    let zt = dt.mul(diff, inv_c)?;
                    z_std = Some(dt.value(zt).clone());
                    let t = disc.forward(&mut dt, xr, zt, &dp)?;
                    let sq = dt.square(zt);
                    let q = dt.sum_rows(sq);
                    let q = dt.scale(q, lit(-0.5));
                    let lq = dt.add(t, q)?;
                    let jac = Tensor2::from_fn(n, 1, |k, _| {
                        let i = k / rs;
                        -half_p_ln2pi - sd_hat.row(i).iter().map(|v| v.ln()).sum::<T>()
                    });
                    let jac = dt.constant(jac);
                    disc_const = Some(xr_val);
                    dt.add(lq, jac)?
                }
                None => {
                    let t = disc.forward(&mut dt, xr, zv, &dp)?;
                    let sq = dt.square(zv);
                    let q = dt.sum_rows(sq);
                    let q = dt.scale(q, lit(-0.5));
                    let lq = dt.add(t, q)?;
                    disc_const = Some(xr_val);
                    dt.add_scalar(lq, -half_p_ln2pi)
                }
            }
        }
    };
    let joint = dt.add(cond, prior)?;
    let log_w = dt.sub(joint, log_q)?;
    let lw = dt.reshape(log_w, b * s, r)?;
    let lse = dt.logsumexp_rows(lw);
    let iw = dt.add_scalar(lse, -lit::<T>(r as f64).ln());

    let per_row: Var = if cfg.uses_analytic_kl() {
        let (mu, ls) = gauss_leaves.expect("gaussian");
        let kl = dt.gaussian_kl(mu, ls, dec.chol)?;
        let c = dt.reshape(cond, b, rs)?;
        let c = dt.sum_rows(c);
        let c = dt.scale(c, lit(1.0 / rs as f64));
        dt.sub(c, kl)?
    } else {
        iw
    };
    let objective_v = dt.mean(per_row);
    let objective = dt.value(objective_v).item();
    let rows_val = dt.value(per_row).clone();
    let per_respondent: Vec<T> = if cfg.uses_analytic_kl() {
        rows_val.data().to_vec()
    } else {
        (0..b)
            .map(|i| rows_val.data()[i * s..(i + 1) * s].iter().copied().sum::<T>() / lit(s as f64))
            .collect()
    };
    let log_w_val = dt.value(lw).clone();
    let weights = normalize_rows(&log_w_val);
    if !objective.is_finite() {
        return Err(Error::NonFiniteObjective {
            iteration: 0,
            last_good: None,
        });
    }

    let mut grads = None;
    if with_grads {
        let loss = dt.neg(objective_v);
        let mut g = dt.backward(loss)?;
        let decoder: Vec<Tensor2<T>> = dec
            .leaves
            .iter()
            .zip(model.decoder.tensors())
            .map(|(&v, t)| g.take(v).unwrap_or_else(|| Tensor2::zeros(t.rows(), t.cols())))
            .collect();
        let mut dz = g.take(zv).unwrap_or_else(|| Tensor2::zeros(n, p));
        if cfg.dreg {
            for k in 0..n {
                let w = weights.data()[k];
                dz.row_mut(k).iter_mut().for_each(|v| *v *= w);
            }
        }
        let mut seeds = Vec::new();
        if draws == rs {
            seeds.push((z_all, dz));
        } else {
            let mut full = Tensor2::zeros(b * draws, p);
            for k in 0..n {
                full.row_mut(used_row(k)).copy_from_slice(dz.row(k));
            }
            seeds.push((z_all, full));
        }
        if let (Some(h), Some((mu, ls)), false) = (heads, gauss_leaves, cfg.dreg) {
            seeds.push((h.mean, g.take(mu).unwrap_or_else(|| Tensor2::zeros(b, p))));
            seeds.push((h.log_std, g.take(ls).unwrap_or_else(|| Tensor2::zeros(b, p))));
        }
        let mut eg = et.backward_seeded(seeds)?;
        let encoder: Vec<Tensor2<T>> = enc_params
            .iter()
            .zip(model.encoder.tensors())
            .map(|(&v, t)| eg.take(v).unwrap_or_else(|| Tensor2::zeros(t.rows(), t.cols())))
            .collect();
        grads = Some(ModelGrads {
            decoder,
            encoder,
            discriminator: Vec::new(),
        });
    }

    let mut disc_loss = None;
    if let (Some(disc), Some(xr)) = (&model.discriminator, disc_const) {
        expect_shape(&noise.prior, (n, p), "prior draws")?;
        let q_side = z_std.as_ref().unwrap_or(&z);
        let (loss, g) = discriminator_objective(disc, &xr, q_side, &noise.prior, with_grads)?;
        disc_loss = Some(loss);
        if let (Some(gr), Some(g)) = (grads.as_mut(), g) {
            gr.discriminator = g;
        }
    }

    Ok(BatchEval {
        objective,
        per_respondent,
        bundle: WeightBundle {
            log_w: log_w_val,
            weights,
            z,
            z_std,
            moments,
            heads: heads_val,
        },
        disc_loss,
        grads,
    })
}

/// `−mean[ln σ(T(x, z_q))] − mean[ln σ(−T(x, ζ))]` and optionally its
/// gradient with respect to the discriminator. Both sample sets are constants.
pub fn discriminator_objective<T: Real>(
    disc: &Discriminator<T>,
    x: &Tensor2<T>,
    z_q: &Tensor2<T>,
    z_prior: &Tensor2<T>,
    with_grads: bool,
) -> Result<(T, Option<Vec<Tensor2<T>>>)> {
    let n = x.rows();
    if z_q.rows() != n || z_prior.rows() != n || z_q.cols() != z_prior.cols() {
        return Err(Error::Shape {
            op: "avb_discriminator_loss",
            left: z_q.shape(),
            right: z_prior.shape(),
        });
    }
    let mut tape = Tape::new();
    let params = disc.record(&mut tape, with_grads);
    // Stack both sample sets so one forward pass serves the two terms.
    let xx = Tensor2::from_fn(2 * n, x.cols(), |i, j| x[(i % n, j)]);
    let zz = Tensor2::from_fn(2 * n, z_q.cols(), |i, j| if i < n { z_q[(i, j)] } else { z_prior[(i - n, j)] });
    let sign = Tensor2::from_fn(2 * n, 1, |i, _| if i < n { T::one() } else { -T::one() });
    let xv = tape.constant(xx);
    let zv = tape.constant(zz);
    let t = disc.forward(&mut tape, xv, zv, &params)?;
    let sv = tape.constant(sign);
    let st = tape.mul(t, sv)?;
    let ls = tape.log_sigmoid(st);
    let m = tape.mean(ls);
    let loss = tape.scale(m, lit(-2.0));
    let value = tape.value(loss).item();
    if !with_grads {
        return Ok((value, None));
    }
    let mut g = tape.backward(loss)?;
    let grads = params
        .iter()
        .zip(disc.tensors())
        .map(|(&v, t)| g.take(v).unwrap_or_else(|| Tensor2::zeros(t.rows(), t.cols())))
        .collect();
    Ok((value, Some(grads)))
}

/// Untracked discriminator loss for given logits on encoder and prior draws.
pub fn avb_discriminator_loss<T: Real>(t_q: &[T], t_prior: &[T]) -> T {
    let mq = t_q.iter().map(|&t| log_sigmoid(t)).sum::<T>() / lit(t_q.len().max(1) as f64);
    let mp = t_prior.iter().map(|&t| log_sigmoid(-t)).sum::<T>() / lit(t_prior.len().max(1) as f64);
    -(mq + mp)
}

/// Per-respondent mean and (n−1) standard deviation over `draws` consecutive rows.
fn moments<T: Real>(z: &Tensor2<T>, b: usize, draws: usize) -> Result<(Tensor2<T>, Tensor2<T>)> {
    let p = z.cols();
    let mut mu = Tensor2::zeros(b, p);
    let mut sd = Tensor2::zeros(b, p);
    let nd: T = lit(draws as f64);
    for i in 0..b {
        for c in 0..p {
            let m = (0..draws).map(|d| z[(i * draws + d, c)]).sum::<T>() / nd;
            let v = (0..draws).map(|d| (z[(i * draws + d, c)] - m).powi(2)).sum::<T>() / (nd - T::one());
            let s = v.sqrt();
            if !(s > lit(1e-6)) {
                return Err(Error::DegeneratePosterior {
                    respondent: i,
                    coord: c,
                    spread: s.to_f64().unwrap_or(f64::NAN),
                });
            }
            mu[(i, c)] = m;
            sd[(i, c)] = s;
        }
    }
    Ok((mu, sd))
}

fn normalize_rows<T: Real>(lw: &Tensor2<T>) -> Tensor2<T> {
    let mut out = lw.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

fn repeat_rows_val<T: Real>(t: &Tensor2<T>, k: usize) -> Tensor2<T> {
    Tensor2::from_fn(t.rows() * k, t.cols(), |i, j| t[(i / k, j)])
}

fn expect_shape<T: Real>(t: &Tensor2<T>, shape: (usize, usize), what: &'static str) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::Shape {
            op: what,
            left: t.shape(),
            right: shape,
        });
    }
    Ok(())
}

/// Holdout log-likelihood estimate: for each respondent, `ln (1/R) Σ_r w_r`
/// over `r_eval` importance draws. Returns per-respondent values in row
/// order. Adversarial models use the trained discriminator as the density
/// surrogate, so their values are estimates rather than bounds.
pub fn heldout_loglik<T: Real>(
    model: &Model<T>,
    x: &ResponseMatrix,
    kind: EstimatorKind,
    r_eval: usize,
    rng: &mut impl Rng,
) -> Result<Vec<T>> {
    if r_eval == 0 {
        return Err(Error::config("r_eval", "must be at least 1"));
    }
    model.check_family(kind)?;
    let cfg = EstimatorConfig {
        kind,
        iw_samples: r_eval,
        mc_samples: 1,
        adaptive_contrast: kind == EstimatorKind::Iwavb,
        dreg: false,
        kl: KlMode::Sampled,
    };
    let chunk = (16_384 / cfg.encoder_draws()).max(1);
    let mut out = Vec::with_capacity(x.n_respondents());
    let idx: Vec<usize> = (0..x.n_respondents()).collect();
    for rows in idx.chunks(chunk) {
        let xb = x.subset(rows);
        let noise = Noise::sample(model, rows.len(), &cfg, rng);
        out.extend(evaluate_inner(model, &xb, &cfg, &noise, None, false)?.per_respondent);
    }
    Ok(out)
}
