//! Fitting loop: minibatching, simultaneous AdamW updates of decoder, encoder
//! and discriminator, cyclical learning rates and the windowed stopping rule.

use super::{evaluate, Encoder, EstimatorConfig, EstimatorKind, KlMode, Model, Noise};
use crate::error::{Error, Result};
use crate::grm::{GrmParams, LoadingPattern, ResponseMatrix};
use crate::nets::{encoded_width, BlackBoxEncoder, Discriminator, GaussianEncoder};
use crate::optim::{AdamW, AdamWConfig, ClrSchedule, ConvergenceMonitor, MonitorStatus};
use crate::scalar::{lit, Real};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Independent random streams derived from one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Noise = 3,
    Holdout = 4,
    Batches = 5,
    Responses = 6,
}

pub fn substream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    Exploratory,
    /// Consecutive equal blocks of items per factor.
    Simple,
    /// Explicit `M×P` pattern of free loadings.
    Mask(Vec<Vec<bool>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub kind: EstimatorKind,
    /// `None` picks 25 for importance-weighted kinds and 1 otherwise.
    pub iw_samples: Option<usize>,
    pub mc_samples: usize,
    /// `None` enables adaptive contrast exactly for `iwavb`.
    pub adaptive_contrast: Option<bool>,
    pub dreg: bool,
    pub kl: KlMode,
    pub n_factors: usize,
    pub structure: Structure,
    pub free_corr: bool,
    /// Missingness indicator inputs; `None` turns them on when data are missing.
    pub indicators: Option<bool>,
    pub batch_size: usize,
    /// Decoder and encoder learning rate.
    pub lr_gen: f64,
    pub lr_disc: f64,
    pub step_size: usize,
    pub window: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub max_iterations: usize,
    pub encoder_hidden: Option<Vec<usize>>,
    pub disc_hidden: Vec<usize>,
    /// Black-box encoder noise width; `None` uses `P`.
    pub noise_dim: Option<usize>,
    pub adamw: AdamWConfig,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            kind: EstimatorKind::Iwavb,
            iw_samples: None,
            mc_samples: 1,
            adaptive_contrast: None,
            dreg: false,
            kl: KlMode::Analytic,
            n_factors: 1,
            structure: Structure::Exploratory,
            free_corr: false,
            indicators: None,
            batch_size: 128,
            lr_gen: 1e-3,
            lr_disc: 1e-2,
            step_size: 2000,
            window: 100,
            patience: 500,
            min_delta: 1e-3,
            max_iterations: 50_000,
            encoder_hidden: None,
            disc_hidden: vec![256, 128],
            noise_dim: None,
            adamw: AdamWConfig::default(),
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn new(kind: EstimatorKind, n_factors: usize) -> Self {
        Self {
            kind,
            n_factors,
            ..Self::default()
        }
    }

    pub fn estimator(&self) -> EstimatorConfig {
        let base = EstimatorConfig::new(self.kind);
        EstimatorConfig {
            iw_samples: self.iw_samples.unwrap_or(base.iw_samples),
            mc_samples: self.mc_samples,
            adaptive_contrast: self.adaptive_contrast.unwrap_or(base.adaptive_contrast),
            dreg: self.dreg,
            kl: self.kl,
            ..base
        }
    }

    pub fn encoder_hidden(&self) -> Vec<usize> {
        self.encoder_hidden.clone().unwrap_or_else(|| {
            if self.kind.adversarial() {
                vec![128]
            } else {
                vec![100]
            }
        })
    }

    pub fn pattern(&self, n_items: usize) -> Result<LoadingPattern> {
        match &self.structure {
            Structure::Exploratory => Ok(LoadingPattern::exploratory(n_items, self.n_factors)),
            Structure::Simple => LoadingPattern::simple(n_items, self.n_factors),
            Structure::Mask(mask) => {
                let pat = LoadingPattern::from_mask(mask)?;
                if pat.n_items != n_items || pat.n_factors != self.n_factors {
                    return Err(Error::config(
                        "structure",
                        format!(
                            "mask is {}×{}, data and n_factors need {}×{}",
                            pat.n_items, pat.n_factors, n_items, self.n_factors
                        ),
                    ));
                }
                Ok(pat)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.estimator().validate()?;
        let rate = |v: f64| v.is_finite() && v >= 0.0;
        if self.n_factors == 0 {
            return Err(Error::config("n_factors", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !rate(self.lr_gen) {
            return Err(Error::config("lr_gen", "must be finite and non-negative"));
        }
        if !rate(self.lr_disc) {
            return Err(Error::config("lr_disc", "must be finite and non-negative"));
        }
        if self.step_size == 0 || self.window == 0 || self.patience == 0 {
            return Err(Error::config("step_size/window/patience", "must be at least 1"));
        }
        if !(self.min_delta >= 0.0) {
            return Err(Error::config("min_delta", "must be non-negative"));
        }
        if self.noise_dim == Some(0) {
            return Err(Error::config("noise_dim", "must be at least 1"));
        }
        if self.free_corr && matches!(self.structure, Structure::Exploratory) {
            return Err(Error::config("free_corr", "exploratory models fix the factor correlation to I"));
        }
        Ok(())
    }

    /// Fresh networks and decoder for data with these category counts.
    pub fn init_model<T: Real>(&self, categories: &[usize], indicators: bool) -> Result<Model<T>> {
        self.validate()?;
        let m = categories.len();
        let p = self.n_factors;
        let mut rng = substream(self.seed, Stream::Init);
        let decoder = GrmParams::init(categories, self.pattern(m)?, self.free_corr, &mut rng)?;
        let width = encoded_width(m, indicators);
        let hidden = self.encoder_hidden();
        let (encoder, discriminator) = if self.kind.adversarial() {
            let enc = BlackBoxEncoder::new(width, self.noise_dim.unwrap_or(p), &hidden, p, &mut rng)?;
            let disc = Discriminator::new(width, p, &self.disc_hidden, &mut rng)?;
            (Encoder::BlackBox(enc), Some(disc))
        } else {
            (Encoder::Gaussian(GaussianEncoder::new(width, &hidden, p, &mut rng)?), None)
        };
        Ok(Model {
            decoder,
            encoder,
            discriminator,
            indicators,
        })
    }
}

/// One row of the training trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    /// Batch objective before the update.
    pub objective: f64,
    pub disc_loss: Option<f64>,
    pub lr_gen: f64,
    pub lr_disc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub index: usize,
    pub end_iteration: usize,
    pub average: f64,
    pub best: f64,
    pub windows_since_improvement: usize,
}

/// What the fit observer sees after every iteration.
#[derive(Clone, Copy, Debug)]
pub struct Progress<'a> {
    pub step: &'a StepRecord,
    /// Set on iterations that close a monitoring window.
    pub window: Option<&'a WindowRecord>,
}

/// Optimizer and sampling state between iterations.
#[derive(Clone, Debug)]
pub struct TrainState<T: Real> {
    pub model: Model<T>,
    pub estimator: EstimatorConfig,
    opt_dec: AdamW<T>,
    opt_enc: AdamW<T>,
    opt_disc: Option<AdamW<T>>,
    sched_gen: ClrSchedule,
    sched_disc: ClrSchedule,
    batch_size: usize,
    iteration: usize,
    order: Vec<usize>,
    cursor: usize,
    batch_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
}

impl<T: Real> TrainState<T> {
    pub fn new(x: &ResponseMatrix, cfg: &FitConfig) -> Result<Self> {
        let indicators = cfg.indicators.unwrap_or_else(|| x.has_missing());
        let model = cfg.init_model(x.categories(), indicators)?;
        Self::from_model(model, x, cfg)
    }

    /// Continues training from an existing model with fresh optimizer state.
    pub fn from_model(model: Model<T>, x: &ResponseMatrix, cfg: &FitConfig) -> Result<Self> {
        cfg.validate()?;
        let estimator = cfg.estimator();
        if x.categories() != model.decoder.categories() {
            return Err(Error::Data("response categories do not match the model".into()));
        }
        let opt_dec = AdamW::new(cfg.adamw, &model.decoder.tensors());
        let opt_enc = AdamW::new(cfg.adamw, &model.encoder.tensors());
        let opt_disc = model.discriminator.as_ref().map(|d| AdamW::new(cfg.adamw, &d.tensors()));
        Ok(Self {
            model,
            estimator,
            opt_dec,
            opt_enc,
            opt_disc,
            sched_gen: ClrSchedule::with_base(cfg.lr_gen, cfg.step_size),
            sched_disc: ClrSchedule::with_base(cfg.lr_disc, cfg.step_size),
            batch_size: cfg.batch_size,
            iteration: 0,
            order: (0..x.n_respondents()).collect(),
            cursor: x.n_respondents(),
            batch_rng: substream(cfg.seed, Stream::Batches),
            noise_rng: substream(cfg.seed, Stream::Noise),
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    fn next_batch(&mut self, x: &ResponseMatrix) -> Option<ResponseMatrix> {
        let n = self.order.len();
        if self.batch_size >= n {
            return None;
        }
        if self.cursor + self.batch_size > n {
            self.order.shuffle(&mut self.batch_rng);
            self.cursor = 0;
        }
        let rows = &self.order[self.cursor..self.cursor + self.batch_size];
        self.cursor += self.batch_size;
        Some(x.subset(rows))
    }

    /// One simultaneous update of every network from the current state.
    pub fn step(&mut self, x: &ResponseMatrix) -> Result<StepRecord> {
        let it = self.iteration;
        let batch = self.next_batch(x);
        let xb = batch.as_ref().unwrap_or(x);
        let noise = Noise::sample(&self.model, xb.n_respondents(), &self.estimator, &mut self.noise_rng);
        let at = |e: Error| match e {
            Error::NonFiniteObjective { .. } => Error::NonFiniteObjective {
                iteration: it,
                last_good: it.checked_sub(1),
            },
            e if e.is_numerical() => Error::Training {
                iteration: it,
                last_good: it.checked_sub(1),
                source: Box::new(e),
            },
            other => other,
        };
        let ev = evaluate(&self.model, xb, &self.estimator, &noise, true).map_err(at)?;
        let grads = ev.grads.expect("requested gradients");
        let lr_gen = self.sched_gen.lr(it);
        let lr_disc = self.sched_disc.lr(it);
        self.opt_dec.step(self.model.decoder.tensors_mut(), &grads.decoder, lit(lr_gen)).map_err(at)?;
        self.opt_enc.step(self.model.encoder.tensors_mut(), &grads.encoder, lit(lr_gen)).map_err(at)?;
        if let (Some(opt), Some(disc)) = (self.opt_disc.as_mut(), self.model.discriminator.as_mut()) {
            opt.step(disc.tensors_mut(), &grads.discriminator, lit(lr_disc)).map_err(at)?;
        }
        self.iteration += 1;
        let f = |v: T| v.to_f64().unwrap_or(f64::NAN);
        Ok(StepRecord {
            iteration: it,
            objective: f(ev.objective),
            disc_loss: ev.disc_loss.map(f),
            lr_gen,
            lr_disc: self.opt_disc.as_ref().map(|_| lr_disc),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Converged,
    MaxIterations,
}

#[derive(Clone, Debug)]
pub struct FitOutcome<T: Real> {
    pub model: Model<T>,
    pub status: FitStatus,
    pub iterations: usize,
    pub trace: Vec<StepRecord>,
    pub windows: Vec<WindowRecord>,
}

/// Trains until the window-average objective stalls or `max_iterations`.
pub fn fit<T: Real>(
    x: &ResponseMatrix,
    cfg: &FitConfig,
    mut observer: impl FnMut(Progress<'_>),
) -> Result<FitOutcome<T>> {
    let mut state = TrainState::<T>::new(x, cfg)?;
    let mut monitor = ConvergenceMonitor::new(cfg.window, cfg.patience, cfg.min_delta);
    let mut trace = Vec::new();
    let mut windows = Vec::new();
    let mut acc = 0.0;
    let mut status = FitStatus::MaxIterations;
    while state.iteration() < cfg.max_iterations {
        let rec = state.step(x)?;
        acc += rec.objective;
        let mut closed = None;
        if (rec.iteration + 1) % cfg.window == 0 {
            let average = acc / cfg.window as f64;
            acc = 0.0;
            let st = monitor.update(average);
            windows.push(WindowRecord {
                index: windows.len(),
                end_iteration: rec.iteration,
                average,
                best: monitor.best().unwrap_or(average),
                windows_since_improvement: monitor.windows_since_improvement(),
            });
            closed = Some(st);
        }
        observer(Progress {
            step: &rec,
            window: closed.and(windows.last()),
        });
        trace.push(rec);
        if closed == Some(MonitorStatus::Converged) {
            status = FitStatus::Converged;
            break;
        }
    }
    Ok(FitOutcome {
        iterations: state.iteration(),
        model: state.model,
        status,
        trace,
        windows,
    })
}
