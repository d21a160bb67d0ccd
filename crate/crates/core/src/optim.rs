//! AdamW, the triangular cyclical learning rate and the moving-window
//! convergence rule.

use crate::diffkernel::Tensor2;
use crate::error::{Error, Result};
use crate::scalar::{lit, Real};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for one group of tensors.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    cfg: AdamWConfig,
    m: Vec<Tensor2<T>>,
    v: Vec<Tensor2<T>>,
    t: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig, params: &[&Tensor2<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor2::zeros(p.rows(), p.cols())).collect();
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Tensor2<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor2<T>] {
        &self.v
    }

    /// One bias-corrected AdamW update with decoupled weight decay:
    /// `θ ← θ − lr·m̂/(√v̂ + ε) − lr·λ·θ`.
    pub fn step(&mut self, params: Vec<&mut Tensor2<T>>, grads: &[Tensor2<T>], lr: T) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Index(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[k].shape() {
                return Err(Error::Shape {
                    op: "adamw_step",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(format!("parameter tensor {k}")));
            }
        }
        self.t += 1;
        let (b1, b2): (T, T) = (lit(self.cfg.beta1), lit(self.cfg.beta2));
        let (lambda, eps): (T, T) = (lit(self.cfg.weight_decay), lit(self.cfg.eps));
        let t = self.t as i32;
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        for (k, p) in params.into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for (((pi, mi), vi), &gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi = *pi - lr * mhat / (vhat.sqrt() + eps) - lr * lambda * *pi;
            }
        }
        Ok(())
    }
}

/// Triangular cyclical learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClrSchedule {
    pub base_lr: f64,
    pub max_lr: f64,
    /// Iterations per half cycle.
    pub step_size: usize,
}

impl ClrSchedule {
    /// Upper bound at five times the base rate.
    pub fn with_base(base_lr: f64, step_size: usize) -> Self {
        Self {
            base_lr,
            max_lr: 5.0 * base_lr,
            step_size,
        }
    }

    pub fn lr(&self, t: usize) -> f64 {
        let s = self.step_size.max(1);
        let phase = t % (2 * s);
        let x = if phase <= s { phase } else { 2 * s - phase };
        self.base_lr + (self.max_lr - self.base_lr) * (x as f64 / s as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MonitorStatus {
    Continue,
    Converged,
}

/// Stops a fit once the window-average objective has failed to improve by more
/// than `min_delta` for `patience` consecutive windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceMonitor {
    pub window: usize,
    pub patience: usize,
    pub min_delta: f64,
    best_avg: Option<f64>,
    windows_since_improvement: usize,
}

impl ConvergenceMonitor {
    pub fn new(window: usize, patience: usize, min_delta: f64) -> Self {
        Self {
            window,
            patience,
            min_delta,
            best_avg: None,
            windows_since_improvement: 0,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best_avg
    }

    pub fn windows_since_improvement(&self) -> usize {
        self.windows_since_improvement
    }

    /// Feeds one window average.
    pub fn update(&mut self, window_avg: f64) -> MonitorStatus {
        let improved = match self.best_avg {
            None => true,
            Some(best) => window_avg > best + self.min_delta,
        };
        if improved {
            self.best_avg = Some(window_avg);
            self.windows_since_improvement = 0;
        } else {
            self.windows_since_improvement += 1;
        }
        if self.windows_since_improvement >= self.patience {
            MonitorStatus::Converged
        } else {
            MonitorStatus::Continue
        }
    }
}

impl Default for ConvergenceMonitor {
    fn default() -> Self {
        Self::new(100, 500, 1e-3)
    }
}
