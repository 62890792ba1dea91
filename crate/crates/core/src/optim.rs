//! Adam with decoupled per-group weight decay, and a warmup + cosine
//! learning-rate schedule indexed by epoch.

use thiserror::Error;

use crate::tensor::{Matrix, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("parameter {index}: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        index: usize,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("expected {expected} parameter tensors, got {got}")]
    CountMismatch { expected: usize, got: usize },
    #[error("epoch {epoch} outside schedule of {total} epochs")]
    EpochOutOfRange { epoch: usize, total: usize },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-tensor settings: a multiplier on the global learning rate and a
/// decoupled decay coefficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamGroup {
    pub lr_scale: f64,
    pub decay: f64,
}

impl Default for ParamGroup {
    fn default() -> Self {
        Self {
            lr_scale: 1.0,
            decay: 0.0,
        }
    }
}

/// Moment accumulators for a fixed list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    config: AdamConfig,
    groups: Vec<ParamGroup>,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
    t: u64,
}

impl<T: Scalar> AdamState<T> {
    /// One group per parameter tensor, shapes taken from `shapes`.
    pub fn new(config: AdamConfig, shapes: &[(usize, usize)], groups: Vec<ParamGroup>) -> Self {
        assert_eq!(shapes.len(), groups.len(), "AdamState: one group per parameter");
        let zeros = || shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect::<Vec<_>>();
        Self {
            config,
            groups,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Matrix<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Matrix<T>] {
        &self.v
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    /// Applies one update to `params` in place.
    ///
    /// Each parameter first shrinks by `lr·scale·decay·p`, then takes the
    /// bias-corrected Adam step. Decay never enters the moments.
    pub fn step(&mut self, params: &mut [&mut Matrix<T>], grads: &[&Matrix<T>], lr: f64) -> Result<(), OptimError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(OptimError::CountMismatch {
                expected: self.m.len(),
                got: params.len().min(grads.len()),
            });
        }
        for (index, (p, g)) in params.iter().zip(grads).enumerate() {
            let expected = self.m[index].shape();
            for got in [p.shape(), g.shape()] {
                if got != expected {
                    return Err(OptimError::ShapeMismatch { index, expected, got });
                }
            }
        }

        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - beta2.powi(self.t.min(i32::MAX as u64) as i32);
        let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - beta1), T::from_f64(1.0 - beta2));
        let eps = T::from_f64(eps);

        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let group = self.groups[i];
            let lr_i = lr * group.lr_scale;
            let step = T::from_f64(lr_i / bc1);
            let inv_bc2 = T::from_f64(1.0 / bc2);
            let shrink = T::from_f64(1.0 - lr_i * group.decay);
            let decays = group.decay != 0.0;
            let p = p.as_mut_slice();
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            for (((p, &g), m), v) in p.iter_mut().zip(g.as_slice()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                if decays {
                    *p = *p * shrink;
                }
                *p = *p - step * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr`, then cosine decay to `floor_lr`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub floor_lr: f64,
}

impl Schedule {
    pub fn new(base_lr: f64, warmup_epochs: usize, total_epochs: usize, floor_lr: f64) -> Result<Self, OptimError> {
        if warmup_epochs > total_epochs {
            return Err(OptimError::InvalidSchedule(format!(
                "warmup ({warmup_epochs}) exceeds total epochs ({total_epochs})"
            )));
        }
        if !(base_lr >= 0.0) || !(floor_lr >= 0.0) {
            return Err(OptimError::InvalidSchedule(
                "learning rates must be non-negative".into(),
            ));
        }
        Ok(Self {
            base_lr,
            warmup_epochs,
            total_epochs,
            floor_lr,
        })
    }

    /// A flat schedule: `lr` at every epoch.
    pub fn constant(lr: f64, total_epochs: usize) -> Self {
        Self {
            base_lr: lr,
            warmup_epochs: 0,
            total_epochs,
            floor_lr: lr,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64, OptimError> {
        if epoch >= self.total_epochs {
            return Err(OptimError::EpochOutOfRange {
                epoch,
                total: self.total_epochs,
            });
        }
        if epoch < self.warmup_epochs {
            return Ok(self.base_lr * (epoch + 1) as f64 / self.warmup_epochs as f64);
        }
        // progress runs 0 → 1 over the post-warmup epochs, so the last
        // epoch lands exactly on the floor
        let span = self.total_epochs - self.warmup_epochs - 1;
        let progress = if span == 0 {
            0.0
        } else {
            (epoch - self.warmup_epochs) as f64 / span as f64
        };
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        Ok(self.floor_lr + (self.base_lr - self.floor_lr) * cosine)
    }
}
