//! The epoch loop: shuffled mini-batches, scheduled learning rate, a
//! per-epoch record and a best-validation snapshot of the bank.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diagnostics::{kappa_xp, kappa_xp_core, EpochRecord};
use crate::model::{compute_weights, train_step, GroupDecay, ModelConfig, ModelError, PrototypeBank};
use crate::optim::{AdamConfig, Schedule};
use crate::tensor::{Matrix, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub schedule: Schedule,
    /// Examples per step; 0 uses the whole training set every step.
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub decay: GroupDecay,
    /// Seed of the batch order.
    pub shuffle_seed: u64,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            schedule: Schedule {
                base_lr: 0.05,
                warmup_epochs: 20,
                total_epochs: 250,
                floor_lr: 0.0,
            },
            batch_size: 6000,
            adam: AdamConfig::default(),
            decay: GroupDecay::default(),
            shuffle_seed: 0,
            patience: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult<T> {
    /// Bank at the epoch with the highest validation accuracy.
    pub best: PrototypeBank<T>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    /// Bank after the last epoch.
    pub last: PrototypeBank<T>,
    pub records: Vec<EpochRecord>,
    pub total_skips: usize,
    pub seconds: f64,
}

/// Runs the schedule to completion (or until patience runs out).
///
/// `observer` sees each record as soon as it exists; an observer error
/// aborts training. With an empty validation set the snapshot follows
/// training accuracy instead.
#[allow(clippy::too_many_arguments)]
pub fn fit<T: Scalar, E: From<ModelError>>(
    mut bank: PrototypeBank<T>,
    cfg: &ModelConfig,
    settings: &TrainSettings,
    train_x: &Matrix<T>,
    train_y: &[usize],
    val_x: &Matrix<T>,
    val_y: &[usize],
    mut observer: impl FnMut(&EpochRecord) -> Result<(), E>,
) -> Result<FitResult<T>, E> {
    let n = train_x.rows();
    assert_eq!(n, train_y.len(), "fit: one label per training row");
    let batch = if settings.batch_size == 0 {
        n
    } else {
        settings.batch_size.min(n)
    };
    let mut optimizer = bank.new_optimizer(settings.adam, &settings.decay);
    let mut rng = ChaCha8Rng::seed_from_u64(settings.shuffle_seed);
    let mut order: Vec<usize> = (0..n).collect();
    let full_batch = batch == n;

    let start = Instant::now();
    let mut records = Vec::with_capacity(settings.schedule.total_epochs);
    let mut best = bank.clone();
    let mut best_epoch = 0;
    let mut best_score = f64::NEG_INFINITY;
    let mut total_skips = 0;
    let mut since_best = 0;

    for epoch in 0..settings.schedule.total_epochs {
        let lr = settings.schedule.lr_at(epoch).map_err(ModelError::from)?;
        if !full_batch {
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        let mut seen = 0;
        let mut correct = 0;
        let mut skips = 0;
        for chunk in order.chunks(batch) {
            let (xb, yb);
            let (x, y): (&Matrix<T>, &[usize]) = if full_batch {
                (train_x, train_y)
            } else {
                xb = train_x.select_rows(chunk);
                yb = chunk.iter().map(|&i| train_y[i]).collect::<Vec<_>>();
                (&xb, &yb)
            };
            match train_step(&mut bank, cfg, x, y, &mut optimizer, lr) {
                Ok(out) => {
                    loss_sum += out.loss * y.len() as f64;
                    seen += y.len();
                    correct += out.correct;
                }
                Err(ModelError::StepSkipped(_)) => skips += 1,
                Err(e) => return Err(e.into()),
            }
        }
        total_skips += skips;

        let val_acc = compute_weights(&bank, cfg)
            .and_then(|w| w.accuracy(val_x, val_y))
            .unwrap_or(f64::NAN);
        let train_acc = if seen == 0 {
            f64::NAN
        } else {
            correct as f64 / seen as f64
        };
        let lambdas = bank.lambdas();
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: if seen == 0 { f64::NAN } else { loss_sum / seen as f64 },
            train_acc,
            val_acc,
            kappa_xp: kappa_xp(&bank),
            kappa_xp_core: kappa_xp_core(&bank),
            lambda1: lambdas[0],
            lambda2: lambdas.get(1).copied().unwrap_or(f64::NAN),
            lr,
            skips,
            seconds: start.elapsed().as_secs_f64(),
        };
        observer(&record)?;
        records.push(record);

        let score = if val_y.is_empty() { train_acc } else { val_acc };
        if score > best_score {
            best_score = score;
            best_epoch = epoch + 1;
            best = bank.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if settings.patience.is_some_and(|p| since_best >= p) {
                break;
            }
        }
    }

    Ok(FitResult {
        best,
        best_epoch,
        best_val_acc: best_score,
        last: bank,
        records,
        total_skips,
        seconds: start.elapsed().as_secs_f64(),
    })
}
