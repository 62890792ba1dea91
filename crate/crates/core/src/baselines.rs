//! Comparison methods: an extreme learning machine, random-feature ridge
//! regression and a one-hidden-layer MLP trained by back-propagation.
//!
//! The two random-feature methods share one implementation. A frozen,
//! seeded projection maps bias-augmented inputs to features; the readout is
//! a single ridge solve on one-hot targets. The normal equations are
//! accumulated in row chunks and in double precision, so the feature matrix
//! never exists in full and several ridge strengths can be tried against
//! one pass over the data.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Activation, AutodiffError, Tape};
use crate::data::Dataset;
use crate::model::{accuracy, normal_matrix};
use crate::optim::{AdamConfig, AdamState, OptimError, ParamGroup, Schedule};
use crate::tensor::{cholesky_factor, gemm, solve_spd, LinalgError, Matrix, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("invalid baseline configuration: {0}")]
    InvalidConfig(String),
    #[error("expected {expected} input columns, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// One row of a comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineResult {
    pub method: String,
    /// Trained parameters, counted from the fitted model.
    pub parameters: usize,
    /// Training time only; data loading and evaluation are excluded.
    pub seconds: f64,
    pub accuracy: f64,
    /// `key=value` pairs describing the run.
    pub config: String,
}

/// Elementwise map applied to random projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMap {
    Identity,
    Activation(Activation),
}

impl FeatureMap {
    pub fn name(self) -> &'static str {
        match self {
            FeatureMap::Identity => "identity",
            FeatureMap::Activation(a) => a.name(),
        }
    }

    fn apply<T: Scalar>(self, m: &mut Matrix<T>) {
        if let FeatureMap::Activation(a) = self {
            m.map_inplace(|v| a.apply(v));
        }
    }
}

impl FromStr for FeatureMap {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "identity" => Ok(FeatureMap::Identity),
            other => other
                .parse()
                .map(FeatureMap::Activation)
                .map_err(|_| format!("unknown feature map '{other}' (expected identity, sigmoid, tanh or relu)")),
        }
    }
}

impl fmt::Display for FeatureMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomFeatureConfig {
    pub features: usize,
    pub lambda: f64,
    pub feature_map: FeatureMap,
    /// Standard deviation of the projection entries.
    pub projection_scale: f64,
    pub seed: u64,
}

impl RandomFeatureConfig {
    /// Extreme learning machine: sigmoid features of a unit-normal projection.
    pub fn elm(hidden: usize, lambda: f64, seed: u64) -> Self {
        Self {
            features: hidden,
            lambda,
            feature_map: FeatureMap::Activation(Activation::Sigmoid),
            projection_scale: 1.0,
            seed,
        }
    }

    /// Random linear features with a ridge readout.
    pub fn rf_ridge(features: usize, lambda: f64, seed: u64) -> Self {
        Self {
            feature_map: FeatureMap::Identity,
            ..Self::elm(features, lambda, seed)
        }
    }

    fn validate(&self) -> Result<(), BaselineError> {
        if self.features == 0 {
            return Err(BaselineError::InvalidConfig(
                "at least one random feature is required".into(),
            ));
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(BaselineError::InvalidConfig(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if !self.projection_scale.is_finite() {
            return Err(BaselineError::InvalidConfig("projection scale must be finite".into()));
        }
        Ok(())
    }

    fn describe(&self) -> String {
        format!(
            "features={} lambda={} map={} scale={} seed={}",
            self.features, self.lambda, self.feature_map, self.projection_scale, self.seed
        )
    }
}

/// Rows per chunk when streaming features.
const FEATURE_CHUNK: usize = 4096;
/// Column-block width of the lower-triangular Gram update.
const GRAM_BLOCK: usize = 512;

/// Frozen projection plus the accumulated normal equations of its features.
#[derive(Debug, Clone)]
pub struct RandomFeatureSystem<T> {
    projection: Matrix<T>,
    feature_map: FeatureMap,
    /// `FᵀF` over bias-augmented features.
    gram: Matrix<f64>,
    /// `FᵀY` against one-hot labels.
    cross: Matrix<f64>,
}

/// Bias-augmented features `[1, φ([1, x]·P)]`.
fn features<T: Scalar>(x: &Matrix<T>, projection: &Matrix<T>, map: FeatureMap) -> Matrix<T> {
    let mut z = x.with_bias_column().matmul(projection);
    map.apply(&mut z);
    z.with_bias_column()
}

impl<T: Scalar> RandomFeatureSystem<T> {
    /// Draws the projection and streams the training set through it once.
    pub fn accumulate(
        x: &Matrix<T>,
        labels: &[usize],
        classes: usize,
        cfg: &RandomFeatureConfig,
    ) -> Result<Self, BaselineError> {
        cfg.validate()?;
        assert_eq!(x.rows(), labels.len(), "one label per row");
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(BaselineError::InvalidConfig(format!(
                "label {bad} outside {classes} classes"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let projection: Matrix<T> = normal_matrix(x.cols() + 1, cfg.features, cfg.projection_scale, &mut rng);

        let m = cfg.features + 1;
        let mut gram = Matrix::<f64>::zeros(m, m);
        let mut cross = Matrix::<f64>::zeros(m, classes);
        for start in (0..x.rows()).step_by(FEATURE_CHUNK) {
            let end = (start + FEATURE_CHUNK).min(x.rows());
            // Products in f64 even for f32 features: with rank-deficient maps
            // (identity) single-precision round-off exceeds small λ and the
            // factorisation turns indefinite.
            let f = features(&x.row_range(start, end), &projection, cfg.feature_map).cast::<f64>();
            for i0 in (0..m).step_by(GRAM_BLOCK) {
                let i1 = (i0 + GRAM_BLOCK).min(m);
                gemm(
                    1.0,
                    f.t().block(i0, 0, i1 - i0, f.rows()),
                    f.view().block(0, 0, f.rows(), i1),
                    1.0,
                    gram.view_mut().block_mut(i0, 0, i1 - i0, i1),
                );
            }
            for (r, &y) in labels[start..end].iter().enumerate() {
                for (j, &v) in f.row(r).iter().enumerate() {
                    cross[(j, y)] += v;
                }
            }
        }
        for i in 0..m {
            for j in 0..i {
                gram[(j, i)] = gram[(i, j)];
            }
        }
        Ok(Self {
            projection,
            feature_map: cfg.feature_map,
            gram,
            cross,
        })
    }

    /// Solves the readout for one ridge strength.
    pub fn solve(&self, lambda: f64) -> Result<RandomFeatureModel<T>, BaselineError> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(LinalgError::InvalidLambda(lambda).into());
        }
        let mut g = self.gram.clone();
        for i in 0..g.rows() {
            g[(i, i)] += lambda;
        }
        let readout = solve_spd(&cholesky_factor(&g)?, &self.cross)?;
        Ok(RandomFeatureModel {
            projection: self.projection.clone(),
            feature_map: self.feature_map,
            readout: readout.cast(),
        })
    }
}

/// Frozen projection and fitted linear readout.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomFeatureModel<T> {
    /// `(d+1) × h`, bias row first.
    pub projection: Matrix<T>,
    pub feature_map: FeatureMap,
    /// `(h+1) × k`, bias row first.
    pub readout: Matrix<T>,
}

impl<T: Scalar> RandomFeatureModel<T> {
    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>, BaselineError> {
        if x.cols() + 1 != self.projection.rows() {
            return Err(BaselineError::ShapeMismatch {
                expected: self.projection.rows() - 1,
                got: x.cols(),
            });
        }
        Ok(features(x, &self.projection, self.feature_map).matmul(&self.readout))
    }

    pub fn predict(&self, x: &Matrix<T>) -> Result<Vec<usize>, BaselineError> {
        let mut out = Vec::with_capacity(x.rows());
        for start in (0..x.rows()).step_by(FEATURE_CHUNK) {
            let end = (start + FEATURE_CHUNK).min(x.rows());
            out.extend(self.forward(&x.row_range(start, end))?.argmax_rows());
        }
        Ok(out)
    }

    pub fn accuracy(&self, x: &Matrix<T>, labels: &[usize]) -> Result<f64, BaselineError> {
        Ok(accuracy(&self.predict(x)?, labels))
    }

    /// Entries of the solved readout; the projection is regenerated from its seed.
    pub fn parameter_count(&self) -> usize {
        self.readout.len()
    }

    pub fn frozen_parameter_count(&self) -> usize {
        self.projection.len()
    }
}

pub fn fit_random_features<T: Scalar>(
    x: &Matrix<T>,
    labels: &[usize],
    classes: usize,
    cfg: &RandomFeatureConfig,
) -> Result<RandomFeatureModel<T>, BaselineError> {
    RandomFeatureSystem::accumulate(x, labels, classes, cfg)?.solve(cfg.lambda)
}

fn run_random_features<T: Scalar>(
    method: &str,
    train: &Dataset<T>,
    eval: &Dataset<T>,
    cfg: &RandomFeatureConfig,
) -> Result<BaselineResult, BaselineError> {
    let start = Instant::now();
    let model = fit_random_features(&train.images, &train.labels, train.classes, cfg)?;
    let seconds = start.elapsed().as_secs_f64();
    Ok(BaselineResult {
        method: method.into(),
        parameters: model.parameter_count(),
        seconds,
        accuracy: model.accuracy(&eval.images, &eval.labels)?,
        config: cfg.describe(),
    })
}

/// Extreme learning machine trained on `train`, scored on `eval`.
pub fn train_elm<T: Scalar>(
    train: &Dataset<T>,
    eval: &Dataset<T>,
    cfg: &RandomFeatureConfig,
) -> Result<BaselineResult, BaselineError> {
    run_random_features("elm", train, eval, cfg)
}

/// Random-feature ridge classifier trained on `train`, scored on `eval`.
pub fn train_rf_ridge<T: Scalar>(
    train: &Dataset<T>,
    eval: &Dataset<T>,
    cfg: &RandomFeatureConfig,
) -> Result<BaselineResult, BaselineError> {
    run_random_features("rf_ridge", train, eval, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpConfig {
    pub hidden: usize,
    pub activation: Activation,
    pub epochs: usize,
    /// Constant learning rate.
    pub lr: f64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: 165,
            activation: Activation::Relu,
            epochs: 25,
            lr: 1e-3,
            batch_size: 128,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl MlpConfig {
    fn describe(&self) -> String {
        format!(
            "hidden={} activation={} epochs={} lr={} batch={} seed={}",
            self.hidden, self.activation, self.epochs, self.lr, self.batch_size, self.seed
        )
    }
}

/// `[1, x]·W₁ → act → [1, ·]·W₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub w1: Matrix<T>,
    pub w2: Matrix<T>,
    pub activation: Activation,
}

impl<T: Scalar> Mlp<T> {
    /// Glorot-uniform weights, zero biases.
    pub fn init(inputs: usize, hidden: usize, classes: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let glorot = |fan_in: usize, fan_out: usize, rng: &mut dyn rand::RngCore| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Matrix::from_fn(fan_in + 1, fan_out, |r, _| {
                if r == 0 {
                    T::zero()
                } else {
                    T::from_f64(rng.random_range(-limit..limit))
                }
            })
        };
        Self {
            w1: glorot(inputs, hidden, rng),
            w2: glorot(hidden, classes, rng),
            activation,
        }
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>, BaselineError> {
        if x.cols() + 1 != self.w1.rows() {
            return Err(BaselineError::ShapeMismatch {
                expected: self.w1.rows() - 1,
                got: x.cols(),
            });
        }
        let h = self.activation.apply_matrix(&x.with_bias_column().matmul(&self.w1));
        Ok(h.with_bias_column().matmul(&self.w2))
    }

    pub fn predict(&self, x: &Matrix<T>) -> Result<Vec<usize>, BaselineError> {
        let mut out = Vec::with_capacity(x.rows());
        for start in (0..x.rows()).step_by(FEATURE_CHUNK) {
            let end = (start + FEATURE_CHUNK).min(x.rows());
            out.extend(self.forward(&x.row_range(start, end))?.argmax_rows());
        }
        Ok(out)
    }

    pub fn accuracy(&self, x: &Matrix<T>, labels: &[usize]) -> Result<f64, BaselineError> {
        Ok(accuracy(&self.predict(x)?, labels))
    }

    pub fn parameter_count(&self) -> usize {
        self.w1.len() + self.w2.len()
    }

    /// Mean cross-entropy of one batch and its gradients.
    fn loss_and_grads(&self, x: &Matrix<T>, labels: &[usize]) -> Result<(f64, [Matrix<T>; 2]), BaselineError> {
        let mut tape = Tape::new();
        let w1 = tape.leaf_ref(&self.w1);
        let w2 = tape.leaf_ref(&self.w2);
        let xv = tape.constant_ref(x);
        let xb = tape.add_bias_column(xv);
        let z = tape.matmul(xb, w1);
        let h = tape.activation(z, self.activation);
        let hb = tape.add_bias_column(h);
        let logits = tape.matmul(hb, w2);
        let loss = tape.cross_entropy_mean(logits, labels.to_vec());
        let mut grads = tape.backward(loss)?;
        let g1 = grads.take(w1).expect("leaf gradient");
        let g2 = grads.take(w2).expect("leaf gradient");
        Ok((tape.value(loss).item().as_f64(), [g1, g2]))
    }
}

/// Trains an MLP with Adam at a constant rate; returns the model and the
/// mean training loss of each epoch.
pub fn fit_mlp<T: Scalar>(
    x: &Matrix<T>,
    labels: &[usize],
    classes: usize,
    cfg: &MlpConfig,
) -> Result<(Mlp<T>, Vec<f64>), BaselineError> {
    if cfg.hidden == 0 {
        return Err(BaselineError::InvalidConfig(
            "the hidden layer needs at least one unit".into(),
        ));
    }
    if x.rows() == 0 {
        return Err(BaselineError::InvalidConfig("no training examples".into()));
    }
    assert_eq!(x.rows(), labels.len(), "one label per row");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mlp = Mlp::init(x.cols(), cfg.hidden, classes, cfg.activation, &mut rng);
    let schedule = Schedule::constant(cfg.lr, cfg.epochs);
    let mut adam = AdamState::new(
        cfg.adam,
        &[mlp.w1.shape(), mlp.w2.shape()],
        vec![ParamGroup::default(); 2],
    );
    let batch = if cfg.batch_size == 0 { x.rows() } else { cfg.batch_size };
    let mut order: Vec<usize> = (0..x.rows()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr_at(epoch)?;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let xb = x.select_rows(chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, [g1, g2]) = mlp.loss_and_grads(&xb, &yb)?;
            total += loss * chunk.len() as f64;
            adam.step(&mut [&mut mlp.w1, &mut mlp.w2], &[&g1, &g2], lr)?;
        }
        losses.push(total / x.rows() as f64);
    }
    Ok((mlp, losses))
}

/// Back-propagation MLP trained on `train`, scored on `eval`.
pub fn train_mlp_bp<T: Scalar>(
    train: &Dataset<T>,
    eval: &Dataset<T>,
    cfg: &MlpConfig,
) -> Result<BaselineResult, BaselineError> {
    let start = Instant::now();
    let (mlp, _) = fit_mlp(&train.images, &train.labels, train.classes, cfg)?;
    let seconds = start.elapsed().as_secs_f64();
    Ok(BaselineResult {
        method: "mlp_bp".into(),
        parameters: mlp.parameter_count(),
        seconds,
        accuracy: mlp.accuracy(&eval.images, &eval.labels)?,
        config: cfg.describe(),
    })
}
