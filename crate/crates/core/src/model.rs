//! Prototype bank, closed-form layer weights, prediction and the guarded
//! training step.
//!
//! Every layer's weights come from a ridge solve against the bank:
//!
//! ```text
//! W₁     = ridge([1, X_p],          H₁,            λ₁)
//! W_l    = ridge([1, σ(H_{l−1})],   H_l,           λ_l)   2 ≤ l ≤ L
//! W_{L+1}= ridge([1, σ(H_L)],       soft(Y_p, T),  λ_{L+1})
//! ```
//!
//! with `λ = softplus(ρ)`. Only the bank is optimised; the weights are
//! thrown away after each step.

use std::borrow::Cow;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::autodiff::{softmax_rows, softplus, softplus_inverse, Activation, AutodiffError, Tape, Var};
use crate::optim::{AdamState, OptimError, ParamGroup};
use crate::tensor::{ridge_pinv_apply, LinalgError, Matrix, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("step skipped: {0}")]
    StepSkipped(String),
    #[error("stratified initialisation needs examples of class {0}, found none")]
    EmptyDataset(usize),
    #[error("shape mismatch in {op}: expected {expected} columns, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// How the prototype inputs start out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InputInit {
    /// `N(0, s²)` entries.
    #[default]
    RandomNormal,
    /// A random training example of the prototype's assigned class.
    Stratified,
}

impl std::str::FromStr for InputInit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "random-normal" | "normal" => Ok(InputInit::RandomNormal),
            "stratified" | "stratified-sample" => Ok(InputInit::Stratified),
            other => Err(format!(
                "unknown input init '{other}' (expected random-normal or stratified)"
            )),
        }
    }
}

impl std::fmt::Display for InputInit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InputInit::RandomNormal => "random-normal",
            InputInit::Stratified => "stratified",
        })
    }
}

/// Architecture and objective settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub prototypes: usize,
    /// Widths `h₁ … h_L`; one entry is the usual single hidden layer.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Initial ridge for the first solve.
    pub lambda1_init: f64,
    /// Initial ridge for every later solve.
    pub lambda2_init: f64,
    pub learn_lambda1: bool,
    pub learn_lambda2: bool,
    /// Weight penalty on every solved matrix.
    pub lambda3: f64,
    /// 0 feeds `Y_p` to the last solve as-is; above 0 uses `softmax(Y_p/T)`.
    pub temperature: f64,
    /// Magnitude of the initial one-hot label logits.
    pub label_scale: f64,
    pub input_init: InputInit,
    pub input_init_scale: f64,
    pub hidden_init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            prototypes: 150,
            hidden: vec![512],
            activation: Activation::Sigmoid,
            lambda1_init: 1e-2,
            lambda2_init: 1e-2,
            learn_lambda1: false,
            learn_lambda2: true,
            lambda3: 1e-5,
            temperature: 0.0,
            label_scale: 5.0,
            input_init: InputInit::RandomNormal,
            input_init_scale: 1.0,
            hidden_init_scale: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.prototypes == 0 {
            return bad("prototype count must be at least 1");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden widths must be non-empty and positive");
        }
        if !(self.lambda1_init > 0.0) || !(self.lambda2_init > 0.0) {
            return bad("initial ridge values must be positive");
        }
        if !(self.lambda3 >= 0.0) {
            return bad("weight penalty must be non-negative");
        }
        if !(self.temperature >= 0.0) {
            return bad("temperature must be non-negative");
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.hidden.len()
    }

    /// Whether the raw ridge parameter of solve `i` (0-based) is trained.
    pub fn learns_lambda(&self, i: usize) -> bool {
        if i == 0 {
            self.learn_lambda1
        } else {
            self.learn_lambda2
        }
    }
}

/// The trainable state.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank<T> {
    /// `N_p × d′` prototype inputs, no bias column.
    pub xp: Matrix<T>,
    /// `N_p × h_l` pre-activation hidden targets, one per hidden layer.
    pub hp: Vec<Matrix<T>>,
    /// `N_p × k` label logits.
    pub yp: Matrix<T>,
    /// One 1×1 raw ridge parameter per solve.
    pub rho: Vec<Matrix<T>>,
}

impl<T: Scalar> PrototypeBank<T> {
    pub fn prototypes(&self) -> usize {
        self.xp.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.xp.cols()
    }

    pub fn classes(&self) -> usize {
        self.yp.cols()
    }

    pub fn layers(&self) -> usize {
        self.hp.len()
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.rho.iter().map(|r| softplus(r.item()).as_f64()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|m| m.is_finite())
    }

    /// Scalar count of every trainable entry.
    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|m| m.len()).sum()
    }

    /// `[X_p, H_1 … H_L, Y_p, ρ_1 … ρ_{L+1}]`, the optimiser's order.
    pub fn tensors(&self) -> Vec<&Matrix<T>> {
        let mut v = vec![&self.xp];
        v.extend(self.hp.iter());
        v.push(&self.yp);
        v.extend(self.rho.iter());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut v = vec![&mut self.xp];
        v.extend(self.hp.iter_mut());
        v.push(&mut self.yp);
        v.extend(self.rho.iter_mut());
        v
    }

    /// Parameter group for each entry of [`tensors`](Self::tensors).
    pub fn param_groups(&self, decay: &GroupDecay) -> Vec<ParamGroup> {
        let g = |d| ParamGroup {
            lr_scale: 1.0,
            decay: d,
        };
        let mut v = vec![g(decay.xp)];
        v.extend(self.hp.iter().map(|_| g(decay.hp)));
        v.push(g(decay.yp));
        v.extend(self.rho.iter().map(|_| g(decay.rho)));
        v
    }

    pub fn new_optimizer(&self, adam: crate::optim::AdamConfig, decay: &GroupDecay) -> AdamState<T> {
        let shapes: Vec<_> = self.tensors().iter().map(|m| m.shape()).collect();
        AdamState::new(adam, &shapes, self.param_groups(decay))
    }

    pub fn cast<U: Scalar>(&self) -> PrototypeBank<U> {
        PrototypeBank {
            xp: self.xp.cast(),
            hp: self.hp.iter().map(|m| m.cast()).collect(),
            yp: self.yp.cast(),
            rho: self.rho.iter().map(|m| m.cast()).collect(),
        }
    }

    fn check_against(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        let widths: Vec<usize> = self.hp.iter().map(|h| h.cols()).collect();
        if widths != cfg.hidden || self.rho.len() != cfg.layers() + 1 {
            return Err(ModelError::InvalidConfig(format!(
                "bank has hidden widths {widths:?} and {} ridge parameters, config expects {:?}",
                self.rho.len(),
                cfg.hidden
            )));
        }
        Ok(())
    }
}

/// Decoupled decay per parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GroupDecay {
    pub xp: f64,
    pub hp: f64,
    pub yp: f64,
    pub rho: f64,
}

/// `Y_p` unchanged when `T = 0`, otherwise `softmax(Y_p / T)` per row.
pub fn soft_labels<T: Scalar>(yp: &Matrix<T>, temperature: f64) -> Matrix<T> {
    if temperature == 0.0 {
        yp.clone()
    } else {
        softmax_rows(&yp.scale(T::from_f64(1.0 / temperature)))
    }
}

/// Class assigned to prototype `i`: round-robin, so every class gets
/// `⌊N_p/k⌋` prototypes and the first `N_p mod k` classes one more.
pub fn prototype_class(i: usize, classes: usize) -> usize {
    i % classes
}

pub(crate) fn normal_matrix<T: Scalar, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    scale: f64,
    rng: &mut R,
) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        T::from_f64(scale * z)
    })
}

/// Draws a fresh bank.
///
/// `examples` (projected inputs with labels) is only read in stratified
/// mode. Draw order is fixed: inputs, then each hidden layer.
pub fn init_prototypes<T: Scalar, R: Rng + ?Sized>(
    cfg: &ModelConfig,
    input_dim: usize,
    classes: usize,
    examples: Option<(&Matrix<T>, &[usize])>,
    rng: &mut R,
) -> Result<PrototypeBank<T>, ModelError> {
    cfg.validate()?;
    if classes == 0 {
        return Err(ModelError::InvalidConfig("at least one class is required".into()));
    }
    let n = cfg.prototypes;
    let xp = match cfg.input_init {
        InputInit::RandomNormal => normal_matrix(n, input_dim, cfg.input_init_scale, rng),
        InputInit::Stratified => {
            let (x, y) = examples
                .ok_or_else(|| ModelError::InvalidConfig("stratified initialisation needs training examples".into()))?;
            if x.cols() != input_dim {
                return Err(ModelError::ShapeMismatch {
                    op: "init_prototypes",
                    expected: input_dim,
                    got: x.cols(),
                });
            }
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
            for (i, &c) in y.iter().enumerate() {
                if c < classes {
                    by_class[c].push(i);
                }
            }
            let mut xp = Matrix::zeros(n, input_dim);
            for i in 0..n {
                let c = prototype_class(i, classes);
                let pool = &by_class[c];
                if pool.is_empty() {
                    return Err(ModelError::EmptyDataset(c));
                }
                let pick = pool[rng.random_range(0..pool.len())];
                xp.row_mut(i).copy_from_slice(x.row(pick));
            }
            xp
        }
    };
    let hp = cfg
        .hidden
        .iter()
        .map(|&h| normal_matrix(n, h, cfg.hidden_init_scale, rng))
        .collect();
    let mut yp = Matrix::zeros(n, classes);
    for i in 0..n {
        yp[(i, prototype_class(i, classes))] = T::from_f64(cfg.label_scale);
    }
    let rho = (0..=cfg.layers())
        .map(|i| {
            let lam = if i == 0 { cfg.lambda1_init } else { cfg.lambda2_init };
            Matrix::scalar(T::from_f64(softplus_inverse(lam)))
        })
        .collect();
    Ok(PrototypeBank { xp, hp, yp, rho })
}

/// Closed-form weights for a frozen bank; each matrix has its bias first.
#[derive(Debug, Clone, PartialEq)]
pub struct SolvedWeights<T> {
    pub weights: Vec<Matrix<T>>,
    pub lambdas: Vec<f64>,
    pub activation: Activation,
}

/// Rows per block when evaluating large inputs.
const EVAL_CHUNK: usize = 4096;

impl<T: Scalar> SolvedWeights<T> {
    pub fn input_dim(&self) -> usize {
        self.weights[0].rows() - 1
    }

    pub fn classes(&self) -> usize {
        self.weights.last().map_or(0, |w| w.cols())
    }

    /// `[1, x] → W₁ → σ → [1, ·] → … → W_{L+1}`.
    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>, ModelError> {
        if x.cols() != self.input_dim() {
            return Err(ModelError::ShapeMismatch {
                op: "forward",
                expected: self.input_dim(),
                got: x.cols(),
            });
        }
        let mut z = x.with_bias_column().matmul(&self.weights[0]);
        for w in &self.weights[1..] {
            z = self.activation.apply_matrix(&z).with_bias_column().matmul(w);
        }
        Ok(z)
    }

    /// Predicted class per row, evaluated in blocks to bound memory.
    pub fn predict(&self, x: &Matrix<T>) -> Result<Vec<usize>, ModelError> {
        let mut out = Vec::with_capacity(x.rows());
        for start in (0..x.rows()).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(x.rows());
            out.extend(self.forward(&x.row_range(start, end))?.argmax_rows());
        }
        Ok(out)
    }

    pub fn accuracy(&self, x: &Matrix<T>, labels: &[usize]) -> Result<f64, ModelError> {
        let pred = self.predict(x)?;
        Ok(accuracy(&pred, labels))
    }

    /// Mean cross-entropy plus `λ₃·Σ‖W‖²`, evaluated without a tape.
    pub fn loss(&self, x: &Matrix<T>, labels: &[usize], lambda3: f64) -> Result<f64, ModelError> {
        let logits = self.forward(x)?;
        let ce = mean_cross_entropy(&logits, labels);
        let penalty: f64 = self.weights.iter().map(|w| w.frobenius_sq().as_f64()).sum();
        Ok(ce + lambda3 * penalty)
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum()
    }
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
}

fn mean_cross_entropy<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row: Vec<f64> = logits.row(r).iter().map(|v| v.as_f64()).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len().max(1) as f64
}

/// Solves every layer for a frozen bank.
pub fn compute_weights<T: Scalar>(bank: &PrototypeBank<T>, cfg: &ModelConfig) -> Result<SolvedWeights<T>, ModelError> {
    bank.check_against(cfg)?;
    let lam: Vec<T> = bank.rho.iter().map(|r| softplus(r.item())).collect();
    let mut weights = Vec::with_capacity(bank.layers() + 1);
    weights.push(ridge_pinv_apply(&bank.xp.with_bias_column(), lam[0], &bank.hp[0])?);
    for l in 1..=bank.layers() {
        let design = cfg.activation.apply_matrix(&bank.hp[l - 1]).with_bias_column();
        let target = if l < bank.layers() {
            Cow::Borrowed(&bank.hp[l])
        } else {
            Cow::Owned(soft_labels(&bank.yp, cfg.temperature))
        };
        weights.push(ridge_pinv_apply(&design, lam[l], &target)?);
    }
    Ok(SolvedWeights {
        weights,
        lambdas: lam.iter().map(|l| l.as_f64()).collect(),
        activation: cfg.activation,
    })
}

/// Handles to the bank's tensors on a tape.
#[derive(Debug, Clone)]
pub struct BankVars {
    pub xp: Var,
    pub hp: Vec<Var>,
    pub yp: Var,
    pub rho: Vec<Var>,
}

impl BankVars {
    /// Same order as [`PrototypeBank::tensors`].
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.xp];
        v.extend(&self.hp);
        v.push(self.yp);
        v.extend(&self.rho);
        v
    }
}

/// Records the bank on `tape`; ridge parameters that are not learned
/// become constants.
pub fn record_bank<'a, T: Scalar>(tape: &mut Tape<'a, T>, bank: &'a PrototypeBank<T>, cfg: &ModelConfig) -> BankVars {
    BankVars {
        xp: tape.leaf_ref(&bank.xp),
        hp: bank.hp.iter().map(|h| tape.leaf_ref(h)).collect(),
        yp: tape.leaf_ref(&bank.yp),
        rho: bank
            .rho
            .iter()
            .enumerate()
            .map(|(i, r)| {
                if cfg.learns_lambda(i) {
                    tape.leaf_ref(r)
                } else {
                    tape.constant_ref(r)
                }
            })
            .collect(),
    }
}

fn soft_labels_on_tape<T: Scalar>(tape: &mut Tape<'_, T>, yp: Var, temperature: f64) -> Var {
    if temperature == 0.0 {
        yp
    } else {
        let scaled = tape.scale(yp, T::from_f64(1.0 / temperature));
        tape.softmax_rows(scaled)
    }
}

/// The general chain of solves for any depth.
pub fn weights_on_tape<T: Scalar>(
    tape: &mut Tape<'_, T>,
    vars: &BankVars,
    cfg: &ModelConfig,
) -> Result<Vec<Var>, ModelError> {
    let lam: Vec<Var> = vars.rho.iter().map(|&r| tape.softplus(r)).collect();
    let layers = vars.hp.len();
    let mut out = Vec::with_capacity(layers + 1);
    let design = tape.add_bias_column(vars.xp);
    out.push(tape.ridge_solve(design, vars.hp[0], lam[0])?);
    for l in 1..=layers {
        let act = tape.activation(vars.hp[l - 1], cfg.activation);
        let design = tape.add_bias_column(act);
        let target = if l < layers {
            vars.hp[l]
        } else {
            soft_labels_on_tape(tape, vars.yp, cfg.temperature)
        };
        out.push(tape.ridge_solve(design, target, lam[l])?);
    }
    Ok(out)
}

/// The single-hidden-layer graph written out directly.
pub fn two_layer_weights_on_tape<T: Scalar>(
    tape: &mut Tape<'_, T>,
    vars: &BankVars,
    cfg: &ModelConfig,
) -> Result<Vec<Var>, ModelError> {
    if vars.hp.len() != 1 {
        return Err(ModelError::InvalidConfig(
            "the two-layer path needs exactly one hidden layer".into(),
        ));
    }
    let lam1 = tape.softplus(vars.rho[0]);
    let lam2 = tape.softplus(vars.rho[1]);
    let x_aug = tape.add_bias_column(vars.xp);
    let w1 = tape.ridge_solve(x_aug, vars.hp[0], lam1)?;
    let h_act = tape.activation(vars.hp[0], cfg.activation);
    let h_aug = tape.add_bias_column(h_act);
    let targets = soft_labels_on_tape(tape, vars.yp, cfg.temperature);
    let w2 = tape.ridge_solve(h_aug, targets, lam2)?;
    Ok(vec![w1, w2])
}

/// Logits of `x` through solved weights recorded on the tape.
pub fn forward_on_tape<'a, T: Scalar>(
    tape: &mut Tape<'a, T>,
    weights: &[Var],
    x: &'a Matrix<T>,
    act: Activation,
) -> Var {
    let input = tape.constant_ref(x);
    let mut z = tape.add_bias_column(input);
    z = tape.matmul(z, weights[0]);
    for &w in &weights[1..] {
        let a = tape.activation(z, act);
        let a = tape.add_bias_column(a);
        z = tape.matmul(a, w);
    }
    z
}

/// Mean cross-entropy plus `λ₃·Σ‖W_l‖²_F` on the tape.
pub fn loss_on_tape<'a, T: Scalar>(
    tape: &mut Tape<'a, T>,
    weights: &[Var],
    logits: Var,
    labels: &'a [usize],
    lambda3: f64,
) -> Var {
    let ce = tape.cross_entropy_mean(logits, labels);
    if lambda3 == 0.0 {
        return ce;
    }
    let mut penalty = tape.frobenius_sq(weights[0]);
    for &w in &weights[1..] {
        let f = tape.frobenius_sq(w);
        penalty = tape.add(penalty, f);
    }
    let penalty = tape.scale(penalty, T::from_f64(lambda3));
    tape.add(ce, penalty)
}

/// Which recording of the weight graph to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GraphPath {
    #[default]
    General,
    TwoLayer,
}

/// Loss value and leaf adjoints for one batch, in bank order.
pub struct Evaluation<T> {
    pub loss: f64,
    pub logits: Matrix<T>,
    /// `None` for ridge parameters that are held fixed.
    pub grads: Vec<Option<Matrix<T>>>,
}

/// Builds the graph for one batch and back-propagates.
pub fn evaluate<T: Scalar>(
    bank: &PrototypeBank<T>,
    cfg: &ModelConfig,
    x: &Matrix<T>,
    labels: &[usize],
    path: GraphPath,
) -> Result<Evaluation<T>, ModelError> {
    bank.check_against(cfg)?;
    if x.cols() != bank.input_dim() {
        return Err(ModelError::ShapeMismatch {
            op: "evaluate",
            expected: bank.input_dim(),
            got: x.cols(),
        });
    }
    let mut tape = Tape::new();
    let vars = record_bank(&mut tape, bank, cfg);
    let weights = match path {
        GraphPath::General => weights_on_tape(&mut tape, &vars, cfg),
        GraphPath::TwoLayer => two_layer_weights_on_tape(&mut tape, &vars, cfg),
    }
    .map_err(|e| match e {
        ModelError::Linalg(err) => ModelError::StepSkipped(format!("ridge solve failed: {err}")),
        other => other,
    })?;
    let logits = forward_on_tape(&mut tape, &weights, x, cfg.activation);
    let loss = loss_on_tape(&mut tape, &weights, logits, labels, cfg.lambda3);
    if !tape.all_finite() {
        return Err(ModelError::StepSkipped("non-finite value in the forward pass".into()));
    }
    let mut grads = tape.backward(loss)?;
    let loss_value = tape.value(loss).item().as_f64();
    let logits = tape.value(logits).clone();
    let grads: Vec<Option<Matrix<T>>> = vars.all().into_iter().map(|v| grads.take(v)).collect();
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(ModelError::StepSkipped("non-finite gradient".into()));
    }
    Ok(Evaluation {
        loss: loss_value,
        logits,
        grads,
    })
}

/// What one accepted step reports.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// Objective before the update.
    pub loss: f64,
    /// Correct predictions in the batch, before the update.
    pub correct: usize,
    pub lambdas: Vec<f64>,
}

/// One optimiser step on the bank.
///
/// On [`ModelError::StepSkipped`] neither the bank nor the optimiser state
/// has changed.
pub fn train_step<T: Scalar>(
    bank: &mut PrototypeBank<T>,
    cfg: &ModelConfig,
    x: &Matrix<T>,
    labels: &[usize],
    optimizer: &mut AdamState<T>,
    lr: f64,
) -> Result<StepOutcome, ModelError> {
    if !bank.is_finite() {
        return Err(ModelError::StepSkipped("bank contains non-finite values".into()));
    }
    let eval = evaluate(bank, cfg, x, labels, GraphPath::General)?;
    let correct = eval
        .logits
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    let grads: Vec<Matrix<T>> = eval
        .grads
        .into_iter()
        .zip(bank.tensors())
        .map(|(g, p)| g.unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols())))
        .collect();

    let bank_before = bank.clone();
    let optimizer_before = optimizer.clone();
    {
        let grad_refs: Vec<&Matrix<T>> = grads.iter().collect();
        let mut params = bank.tensors_mut();
        optimizer.step(&mut params, &grad_refs, lr)?;
    }
    if !bank.is_finite() {
        *bank = bank_before;
        *optimizer = optimizer_before;
        return Err(ModelError::StepSkipped("update produced non-finite values".into()));
    }
    Ok(StepOutcome {
        loss: eval.loss,
        correct,
        lambdas: bank.lambdas(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            prototypes: 2,
            hidden: vec![1],
            lambda1_init: 1.0,
            lambda2_init: 1.0,
            ..ModelConfig::default()
        }
    }

    fn bank_1d(xp: &[f64], hp: &[f64]) -> PrototypeBank<f64> {
        PrototypeBank {
            xp: Matrix::from_vec(xp.len(), 1, xp.to_vec()),
            hp: vec![Matrix::from_vec(hp.len(), 1, hp.to_vec())],
            yp: Matrix::from_rows(&[&[5.0, 0.0], &[0.0, 5.0]]),
            rho: vec![Matrix::scalar(softplus_inverse(1.0)); 2],
        }
    }

    #[test]
    fn zero_hidden_targets_give_zero_first_layer() {
        let w = compute_weights(&bank_1d(&[0.3, -2.0], &[0.0, 0.0]), &tiny_cfg()).unwrap();
        assert_eq!(w.weights[0], Matrix::zeros(2, 1));
    }

    #[test]
    fn first_layer_hand_example() {
        // [1,x] = [[1,1],[1,−1]], G = 2I + I = 3I, R = [0, 2]ᵀ, W₁ = [0, 2/3]ᵀ
        let w = compute_weights(&bank_1d(&[1.0, -1.0], &[1.0, -1.0]), &tiny_cfg()).unwrap();
        assert!(w.weights[0].sub(&Matrix::from_rows(&[&[0.0], &[2.0 / 3.0]])).max_abs() < 1e-12);
    }

    #[test]
    fn default_shapes() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bank: PrototypeBank<f32> = init_prototypes(&cfg, 400, 10, None, &mut rng).unwrap();
        let w = compute_weights(&bank, &cfg).unwrap();
        assert_eq!(w.weights[0].shape(), (401, 512));
        assert_eq!(w.weights[1].shape(), (513, 10));
        assert_eq!(bank.parameter_count(), 150 * (400 + 512 + 10) + 2);
    }

    #[test]
    fn zero_network_gives_uniform_loss() {
        let w = SolvedWeights::<f64> {
            weights: vec![Matrix::zeros(4, 2), Matrix::zeros(3, 10)],
            lambdas: vec![1.0, 1.0],
            activation: Activation::Sigmoid,
        };
        let x = Matrix::from_fn(5, 3, |r, c| (r + c) as f64);
        let logits = w.forward(&x).unwrap();
        assert_eq!(logits, Matrix::zeros(5, 10));
        let loss = w.loss(&x, &[0, 1, 2, 3, 4], 0.7).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let w = SolvedWeights::<f64> {
            weights: vec![Matrix::zeros(4, 2), Matrix::zeros(3, 2)],
            lambdas: vec![],
            activation: Activation::Sigmoid,
        };
        assert!(matches!(
            w.forward(&Matrix::zeros(1, 2)),
            Err(ModelError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn soft_label_cases() {
        let y = Matrix::<f64>::from_rows(&[&[3.0, -1.0, 0.5]]);
        assert_eq!(soft_labels(&y, 0.0), y);
        let u = soft_labels(&Matrix::<f64>::zeros(2, 4), 1.0);
        assert!(u.as_slice().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let hot = soft_labels(&y, 1e6);
        assert!(hot.as_slice().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-4));
    }

    #[test]
    fn balanced_label_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = ModelConfig {
            prototypes: 10,
            hidden: vec![3],
            ..ModelConfig::default()
        };
        let bank: PrototypeBank<f64> = init_prototypes(&cfg, 2, 10, None, &mut rng).unwrap();
        let per_class: Vec<usize> = (0..10)
            .map(|c| (0..10).filter(|&i| bank.yp[(i, c)] == 5.0).count())
            .collect();
        assert_eq!(per_class, vec![1; 10]);
    }

    #[test]
    fn stratified_init_copies_examples_and_detects_missing_class() {
        let x = Matrix::<f64>::from_rows(&[&[1.0, 1.0], &[2.0, 2.0]]);
        let cfg = ModelConfig {
            prototypes: 4,
            hidden: vec![2],
            input_init: InputInit::Stratified,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bank = init_prototypes(&cfg, 2, 2, Some((&x, &[0, 1])), &mut rng).unwrap();
        assert_eq!(bank.xp.row(0), &[1.0, 1.0]);
        assert_eq!(bank.xp.row(3), &[2.0, 2.0]);
        assert!(matches!(
            init_prototypes(&cfg, 2, 3, Some((&x, &[0, 1])), &mut rng),
            Err(ModelError::EmptyDataset(2))
        ));
    }

    #[test]
    fn nan_in_hidden_targets_skips_without_touching_state() {
        let cfg = tiny_cfg();
        let mut bank = bank_1d(&[1.0, -1.0], &[1.0, f64::NAN]);
        let mut opt = bank.new_optimizer(Default::default(), &GroupDecay::default());
        let before = (format!("{bank:?}"), opt.clone());
        let x = Matrix::from_rows(&[&[0.5], &[-0.5]]);
        let res = train_step(&mut bank, &cfg, &x, &[0, 1], &mut opt, 0.1);
        assert!(matches!(res, Err(ModelError::StepSkipped(_))));
        assert_eq!(format!("{bank:?}"), before.0);
        assert_eq!(opt, before.1);
    }

    #[test]
    fn zero_learning_rate_is_a_null_update() {
        let cfg = tiny_cfg();
        let mut bank = bank_1d(&[1.0, -1.0], &[0.5, -0.25]);
        let before = bank.clone();
        let mut opt = bank.new_optimizer(Default::default(), &GroupDecay::default());
        let x = Matrix::from_rows(&[&[0.5], &[-0.5]]);
        train_step(&mut bank, &cfg, &x, &[0, 1], &mut opt, 0.0).unwrap();
        assert_eq!(bank, before);
    }
}
