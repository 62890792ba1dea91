//! Numerical-health instrumentation: condition numbers, the first-order
//! ridge sensitivity probe, finite-difference gradient checks, per-step
//! cost profiles and the per-epoch CSV log.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{softplus, Tape};
use crate::model::{
    compute_weights, evaluate, forward_on_tape, init_prototypes, loss_on_tape, record_bank, weights_on_tape, GraphPath,
    ModelConfig, ModelError, PrototypeBank,
};
use crate::tensor::{cholesky_factor, condition_number, solve_spd, Matrix, Scalar};

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    /// Condition number of `[1, X_p]`.
    pub kappa_xp: f64,
    /// Condition number of `X_p` without the bias column.
    pub kappa_xp_core: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr: f64,
    pub skips: usize,
    pub seconds: f64,
}

pub const CSV_HEADER: &str = "epoch,loss,train_acc,val_acc,kappa_xp,lambda1,lambda2,lr,skips,seconds";

impl EpochRecord {
    /// Columns in header order; `verbose` appends `kappa_xp_core`.
    pub fn csv_row(&self, verbose: bool) -> String {
        let mut row = format!(
            "{},{},{},{},{},{},{},{},{},{:.3}",
            self.epoch,
            self.loss,
            self.train_acc,
            self.val_acc,
            self.kappa_xp,
            self.lambda1,
            self.lambda2,
            self.lr,
            self.skips,
            self.seconds
        );
        if verbose {
            row.push_str(&format!(",{}", self.kappa_xp_core));
        }
        row
    }
}

/// Append-only CSV writer, flushed after every row.
pub struct CsvLogger<W: Write> {
    out: W,
    verbose: bool,
    last_epoch: Option<usize>,
}

impl CsvLogger<BufWriter<File>> {
    pub fn create(path: &Path, verbose: bool) -> io::Result<Self> {
        Self::new(BufWriter::new(File::create(path)?), verbose)
    }
}

impl<W: Write> CsvLogger<W> {
    pub fn new(mut out: W, verbose: bool) -> io::Result<Self> {
        write!(out, "{CSV_HEADER}")?;
        if verbose {
            write!(out, ",kappa_xp_core")?;
        }
        writeln!(out)?;
        out.flush()?;
        Ok(Self {
            out,
            verbose,
            last_epoch: None,
        })
    }

    pub fn append(&mut self, record: &EpochRecord) -> io::Result<()> {
        if self.last_epoch.is_some_and(|e| record.epoch <= e) {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!(
                    "epoch {} does not follow {}",
                    record.epoch,
                    self.last_epoch.unwrap_or(0)
                ),
            ));
        }
        writeln!(self.out, "{}", record.csv_row(self.verbose))?;
        self.out.flush()?;
        self.last_epoch = Some(record.epoch);
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Condition number of the bias-augmented prototype inputs.
pub fn kappa_xp<T: Scalar>(bank: &PrototypeBank<T>) -> f64 {
    condition_number(&bank.xp.with_bias_column())
}

/// Condition number of the prototype inputs without the bias column.
pub fn kappa_xp_core<T: Scalar>(bank: &PrototypeBank<T>) -> f64 {
    condition_number(&bank.xp)
}

/// Which prototype tensors the sensitivity probe perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Perturb {
    Both,
    HiddenOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityReport {
    pub delta_scale: f64,
    /// `‖W₁(X+ΔX, H+ΔH) − W₁(X, H)‖_F`
    pub measured: f64,
    /// `‖−G⁻¹(ΔG)W₁ + G⁻¹ΔR‖_F`
    pub predicted: f64,
    /// `measured / predicted`; NaN when nothing moved.
    pub ratio: f64,
    /// `‖ΔW_measured − ΔW_predicted‖_F / ‖ΔW_predicted‖_F`
    pub relative_error: f64,
}

fn random_direction(rows: usize, cols: usize, norm: f64, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    let m = Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
    let n = m.frobenius_norm();
    if n == 0.0 {
        m
    } else {
        m.scale(norm / n)
    }
}

/// Compares the change of the first-layer solve under a random bank
/// perturbation with its first-order expansion, in double precision.
pub fn ridge_sensitivity_probe<T: Scalar>(
    bank: &PrototypeBank<T>,
    delta_scale: f64,
    mode: Perturb,
    seed: u64,
) -> Result<SensitivityReport, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = bank.xp.cast::<f64>();
    let h = bank.hp[0].cast::<f64>();
    let lambda = softplus(bank.rho[0].item().as_f64());
    let (n, d) = x.shape();

    let dx = match mode {
        Perturb::Both => random_direction(n, d, delta_scale, &mut rng),
        Perturb::HiddenOnly => Matrix::zeros(n, d),
    };
    let dh = random_direction(n, h.cols(), delta_scale, &mut rng);

    let a = x.with_bias_column();
    let mut g = a.matmul_tn(&a);
    for i in 0..g.rows() {
        g[(i, i)] += lambda;
    }
    let fac = cholesky_factor(&g)?;
    let w = solve_spd(&fac, &a.matmul_tn(&h))?;

    let da = {
        let mut m = Matrix::zeros(n, d + 1);
        for r in 0..n {
            m.row_mut(r)[1..].copy_from_slice(dx.row(r));
        }
        m
    };
    let dg = a.matmul_tn(&da).add(&da.matmul_tn(&a));
    let dr = a.matmul_tn(&dh).add(&da.matmul_tn(&h));
    let predicted = solve_spd(&fac, &dr.sub(&dg.matmul(&w)))?;

    let a2 = x.add(&dx).with_bias_column();
    let w2 = crate::tensor::ridge_pinv_apply(&a2, lambda, &h.add(&dh))?;
    let measured = w2.sub(&w);

    let pn = predicted.frobenius_norm();
    let mn = measured.frobenius_norm();
    let (ratio, relative_error) = if pn == 0.0 {
        (f64::NAN, if mn == 0.0 { 0.0 } else { f64::INFINITY })
    } else {
        (mn / pn, measured.sub(&predicted).frobenius_norm() / pn)
    };
    Ok(SensitivityReport {
        delta_scale,
        measured: mn,
        predicted: pn,
        ratio,
        relative_error,
    })
}

/// Central finite differences of `f` at `params`, one entry at a time.
pub fn finite_differences(
    f: &mut dyn FnMut(&[Matrix<f64>]) -> f64,
    params: &[Matrix<f64>],
    step: f64,
) -> Vec<Matrix<f64>> {
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for t in 0..params.len() {
        let mut g = Matrix::zeros(params[t].rows(), params[t].cols());
        for i in 0..params[t].len() {
            let orig = work[t].as_slice()[i];
            work[t].as_mut_slice()[i] = orig + step;
            let up = f(&work);
            work[t].as_mut_slice()[i] = orig - step;
            let down = f(&work);
            work[t].as_mut_slice()[i] = orig;
            g.as_mut_slice()[i] = (up - down) / (2.0 * step);
        }
        out.push(g);
    }
    out
}

/// `‖a − b‖_F / max(‖a‖_F, ‖b‖_F)`, or the absolute difference when both
/// are below `floor`.
pub fn relative_error(a: &Matrix<f64>, b: &Matrix<f64>, floor: f64) -> f64 {
    let diff = a.sub(b).frobenius_norm();
    let scale = a.frobenius_norm().max(b.frobenius_norm());
    if scale < floor {
        diff
    } else {
        diff / scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub prototypes: usize,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub batch: usize,
    pub temperature: f64,
    pub lambda3: f64,
    pub step: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            prototypes: 4,
            input_dim: 3,
            hidden: vec![5],
            classes: 3,
            batch: 8,
            temperature: 0.0,
            lambda3: 1e-2,
            step: 1e-6,
            threshold: 1e-4,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `(tensor name, relative error)` in bank order.
    pub entries: Vec<(String, f64)>,
    pub max_relative_error: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (name, err) in &self.entries {
            writeln!(f, "{name:>8}  rel.err {err:.3e}")?;
        }
        write!(
            f,
            "max rel.err {:.3e} (threshold {:.0e}): {}",
            self.max_relative_error,
            self.threshold,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// Names matching [`PrototypeBank::tensors`].
pub fn tensor_names(layers: usize) -> Vec<String> {
    let mut v = vec!["xp".to_string()];
    v.extend((1..=layers).map(|l| format!("hp{l}")));
    v.push("yp".into());
    v.extend((1..=layers + 1).map(|l| format!("rho{l}")));
    v
}

fn bank_from_tensors(template: &PrototypeBank<f64>, t: &[Matrix<f64>]) -> PrototypeBank<f64> {
    let l = template.layers();
    PrototypeBank {
        xp: t[0].clone(),
        hp: t[1..=l].to_vec(),
        yp: t[l + 1].clone(),
        rho: t[l + 2..].to_vec(),
    }
}

/// The toy problem of a gradient check: bank, config, inputs and labels.
pub fn grad_check_problem(cfg: &GradCheckConfig) -> (PrototypeBank<f64>, ModelConfig, Matrix<f64>, Vec<usize>) {
    let model = ModelConfig {
        prototypes: cfg.prototypes,
        hidden: cfg.hidden.clone(),
        lambda1_init: 0.3,
        lambda2_init: 0.2,
        learn_lambda1: true,
        learn_lambda2: true,
        lambda3: cfg.lambda3,
        temperature: cfg.temperature,
        label_scale: 1.0,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut bank: PrototypeBank<f64> =
        init_prototypes(&model, cfg.input_dim, cfg.classes, None, &mut rng).expect("valid toy config");
    // move labels off the exact one-hot so their gradient is generic
    bank.yp = bank.yp.add(&Matrix::from_fn(cfg.prototypes, cfg.classes, |_, _| {
        0.1 * rng.sample::<f64, _>(StandardNormal)
    }));
    let x = Matrix::from_fn(cfg.batch, cfg.input_dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let y = (0..cfg.batch).map(|i| i % cfg.classes).collect();
    (bank, model, x, y)
}

/// Reverse-mode adjoints of every bank tensor against central finite
/// differences of the full objective, in double precision.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport, ModelError> {
    let (bank, model, x, y) = grad_check_problem(cfg);
    let analytic = evaluate(&bank, &model, &x, &y, GraphPath::General)?;
    let analytic: Vec<Matrix<f64>> = analytic
        .grads
        .into_iter()
        .zip(bank.tensors())
        .map(|(g, p)| g.unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols())))
        .collect();
    let params: Vec<Matrix<f64>> = bank.tensors().into_iter().cloned().collect();
    let mut objective = |t: &[Matrix<f64>]| -> f64 {
        let b = bank_from_tensors(&bank, t);
        compute_weights(&b, &model)
            .and_then(|w| w.loss(&x, &y, model.lambda3))
            .unwrap_or(f64::NAN)
    };
    let numeric = finite_differences(&mut objective, &params, cfg.step);
    Ok(compare(
        &analytic,
        &numeric,
        &tensor_names(bank.layers()),
        cfg.threshold,
    ))
}

/// Builds a report from paired gradients.
pub fn compare(analytic: &[Matrix<f64>], numeric: &[Matrix<f64>], names: &[String], threshold: f64) -> GradCheckReport {
    let entries: Vec<(String, f64)> = names
        .iter()
        .zip(analytic.iter().zip(numeric))
        .map(|(n, (a, b))| (n.clone(), relative_error(a, b, 1e-10)))
        .collect();
    let max = entries.iter().map(|e| e.1).fold(0.0, f64::max);
    let all_finite = entries.iter().all(|e| e.1.is_finite());
    GradCheckReport {
        entries,
        max_relative_error: max,
        threshold,
        passed: all_finite && max < threshold,
    }
}

/// Split cost of one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepProfile {
    /// Closed-form solves and their adjoints; depends only on the bank.
    pub solve_seconds: f64,
    /// Forward pass, cross-entropy and back-propagation over the batch.
    pub data_seconds: f64,
    pub batch: usize,
}

/// Times the two halves of a step separately; each is the median of
/// `repeats` runs.
pub fn profile_step<T: Scalar>(
    bank: &PrototypeBank<T>,
    cfg: &ModelConfig,
    x: &Matrix<T>,
    labels: &[usize],
    repeats: usize,
) -> Result<StepProfile, ModelError> {
    let repeats = repeats.max(1);
    let mut solve = Vec::with_capacity(repeats);
    let mut data = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        {
            let mut tape = Tape::new();
            let vars = record_bank(&mut tape, bank, cfg);
            let ws = weights_on_tape(&mut tape, &vars, cfg)?;
            let mut root = tape.frobenius_sq(ws[0]);
            for &w in &ws[1..] {
                let f = tape.frobenius_sq(w);
                root = tape.add(root, f);
            }
            tape.backward(root)?;
        }
        solve.push(t0.elapsed().as_secs_f64());

        let weights = compute_weights(bank, cfg)?;
        let t1 = Instant::now();
        {
            let mut tape = Tape::new();
            let ws: Vec<_> = weights.weights.iter().map(|w| tape.leaf_ref(w)).collect();
            let logits = forward_on_tape(&mut tape, &ws, x, cfg.activation);
            let loss = loss_on_tape(&mut tape, &ws, logits, labels, cfg.lambda3);
            tape.backward(loss)?;
        }
        data.push(t1.elapsed().as_secs_f64());
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    Ok(StepProfile {
        solve_seconds: median(&mut solve),
        data_seconds: median(&mut data),
        batch: x.rows(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(epoch: usize) -> EpochRecord {
        EpochRecord {
            epoch,
            loss: 0.5,
            train_acc: 0.75,
            val_acc: 0.5,
            kappa_xp: 3.0,
            kappa_xp_core: 2.0,
            lambda1: 0.01,
            lambda2: 0.02,
            lr: 0.05,
            skips: 0,
            seconds: 1.25,
        }
    }

    #[test]
    fn csv_has_exact_header_and_rejects_non_monotone_epochs() {
        let mut log = CsvLogger::new(Vec::new(), false).unwrap();
        log.append(&record(1)).unwrap();
        assert!(log.append(&record(1)).is_err());
        log.append(&record(2)).unwrap();
        let text = String::from_utf8(log.into_inner()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1], "1,0.5,0.75,0.5,3,0.01,0.02,0.05,0,1.250");
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn verbose_csv_adds_core_condition_number() {
        let mut log = CsvLogger::new(Vec::new(), true).unwrap();
        log.append(&record(1)).unwrap();
        let text = String::from_utf8(log.into_inner()).unwrap();
        assert!(text.starts_with(&format!("{CSV_HEADER},kappa_xp_core\n")));
        assert!(text.trim_end().ends_with(",2"));
    }

    fn bank_with_xp(xp: Matrix<f64>) -> PrototypeBank<f64> {
        let n = xp.rows();
        PrototypeBank {
            xp,
            hp: vec![Matrix::from_fn(n, 2, |r, c| (r + 2 * c) as f64 * 0.1)],
            yp: Matrix::zeros(n, 2),
            rho: vec![Matrix::scalar(0.0); 2],
        }
    }

    #[test]
    fn kappa_of_orthogonal_and_duplicated_rows() {
        // [1, X] = [[1, 1, 1],[1,-1, 1],[1, 1,-1],[1,-1,-1]] has orthogonal columns of equal norm
        let x = Matrix::from_rows(&[&[1.0, 1.0], &[-1.0, 1.0], &[1.0, -1.0], &[-1.0, -1.0]]);
        assert!((kappa_xp(&bank_with_xp(x)) - 1.0).abs() < 1e-12);
        let dup = Matrix::from_rows(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]);
        assert_eq!(kappa_xp(&bank_with_xp(dup)), f64::INFINITY);
    }

    #[test]
    fn probe_is_exact_for_hidden_only_perturbations() {
        let x = Matrix::from_fn(5, 3, |r, c| ((r * 3 + c) as f64).sin());
        let report = ridge_sensitivity_probe(&bank_with_xp(x), 1e-3, Perturb::HiddenOnly, 1).unwrap();
        assert!(report.relative_error < 1e-10, "{report:?}");
    }

    #[test]
    fn probe_at_zero_scale_sees_no_change() {
        let x = Matrix::from_fn(5, 3, |r, c| ((r * 3 + c) as f64).cos());
        let report = ridge_sensitivity_probe(&bank_with_xp(x), 0.0, Perturb::Both, 1).unwrap();
        assert_eq!(report.measured, 0.0);
        assert_eq!(report.predicted, 0.0);
    }

    #[test]
    fn finite_differences_of_a_quadratic() {
        let p = vec![Matrix::from_rows(&[&[1.0, -2.0]])];
        let g = finite_differences(&mut |t| t[0].frobenius_sq(), &p, 1e-5);
        assert!(g[0].sub(&p[0].scale(2.0)).max_abs() < 1e-8);
    }
}
