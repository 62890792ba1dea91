//! The five subcommands. Each writes human-readable output to `out` and
//! returns a structured report.
//!
//! Test data is read in one place only, [`final_test_eval`], which every
//! command that reports test accuracy calls once, after all selection on the
//! validation split is finished.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use protopinv::baselines::{fit_mlp, Mlp, RandomFeatureConfig, RandomFeatureModel, RandomFeatureSystem};
use protopinv::data::{pca_fit, split_train_val, Dataset, PcaBasis};
use protopinv::diagnostics::{grad_check, CsvLogger, GradCheckConfig, GradCheckReport};
use protopinv::model::{compute_weights, init_prototypes, SolvedWeights};
use protopinv::training::{fit, FitResult};
use protopinv::{Matrix, Precision, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::error::CliError;
use crate::report::{confusion_matrix, format_confusion, machine_descriptor, percent, table};
use crate::source::{DataSource, TestAccess};

macro_rules! say {
    ($out:expr, $($arg:tt)*) => {{
        let _ = writeln!($out, $($arg)*);
    }};
}

/// Loads the test file and hands it to `score`. The only caller of
/// [`DataSource::load_test`].
pub fn final_test_eval<R>(
    source: &dyn DataSource,
    score: impl FnOnce(&Dataset<f32>) -> Result<R, CliError>,
) -> Result<R, CliError> {
    let test = source.load_test(TestAccess::new())?;
    score(&test)
}

/// Training and validation splits of the raw training file.
pub fn load_split(cfg: &TrainConfig, source: &dyn DataSource) -> Result<(Dataset<f32>, Dataset<f32>), CliError> {
    let full = source.load_train()?;
    if cfg.data.val_size == 0 {
        let empty = full.subset(&[]);
        return Ok((full, empty));
    }
    Ok(split_train_val(&full, cfg.data.val_size, cfg.run.split_seed)?)
}

/// Model inputs: projected when a basis is present, raw pixels otherwise.
pub fn model_inputs<T: Scalar>(pca: Option<&PcaBasis>, data: &Dataset<f32>) -> Result<Matrix<T>, CliError> {
    let x = data.images.cast::<T>();
    match pca {
        Some(p) => Ok(p.project(&x)?),
        None => Ok(x),
    }
}

/// Splits in model-input space, ready for training.
pub struct Prepared<T> {
    pub train_x: Matrix<T>,
    pub train_y: Vec<usize>,
    pub val_x: Matrix<T>,
    pub val_y: Vec<usize>,
    pub classes: usize,
    pub pca: Option<PcaBasis>,
}

impl<T: Scalar> Prepared<T> {
    /// Fits PCA on the training part only.
    pub fn new(cfg: &TrainConfig, train: &Dataset<f32>, val: &Dataset<f32>) -> Result<Self, CliError> {
        let pca = match cfg.data.pca_dim {
            0 => None,
            d => Some(pca_fit(&train.images, d)?),
        };
        Ok(Self {
            train_x: model_inputs(pca.as_ref(), train)?,
            train_y: train.labels.clone(),
            val_x: model_inputs(pca.as_ref(), val)?,
            val_y: val.labels.clone(),
            classes: train.classes.max(val.classes),
            pca,
        })
    }
}

/// One prototype run at learning rate `lr`, optionally logging epochs to `csv`.
pub fn train_proto<T: Scalar>(
    cfg: &TrainConfig,
    data: &Prepared<T>,
    lr: f64,
    csv: Option<&Path>,
) -> Result<FitResult<T>, CliError> {
    let model = cfg.model_config()?;
    let settings = cfg.settings_with_lr(lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
    let bank = init_prototypes::<T, _>(
        &model,
        data.train_x.cols(),
        data.classes,
        Some((&data.train_x, &data.train_y)),
        &mut rng,
    )?;
    let mut logger = csv
        .map(|p| CsvLogger::create(p, cfg.run.verbose_csv).map_err(|e| CliError::io(p, e)))
        .transpose()?;
    fit::<T, CliError>(
        bank,
        &model,
        &settings,
        &data.train_x,
        &data.train_y,
        &data.val_x,
        &data.val_y,
        |record| {
            if let (Some(log), Some(path)) = (logger.as_mut(), csv) {
                log.append(record).map_err(|e| CliError::io(path, e))?;
            }
            Ok(())
        },
    )
}

pub struct SweepOutcome<T> {
    pub lr: f64,
    pub fit: FitResult<T>,
    /// `(lr, best validation accuracy, csv path)` for every rate tried.
    pub tried: Vec<(f64, f64, Option<PathBuf>)>,
}

fn lr_tag(lr: f64) -> String {
    format!("{lr}").replace('-', "m")
}

/// Runs every configured learning rate and keeps the best validation score.
pub fn sweep_proto<T: Scalar>(
    cfg: &TrainConfig,
    data: &Prepared<T>,
    log_dir: Option<&Path>,
    prefix: &str,
    out: &mut dyn Write,
) -> Result<SweepOutcome<T>, CliError> {
    let rates = cfg.learning_rates();
    let mut best: Option<(f64, FitResult<T>)> = None;
    let mut tried = Vec::new();
    for &lr in &rates {
        let csv = log_dir.map(|d| {
            if rates.len() == 1 {
                d.join(format!("{prefix}.csv"))
            } else {
                d.join(format!("{prefix}_lr{}.csv", lr_tag(lr)))
            }
        });
        let result = train_proto(cfg, data, lr, csv.as_deref())?;
        say!(
            out,
            "lr {lr}: best val {}% at epoch {} of {} ({:.1}s, {} skipped steps)",
            percent(result.best_val_acc),
            result.best_epoch,
            result.records.len(),
            result.seconds,
            result.total_skips
        );
        tried.push((lr, result.best_val_acc, csv));
        if best
            .as_ref()
            .map_or(true, |(_, b)| result.best_val_acc > b.best_val_acc)
        {
            best = Some((lr, result));
        }
    }
    let (lr, fit) = best.ok_or_else(|| CliError::Config("no learning rate to try".into()))?;
    if !fit.best.is_finite() {
        return Err(CliError::Numerical("training produced non-finite prototypes".into()));
    }
    Ok(SweepOutcome { lr, fit, tried })
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub dataset: String,
    pub lr: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub test_examples: usize,
    pub train_seconds: f64,
    pub prep_seconds: f64,
    pub checkpoint: PathBuf,
    pub csv: Vec<PathBuf>,
    pub config_hash: String,
}

/// Trains, snapshots on validation, saves a checkpoint, then scores the
/// test set once.
pub fn train(cfg: &TrainConfig, source: &dyn DataSource, out: &mut dyn Write) -> Result<TrainReport, CliError> {
    match cfg.precision()? {
        Precision::Single => train_in::<f32>(cfg, source, out),
        Precision::Double => train_in::<f64>(cfg, source, out),
    }
}

fn train_in<T: Scalar>(
    cfg: &TrainConfig,
    source: &dyn DataSource,
    out: &mut dyn Write,
) -> Result<TrainReport, CliError> {
    let dir = cfg.out_dir();
    create_dir(&dir)?;
    let config_path = dir.join("config.toml");
    fs::write(&config_path, cfg.to_toml()).map_err(|e| CliError::io(&config_path, e))?;

    let prep_start = Instant::now();
    let (train_raw, val_raw) = load_split(cfg, source)?;
    let data = Prepared::<T>::new(cfg, &train_raw, &val_raw)?;
    drop((train_raw, val_raw));
    let prep_seconds = prep_start.elapsed().as_secs_f64();
    say!(
        out,
        "{}: {} train / {} val examples, {} inputs per example ({:.1}s to load and reduce)",
        source.name(),
        data.train_y.len(),
        data.val_y.len(),
        data.train_x.cols(),
        prep_seconds
    );

    let sweep = sweep_proto(cfg, &data, Some(&dir), "epochs", out)?;
    let model = cfg.model_config()?;
    let weights = compute_weights(&sweep.fit.best, &model)?;

    let mut ckpt = Checkpoint::new(cfg.hash(), T::PRECISION, cfg.to_toml());
    if let Some(p) = &data.pca {
        ckpt.push_pca(p);
    }
    ckpt.push_bank(&sweep.fit.best);
    ckpt.push_weights(&weights, data.pca.as_ref())?;
    let ckpt_path = dir.join("model.ckpt");
    ckpt.save(&ckpt_path)?;

    let (test_accuracy, test_examples) = final_test_eval(source, |test| {
        let x = model_inputs::<T>(data.pca.as_ref(), test)?;
        Ok((weights.accuracy(&x, &test.labels)?, test.len()))
    })?;

    let train_seconds: f64 = sweep.fit.seconds;
    let report = TrainReport {
        dataset: source.name().to_string(),
        lr: sweep.lr,
        best_epoch: sweep.fit.best_epoch,
        epochs_run: sweep.fit.records.len(),
        val_accuracy: sweep.fit.best_val_acc,
        test_accuracy,
        test_examples,
        train_seconds,
        prep_seconds,
        checkpoint: ckpt_path,
        csv: sweep.tried.iter().filter_map(|(_, _, p)| p.clone()).collect(),
        config_hash: cfg.hash_hex(),
    };
    say!(
        out,
        "training time {:.1}s ({:.1}s including data preparation)",
        report.train_seconds,
        report.train_seconds + report.prep_seconds
    );
    say!(out, "checkpoint {}", report.checkpoint.display());
    say!(
        out,
        "FINAL TEST ACCURACY {}: {}% on {} examples (lr {}, best epoch {}, val {}%)",
        report.dataset,
        percent(report.test_accuracy),
        report.test_examples,
        report.lr,
        report.best_epoch,
        percent(report.val_accuracy)
    );
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Accuracy of the pixel-space weights on raw images, when requested.
    pub pixel_accuracy: Option<f64>,
    pub confusion: Vec<Vec<usize>>,
    pub examples: usize,
}

/// Re-solves the checkpoint's weights from its bank and scores the test set.
///
/// `cfg` supplies where the data lives; the model itself is read from the
/// checkpoint. With `pixels`, the stored back-projected first layer is also
/// applied to raw images.
pub fn eval(
    ckpt: &Checkpoint,
    cfg: &TrainConfig,
    source: &dyn DataSource,
    pixels: bool,
    out: &mut dyn Write,
) -> Result<EvalReport, CliError> {
    match ckpt.precision {
        Precision::Single => eval_in::<f32>(ckpt, cfg, source, pixels, out),
        Precision::Double => eval_in::<f64>(ckpt, cfg, source, pixels, out),
    }
}

fn eval_in<T: Scalar>(
    ckpt: &Checkpoint,
    cfg: &TrainConfig,
    source: &dyn DataSource,
    pixels: bool,
    out: &mut dyn Write,
) -> Result<EvalReport, CliError> {
    let model = cfg.model_config()?;
    let bank = ckpt.bank::<T>()?;
    let pca = ckpt.pca()?;
    let weights = compute_weights(&bank, &model)?;
    let pixel_weights = if pixels {
        if pca.is_none() {
            return Err(CliError::Config(
                "the checkpoint was trained on raw pixels; --pixels needs a PCA basis".into(),
            ));
        }
        Some(SolvedWeights {
            weights: ckpt.weight_matrices::<T>(true)?,
            lambdas: weights.lambdas.clone(),
            activation: weights.activation,
        })
    } else {
        None
    };
    let classes = weights.classes();
    let report = final_test_eval(source, |test| {
        let pred = weights.predict(&model_inputs::<T>(pca.as_ref(), test)?)?;
        let accuracy = protopinv::model::accuracy(&pred, &test.labels);
        let pixel_accuracy = pixel_weights
            .as_ref()
            .map(|w| w.accuracy(&test.images.cast::<T>(), &test.labels))
            .transpose()?;
        Ok(EvalReport {
            accuracy,
            pixel_accuracy,
            confusion: confusion_matrix(&pred, &test.labels, classes),
            examples: test.len(),
        })
    })?;
    say!(out, "{}", format_confusion(&report.confusion));
    say!(
        out,
        "test accuracy {}% on {} examples",
        percent(report.accuracy),
        report.examples
    );
    if let Some(p) = report.pixel_accuracy {
        say!(
            out,
            "pixel-space weights {}% (gap {:.3} pp)",
            percent(p),
            100.0 * (p - report.accuracy).abs()
        );
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: String,
    pub parameters: usize,
    pub seconds: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub selected: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub dataset: String,
    pub machine: String,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, method: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

pub const METHODS: [&str; 4] = ["proto", "elm", "rf", "mlp"];

enum Chosen<T> {
    Proto(SolvedWeights<T>, Option<PcaBasis>),
    Features(RandomFeatureModel<T>),
    Mlp(Mlp<T>),
}

impl<T: Scalar> Chosen<T> {
    fn accuracy(&self, data: &Dataset<f32>) -> Result<f64, CliError> {
        match self {
            Chosen::Proto(w, pca) => Ok(w.accuracy(&model_inputs::<T>(pca.as_ref(), data)?, &data.labels)?),
            Chosen::Features(m) => Ok(m.accuracy(&data.images.cast(), &data.labels)?),
            Chosen::Mlp(m) => Ok(m.accuracy(&data.images.cast(), &data.labels)?),
        }
    }
}

/// Selects each method's hyperparameter on validation, then scores every
/// selected model on the test set in a single pass.
pub fn bench(cfg: &TrainConfig, source: &dyn DataSource, out: &mut dyn Write) -> Result<BenchReport, CliError> {
    for m in &cfg.bench.methods {
        if !METHODS.contains(&m.as_str()) {
            return Err(CliError::Config(format!(
                "unknown method '{m}' (expected one of {})",
                METHODS.join(", ")
            )));
        }
    }
    if cfg.bench.methods.is_empty() {
        return Err(CliError::Config("bench.methods is empty".into()));
    }
    match cfg.precision()? {
        Precision::Single => bench_in::<f32>(cfg, source, out),
        Precision::Double => bench_in::<f64>(cfg, source, out),
    }
}

/// One accumulation, one solve per λ, best on validation.
fn select_features<T: Scalar>(
    train: &Dataset<T>,
    val: &Dataset<f32>,
    lambdas: &[f64],
    make: impl Fn(f64) -> Result<RandomFeatureConfig, CliError>,
) -> Result<(RandomFeatureModel<T>, f64, f64, f64), CliError> {
    let first = make(*lambdas.first().ok_or_else(|| CliError::Config("empty λ list".into()))?)?;
    let start = Instant::now();
    let system = RandomFeatureSystem::accumulate(&train.images, &train.labels, train.classes, &first)?;
    let accumulate_seconds = start.elapsed().as_secs_f64();
    let val_x = val.images.cast::<T>();
    let mut best: Option<(RandomFeatureModel<T>, f64, f64, f64)> = None;
    for &lambda in lambdas {
        let t = Instant::now();
        let model = system.solve(lambda)?;
        let seconds = accumulate_seconds + t.elapsed().as_secs_f64();
        let acc = model.accuracy(&val_x, &val.labels)?;
        if best.as_ref().map_or(true, |b| acc > b.2) {
            best = Some((model, lambda, acc, seconds));
        }
    }
    Ok(best.expect("at least one λ"))
}

fn bench_in<T: Scalar>(
    cfg: &TrainConfig,
    source: &dyn DataSource,
    out: &mut dyn Write,
) -> Result<BenchReport, CliError> {
    let wants = |m: &str| cfg.bench.methods.iter().any(|x| x == m);
    let dir = cfg.out_dir();
    create_dir(&dir)?;
    let (train_raw, val_raw) = load_split(cfg, source)?;
    let mut chosen: Vec<(BenchRow, Chosen<T>)> = Vec::new();

    if wants("proto") {
        let data = Prepared::<T>::new(cfg, &train_raw, &val_raw)?;
        let sweep = sweep_proto(cfg, &data, Some(&dir), "bench_proto", out)?;
        let weights = compute_weights(&sweep.fit.best, &cfg.model_config()?)?;
        let row = BenchRow {
            method: "proto".into(),
            parameters: sweep.fit.best.parameter_count(),
            seconds: sweep.fit.seconds,
            val_accuracy: sweep.fit.best_val_acc,
            test_accuracy: f64::NAN,
            selected: format!("lr={} epoch={}", sweep.lr, sweep.fit.best_epoch),
        };
        chosen.push((row, Chosen::Proto(weights, data.pca)));
    }

    let needs_raw = ["elm", "rf", "mlp"].iter().any(|m| wants(m));
    let train_t: Option<Dataset<T>> = needs_raw.then(|| train_raw.cast());
    for (method, lambdas) in [("elm", &cfg.bench.elm_lambdas), ("rf", &cfg.bench.rf_lambdas)] {
        if !wants(method) {
            continue;
        }
        let train = train_t.as_ref().expect("raw training data");
        let (model, lambda, val_acc, seconds) = select_features(train, &val_raw, lambdas, |l| {
            if method == "elm" {
                Ok(cfg.elm_config(l))
            } else {
                cfg.rf_config(l)
            }
        })?;
        say!(out, "{method}: λ={lambda} val {}% ({seconds:.1}s)", percent(val_acc));
        let row = BenchRow {
            method: method.into(),
            parameters: model.parameter_count(),
            seconds,
            val_accuracy: val_acc,
            test_accuracy: f64::NAN,
            selected: format!("features={} lambda={lambda}", model.readout.rows() - 1),
        };
        chosen.push((row, Chosen::Features(model)));
    }

    if wants("mlp") {
        let train = train_t.as_ref().expect("raw training data");
        let val_x = val_raw.images.cast::<T>();
        let mut best: Option<(BenchRow, Mlp<T>)> = None;
        for &lr in &cfg.bench.mlp_lrs {
            let mlp_cfg = cfg.mlp_config(lr)?;
            let start = Instant::now();
            let (mlp, _) = fit_mlp(&train.images, &train.labels, train.classes, &mlp_cfg)?;
            let seconds = start.elapsed().as_secs_f64();
            let val_acc = mlp.accuracy(&val_x, &val_raw.labels)?;
            say!(out, "mlp: lr={lr} val {}% ({seconds:.1}s)", percent(val_acc));
            if best.as_ref().map_or(true, |(r, _)| val_acc > r.val_accuracy) {
                let row = BenchRow {
                    method: "mlp".into(),
                    parameters: mlp.parameter_count(),
                    seconds,
                    val_accuracy: val_acc,
                    test_accuracy: f64::NAN,
                    selected: format!("hidden={} lr={lr} epochs={}", mlp_cfg.hidden, mlp_cfg.epochs),
                };
                best = Some((row, mlp));
            }
        }
        let (row, mlp) = best.ok_or_else(|| CliError::Config("bench.mlp_lrs is empty".into()))?;
        chosen.push((row, Chosen::Mlp(mlp)));
    }
    drop(train_t);

    let rows = final_test_eval(source, |test| {
        chosen
            .into_iter()
            .map(|(mut row, model)| {
                row.test_accuracy = model.accuracy(test)?;
                Ok(row)
            })
            .collect::<Result<Vec<_>, CliError>>()
    })?;
    let report = BenchReport {
        dataset: source.name().to_string(),
        machine: machine_descriptor(cfg.run.threads),
        rows,
    };
    let cells: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.method.clone(),
                r.parameters.to_string(),
                format!("{:.1}", r.seconds),
                percent(r.val_accuracy),
                percent(r.test_accuracy),
                r.selected.clone(),
            ]
        })
        .collect();
    say!(out, "{} on {}", report.dataset, report.machine);
    say!(
        out,
        "{}",
        table(&["method", "params", "train s", "val %", "test %", "selected"], &cells)
    );
    Ok(report)
}

/// Central-difference check of the full prototype pipeline in double
/// precision. A failed check is a numerical error (exit code 2).
pub fn gradcheck(cfg: &GradCheckConfig, out: &mut dyn Write) -> Result<GradCheckReport, CliError> {
    let report = grad_check(cfg)?;
    say!(out, "{report}");
    if report.passed {
        Ok(report)
    } else {
        Err(CliError::Numerical(format!(
            "gradient check failed: max relative error {:.3e} ≥ {:.0e}",
            report.max_relative_error, report.threshold
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Prototypes,
    Hidden,
    LearnLambda,
    Scheduler,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Prototypes => "prototypes",
            AblationAxis::Hidden => "hidden",
            AblationAxis::LearnLambda => "learn-lambda",
            AblationAxis::Scheduler => "scheduler",
        }
    }

    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            AblationAxis::Prototypes => &["50", "150", "300"],
            AblationAxis::Hidden => &["128", "256", "512", "768"],
            AblationAxis::LearnLambda => &["fixed", "lambda2", "both"],
            AblationAxis::Scheduler => &["cosine", "constant"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &TrainConfig, value: &str) -> Result<TrainConfig, CliError> {
        let mut cfg = base.clone();
        let count = || {
            value
                .parse::<usize>()
                .map_err(|_| CliError::Config(format!("{}: '{value}' is not a count", self.name())))
        };
        match self {
            AblationAxis::Prototypes => cfg.model.prototypes = count()?,
            AblationAxis::Hidden => {
                let h = count()?;
                cfg.model.hidden.iter_mut().for_each(|w| *w = h);
            }
            AblationAxis::LearnLambda => {
                let (a, b) = match value {
                    "fixed" => (false, false),
                    "lambda1" => (true, false),
                    "lambda2" => (false, true),
                    "both" => (true, true),
                    _ => {
                        return Err(CliError::Config(format!(
                            "learn-lambda: '{value}' (expected fixed, lambda1, lambda2 or both)"
                        )))
                    }
                };
                cfg.model.learn_lambda1 = a;
                cfg.model.learn_lambda2 = b;
            }
            AblationAxis::Scheduler => cfg.optim.scheduler = value.to_string(),
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl std::str::FromStr for AblationAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "prototypes" => Ok(AblationAxis::Prototypes),
            "hidden" => Ok(AblationAxis::Hidden),
            "learn-lambda" => Ok(AblationAxis::LearnLambda),
            "scheduler" => Ok(AblationAxis::Scheduler),
            other => Err(format!(
                "unknown axis '{other}' (expected prototypes, hidden, learn-lambda or scheduler)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub value: String,
    pub best_val_accuracy: f64,
    pub best_epoch: usize,
    pub last_val_accuracy: f64,
    pub seconds: f64,
    pub parameters: usize,
}

pub const ABLATION_HEADER: &str = "value,best_val_acc,best_epoch,last_val_acc,seconds,trainable_parameters";

/// Sweeps one axis at the configured learning rate and writes
/// `ablate_<axis>.csv`. Validation only; the test file is never opened.
pub fn ablate(
    cfg: &TrainConfig,
    axis: AblationAxis,
    values: &[String],
    source: &dyn DataSource,
    out: &mut dyn Write,
) -> Result<Vec<AblationRow>, CliError> {
    if cfg.data.val_size == 0 {
        return Err(CliError::Config(
            "ablations select on validation; data.val_size must be positive".into(),
        ));
    }
    let values = if values.is_empty() {
        axis.default_values()
    } else {
        values.to_vec()
    };
    let configs = values
        .iter()
        .map(|v| axis.apply(cfg, v))
        .collect::<Result<Vec<_>, _>>()?;
    match cfg.precision()? {
        Precision::Single => ablate_in::<f32>(cfg, axis, &values, &configs, source, out),
        Precision::Double => ablate_in::<f64>(cfg, axis, &values, &configs, source, out),
    }
}

fn ablate_in<T: Scalar>(
    cfg: &TrainConfig,
    axis: AblationAxis,
    values: &[String],
    configs: &[TrainConfig],
    source: &dyn DataSource,
    out: &mut dyn Write,
) -> Result<Vec<AblationRow>, CliError> {
    let dir = cfg.out_dir();
    create_dir(&dir)?;
    let (train_raw, val_raw) = load_split(cfg, source)?;
    let data = Prepared::<T>::new(cfg, &train_raw, &val_raw)?;
    drop((train_raw, val_raw));
    let csv_path = dir.join(format!("ablate_{}.csv", axis.name()));
    let mut csv = format!("{ABLATION_HEADER}\n");
    let mut rows = Vec::new();
    for (value, run_cfg) in values.iter().zip(configs) {
        let log = dir.join(format!("ablate_{}_{value}.csv", axis.name()));
        let result = train_proto(run_cfg, &data, run_cfg.optim.lr, Some(&log))?;
        let row = AblationRow {
            value: value.clone(),
            best_val_accuracy: result.best_val_acc,
            best_epoch: result.best_epoch,
            last_val_accuracy: result.records.last().map_or(f64::NAN, |r| r.val_acc),
            seconds: result.seconds,
            parameters: result.best.parameter_count(),
        };
        say!(
            out,
            "{}={value}: best val {}% at epoch {}, last {}%",
            axis.name(),
            percent(row.best_val_accuracy),
            row.best_epoch,
            percent(row.last_val_accuracy)
        );
        csv.push_str(&format!(
            "{},{},{},{},{:.3},{}\n",
            row.value, row.best_val_accuracy, row.best_epoch, row.last_val_accuracy, row.seconds, row.parameters
        ));
        fs::write(&csv_path, &csv).map_err(|e| CliError::io(&csv_path, e))?;
        rows.push(row);
    }
    say!(out, "wrote {}", csv_path.display());
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axes_parse_and_apply() {
        let base = TrainConfig::default();
        let axis: AblationAxis = "hidden".parse().unwrap();
        assert_eq!(axis.apply(&base, "768").unwrap().model.hidden, vec![768]);
        let axis: AblationAxis = "learn-lambda".parse().unwrap();
        let c = axis.apply(&base, "both").unwrap();
        assert!(c.model.learn_lambda1 && c.model.learn_lambda2);
        assert!(axis.apply(&base, "sometimes").is_err());
        assert!("width".parse::<AblationAxis>().is_err());
        assert!(AblationAxis::Scheduler.apply(&base, "linear").is_err());
        assert_eq!(AblationAxis::Prototypes.default_values(), ["50", "150", "300"]);
    }

    #[test]
    fn rate_tags_are_file_safe() {
        assert_eq!(lr_tag(0.05), "0.05");
        assert_eq!(lr_tag(1e-5), "0.00001");
    }
}
