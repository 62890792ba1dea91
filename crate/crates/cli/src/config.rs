//! Run configuration: a TOML file with flat sections, then the
//! `PROTOPINV_DATA_DIR` environment variable, then command-line overrides.
//!
//! ```toml
//! [data]
//! root = "data"          # holds one directory per dataset
//! dataset = "mnist"
//! val_size = 6000
//! pca_dim = 400          # 0 trains on raw pixels
//!
//! [model]
//! prototypes = 150
//! hidden = [512]
//!
//! [optim]
//! lr = 0.05
//! epochs = 250
//! ```
//!
//! Every field has a default; see the section structs for the full list.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use protopinv::autodiff::Activation;
use protopinv::baselines::{FeatureMap, MlpConfig, RandomFeatureConfig};
use protopinv::model::{GroupDecay, InputInit, ModelConfig};
use protopinv::optim::{AdamConfig, Schedule};
use protopinv::training::TrainSettings;
use protopinv::Precision;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const DATA_DIR_ENV: &str = "PROTOPINV_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub root: PathBuf,
    pub dataset: String,
    /// Stratified validation examples held out of the training file.
    pub val_size: usize,
    pub pca_dim: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            dataset: "mnist".into(),
            val_size: 6000,
            pca_dim: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub prototypes: usize,
    pub hidden: Vec<usize>,
    pub activation: String,
    pub lambda1_init: f64,
    pub lambda2_init: f64,
    pub learn_lambda1: bool,
    pub learn_lambda2: bool,
    pub lambda3: f64,
    pub temperature: f64,
    pub label_scale: f64,
    pub input_init: String,
    pub input_init_scale: f64,
    pub hidden_init_scale: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            prototypes: m.prototypes,
            hidden: m.hidden,
            activation: m.activation.name().into(),
            lambda1_init: m.lambda1_init,
            lambda2_init: m.lambda2_init,
            learn_lambda1: m.learn_lambda1,
            learn_lambda2: m.learn_lambda2,
            lambda3: m.lambda3,
            temperature: m.temperature,
            label_scale: m.label_scale,
            input_init: m.input_init.to_string(),
            input_init_scale: m.input_init_scale,
            hidden_init_scale: m.hidden_init_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub lr: f64,
    /// When non-empty, one run per rate; the best validation accuracy wins.
    pub lr_sweep: Vec<f64>,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub floor_lr: f64,
    /// `cosine` (warmup then cosine decay) or `constant`.
    pub scheduler: String,
    /// 0 uses the whole training split every step.
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay_xp: f64,
    pub decay_hp: f64,
    pub decay_yp: f64,
    pub decay_rho: f64,
    /// Epochs without validation improvement before stopping; 0 never stops.
    pub patience: usize,
}

impl Default for OptimSection {
    fn default() -> Self {
        let t = TrainSettings::default();
        Self {
            lr: t.schedule.base_lr,
            lr_sweep: Vec::new(),
            warmup_epochs: t.schedule.warmup_epochs,
            epochs: t.schedule.total_epochs,
            floor_lr: t.schedule.floor_lr,
            scheduler: "cosine".into(),
            batch_size: t.batch_size,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            eps: t.adam.eps,
            decay_xp: 0.0,
            decay_hp: 0.0,
            decay_yp: 0.0,
            decay_rho: 0.0,
            patience: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Seed of the prototype initialisation.
    pub seed: u64,
    pub shuffle_seed: u64,
    pub split_seed: u64,
    /// `single` or `double`.
    pub precision: String,
    /// Kernel threads; 1 also fixes the scheduling order.
    pub threads: usize,
    pub out_dir: PathBuf,
    /// Adds the core-matrix condition number to the CSV.
    pub verbose_csv: bool,
    /// Count data loading and PCA in the headline time.
    pub include_prep_time: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            shuffle_seed: 0,
            split_seed: 0,
            precision: "single".into(),
            threads: 1,
            out_dir: PathBuf::from("runs"),
            verbose_csv: false,
            include_prep_time: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    /// Any of `proto`, `elm`, `rf`, `mlp`.
    pub methods: Vec<String>,
    pub elm_hidden: usize,
    pub elm_lambdas: Vec<f64>,
    pub elm_scale: f64,
    pub rf_features: usize,
    pub rf_lambdas: Vec<f64>,
    pub rf_map: String,
    pub rf_scale: f64,
    pub mlp_hidden: usize,
    pub mlp_activation: String,
    pub mlp_epochs: usize,
    pub mlp_lrs: Vec<f64>,
    pub mlp_batch_size: usize,
    pub seed: u64,
}

impl Default for BenchSection {
    fn default() -> Self {
        let mlp = MlpConfig::default();
        Self {
            methods: ["proto", "elm", "rf", "mlp"].map(String::from).to_vec(),
            elm_hidden: 10_200,
            elm_lambdas: vec![1e-2, 1.0, 1e2],
            elm_scale: 1.0,
            rf_features: 10_200,
            rf_lambdas: vec![1e-2, 1.0, 1e2],
            rf_map: "identity".into(),
            rf_scale: 1.0,
            mlp_hidden: mlp.hidden,
            mlp_activation: mlp.activation.name().into(),
            mlp_epochs: mlp.epochs,
            mlp_lrs: vec![mlp.lr, 3e-4],
            mlp_batch_size: mlp.batch_size,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub optim: OptimSection,
    pub run: RunSection,
    pub bench: BenchSection,
}

/// Parses the right-hand side of `key=value` as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), CliError> {
    let (section, field) = key
        .split_once('.')
        .ok_or_else(|| CliError::Config(format!("override '{key}' must look like section.field")))?;
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let toml::Value::Table(inner) = entry else {
        return Err(CliError::Config(format!("'{section}' is not a section")));
    };
    inner.insert(field.to_string(), value);
    Ok(())
}

impl TrainConfig {
    /// Builds a config from optional file text, the environment, and
    /// `section.field=value` overrides applied in order.
    pub fn resolve(
        file_text: Option<&str>,
        env_data_dir: Option<&str>,
        overrides: &[String],
    ) -> Result<Self, CliError> {
        let mut table: toml::Table = match file_text {
            Some(text) => toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?,
            None => toml::Table::new(),
        };
        if let Some(dir) = env_data_dir.filter(|d| !d.is_empty()) {
            set_path(&mut table, "data.root", toml::Value::String(dir.into()))?;
        }
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override '{item}' must look like section.field=value")))?;
            set_path(&mut table, key.trim(), parse_value(raw.trim()))?;
        }
        let cfg: TrainConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (if given) and the environment, then applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let text = path
            .map(|p| std::fs::read_to_string(p).map_err(|e| CliError::io(p, e)))
            .transpose()?;
        let env = std::env::var(DATA_DIR_ENV).ok();
        Self::resolve(text.as_deref(), env.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model_config()?.validate()?;
        self.settings()?;
        self.precision()?;
        if self.run.threads == 0 {
            return Err(CliError::Config("run.threads must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// SHA-256 over the fields that change what a run computes. Paths to
    /// data and outputs, the thread count and benchmark settings are left out.
    pub fn hash(&self) -> [u8; 32] {
        let mut semantic = self.clone();
        semantic.data.root = PathBuf::new();
        semantic.run.out_dir = PathBuf::new();
        semantic.run.threads = 1;
        semantic.run.verbose_csv = false;
        semantic.run.include_prep_time = false;
        semantic.bench = BenchSection::default();
        Sha256::digest(semantic.to_toml().as_bytes()).into()
    }

    pub fn hash_hex(&self) -> String {
        hex(&self.hash())
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.data.root.join(&self.data.dataset)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.run.out_dir.clone()
    }

    pub fn precision(&self) -> Result<Precision, CliError> {
        match self.run.precision.as_str() {
            "single" | "f32" => Ok(Precision::Single),
            "double" | "f64" => Ok(Precision::Double),
            other => Err(CliError::Config(format!(
                "run.precision '{other}' (expected single or double)"
            ))),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let m = &self.model;
        let activation: Activation = m.activation.parse().map_err(CliError::Config)?;
        let input_init: InputInit = m.input_init.parse().map_err(CliError::Config)?;
        Ok(ModelConfig {
            prototypes: m.prototypes,
            hidden: m.hidden.clone(),
            activation,
            lambda1_init: m.lambda1_init,
            lambda2_init: m.lambda2_init,
            learn_lambda1: m.learn_lambda1,
            learn_lambda2: m.learn_lambda2,
            lambda3: m.lambda3,
            temperature: m.temperature,
            label_scale: m.label_scale,
            input_init,
            input_init_scale: m.input_init_scale,
            hidden_init_scale: m.hidden_init_scale,
        })
    }

    /// Training settings at the configured base rate.
    pub fn settings(&self) -> Result<TrainSettings, CliError> {
        self.settings_with_lr(self.optim.lr)
    }

    pub fn settings_with_lr(&self, lr: f64) -> Result<TrainSettings, CliError> {
        let o = &self.optim;
        let schedule = match o.scheduler.as_str() {
            // short runs keep the cosine shape instead of failing on warmup
            "cosine" => Schedule::new(lr, o.warmup_epochs.min(o.epochs), o.epochs, o.floor_lr),
            "constant" => Ok(Schedule::constant(lr, o.epochs)),
            other => {
                return Err(CliError::Config(format!(
                    "optim.scheduler '{other}' (expected cosine or constant)"
                )))
            }
        }
        .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(TrainSettings {
            schedule,
            batch_size: o.batch_size,
            adam: AdamConfig {
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
            },
            decay: GroupDecay {
                xp: o.decay_xp,
                hp: o.decay_hp,
                yp: o.decay_yp,
                rho: o.decay_rho,
            },
            shuffle_seed: self.run.shuffle_seed,
            patience: (o.patience > 0).then_some(o.patience),
        })
    }

    /// Learning rates to try, in order.
    pub fn learning_rates(&self) -> Vec<f64> {
        if self.optim.lr_sweep.is_empty() {
            vec![self.optim.lr]
        } else {
            self.optim.lr_sweep.clone()
        }
    }

    pub fn elm_config(&self, lambda: f64) -> RandomFeatureConfig {
        RandomFeatureConfig {
            projection_scale: self.bench.elm_scale,
            ..RandomFeatureConfig::elm(self.bench.elm_hidden, lambda, self.bench.seed)
        }
    }

    pub fn rf_config(&self, lambda: f64) -> Result<RandomFeatureConfig, CliError> {
        let map: FeatureMap = self.bench.rf_map.parse().map_err(CliError::Config)?;
        Ok(RandomFeatureConfig {
            feature_map: map,
            projection_scale: self.bench.rf_scale,
            ..RandomFeatureConfig::rf_ridge(self.bench.rf_features, lambda, self.bench.seed)
        })
    }

    pub fn mlp_config(&self, lr: f64) -> Result<MlpConfig, CliError> {
        Ok(MlpConfig {
            hidden: self.bench.mlp_hidden,
            activation: self.bench.mlp_activation.parse().map_err(CliError::Config)?,
            epochs: self.bench.mlp_epochs,
            lr,
            batch_size: self.bench.mlp_batch_size,
            seed: self.bench.seed,
            ..MlpConfig::default()
        })
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}
