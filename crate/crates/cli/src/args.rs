//! Command-line surface. Every config field is reachable through
//! `--set section.field=value`; the common ones also have their own flag.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use protopinv::diagnostics::GradCheckConfig;

use crate::checkpoint::Checkpoint;
use crate::commands::{self, AblationAxis};
use crate::config::{TrainConfig, DATA_DIR_ENV};
use crate::error::CliError;
use crate::source::IdxSource;

#[derive(Debug, Parser)]
#[command(
    name = "protopinv",
    version,
    about = "Train and evaluate prototype pseudo-inverse classifiers"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML config file; unset fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override any field, e.g. `--set model.hidden=[512,512]`. Repeatable; applied last.
    #[arg(long = "set", value_name = "SECTION.FIELD=VALUE", global = true)]
    pub sets: Vec<String>,
    /// Directory holding one sub-directory per dataset.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub dataset: Option<String>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Kernel threads; 1 is bit-reproducible.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// `single` or `double`.
    #[arg(long, global = true)]
    pub precision: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    /// Comma-separated learning rates; the best on validation is kept.
    #[arg(long, global = true, value_delimiter = ',')]
    pub lr_sweep: Option<Vec<f64>>,
    #[arg(long, global = true)]
    pub warmup: Option<usize>,
    /// 0 trains on the whole split every step.
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub prototypes: Option<usize>,
    /// Comma-separated widths, one per hidden layer.
    #[arg(long, global = true, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    /// 0 trains on raw pixels.
    #[arg(long, global = true)]
    pub pca_dim: Option<usize>,
    #[arg(long, global = true)]
    pub val_size: Option<usize>,
    /// Append the core condition number to epoch CSVs.
    #[arg(long, global = true)]
    pub verbose_csv: bool,
}

impl Common {
    /// Shortcut flags as `section.field=value`, followed by explicit `--set`s.
    pub fn overrides(&self) -> Vec<String> {
        let list = |v: &[String]| format!("[{}]", v.join(","));
        let mut o = Vec::new();
        let mut put = |key: &str, value: Option<String>| {
            if let Some(v) = value {
                o.push(format!("{key}={v}"));
            }
        };
        put(
            "data.root",
            self.data_dir.as_ref().map(|p| toml_str(&p.display().to_string())),
        );
        put("data.dataset", self.dataset.as_deref().map(toml_str));
        put(
            "run.out_dir",
            self.out_dir.as_ref().map(|p| toml_str(&p.display().to_string())),
        );
        put("run.threads", self.threads.map(|v| v.to_string()));
        put("run.precision", self.precision.as_deref().map(toml_str));
        put("run.seed", self.seed.map(|v| v.to_string()));
        put("optim.epochs", self.epochs.map(|v| v.to_string()));
        put("optim.lr", self.lr.map(|v| format!("{v:?}")));
        put(
            "optim.lr_sweep",
            self.lr_sweep
                .as_ref()
                .map(|v| list(&v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>())),
        );
        put("optim.warmup_epochs", self.warmup.map(|v| v.to_string()));
        put("optim.batch_size", self.batch_size.map(|v| v.to_string()));
        put("model.prototypes", self.prototypes.map(|v| v.to_string()));
        put(
            "model.hidden",
            self.hidden
                .as_ref()
                .map(|v| list(&v.iter().map(|x| x.to_string()).collect::<Vec<_>>())),
        );
        put("data.pca_dim", self.pca_dim.map(|v| v.to_string()));
        put("data.val_size", self.val_size.map(|v| v.to_string()));
        if self.verbose_csv {
            o.push("run.verbose_csv=true".into());
        }
        o.extend(self.sets.iter().cloned());
        o
    }

    pub fn load_config(&self) -> Result<TrainConfig, CliError> {
        TrainConfig::load(self.config.as_deref(), &self.overrides())
    }
}

fn toml_str(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on the training file, select on validation, test once.
    Train,
    /// Score a checkpoint on the test file with a confusion matrix.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also apply the back-projected first layer to raw pixels.
        #[arg(long)]
        pixels: bool,
    },
    /// Compare the prototype model with ELM, random-feature ridge and an MLP.
    Bench {
        /// Comma-separated subset of proto, elm, rf, mlp.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
    },
    /// Finite-difference check of every gradient in double precision.
    Gradcheck {
        #[arg(long, value_delimiter = ',', default_value = "5")]
        hidden: Vec<usize>,
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
        #[arg(long, default_value_t = 1e-4)]
        threshold: f64,
        #[arg(long = "check-seed", default_value_t = 7)]
        check_seed: u64,
    },
    /// Sweep one axis on validation and write a CSV.
    Ablate {
        /// prototypes, hidden, learn-lambda or scheduler.
        #[arg(long)]
        axis: AblationAxis,
        /// Comma-separated values; each axis has a default list.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
}

fn source_for(cfg: &TrainConfig) -> IdxSource {
    IdxSource::new(cfg.data.dataset.clone(), cfg.dataset_dir())
}

fn init_threads(threads: usize) {
    // a second initialisation in the same process keeps the first pool
    let _ = protopinv::init_threads(threads);
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Train => {
            let cfg = cli.common.load_config()?;
            init_threads(cfg.run.threads);
            commands::train(&cfg, &source_for(&cfg), out)?;
        }
        Command::Eval { checkpoint, pixels } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            let env = std::env::var(DATA_DIR_ENV).ok();
            let cfg = TrainConfig::resolve(Some(&ckpt.config_text), env.as_deref(), &cli.common.overrides())?;
            if cfg.hash() != ckpt.config_hash {
                let _ = writeln!(
                    out,
                    "note: overrides change the model config recorded in the checkpoint"
                );
            }
            init_threads(cfg.run.threads);
            commands::eval(&ckpt, &cfg, &source_for(&cfg), *pixels, out)?;
        }
        Command::Bench { methods } => {
            let mut cfg = cli.common.load_config()?;
            if let Some(m) = methods {
                cfg.bench.methods = m.clone();
            }
            init_threads(cfg.run.threads);
            commands::bench(&cfg, &source_for(&cfg), out)?;
        }
        Command::Gradcheck {
            hidden,
            temperature,
            threshold,
            check_seed,
        } => {
            let cfg = GradCheckConfig {
                hidden: hidden.clone(),
                temperature: *temperature,
                threshold: *threshold,
                seed: *check_seed,
                ..GradCheckConfig::default()
            };
            commands::gradcheck(&cfg, out)?;
        }
        Command::Ablate { axis, values } => {
            let cfg = cli.common.load_config()?;
            init_threads(cfg.run.threads);
            commands::ablate(&cfg, *axis, values, &source_for(&cfg), out)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shortcut_flags_become_overrides() {
        let cli = Cli::try_parse_from([
            "protopinv",
            "train",
            "--epochs",
            "3",
            "--hidden",
            "64,32",
            "--lr-sweep",
            "0.1,0.05",
            "--data-dir",
            "/tmp/x y",
            "--set",
            "optim.epochs=4",
        ])
        .unwrap();
        let cfg = TrainConfig::resolve(None, None, &cli.common.overrides()).unwrap();
        assert_eq!(cfg.optim.epochs, 4);
        assert_eq!(cfg.model.hidden, vec![64, 32]);
        assert_eq!(cfg.optim.lr_sweep, vec![0.1, 0.05]);
        assert_eq!(cfg.data.root, PathBuf::from("/tmp/x y"));
    }

    #[test]
    fn subcommands_parse() {
        let cli = Cli::try_parse_from(["protopinv", "ablate", "--axis", "prototypes", "--values", "50,150"]).unwrap();
        assert!(
            matches!(cli.command, Command::Ablate { axis: AblationAxis::Prototypes, ref values } if values.len() == 2)
        );
        assert!(Cli::try_parse_from(["protopinv", "ablate", "--axis", "depth"]).is_err());
        let cli = Cli::try_parse_from(["protopinv", "bench", "--methods", "elm,rf"]).unwrap();
        assert!(matches!(cli.command, Command::Bench { methods: Some(ref m) } if m == &["elm", "rf"]));
    }
}
