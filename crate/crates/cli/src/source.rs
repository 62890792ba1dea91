//! Where datasets come from.
//!
//! Commands only ever ask a [`DataSource`] for the training file; the test
//! file is requested in exactly one place, [`crate::commands::final_test_eval`].

use std::path::{Path, PathBuf};

use protopinv::data::{load_idx, DataError, Dataset};

use crate::error::CliError;

/// Proof of being inside the final evaluation. Only this crate can make
/// one, so only [`crate::commands::final_test_eval`] reaches test data.
#[derive(Debug)]
pub struct TestAccess(());

impl TestAccess {
    pub(crate) fn new() -> Self {
        TestAccess(())
    }
}

pub trait DataSource {
    fn name(&self) -> &str;
    fn load_train(&self) -> Result<Dataset<f32>, CliError>;
    fn load_test(&self, access: TestAccess) -> Result<Dataset<f32>, CliError>;
}

/// A directory holding the four standard IDX files, gzipped or not.
#[derive(Debug, Clone)]
pub struct IdxSource {
    name: String,
    dir: PathBuf,
}

impl IdxSource {
    pub fn new(name: impl Into<String>, dir: impl Into<PathBuf>) -> Self {
        Self {
            name: name.into(),
            dir: dir.into(),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn file(&self, stem: &str) -> Result<PathBuf, CliError> {
        let plain = self.dir.join(stem);
        let gz = self.dir.join(format!("{stem}.gz"));
        if gz.is_file() {
            Ok(gz)
        } else if plain.is_file() {
            Ok(plain)
        } else {
            Err(CliError::Config(format!(
                "{} not found (set data.root, --data-dir or PROTOPINV_DATA_DIR to the directory holding '{}/')",
                gz.display(),
                self.name
            )))
        }
    }

    fn load(&self, prefix: &str) -> Result<Dataset<f32>, CliError> {
        let images = self.file(&format!("{prefix}-images-idx3-ubyte"))?;
        let labels = self.file(&format!("{prefix}-labels-idx1-ubyte"))?;
        load_idx(&self.name, &images, &labels).map_err(|e: DataError| e.into())
    }
}

impl DataSource for IdxSource {
    fn name(&self) -> &str {
        &self.name
    }

    fn load_train(&self) -> Result<Dataset<f32>, CliError> {
        self.load("train")
    }

    fn load_test(&self, _: TestAccess) -> Result<Dataset<f32>, CliError> {
        self.load("t10k")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use protopinv::data::{write_idx_images, write_idx_labels};

    #[test]
    fn reads_plain_and_gzipped_files() {
        let dir = tempfile::tempdir().unwrap();
        write_idx_images(
            &dir.path().join("train-images-idx3-ubyte.gz"),
            2,
            2,
            &[0, 255, 0, 255, 9, 9, 9, 9],
        )
        .unwrap();
        write_idx_labels(&dir.path().join("train-labels-idx1-ubyte.gz"), &[1, 0]).unwrap();
        write_idx_images(&dir.path().join("t10k-images-idx3-ubyte"), 2, 2, &[0, 0, 0, 0]).unwrap();
        write_idx_labels(&dir.path().join("t10k-labels-idx1-ubyte"), &[1]).unwrap();
        let src = IdxSource::new("toy", dir.path());
        let train = src.load_train().unwrap();
        assert_eq!(
            (train.len(), train.features(), train.labels.clone()),
            (2, 4, vec![1, 0])
        );
        assert_eq!(src.load_test(TestAccess::new()).unwrap().len(), 1);
    }

    #[test]
    fn missing_files_name_the_path() {
        let err = IdxSource::new("mnist", "/nonexistent/mnist").load_train().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("/nonexistent/mnist/train-images-idx3-ubyte"), "{msg}");
        assert_eq!(err.exit_code(), 1);
    }
}
