//! Shallow classifiers whose weights are never trained directly.
//!
//! A small bank of synthetic prototypes (inputs, hidden pre-activations and
//! label logits) is optimised with Adam; every step the layer weights are
//! recomputed from the bank by ridge-regularised pseudo-inverse solves, and
//! gradients reach the prototypes through those solves.
//!
//! Module map:
//! - [`tensor`]: dense matrices, Cholesky, ridge solves, SVD diagnostics
//! - [`autodiff`]: a small define-by-run reverse-mode tape with a ridge-solve node
//! - [`model`]: prototype bank, closed-form weights, prediction and loss
//! - [`optim`]: Adam with decoupled per-group decay, warmup + cosine schedule
//! - [`training`]: the epoch loop with best-validation snapshots
//! - [`data`]: IDX loading, stratified splits, PCA and weight back-projection
//! - [`baselines`]: ELM, random-feature ridge and a back-prop MLP
//! - [`diagnostics`]: condition numbers, sensitivity probes, gradient checks, CSV logs

pub mod autodiff;
pub mod baselines;
pub mod data;
pub mod diagnostics;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod training;

pub use tensor::{Matrix, Precision, Scalar};

/// Builds the global rayon pool with a fixed thread count.
///
/// Call once, before any parallel work. Results do not depend on the count;
/// one thread makes scheduling itself deterministic as well.
#[cfg(feature = "parallel")]
pub fn init_threads(threads: usize) -> Result<(), rayon::ThreadPoolBuildError> {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()
}
