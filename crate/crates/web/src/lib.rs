//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Three operations are exposed:
//! - [`ridge_compare`]: solve a small ridge system by Cholesky and by SVD
//! - [`ToyTrainer`]: train prototypes on 2-D blobs and sample the decision map
//! - [`back_projection_gap`]: lift PCA-space weights to input space and compare outputs
//!
//! Everything is plain Rust underneath, so the same functions run in native
//! tests. Nothing here reads a clock or the OS random source.

use protopinv::data::{pca_fit, PcaBasis};
use protopinv::diagnostics::kappa_xp;
use protopinv::model::PrototypeBank;
use protopinv::model::{compute_weights, init_prototypes, prototype_class, train_step, GroupDecay, ModelConfig};
use protopinv::optim::{AdamConfig, AdamState};
use protopinv::tensor::{condition_number, ridge_pinv_apply, ridge_pinv_svd, singular_values};
use protopinv::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

/// Both ridge solutions for `A` (`rows × cols`, row-major) against `B`.
#[wasm_bindgen]
#[derive(Debug, Clone)]
pub struct RidgeReport {
    cholesky: Vec<f64>,
    svd: Vec<f64>,
    singular: Vec<f64>,
    max_gap: f64,
    kappa: f64,
}

#[wasm_bindgen]
impl RidgeReport {
    #[wasm_bindgen(getter)]
    pub fn cholesky(&self) -> Vec<f64> {
        self.cholesky.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn svd(&self) -> Vec<f64> {
        self.svd.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn singular(&self) -> Vec<f64> {
        self.singular.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn max_gap(&self) -> f64 {
        self.max_gap
    }

    /// `σ_max / σ_min` of `A`; infinite when rank deficient.
    #[wasm_bindgen(getter)]
    pub fn kappa(&self) -> f64 {
        self.kappa
    }
}

/// `(AᵀA + λI)⁻¹AᵀB` by both routes.
#[wasm_bindgen]
pub fn ridge_compare(a: &[f64], rows: usize, cols: usize, b: &[f64], lambda: f64) -> Result<RidgeReport, String> {
    if rows == 0 || cols == 0 || a.len() != rows * cols {
        return Err(format!(
            "A needs {rows}×{cols} = {} entries, got {}",
            rows * cols,
            a.len()
        ));
    }
    if b.is_empty() || b.len() % rows != 0 {
        return Err(format!("B needs a multiple of {rows} entries, got {}", b.len()));
    }
    let a = Matrix::from_vec(rows, cols, a.to_vec());
    let b = Matrix::from_vec(rows, b.len() / rows, b.to_vec());
    let chol = ridge_pinv_apply(&a, lambda, &b).map_err(|e| e.to_string())?;
    let svd = ridge_pinv_svd(&a, lambda, &b).map_err(|e| e.to_string())?;
    Ok(RidgeReport {
        max_gap: chol.sub(&svd).max_abs(),
        kappa: condition_number(&a),
        singular: singular_values(&a).map_err(|e| e.to_string())?,
        cholesky: chol.into_vec(),
        svd: svd.into_vec(),
    })
}

/// Prototype training on noisy points around `classes` centres on a circle.
#[wasm_bindgen]
pub struct ToyTrainer {
    cfg: ModelConfig,
    bank: PrototypeBank<f64>,
    optimizer: AdamState<f64>,
    x: Matrix<f64>,
    labels: Vec<usize>,
    classes: usize,
    steps: usize,
    last_loss: f64,
}

#[wasm_bindgen]
impl ToyTrainer {
    #[wasm_bindgen(constructor)]
    pub fn new(
        classes: usize,
        per_class: usize,
        spread: f64,
        prototypes: usize,
        hidden: usize,
        seed: u64,
    ) -> Result<ToyTrainer, String> {
        if !(2..=8).contains(&classes) || per_class == 0 {
            return Err("use 2 to 8 classes and at least one point per class".into());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = classes * per_class;
        let mut x = Matrix::zeros(n, 2);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % classes;
            let angle = std::f64::consts::TAU * c as f64 / classes as f64;
            x[(i, 0)] = angle.cos() + spread * rng.random_range(-1.0..1.0);
            x[(i, 1)] = angle.sin() + spread * rng.random_range(-1.0..1.0);
            labels.push(c);
        }
        let cfg = ModelConfig {
            prototypes,
            hidden: vec![hidden],
            lambda1_init: 1e-2,
            lambda2_init: 1e-2,
            lambda3: 1e-4,
            input_init_scale: 0.5,
            ..ModelConfig::default()
        };
        let bank = init_prototypes(&cfg, 2, classes, None, &mut rng).map_err(|e| e.to_string())?;
        let optimizer = bank.new_optimizer(AdamConfig::default(), &GroupDecay::default());
        Ok(ToyTrainer {
            cfg,
            bank,
            optimizer,
            x,
            labels,
            classes,
            steps: 0,
            last_loss: f64::NAN,
        })
    }

    /// Runs `count` full-batch steps; returns the last loss.
    pub fn step(&mut self, count: usize, lr: f64) -> f64 {
        for _ in 0..count {
            if let Ok(out) = train_step(
                &mut self.bank,
                &self.cfg,
                &self.x,
                &self.labels,
                &mut self.optimizer,
                lr,
            ) {
                self.last_loss = out.loss;
            }
            self.steps += 1;
        }
        self.last_loss
    }

    #[wasm_bindgen(getter)]
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn accuracy(&self) -> f64 {
        compute_weights(&self.bank, &self.cfg)
            .and_then(|w| w.accuracy(&self.x, &self.labels))
            .unwrap_or(f64::NAN)
    }

    pub fn kappa(&self) -> f64 {
        kappa_xp(&self.bank)
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.bank.lambdas()
    }

    /// Training points as `x0, y0, x1, y1, …`.
    pub fn points(&self) -> Vec<f64> {
        self.x.as_slice().to_vec()
    }

    pub fn labels(&self) -> Vec<u32> {
        self.labels.iter().map(|&c| c as u32).collect()
    }

    /// Prototype inputs, flattened like [`ToyTrainer::points`].
    pub fn prototypes(&self) -> Vec<f64> {
        self.bank.xp.as_slice().to_vec()
    }

    /// Class each prototype was seeded with.
    pub fn prototype_classes(&self) -> Vec<u32> {
        (0..self.bank.prototypes())
            .map(|i| prototype_class(i, self.classes) as u32)
            .collect()
    }

    /// Predicted class on a `resolution²` grid over `[-extent, extent]²`,
    /// row by row from the top.
    pub fn decision_map(&self, resolution: usize, extent: f64) -> Vec<u32> {
        let Ok(weights) = compute_weights(&self.bank, &self.cfg) else {
            return vec![0; resolution * resolution];
        };
        let step = 2.0 * extent / resolution.max(1) as f64;
        let grid = Matrix::from_fn(resolution * resolution, 2, |r, c| {
            let (row, col) = (r / resolution, r % resolution);
            if c == 0 {
                -extent + (col as f64 + 0.5) * step
            } else {
                extent - (row as f64 + 0.5) * step
            }
        });
        weights
            .predict(&grid)
            .map(|p| p.into_iter().map(|c| c as u32).collect())
            .unwrap_or_else(|_| vec![0; resolution * resolution])
    }
}

/// Largest `|[1,x]·W − [1,z]·W_z|` over `samples` random inputs, where `W`
/// is `W_z` lifted from a `reduced`-dimensional PCA basis of `inputs` dims.
#[wasm_bindgen]
pub fn back_projection_gap(inputs: usize, reduced: usize, samples: usize, seed: u64) -> Result<f64, String> {
    if reduced == 0 || reduced > inputs {
        return Err(format!("reduced dimension must be between 1 and {inputs}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
    let data: Matrix<f64> = uniform(3 * inputs, inputs);
    let fitted = pca_fit(&data, reduced).map_err(|e| e.to_string())?;
    let basis = PcaBasis::from_parts(
        fitted.mean().iter().map(|m| m + 0.5).collect(),
        fitted.components().clone(),
    )
    .map_err(|e| e.to_string())?;
    let w_z = uniform(reduced + 1, 4);
    let x = uniform(samples, inputs).scale(3.0);
    let w_x = basis.back_project_w1(&w_z).map_err(|e| e.to_string())?;
    let via_z = basis
        .project(&x)
        .map_err(|e| e.to_string())?
        .with_bias_column()
        .matmul(&w_z);
    let via_x = x.with_bias_column().matmul(&w_x);
    Ok(via_z.sub(&via_x).max_abs())
}
