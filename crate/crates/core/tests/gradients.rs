use std::time::Instant;

use proptest::prelude::*;
use protopinv::autodiff::{softplus, Activation, Tape, Var};
use protopinv::diagnostics::{
    compare, finite_differences, grad_check, grad_check_problem, relative_error, tensor_names, GradCheckConfig,
};
use protopinv::model::{evaluate, GraphPath};
use protopinv::tensor::{cholesky_factor, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Root of the graph: `‖out + C‖²` with a fixed offset, so the upstream
/// adjoint is generic rather than all-ones.
fn contract<'a>(tape: &mut Tape<'a, f64>, out: Var, offset: &Matrix<f64>) -> Var {
    let c = tape.constant(offset.clone());
    let shifted = tape.add(out, c);
    tape.frobenius_sq(shifted)
}

/// Compares reverse-mode adjoints of every input against central
/// differences and returns the worst relative error.
fn check(inputs: &[Matrix<f64>], build: impl Fn(&mut Tape<'_, f64>, &[Var]) -> Var, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = build(&mut tape, &vars);
        let (r, c) = tape.value(out).shape();
        random(r, c, &mut rng)
    };
    let eval = |params: &[Matrix<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = build(&mut tape, &vars);
        let root = contract(&mut tape, out, &offset);
        tape.value(root).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = build(&mut tape, &vars);
    let root = contract(&mut tape, out, &offset);
    let grads = tape.backward(root).unwrap();
    let analytic: Vec<Matrix<f64>> = vars.iter().map(|&v| grads.get(v).unwrap().clone()).collect();
    let numeric = finite_differences(&mut |p: &[Matrix<f64>]| eval(p), inputs, STEP);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, n, 1e-10))
        .fold(0.0, f64::max)
}

#[test]
fn matmul_add_and_scale_adjoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b, c) = (random(3, 4, &mut rng), random(4, 2, &mut rng), random(3, 2, &mut rng));
    let err = check(
        &[a, b, c],
        |t, v| {
            let p = t.matmul(v[0], v[1]);
            let s = t.scale(v[2], -1.7);
            t.add(p, s)
        },
        2,
    );
    assert!(err < TOL, "{err}");
}

#[test]
fn bias_column_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let err = check(&[random(4, 3, &mut rng)], |t, v| t.add_bias_column(v[0]), 4);
    assert!(err < TOL, "{err}");
}

#[test]
fn activation_adjoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(4, 5, &mut rng).scale(2.0);
    for act in [Activation::Sigmoid, Activation::Tanh] {
        let err = check(std::slice::from_ref(&x), |t, v| t.activation(v[0], act), 6);
        assert!(err < TOL, "{act}: {err}");
    }
    // keep relu inputs away from the kink
    let x = x.map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
    let err = check(&[x], |t, v| t.activation(v[0], Activation::Relu), 6);
    assert!(err < TOL, "relu: {err}");
}

#[test]
fn softmax_and_softplus_adjoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(3, 4, &mut rng).scale(3.0);
    let err = check(std::slice::from_ref(&x), |t, v| t.softmax_rows(v[0]), 8);
    assert!(err < TOL, "softmax: {err}");
    let err = check(&[x], |t, v| t.softplus(v[0]), 8);
    assert!(err < TOL, "softplus: {err}");
}

#[test]
fn reduction_adjoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(3, 3, &mut rng);
    let err = check(std::slice::from_ref(&x), |t, v| t.sum(v[0]), 10);
    assert!(err < TOL, "sum: {err}");
    let err = check(&[x], |t, v| t.frobenius_sq(v[0]), 10);
    assert!(err < TOL, "frobenius: {err}");
}

#[test]
fn cross_entropy_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let logits = random(5, 3, &mut rng).scale(2.0);
    let labels = vec![0, 2, 1, 1, 0];
    let err = check(&[logits], |t, v| t.cross_entropy_mean(v[0], labels.clone()), 12);
    assert!(err < TOL, "{err}");
}

#[test]
fn ridge_solve_adjoints_for_all_three_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = random(6, 4, &mut rng);
    let b = random(6, 3, &mut rng);
    let lambda = Matrix::scalar(0.4);
    let err = check(&[a, b, lambda], |t, v| t.ridge_solve(v[0], v[1], v[2]).unwrap(), 14);
    assert!(err < TOL, "{err}");
}

#[test]
fn ridge_solve_adjoint_wide_design() {
    // more columns than rows: only the ridge term keeps G invertible
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let a = random(3, 6, &mut rng);
    let b = random(3, 2, &mut rng);
    let lambda = Matrix::scalar(0.8);
    let err = check(&[a, b, lambda], |t, v| t.ridge_solve(v[0], v[1], v[2]).unwrap(), 16);
    assert!(err < TOL, "{err}");
}

#[test]
fn lambda_gradient_matches_closed_form() {
    // dW/dλ = −G⁻¹G⁻¹R, contracted against the upstream adjoint
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let a = random(7, 4, &mut rng);
    let b = random(7, 2, &mut rng);
    let offset = random(4, 2, &mut rng);
    let lambda = 0.25;

    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let bv = tape.constant(b.clone());
    let lv = tape.leaf(Matrix::scalar(lambda));
    let w = tape.ridge_solve(av, bv, lv).unwrap();
    let root = contract(&mut tape, w, &offset);
    let from_tape = tape.backward(root).unwrap().get(lv).unwrap().item();

    let mut g = a.matmul_tn(&a);
    for i in 0..4 {
        g[(i, i)] += lambda;
    }
    let fac = cholesky_factor(&g).unwrap();
    let w = fac.solve(&a.matmul_tn(&b)).unwrap();
    let upstream = w.add(&offset).scale(2.0);
    let dw_dlambda = fac.solve(&w).unwrap().scale(-1.0);
    let closed_form = upstream.dot(&dw_dlambda);

    assert!((from_tape - closed_form).abs() < 1e-10 * closed_form.abs().max(1.0));
}

#[test]
fn rho_gradient_chains_through_softplus() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let a = random(5, 3, &mut rng);
    let b = random(5, 2, &mut rng);
    let rho = Matrix::scalar(-0.3);
    let err = check(
        &[rho],
        |t, v| {
            let lam = t.softplus(v[0]);
            let av = t.constant(a.clone());
            let bv = t.constant(b.clone());
            t.ridge_solve(av, bv, lam).unwrap()
        },
        20,
    );
    assert!(err < TOL, "{err}");
    assert!((softplus(-0.3f64) - (1.0 + (-0.3f64).exp()).ln()).abs() < 1e-15);
}

#[test]
fn full_objective_passes_on_default_toy() {
    let start = Instant::now();
    let report = grad_check(&GradCheckConfig::default()).unwrap();
    assert!(report.passed, "{report}");
    assert_eq!(report.entries.len(), 5);
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn full_objective_passes_with_tempered_labels() {
    let report = grad_check(&GradCheckConfig {
        temperature: 0.7,
        ..GradCheckConfig::default()
    })
    .unwrap();
    assert!(report.passed, "{report}");
}

#[test]
fn full_objective_passes_with_two_hidden_layers() {
    let report = grad_check(&GradCheckConfig {
        hidden: vec![5, 4],
        ..GradCheckConfig::default()
    })
    .unwrap();
    assert!(report.passed, "{report}");
    assert_eq!(report.entries.len(), tensor_names(2).len());
}

#[test]
fn corrupted_adjoint_is_caught() {
    let cfg = GradCheckConfig::default();
    let (bank, model, x, y) = grad_check_problem(&cfg);
    let honest: Vec<Matrix<f64>> = evaluate(&bank, &model, &x, &y, GraphPath::General)
        .unwrap()
        .grads
        .into_iter()
        .map(|g| g.unwrap())
        .collect();
    let names = tensor_names(1);
    // a sign error in the prototype-input adjoint
    let mut corrupted = honest.clone();
    corrupted[0] = corrupted[0].map(|v| -v);
    let reference = grad_check_numeric(&cfg);
    let report = compare(&corrupted, &reference, &names, cfg.threshold);
    assert!(!report.passed);
    assert!(report.entries[0].1 > 1.0);
    let report = compare(&honest, &reference, &names, cfg.threshold);
    assert!(report.passed, "{report}");
}

fn grad_check_numeric(cfg: &GradCheckConfig) -> Vec<Matrix<f64>> {
    let (bank, model, x, y) = grad_check_problem(cfg);
    let params: Vec<Matrix<f64>> = bank.tensors().into_iter().cloned().collect();
    let mut objective = |t: &[Matrix<f64>]| {
        let mut b = bank.clone();
        for (dst, src) in b.tensors_mut().into_iter().zip(t) {
            *dst = src.clone();
        }
        protopinv::model::compute_weights(&b, &model)
            .and_then(|w| w.loss(&x, &y, model.lambda3))
            .unwrap()
    };
    finite_differences(&mut objective, &params, cfg.step)
}

#[test]
fn backward_is_linear_in_the_root() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let a = random(6, 3, &mut rng);
    let b = random(6, 2, &mut rng);
    let grads_for = |k: f64| {
        let mut tape = Tape::new();
        let av = tape.leaf(a.clone());
        let bv = tape.leaf(b.clone());
        let l = tape.leaf(Matrix::scalar(0.5));
        let w = tape.ridge_solve(av, bv, l).unwrap();
        let s = tape.frobenius_sq(w);
        let root = tape.scale(s, k);
        let g = tape.backward(root).unwrap();
        (g.get(av).unwrap().clone(), g.get(l).unwrap().item())
    };
    let (ga, gl) = grads_for(1.0);
    let (ga3, gl3) = grads_for(3.0);
    assert!(ga.scale(3.0).sub(&ga3).max_abs() < 1e-12 * ga3.max_abs().max(1.0));
    assert!((3.0 * gl - gl3).abs() < 1e-12 * gl3.abs().max(1.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ridge_adjoint_matches_finite_differences(
        rows in 1usize..7,
        cols in 1usize..6,
        targets in 1usize..4,
        log_lambda in -2.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(rows, cols, &mut rng);
        let b = random(rows, targets, &mut rng);
        let lambda = Matrix::scalar(10f64.powf(log_lambda));
        let err = check(&[a, b, lambda], |t, v| t.ridge_solve(v[0], v[1], v[2]).unwrap(), seed ^ 1);
        prop_assert!(err < TOL, "relative error {}", err);
    }
}
