use proptest::prelude::*;
use protopinv::optim::{AdamConfig, AdamState, ParamGroup, Schedule};
use protopinv::tensor::Matrix;

fn run(steps: usize) -> (Matrix<f64>, AdamState<f64>) {
    let mut p = Matrix::from_fn(3, 2, |r, c| (r as f64 - c as f64) * 0.7);
    let mut state = AdamState::new(
        AdamConfig::default(),
        &[p.shape()],
        vec![ParamGroup {
            lr_scale: 1.0,
            decay: 0.01,
        }],
    );
    for _ in 0..steps {
        let g = p.scale(2.0);
        state.step(&mut [&mut p], &[&g], 0.05).unwrap();
    }
    (p, state)
}

#[test]
fn adam_is_deterministic_and_descends_a_quadratic() {
    let (a, sa) = run(200);
    let (b, sb) = run(200);
    assert_eq!(a, b);
    assert_eq!(sa, sb);
    assert_eq!(sa.step_count(), 200);
    assert!(a.max_abs() < 0.05, "{a:?}");
}

#[test]
fn default_schedule_shape() {
    let s = Schedule::new(0.05, 20, 250, 0.0).unwrap();
    assert!((s.lr_at(0).unwrap() - 0.0025).abs() < 1e-15);
    assert!((s.lr_at(19).unwrap() - 0.05).abs() < 1e-15);
    assert!((s.lr_at(20).unwrap() - 0.05).abs() < 1e-15);
    assert_eq!(s.lr_at(249).unwrap(), 0.0);
    assert!(s.lr_at(250).is_err());
}

proptest! {
    #[test]
    fn schedule_rises_then_falls_within_bounds(
        base in 1e-4f64..1.0,
        floor_frac in 0.0f64..1.0,
        warmup in 0usize..30,
        extra in 1usize..200,
    ) {
        let total = warmup + extra;
        let floor = base * floor_frac;
        let s = Schedule::new(base, warmup, total, floor).unwrap();
        let lrs: Vec<f64> = (0..total).map(|e| s.lr_at(e).unwrap()).collect();
        for w in lrs[..warmup].windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
        for w in lrs[warmup..].windows(2) {
            prop_assert!(w[0] >= w[1] - 1e-15);
        }
        prop_assert!(lrs.iter().all(|&l| l <= base * (1.0 + 1e-12) && l >= 0.0));
        prop_assert!(lrs[warmup..].iter().all(|&l| l >= floor - 1e-15));
    }
}
