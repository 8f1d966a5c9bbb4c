mod common;

use common::*;
use sparsecrl::masking::Assignment;
use sparsecrl::mixing::gen_piecewise_mixing;
use sparsecrl::nn::Matrix;
use sparsecrl::train::{ExtraAdam, Regime, TrainConfig, TrainState, Trainer, ADAM_EPS, BETA1, BETA2};

#[test]
fn lagrangian_gradient_linear() {
    let e = lagrangian_gradient_error(Regime::LinearSparse, 1, false);
    assert!(e < 1e-5, "{e:e}");
}

#[test]
fn lagrangian_gradient_piecewise() {
    let e = lagrangian_gradient_error(Regime::PiecewiseGauss, 2, false);
    assert!(e < 1e-5, "{e:e}");
}

#[test]
fn lagrangian_gradient_oracle() {
    // The exp(-10) scale on masked coordinates puts the loss near 1e19, so this one only resolves
    // the large entries; the all-measured variant keeps every scale at 1.
    for all_measured in [false, true] {
        let e = lagrangian_gradient_error(Regime::PiecewiseOracle, 3, all_measured);
        assert!(e < 1e-5, "{e:e}");
    }
}

/// Simultaneous Adam on `min_x max_y x·y`, written out independently of the library.
fn plain_adam_bilinear(lr: f64, steps: usize) -> f64 {
    let (mut p, mut m, mut v) = ([1.0f64, 1.0], [0.0f64; 2], [0.0f64; 2]);
    for t in 1..=steps {
        let g = [p[1], -p[0]];
        for i in 0..2 {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
            let mh = m[i] / (1.0 - BETA1.powi(t as i32));
            let vh = v[i] / (1.0 - BETA2.powi(t as i32));
            p[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
    p[0].hypot(p[1])
}

/// With first-moment decay 0.9 both methods orbit the saddle; the lookahead still keeps the
/// extra-gradient iterates on a tighter orbit than simultaneous Adam from the same start.
#[test]
fn extra_adam_beats_plain_adam_on_bilinear_saddle() {
    for (lr, steps) in [(0.01, 1000), (0.01, 5000), (0.001, 5000), (0.001, 20_000)] {
        let mut opt = ExtraAdam::new(2, lr);
        let mut p = vec![1.0, 1.0];
        for _ in 0..steps {
            opt.step(&mut p, |q| Ok(vec![q[1], -q[0]])).unwrap();
        }
        let extra = p[0].hypot(p[1]);
        let plain = plain_adam_bilinear(lr, steps);
        assert!(extra < plain, "lr {lr}, {steps} steps: extra-gradient {extra} vs plain {plain}");
    }
    let mut opt = ExtraAdam::new(2, 0.001);
    let mut p = vec![1.0, 1.0];
    for _ in 0..20_000 {
        opt.step(&mut p, |q| Ok(vec![q[1], -q[0]])).unwrap();
    }
    assert!(p[0].hypot(p[1]) < 0.5, "{p:?}");
}

#[test]
fn huge_epsilon_keeps_multiplier_at_zero() {
    let data = linear_dataset(3, 500, Assignment::UniformPerSample, 4);
    let config = TrainConfig { epsilon: 1e6, ..small_config(Regime::LinearSparse, 3) };
    let mut t = Trainer::new(&data, config, &mut rng(5)).unwrap();
    for _ in 0..30 {
        let s = t.step().unwrap();
        assert!(s.violation < 0.0);
        assert_eq!(t.state().model.lambda, 0.0);
    }
}

#[test]
fn training_is_deterministic_and_resumable() {
    for regime in [Regime::LinearSparse, Regime::PiecewiseGauss, Regime::PiecewiseOracle] {
        let data = linear_dataset(3, 400, Assignment::BalancedPerGroup, 6);
        let config = small_config(regime, 3);
        let run = |seed| {
            let mut t = Trainer::new(&data, config.clone(), &mut rng(seed)).unwrap();
            t.run().unwrap();
            t.into_state()
        };
        let full = run(7);
        assert_eq!(serde_json::to_string(&full).unwrap(), serde_json::to_string(&run(7)).unwrap());
        assert_ne!(full.model, run(8).model);

        let mut t = Trainer::new(&data, config.clone(), &mut rng(7)).unwrap();
        for _ in 0..12 {
            t.step().unwrap();
        }
        let saved = serde_json::to_string(&t.into_state()).unwrap();
        let state: TrainState = serde_json::from_str(&saved).unwrap();
        let mut resumed = Trainer::resume(&data, config.clone(), state).unwrap();
        resumed.run().unwrap();
        assert_eq!(resumed.into_state(), full, "{regime:?}");
    }
}

#[test]
fn oracle_needs_matching_latent_dimension() {
    let data = linear_dataset(3, 100, Assignment::BalancedPerGroup, 8);
    let config = TrainConfig { nn: 4, ..small_config(Regime::PiecewiseOracle, 3) };
    let err = Trainer::new(&data, config, &mut rng(0)).err().expect("nn != n rejected");
    assert_eq!(err.kind(), "precondition");
}

#[test]
fn linear_training_reduces_reconstruction() {
    let data = linear_dataset(3, 2000, Assignment::UniformPerSample, 9);
    let config = TrainConfig { iterations: 400, log_interval: 50, ..small_config(Regime::LinearSparse, 3) };
    let mut t = Trainer::new(&data, config, &mut rng(10)).unwrap();
    t.run().unwrap();
    let h = &t.state().history.records;
    assert_eq!(h.len(), 8);
    assert!(h.last().unwrap().reconstruction < 0.5 * h[0].reconstruction, "{h:?}");
}

#[test]
fn piecewise_mixing_is_injective_on_random_pairs() {
    let mut r = rng(12);
    for (n, d, m) in [(3, 3, 3), (5, 5, 10), (4, 6, 3)] {
        let f = gen_piecewise_mixing(n, d, m, &mut r).unwrap();
        let a = Matrix::randn(10_000, n, &mut r);
        let b = Matrix::randn(10_000, n, &mut r);
        let (fa, fb) = (f.apply(&a).unwrap(), f.apply(&b).unwrap());
        let mut worst = f64::INFINITY;
        for i in 0..10_000 {
            let dz: f64 = a.row(i).iter().zip(b.row(i)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let dx: f64 = fa.row(i).iter().zip(fb.row(i)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            worst = worst.min(dx / dz);
        }
        // Orthonormal weights and slope-0.2 activations contract by at most 0.2 per layer.
        assert!(worst >= 0.2f64.powi(m as i32 - 1) * (1.0 - 1e-9), "({n}, {d}, {m}): {worst}");
    }
}

