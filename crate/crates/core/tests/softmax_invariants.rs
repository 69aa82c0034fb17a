//! Temperature-softmax invariants: normalization, argmax stability across
//! temperatures, logit-shift invariance, and the analytic softmax-Jacobian
//! probe J_il = F_i (delta_il - F_l) / T.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use distil_core::nn::{Architecture, LayerKind, LayerSpec, Model};
use distil_core::Tensor;

/// Model whose logits equal its input: one identity dense-linear layer.
fn identity_logit_model(n: usize) -> Model {
    let arch = Architecture {
        name: "identity".into(),
        input_shape: vec![n],
        class_count: n,
        layers: vec![
            LayerSpec::plain(LayerKind::DenseLinear { units: n }),
            LayerSpec::plain(LayerKind::Softmax),
        ],
    };
    let mut m = Model::init(arch, 1.0, 0).unwrap();
    let mut w = vec![0.0f32; n * n];
    for i in 0..n {
        w[i * n + i] = 1.0;
    }
    m.params[0] = Tensor::new(vec![n, n], w).unwrap();
    m.params[1] = Tensor::zeros(vec![n]);
    m
}

fn random_mlp(seed: u64, input: usize, classes: usize) -> Model {
    let arch = Architecture {
        name: "probe".into(),
        input_shape: vec![input],
        class_count: classes,
        layers: vec![
            LayerSpec::plain(LayerKind::DenseRelu { units: 12 }),
            LayerSpec::plain(LayerKind::DenseLinear { units: classes }),
            LayerSpec::plain(LayerKind::Softmax),
        ],
    };
    Model::init(arch, 1.0, seed).unwrap()
}

#[test]
fn closed_form_two_class_probabilities() {
    let m = identity_logit_model(2);
    let p = m
        .predict(&Tensor::from_vec(vec![2.0f32.ln(), 0.0]), Some(1.0))
        .unwrap();
    assert!((p.data()[0] - 2.0 / 3.0).abs() < 1e-6);
    assert!((p.data()[1] - 1.0 / 3.0).abs() < 1e-6);

    // logits [5, 0] at T=100
    let p = m
        .predict(&Tensor::from_vec(vec![5.0, 0.0]), Some(100.0))
        .unwrap();
    assert!((p.data()[0] - 0.51250).abs() < 1e-5, "{}", p.data()[0]);
    assert!((p.data()[1] - 0.48750).abs() < 1e-5, "{}", p.data()[1]);
}

#[test]
fn equal_logits_converge_to_uniform_at_any_temperature() {
    let m = identity_logit_model(4);
    for t in [0.1, 1.0, 50.0, 10000.0] {
        let p = m
            .predict(&Tensor::from_vec(vec![3.7; 4]), Some(t))
            .unwrap();
        for &v in p.data() {
            assert!((v - 0.25).abs() < 1e-6);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn predict_is_a_probability_vector(
        seed in 0u64..1000,
        xs in proptest::collection::vec(-3.0f32..3.0, 8),
        t in 0.1f32..1000.0,
    ) {
        let m = random_mlp(seed, 8, 5);
        let p = m.predict(&Tensor::from_vec(xs), Some(t)).unwrap();
        let sum: f32 = p.data().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-5);
        for &v in p.data() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn argmax_is_temperature_invariant(
        seed in 0u64..1000,
        xs in proptest::collection::vec(-3.0f32..3.0, 8),
    ) {
        let m = random_mlp(seed, 8, 5);
        let x = Tensor::from_vec(xs);
        let reference = m.predict(&x, Some(1.0)).unwrap().argmax();
        for t in [0.5f32, 5.0, 20.0, 100.0] {
            prop_assert_eq!(m.predict(&x, Some(t)).unwrap().argmax(), reference);
        }
    }

    #[test]
    fn predict_is_invariant_under_logit_shift(
        logits in proptest::collection::vec(-20.0f32..20.0, 6),
        shift in -50.0f32..50.0,
        t in 0.5f32..100.0,
    ) {
        let m = identity_logit_model(6);
        let base = m.predict(&Tensor::from_vec(logits.clone()), Some(t)).unwrap();
        let shifted_logits: Vec<f32> = logits.iter().map(|&z| z + shift).collect();
        let shifted = m.predict(&Tensor::from_vec(shifted_logits), Some(t)).unwrap();
        for (a, b) in base.data().iter().zip(shifted.data()) {
            prop_assert!((a - b).abs() < 1e-6, "{} vs {}", a, b);
        }
    }
}

/// Analytic softmax Jacobian for an identity-logit model: F_i(d_il - F_l)/T.
fn analytic_jacobian(logits: &[f32], t: f64) -> Vec<f64> {
    let n = logits.len();
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&z| ((z as f64 - max) / t).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let f: Vec<f64> = exps.iter().map(|&e| e / sum).collect();
    let mut j = vec![0.0; n * n];
    for i in 0..n {
        for l in 0..n {
            let delta = if i == l { 1.0 } else { 0.0 };
            j[i * n + l] = f[i] * (delta - f[l]) / t;
        }
    }
    j
}

#[test]
fn jacobian_matches_analytic_softmax_form() {
    let m = identity_logit_model(4);
    let logits = [0.7f32, -1.2, 0.3, 2.0];
    for t in [0.5f64, 1.0, 10.0, 100.0] {
        let j = m
            .input_jacobian(&Tensor::from_vec(logits.to_vec()), t as f32)
            .unwrap();
        let reference = analytic_jacobian(&logits, t);
        for (a, r) in j.data().iter().zip(&reference) {
            assert!((*a as f64 - r).abs() < 1e-5, "T={t}: {a} vs {r}");
        }
    }
}

#[test]
fn symmetric_two_class_jacobian_is_one_quarter() {
    // logits = X, N=2, X=[0,0], T=1: dF_0/dX_0 = F_0(1-F_0)/T = 0.25
    let m = identity_logit_model(2);
    let j = m
        .input_jacobian(&Tensor::from_vec(vec![0.0, 0.0]), 1.0)
        .unwrap();
    assert!((j.data()[0] - 0.25).abs() < 1e-6);
}

#[test]
fn jacobian_amplitude_is_inverse_in_temperature_for_fixed_softmax_input() {
    // rescaling logits with T keeps F fixed, so |J| scales exactly as 1/T
    let m = identity_logit_model(3);
    let logits = [1.0f32, -0.5, 0.25];
    let j1 = m
        .input_jacobian(&Tensor::from_vec(logits.to_vec()), 1.0)
        .unwrap();
    for k in [2.0f32, 10.0, 50.0] {
        let scaled: Vec<f32> = logits.iter().map(|&z| z * k).collect();
        let jk = m.input_jacobian(&Tensor::from_vec(scaled), k).unwrap();
        for (a, b) in jk.data().iter().zip(j1.data()) {
            assert!(
                (a - b / k).abs() < 1e-5,
                "k={k}: {a} vs {}",
                b / k
            );
            assert!(a.abs() <= b.abs() / k + 1e-6);
        }
    }
}

#[test]
fn higher_temperature_shrinks_max_jacobian_for_frozen_probe() {
    let m = identity_logit_model(2);
    let x = Tensor::from_vec(vec![0.5, -0.3]);
    let max_abs = |t: f32| {
        m.input_jacobian(&x, t)
            .unwrap()
            .data()
            .iter()
            .map(|v| v.abs())
            .fold(0.0f32, f32::max)
    };
    assert!(max_abs(10.0) < max_abs(1.0));
}

#[test]
fn jacobian_matches_finite_differences_of_predict() {
    let m = random_mlp(21, 10, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let xs: Vec<f32> = (0..10).map(|_| rng.gen_range(-1.0..1.0f32)).collect();
    let x = Tensor::from_vec(xs.clone());
    let j = m.input_jacobian(&x, 1.0).unwrap();
    let h = 1e-2f32; // f32 forward passes need a coarse step
    for col in 0..10 {
        let mut plus = xs.clone();
        let mut minus = xs.clone();
        plus[col] += h;
        minus[col] -= h;
        let pp = m.predict(&Tensor::from_vec(plus), Some(1.0)).unwrap();
        let pm = m.predict(&Tensor::from_vec(minus), Some(1.0)).unwrap();
        for row in 0..4 {
            let numeric = (pp.data()[row] - pm.data()[row]) as f64 / (2.0 * h as f64);
            let analytic = j.data()[row * 10 + col] as f64;
            let abs = (analytic - numeric).abs();
            let rel = abs / numeric.abs().max(1e-5);
            assert!(
                abs < 1e-4 || rel < 1e-3,
                "J[{row},{col}]: {analytic} vs {numeric}"
            );
        }
    }
}
