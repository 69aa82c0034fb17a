//! Brute-force oracle for JSMA feature selection: an exhaustive O(M^2) pair
//! search over an analytically differentiated linear-softmax model must agree
//! with `select_features` at every iteration of the attack loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use distil_core::attack::{select_features, SaliencyVariant};
use distil_core::nn::{Architecture, LayerKind, LayerSpec, Model};
use distil_core::Tensor;

const M: usize = 36; // 6x6 input
const N: usize = 4;

/// Linear-softmax model over a 6x6 input with weights drawn from `rng`.
fn linear_softmax(rng: &mut ChaCha8Rng) -> Model {
    let arch = Architecture {
        name: "linear36".into(),
        input_shape: vec![1, 6, 6],
        class_count: N,
        layers: vec![
            LayerSpec::plain(LayerKind::DenseLinear { units: N }),
            LayerSpec::plain(LayerKind::Softmax),
        ],
    };
    let mut model = Model::init(arch, 1.0, 0).unwrap();
    let w: Vec<f32> = (0..M * N).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f32> = (0..N).map(|_| rng.gen_range(-0.2..0.2)).collect();
    model.params[0] = Tensor::new(vec![M, N], w).unwrap();
    model.params[1] = Tensor::from_vec(b);
    model
}

/// Closed-form dF_i/dX_j for logits z = x W + b at temperature 1:
/// sum over l of F_i (delta_il - F_l) W[j, l]. Entirely f64, no graph.
fn analytic_jacobian(model: &Model, x: &[f32]) -> Vec<f64> {
    let w = model.params[0].data();
    let b = model.params[1].data();
    let mut z = [0.0f64; N];
    for l in 0..N {
        z[l] = b[l] as f64;
        for j in 0..M {
            z[l] += x[j] as f64 * w[j * N + l] as f64;
        }
    }
    let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let f: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    let mut jac = vec![0.0f64; N * M];
    for i in 0..N {
        for j in 0..M {
            for l in 0..N {
                let delta = if i == l { 1.0 } else { 0.0 };
                jac[i * M + j] += f[i] * (delta - f[l]) * w[j * N + l] as f64;
            }
        }
    }
    jac
}

/// Exhaustive search over every unexhausted pair (or single feature): best
/// admissible group by alpha_sum * |beta_sum| with alpha_sum > 0 and
/// beta_sum < 0, falling back to the raw score maximum. First-seen group
/// wins ties, scanning index pairs in ascending order.
fn brute_force(
    jac: &[f64],
    target: usize,
    exhausted: &[bool],
    pairs: bool,
) -> Option<Vec<usize>> {
    let alpha_beta = |j: usize| {
        let mut a = 0.0;
        let mut b = 0.0;
        for i in 0..N {
            if i == target {
                a += jac[i * M + j];
            } else {
                b += jac[i * M + j];
            }
        }
        (a, b)
    };
    let live: Vec<usize> = (0..M).filter(|&j| !exhausted[j]).collect();
    let groups: Vec<Vec<usize>> = if pairs {
        let mut g = Vec::new();
        for (k, &p) in live.iter().enumerate() {
            for &q in &live[k + 1..] {
                g.push(vec![p, q]);
            }
        }
        g
    } else {
        live.iter().map(|&j| vec![j]).collect()
    };
    let mut best_admissible: Option<(f64, Vec<usize>)> = None;
    let mut best_raw: Option<(f64, Vec<usize>)> = None;
    for group in groups {
        let (a, b) = group
            .iter()
            .map(|&j| alpha_beta(j))
            .fold((0.0, 0.0), |(sa, sb), (a, b)| (sa + a, sb + b));
        let score = a * b.abs();
        if a > 0.0 && b < 0.0 && best_admissible.as_ref().is_none_or(|(s, _)| score > *s) {
            best_admissible = Some((score, group.clone()));
        }
        if best_raw.as_ref().is_none_or(|(s, _)| score > *s) {
            best_raw = Some((score, group));
        }
    }
    best_admissible.or(best_raw).map(|(_, g)| g)
}

/// Runs the attack loop by hand, comparing the engine's selection against the
/// exhaustive oracle at every iteration before applying the perturbation.
fn compare_instance(seed: u64, variant: SaliencyVariant) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = linear_softmax(&mut rng);
    let xs: Vec<f32> = (0..M).map(|_| rng.gen_range(0.0..1.0f32)).collect();
    let target = rng.gen_range(0..N);
    let pairs = variant == SaliencyVariant::PixelPair;
    let group_size = if pairs { 2 } else { 1 };

    let mut current = xs.clone();
    let mut exhausted = vec![false; M];
    let mut used = 0usize;
    let budget = distil_core::attack::default_budget(M);
    let mut iteration = 0;
    while used + group_size <= budget {
        let x = Tensor::new(vec![1, 6, 6], current.clone()).unwrap();
        let engine_jac = model.input_jacobian(&x, 1.0).unwrap();
        let chosen = select_features(&engine_jac, target, &exhausted, variant);
        let oracle = brute_force(&analytic_jacobian(&model, &current), target, &exhausted, pairs);
        assert_eq!(
            chosen, oracle,
            "seed {seed}, iteration {iteration}: engine and exhaustive search disagree"
        );
        let group = chosen.unwrap();
        for &j in &group {
            current[j] = 1.0;
            exhausted[j] = true;
            used += 1;
        }
        iteration += 1;
    }
    assert!(iteration > 0);
}

#[test]
fn pair_selection_matches_exhaustive_search() {
    for seed in 0..20 {
        compare_instance(seed, SaliencyVariant::PixelPair);
    }
}

#[test]
fn single_feature_selection_matches_exhaustive_search() {
    for seed in 100..110 {
        compare_instance(seed, SaliencyVariant::SingleFeature);
    }
}

#[test]
fn first_pair_matches_exhaustive_search_from_clean_input() {
    // the iteration-0 case in isolation: untouched exhausted set
    let mut rng = ChaCha8Rng::seed_from_u64(0xABCD);
    let model = linear_softmax(&mut rng);
    let xs: Vec<f32> = (0..M).map(|_| rng.gen_range(0.0..1.0f32)).collect();
    let x = Tensor::new(vec![1, 6, 6], xs.clone()).unwrap();
    for target in 0..N {
        let jac = model.input_jacobian(&x, 1.0).unwrap();
        let chosen = select_features(&jac, target, &[false; M], SaliencyVariant::PixelPair);
        let oracle = brute_force(&analytic_jacobian(&model, &xs), target, &[false; M], true);
        assert_eq!(chosen, oracle, "target {target}");
        assert_eq!(chosen.unwrap().len(), 2);
    }
}
