//! Gradient checking against an independent f64 reference network.
//!
//! The reference evaluator below reimplements every forward op in f64 with
//! direct loops and shares no code with the library's graph engine. Central
//! finite differences of the reference loss are compared against the
//! engine's reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use distil_core::graph::{Graph, Padding};
use distil_core::Tensor;

const REL_TOL: f64 = 1e-3;
const ABS_FLOOR: f64 = 1e-5;


/// Layer vocabulary for randomly generated check networks.
#[derive(Clone, Debug)]
pub enum RefLayer {
    Conv {
        filters: usize,
        kernel: usize,
        same: bool,
        weights: Vec<f64>,
        bias: Vec<f64>,
    },
    Pool,
    Dense {
        units: usize,
        relu: bool,
        weights: Vec<f64>,
        bias: Vec<f64>,
    },
    Relu,
}

/// Independent f64 forward pass: input (c,h,w) image flattened row-major,
/// through the layers, softmax at temperature t, cross-entropy vs labels.
pub fn ref_loss(
    input: &[f64],
    mut shape: (usize, usize, usize),
    layers: &[RefLayer],
    t: f64,
    labels: &[f64],
) -> f64 {
    let mut x = input.to_vec();
    for layer in layers {
        match layer {
            RefLayer::Conv {
                filters,
                kernel,
                same,
                weights,
                bias,
            } => {
                let (cin, h, w) = shape;
                let k = *kernel;
                let pad = if *same { (k - 1) / 2 } else { 0 };
                let (oh, ow) = if *same {
                    (h, w)
                } else {
                    (h - k + 1, w - k + 1)
                };
                let mut out = vec![0.0; filters * oh * ow];
                for co in 0..*filters {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = bias[co];
                            for ci in 0..cin {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iy = oy as isize + ky as isize - pad as isize;
                                        let ix = ox as isize + kx as isize - pad as isize;
                                        if iy < 0
                                            || ix < 0
                                            || iy >= h as isize
                                            || ix >= w as isize
                                        {
                                            continue;
                                        }
                                        acc += x[(ci * h + iy as usize) * w + ix as usize]
                                            * weights[((co * cin + ci) * k + ky) * k + kx];
                                    }
                                }
                            }
                            out[(co * oh + oy) * ow + ox] = acc.max(0.0);
                        }
                    }
                }
                x = out;
                shape = (*filters, oh, ow);
            }
            RefLayer::Pool => {
                let (c, h, w) = shape;
                let (oh, ow) = (h / 2, w / 2);
                let mut out = vec![0.0; c * oh * ow];
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = f64::NEG_INFINITY;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    best = best
                                        .max(x[(ci * h + oy * 2 + dy) * w + ox * 2 + dx]);
                                }
                            }
                            out[(ci * oh + oy) * ow + ox] = best;
                        }
                    }
                }
                x = out;
                shape = (c, oh, ow);
            }
            RefLayer::Dense {
                units,
                relu,
                weights,
                bias,
            } => {
                let fan_in = x.len();
                let mut out = vec![0.0; *units];
                for (j, o) in out.iter_mut().enumerate() {
                    let mut acc = bias[j];
                    for (i, &v) in x.iter().enumerate() {
                        acc += v * weights[i * units + j];
                    }
                    *o = if *relu { acc.max(0.0) } else { acc };
                }
                let _ = fan_in;
                x = out;
                shape = (*units, 1, 1);
            }
            RefLayer::Relu => {
                for v in &mut x {
                    *v = v.max(0.0);
                }
            }
        }
    }
    // softmax at temperature t, then cross-entropy
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&z| ((z / t) - (max / t)).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let mut loss = 0.0;
    for (j, &y) in labels.iter().enumerate() {
        if y != 0.0 {
            loss -= y * (exps[j] / sum).max(1e-300).ln();
        }
    }
    loss
}

/// Builds the same network with the graph engine and returns
/// (loss, input gradient, per-layer parameter gradients).
#[allow(clippy::type_complexity)]
pub fn engine_loss_and_grads(
    input: &[f32],
    shape: (usize, usize, usize),
    layers: &[RefLayer],
    t: f32,
    labels: &[f32],
) -> (f32, Vec<f32>, Vec<(Vec<f32>, Vec<f32>)>) {
    let mut g = Graph::new();
    let (c, h, w) = shape;
    let x = g.input(
        Tensor::new(vec![1, c, h, w], input.to_vec()).unwrap(),
        true,
    );
    let mut cur = x;
    let mut param_ids = Vec::new();
    for layer in layers {
        match layer {
            RefLayer::Conv {
                filters,
                kernel,
                same,
                weights,
                bias,
            } => {
                let cin = g.value(cur).shape()[1];
                let wt = g.param(
                    Tensor::new(
                        vec![*filters, cin, *kernel, *kernel],
                        weights.iter().map(|&v| v as f32).collect(),
                    )
                    .unwrap(),
                );
                let bt = g.param(Tensor::new(
                    vec![*filters],
                    bias.iter().map(|&v| v as f32).collect(),
                )
                .unwrap());
                let pad = if *same { Padding::Same } else { Padding::Valid };
                let y = g.conv2d(cur, wt, pad).unwrap();
                let y = g.add_bias(y, bt).unwrap();
                cur = g.relu(y).unwrap();
                param_ids.push(Some((wt, bt)));
            }
            RefLayer::Pool => {
                cur = g.maxpool2x2(cur).unwrap();
                param_ids.push(None);
            }
            RefLayer::Dense {
                units,
                relu,
                weights,
                bias,
            } => {
                let flat = g.value(cur).len();
                if g.value(cur).shape().len() != 2 {
                    cur = g.reshape(cur, vec![1, flat]).unwrap();
                }
                let fan_in = g.value(cur).shape()[1];
                let wt = g.param(
                    Tensor::new(
                        vec![fan_in, *units],
                        weights.iter().map(|&v| v as f32).collect(),
                    )
                    .unwrap(),
                );
                let bt = g.param(Tensor::new(
                    vec![*units],
                    bias.iter().map(|&v| v as f32).collect(),
                )
                .unwrap());
                let y = g.matmul(cur, wt).unwrap();
                let y = g.add_bias(y, bt).unwrap();
                cur = if *relu { g.relu(y).unwrap() } else { y };
                param_ids.push(Some((wt, bt)));
            }
            RefLayer::Relu => {
                cur = g.relu(cur).unwrap();
                param_ids.push(None);
            }
        }
    }
    let n = g.value(cur).len();
    if g.value(cur).shape().len() != 2 {
        cur = g.reshape(cur, vec![1, n]).unwrap();
    }
    let scaled = g.scalar_div(cur, t).unwrap();
    let probs = g.softmax(scaled).unwrap();
    let loss = g
        .cross_entropy(probs, Tensor::new(vec![1, n], labels.to_vec()).unwrap())
        .unwrap();
    let loss_value = g.value(loss).data()[0];
    let grads = g.backward(loss, None).unwrap();
    let gx = grads.get(x).unwrap().data().to_vec();
    let mut gparams = Vec::new();
    for ids in param_ids.into_iter().flatten() {
        let gw = grads.get(ids.0).map(|t| t.data().to_vec()).unwrap_or_default();
        let gb = grads.get(ids.1).map(|t| t.data().to_vec()).unwrap_or_default();
        gparams.push((gw, gb));
    }
    (loss_value, gx, gparams)
}

pub fn check_close(analytic: f64, numeric: f64, what: &str) {
    let abs = (analytic - numeric).abs();
    if abs <= ABS_FLOOR {
        return;
    }
    let rel = abs / numeric.abs().max(ABS_FLOOR);
    assert!(
        rel < REL_TOL,
        "{what}: analytic {analytic} vs numeric {numeric} (abs {abs:.3e}, rel {rel:.3e})"
    );
}

/// Central finite differences of the f64 reference, compared against the
/// engine's gradients for every input pixel and every parameter.
pub fn gradcheck(
    input: &[f32],
    shape: (usize, usize, usize),
    layers: &[RefLayer],
    t: f64,
    labels: &[f64],
    step: f64,
) {
    #[allow(non_snake_case)]
    let STEP = step;
    let labels32: Vec<f32> = labels.iter().map(|&v| v as f32).collect();
    let (_, gx, gparams) = engine_loss_and_grads(input, shape, layers, t as f32, &labels32);
    let input64: Vec<f64> = input.iter().map(|&v| v as f64).collect();

    // input gradients
    for j in 0..input64.len() {
        let mut plus = input64.clone();
        let mut minus = input64.clone();
        plus[j] += STEP;
        minus[j] -= STEP;
        let numeric = (ref_loss(&plus, shape, layers, t, labels)
            - ref_loss(&minus, shape, layers, t, labels))
            / (2.0 * STEP);
        check_close(gx[j] as f64, numeric, &format!("input[{j}]"));
    }

    // parameter gradients
    let mut param_layer = 0usize;
    for (li, layer) in layers.iter().enumerate() {
        let (weights, bias) = match layer {
            RefLayer::Conv { weights, bias, .. } | RefLayer::Dense { weights, bias, .. } => {
                (weights, bias)
            }
            _ => continue,
        };
        let (gw, gb) = &gparams[param_layer];
        for (k, analytic) in gw.iter().enumerate() {
            let mut perturbed = layers.to_vec();
            let (wp, wm) = {
                let mut p = weights.clone();
                let mut m = weights.clone();
                p[k] += STEP;
                m[k] -= STEP;
                (p, m)
            };
            set_weights(&mut perturbed[li], wp, bias.clone());
            let lp = ref_loss(&input64, shape, &perturbed, t, labels);
            set_weights(&mut perturbed[li], wm, bias.clone());
            let lm = ref_loss(&input64, shape, &perturbed, t, labels);
            check_close(
                *analytic as f64,
                (lp - lm) / (2.0 * STEP),
                &format!("layer {li} weight[{k}]"),
            );
        }
        for (k, analytic) in gb.iter().enumerate() {
            let mut perturbed = layers.to_vec();
            let (bp, bm) = {
                let mut p = bias.clone();
                let mut m = bias.clone();
                p[k] += STEP;
                m[k] -= STEP;
                (p, m)
            };
            set_weights(&mut perturbed[li], weights.clone(), bp);
            let lp = ref_loss(&input64, shape, &perturbed, t, labels);
            set_weights(&mut perturbed[li], weights.clone(), bm);
            let lm = ref_loss(&input64, shape, &perturbed, t, labels);
            check_close(
                *analytic as f64,
                (lp - lm) / (2.0 * STEP),
                &format!("layer {li} bias[{k}]"),
            );
        }
        param_layer += 1;
    }
}

pub fn set_weights(layer: &mut RefLayer, w: Vec<f64>, b: Vec<f64>) {
    match layer {
        RefLayer::Conv { weights, bias, .. } | RefLayer::Dense { weights, bias, .. } => {
            *weights = w;
            *bias = b;
        }
        _ => unreachable!(),
    }
}

pub fn random_probability_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Random conv/pool/dense/softmax stack on a 6x6 single-channel input.
pub fn random_stack(rng: &mut ChaCha8Rng) -> (Vec<RefLayer>, usize) {
    let mut layers = Vec::new();
    let mut shape = (1usize, 6usize, 6usize);
    if rng.gen_bool(0.7) {
        let filters = rng.gen_range(1..=3);
        let same = rng.gen_bool(0.5);
        let kernel = 3;
        let cin = shape.0;
        let n = filters * cin * kernel * kernel;
        layers.push(RefLayer::Conv {
            filters,
            kernel,
            same,
            weights: (0..n).map(|_| rng.gen_range(-0.7..0.7)).collect(),
            bias: (0..filters).map(|_| rng.gen_range(-0.2..0.2)).collect(),
        });
        shape = if same {
            (filters, shape.1, shape.2)
        } else {
            (filters, shape.1 - 2, shape.2 - 2)
        };
        if shape.1.is_multiple_of(2) && rng.gen_bool(0.5) {
            layers.push(RefLayer::Pool);
            shape = (shape.0, shape.1 / 2, shape.2 / 2);
        }
    }
    let mut fan_in = shape.0 * shape.1 * shape.2;
    if rng.gen_bool(0.8) {
        let units = rng.gen_range(3..=8);
        layers.push(RefLayer::Dense {
            units,
            relu: true,
            weights: (0..fan_in * units).map(|_| rng.gen_range(-0.7..0.7)).collect(),
            bias: (0..units).map(|_| rng.gen_range(-0.2..0.2)).collect(),
        });
        fan_in = units;
    }
    if rng.gen_bool(0.3) {
        layers.push(RefLayer::Relu);
    }
    let classes = rng.gen_range(2..=5);
    layers.push(RefLayer::Dense {
        units: classes,
        relu: false,
        weights: (0..fan_in * classes)
            .map(|_| rng.gen_range(-0.7..0.7))
            .collect(),
        bias: (0..classes).map(|_| rng.gen_range(-0.2..0.2)).collect(),
    });
    (layers, classes)
}

pub fn run_random_graphs(count: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..count {
        let (layers, classes) = random_stack(&mut rng);
        let input: Vec<f32> = (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels = random_probability_vector(&mut rng, classes);
        let t = [0.5, 1.0, 2.0, 5.0][rng.gen_range(0..4)];
        let _ = case;
        gradcheck(&input, (1, 6, 6), &layers, t, &labels, 1e-4);
    }
}

