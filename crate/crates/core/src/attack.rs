//! Adversarial sample crafting against a frozen model, always evaluated at
//! temperature 1: the iterative saliency-map attack that drives a few
//! features to an extreme value (JSMA), and the single-step fast gradient
//! sign method. Neither mutates the model or the dataset.

use crate::nn::Model;
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaliencyVariant {
    /// Score feature pairs (the default crafting mode).
    PixelPair,
    /// Score single features; used by the brute-force oracle and speed tests.
    SingleFeature,
}

#[derive(Debug, Clone)]
pub struct AttackConfig {
    /// Feature-count budget; at most this many features may be perturbed.
    pub max_features: usize,
    /// Value perturbed features are set to (input-range max for MNIST).
    pub feature_value: f32,
    pub target_class: usize,
    pub variant: SaliencyVariant,
}

impl AttackConfig {
    pub fn new(target_class: usize, max_features: usize) -> Self {
        AttackConfig {
            max_features,
            feature_value: 1.0,
            target_class,
            variant: SaliencyVariant::PixelPair,
        }
    }
}

/// Default budget: 14.3% of the input features, rounded up (the 112-of-784
/// cap generalized to arbitrary input sizes).
pub fn default_budget(input_len: usize) -> usize {
    (0.143 * input_len as f64).ceil() as usize
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub success: bool,
    /// Count of features where the perturbation is nonzero.
    pub features_changed: usize,
    /// delta-X, same shape as the input; zero outside the changed features.
    pub perturbation: Tensor,
    pub final_class: usize,
    /// Saliency iterations performed.
    pub queries: usize,
}

/// One saliency step: pick the best unexhausted feature group for the target
/// class from the Jacobian. Returns the chosen feature indices.
///
/// Per-feature scores: alpha_j = dF_target/dX_j, beta_j = sum over other
/// classes of dF_i/dX_j. A group is admissible when its alpha sum is positive
/// and its beta sum negative; the score is alpha_sum * |beta_sum|. When no
/// group is admissible the raw score maximum is taken instead.
pub fn select_features(
    jacobian: &Tensor,
    target: usize,
    exhausted: &[bool],
    variant: SaliencyVariant,
) -> Option<Vec<usize>> {
    let n = jacobian.shape()[0];
    let m = jacobian.shape()[1];
    let mut alpha = vec![0.0f64; m];
    let mut beta = vec![0.0f64; m];
    for i in 0..n {
        for j in 0..m {
            let v = jacobian.data()[i * m + j] as f64;
            if i == target {
                alpha[j] += v;
            } else {
                beta[j] += v;
            }
        }
    }
    let candidates: Vec<usize> = (0..m).filter(|&j| !exhausted[j]).collect();
    let mut best_admissible: Option<(f64, Vec<usize>)> = None;
    let mut best_raw: Option<(f64, Vec<usize>)> = None;
    let mut consider = |a: f64, b: f64, group: Vec<usize>| {
        let score = a * b.abs();
        if a > 0.0 && b < 0.0
            && best_admissible.as_ref().is_none_or(|(s, _)| score > *s) {
                best_admissible = Some((score, group.clone()));
            }
        if best_raw.as_ref().is_none_or(|(s, _)| score > *s) {
            best_raw = Some((score, group));
        }
    };
    match variant {
        SaliencyVariant::SingleFeature => {
            for &j in &candidates {
                consider(alpha[j], beta[j], vec![j]);
            }
        }
        SaliencyVariant::PixelPair => {
            for (idx, &p) in candidates.iter().enumerate() {
                for &q in &candidates[idx + 1..] {
                    consider(alpha[p] + alpha[q], beta[p] + beta[q], vec![p, q]);
                }
            }
        }
    }
    best_admissible.or(best_raw).map(|(_, g)| g)
}

/// Iterative saliency-map attack. Evaluates the model at temperature 1,
/// perturbs the winning feature group to `feature_value` each iteration, and
/// never touches the same feature twice. Returns a faithful result on both
/// success and budget exhaustion.
pub fn jsma_attack(model: &Model, x: &Tensor, config: &AttackConfig) -> Result<AttackResult> {
    let n = model.class_count();
    if config.target_class >= n {
        return Err(Error::InvalidArgument(format!(
            "target class {} out of range for {n} classes",
            config.target_class
        )));
    }
    let m = model.arch.input_len();
    if config.max_features > m {
        return Err(Error::InvalidArgument(format!(
            "max_features {} exceeds input dimension {m}",
            config.max_features
        )));
    }
    let group_size = match config.variant {
        SaliencyVariant::PixelPair => 2,
        SaliencyVariant::SingleFeature => 1,
    };

    let mut current = x.clone();
    let mut exhausted = vec![false; m];
    let mut exhausted_count = 0usize;
    let mut queries = 0usize;

    let mut prediction = model.predict(&current, Some(1.0))?;
    loop {
        let final_class = prediction.argmax();
        if final_class == config.target_class {
            return Ok(finish(x, &current, true, final_class, queries));
        }
        if exhausted_count + group_size > config.max_features {
            return Ok(finish(x, &current, false, final_class, queries));
        }
        let jacobian = model.input_jacobian(&current, 1.0)?;
        let Some(group) = select_features(&jacobian, config.target_class, &exhausted, config.variant)
        else {
            // candidate set emptied before the budget ran out
            return Ok(finish(x, &current, false, final_class, queries));
        };
        let mut data = current.into_data();
        for &j in &group {
            data[j] = config.feature_value;
            exhausted[j] = true;
            exhausted_count += 1;
        }
        current = Tensor::new(x.shape().to_vec(), data)?;
        queries += 1;
        prediction = model.predict(&current, Some(1.0))?;
    }
}

fn finish(
    original: &Tensor,
    current: &Tensor,
    success: bool,
    final_class: usize,
    queries: usize,
) -> AttackResult {
    let delta: Vec<f32> = current
        .data()
        .iter()
        .zip(original.data())
        .map(|(&c, &o)| c - o)
        .collect();
    let features_changed = delta.iter().filter(|&&d| d != 0.0).count();
    AttackResult {
        success,
        features_changed,
        perturbation: Tensor::new(original.shape().to_vec(), delta).expect("delta shape"),
        final_class,
        queries,
    }
}

/// Single-step gradient-sign attack: X* = clamp(X + eps * sign(dLoss/dX)).
/// Success means the argmax prediction of X* differs from `true_label`.
/// sign(0) = 0. Inputs are clamped to [0, 1].
pub fn fgsm_attack(
    model: &Model,
    x: &Tensor,
    true_label: usize,
    epsilon: f32,
) -> Result<AttackResult> {
    let n = model.class_count();
    if true_label >= n {
        return Err(Error::InvalidArgument(format!(
            "true label {true_label} out of range for {n} classes"
        )));
    }
    if epsilon < 0.0 {
        return Err(Error::InvalidArgument("epsilon must be >= 0".into()));
    }
    let grad = loss_input_gradient(model, x, true_label)?;
    let perturbed: Vec<f32> = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| {
            let s = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            (v + epsilon * s).clamp(0.0, 1.0)
        })
        .collect();
    let adversarial = Tensor::new(x.shape().to_vec(), perturbed)?;
    let final_class = model.predict(&adversarial, Some(1.0))?.argmax();
    let mut result = finish(x, &adversarial, final_class != true_label, final_class, 1);
    result.queries = 1;
    Ok(result)
}

/// dLoss/dX for the cross-entropy of the model's temperature-1 prediction
/// against the one-hot `true_label`.
fn loss_input_gradient(model: &Model, x: &Tensor, true_label: usize) -> Result<Tensor> {
    use crate::graph::Graph;
    use crate::nn::ForwardMode;
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let batch = x.reshaped(shape)?;
    let mut g = Graph::new();
    let pass = model.forward(&mut g, batch, 1.0, ForwardMode::Inference)?;
    let n = model.class_count();
    let mut onehot = vec![0.0f32; n];
    onehot[true_label] = 1.0;
    let loss = g.cross_entropy(pass.probabilities, Tensor::new(vec![1, n], onehot)?)?;
    let grads = g.backward(loss, None)?;
    let gx = grads
        .get(pass.input)
        .ok_or_else(|| Error::InvalidArgument("input did not receive a gradient".into()))?;
    gx.reshaped(x.shape().to_vec())
}

/// One row of a campaign: a (sample, target) attack instance.
#[derive(Debug, Clone)]
pub struct CampaignRecord {
    pub sample_id: usize,
    pub source_class: usize,
    pub target_class: usize,
    pub result: AttackResult,
}

#[derive(Debug, Clone)]
pub struct CampaignSummary {
    pub total: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_features_changed: f64,
}

pub fn summarize(records: &[CampaignRecord]) -> CampaignSummary {
    let total = records.len();
    let successes = records.iter().filter(|r| r.result.success).count();
    let changed: usize = records
        .iter()
        .filter(|r| r.result.success)
        .map(|r| r.result.features_changed)
        .sum();
    CampaignSummary {
        total,
        successes,
        success_rate: if total == 0 {
            0.0
        } else {
            successes as f64 / total as f64
        },
        mean_features_changed: if successes == 0 {
            0.0
        } else {
            changed as f64 / successes as f64
        },
    }
}

/// Attacks every sample toward each of the N-1 classes distinct from its
/// source class (the model's own temperature-1 prediction), in deterministic
/// sample-major, target-ascending order. Every reported success is
/// re-verified against the model before being returned.
pub fn attack_campaign(
    model: &Model,
    samples: &[Tensor],
    budget: usize,
) -> Result<Vec<CampaignRecord>> {
    let n = model.class_count();
    let mut records = Vec::with_capacity(samples.len() * (n - 1));
    for (sample_id, x) in samples.iter().enumerate() {
        let source_class = model.predict(x, Some(1.0))?.argmax();
        for target in 0..n {
            if target == source_class {
                continue;
            }
            let config = AttackConfig::new(target, budget);
            let result = jsma_attack(model, x, &config)?;
            if result.success {
                let mut data = x.data().to_vec();
                for (d, &p) in data.iter_mut().zip(result.perturbation.data()) {
                    *d += p;
                }
                let adv = Tensor::new(x.shape().to_vec(), data)?;
                let verified = model.predict(&adv, Some(1.0))?.argmax();
                if verified != target {
                    return Err(Error::InvalidArgument(format!(
                        "post-hoc verification failed: sample {sample_id} target {target} \
                         classified as {verified}"
                    )));
                }
            }
            records.push(CampaignRecord {
                sample_id,
                source_class,
                target_class: target,
                result,
            });
        }
    }
    Ok(records)
}
