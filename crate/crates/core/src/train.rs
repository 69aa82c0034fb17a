//! Mini-batch SGD with momentum, the hard- and soft-label cross-entropy
//! objectives, and the four-step defensive-distillation pipeline: train a
//! teacher at temperature T, relabel the training set with its soft
//! predictions, then train a fresh student of the same architecture at the
//! same T on those soft labels. Evaluation always runs at temperature 1.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::Graph;
use crate::nn::{Architecture, ForwardMode, LayerKind, Model};
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Step size at temperature 1. The effective rate is scaled by the
    /// training temperature to cancel the softmax's 1/T gradient factor.
    pub learning_rate: f32,
    /// (multiplier, every-n-epochs) applied to the learning rate.
    pub lr_decay: Option<(f32, usize)>,
    pub momentum: f32,
    pub momentum_decay: Option<(f32, usize)>,
    pub batch_size: usize,
    pub epochs: usize,
    /// Dropout rate applied to dense-relu layers during training.
    pub dropout_rate: f32,
    /// Softmax temperature used while training (and for soft-label generation).
    pub temperature: f32,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            lr_decay: None,
            momentum: 0.5,
            momentum_decay: None,
            batch_size: 128,
            epochs: 20,
            dropout_rate: 0.5,
            temperature: 1.0,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("momentum must be in [0,1)".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument("dropout_rate must be in [0,1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::InvalidArgument("temperature must be > 0".into()));
        }
        Ok(())
    }
}

/// Samples paired with probability-vector labels. Hard labels are indicator
/// vectors; soft labels are arbitrary probability vectors.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<Vec<f32>>,
}

impl LabeledDataset {
    pub fn new(inputs: Vec<Tensor>, labels: Vec<Vec<f32>>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::CountMismatch {
                images: inputs.len(),
                labels: labels.len(),
            });
        }
        for l in &labels {
            validate_probability_vector(l)?;
        }
        Ok(LabeledDataset { inputs, labels })
    }

    pub fn from_hard_labels(
        inputs: Vec<Tensor>,
        class_indices: &[usize],
        class_count: usize,
    ) -> Result<Self> {
        let labels = class_indices
            .iter()
            .map(|&c| {
                if c >= class_count {
                    return Err(Error::InvalidArgument(format!(
                        "label {c} out of range for {class_count} classes"
                    )));
                }
                let mut v = vec![0.0; class_count];
                v[c] = 1.0;
                Ok(v)
            })
            .collect::<Result<Vec<_>>>()?;
        LabeledDataset::new(inputs, labels)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// True when every label is an indicator vector.
    pub fn has_hard_labels(&self) -> bool {
        self.labels.iter().all(|l| {
            l.iter().filter(|&&v| v != 0.0).count() == 1
                && l.iter().any(|&v| (v - 1.0).abs() < 1e-6)
        })
    }

    /// Class index of each label's largest component.
    pub fn hard_label_indices(&self) -> Vec<usize> {
        self.labels
            .iter()
            .map(|l| {
                let mut best = 0;
                for (i, &v) in l.iter().enumerate() {
                    if v > l[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

fn validate_probability_vector(l: &[f32]) -> Result<()> {
    if l.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidArgument(
            "label has a negative component".into(),
        ));
    }
    let s: f32 = l.iter().sum();
    if (s - 1.0).abs() > 1e-5 {
        return Err(Error::InvalidArgument(format!(
            "label sums to {s}, expected 1"
        )));
    }
    Ok(())
}

/// Mean cross-entropy of batched probability predictions against probability
/// labels: -(1/B) sum_X sum_i label_i(X) log(max(pred_i(X), 1e-12)).
pub fn cross_entropy_loss(predictions: &[Vec<f32>], labels: &[Vec<f32>]) -> Result<f32> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "batch sizes differ or empty: {} predictions, {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut acc = 0.0f64;
    for (p, y) in predictions.iter().zip(labels) {
        if p.len() != y.len() {
            return Err(Error::shape(
                "cross_entropy_loss",
                format!("{}", y.len()),
                format!("{}", p.len()),
            ));
        }
        validate_probability_vector(y)?;
        for (&pi, &yi) in p.iter().zip(y) {
            if yi != 0.0 {
                acc -= yi as f64 * (pi as f64).max(1e-12).ln();
            }
        }
    }
    Ok((acc / predictions.len() as f64) as f32)
}

/// Returns (cross_entropy, entropy, kl) in nats for one (label, prediction)
/// pair; cross_entropy = entropy + kl, kl >= 0.
pub fn kl_decomposition_check(soft_label: &[f32], prediction: &[f32]) -> Result<(f64, f64, f64)> {
    if soft_label.len() != prediction.len() {
        return Err(Error::shape(
            "kl_decomposition_check",
            format!("{}", soft_label.len()),
            format!("{}", prediction.len()),
        ));
    }
    validate_probability_vector(soft_label)?;
    validate_probability_vector(prediction)?;
    let mut ce = 0.0f64;
    let mut h = 0.0f64;
    for (&p, &q) in soft_label.iter().zip(prediction) {
        if p != 0.0 {
            let p = p as f64;
            ce -= p * (q as f64).max(1e-12).ln();
            h -= p * p.ln();
        }
    }
    Ok((ce, h, ce - h))
}

#[derive(Debug, Clone)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    /// Test accuracy at temperature 1, when an eval set was supplied.
    pub test_accuracy: Option<f64>,
}

/// Mini-batch SGD with classical heavy-ball momentum:
/// v <- m*v - lr*g; theta <- theta + v. Fully deterministic given the seed
/// (initialization, shuffling, and dropout masks all derive from it).
pub fn train(
    arch: Architecture,
    dataset: &LabeledDataset,
    eval: Option<&LabeledDataset>,
    config: &TrainConfig,
) -> Result<(Model, Vec<EpochMetrics>)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    // The config's dropout rate governs the dense layers.
    let mut arch = arch;
    for layer in &mut arch.layers {
        if matches!(layer.kind, LayerKind::DenseRelu { .. }) {
            layer.dropout_rate = config.dropout_rate;
        }
    }
    let mut model = Model::init(arch, config.temperature, config.rng_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed.wrapping_add(1));
    let mut velocity: Vec<Tensor> = model
        .params
        .iter()
        .map(|p| Tensor::zeros(p.shape().to_vec()))
        .collect();
    let n = dataset.len();
    let class_count = model.class_count();
    // The softmax's divide-by-T scales every logit gradient by 1/T, which
    // starves training at high temperature; compensate so learning_rate
    // keeps its temperature-1 meaning at any T.
    let mut lr = config.learning_rate * config.temperature;
    let mut momentum = config.momentum;
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..config.epochs {
        if epoch > 0 {
            if let Some((mult, every)) = config.lr_decay {
                if epoch % every == 0 {
                    lr *= mult;
                }
            }
            if let Some((mult, every)) = config.momentum_decay {
                if epoch % every == 0 {
                    momentum *= mult;
                }
            }
        }
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let b = chunk.len();
            let mut xdata = Vec::with_capacity(b * model.arch.input_len());
            let mut ydata = Vec::with_capacity(b * class_count);
            for &i in chunk {
                xdata.extend_from_slice(dataset.inputs[i].data());
                ydata.extend_from_slice(&dataset.labels[i]);
            }
            let mut xshape = vec![b];
            xshape.extend_from_slice(&model.arch.input_shape);
            let x = Tensor::new(xshape, xdata)?;
            let y = Tensor::new(vec![b, class_count], ydata)?;

            let mut g = Graph::new();
            let pass = model.forward(
                &mut g,
                x,
                config.temperature,
                ForwardMode::Train { rng: &mut rng },
            )?;
            let loss = g.cross_entropy(pass.probabilities, y)?;
            let loss_value = g.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    batch: batch_idx,
                });
            }
            epoch_loss += loss_value as f64;
            batches += 1;

            let grads = g.backward(loss, None)?;
            for (k, &pid) in pass.params.iter().enumerate() {
                if let Some(grad) = grads.get(pid) {
                    let v = velocity[k].data_mut();
                    let p = model.params[k].data_mut();
                    for ((vj, pj), &gj) in v.iter_mut().zip(p.iter_mut()).zip(grad.data()) {
                        *vj = momentum * *vj - lr * gj;
                        *pj += *vj;
                    }
                }
            }
        }
        let test_accuracy = match eval {
            Some(ds) => Some(dataset_accuracy(&model, ds)?),
            None => None,
        };
        metrics.push(EpochMetrics {
            epoch,
            train_loss: epoch_loss / batches.max(1) as f64,
            test_accuracy,
        });
    }
    Ok((model, metrics))
}

/// Fraction of samples whose argmax prediction at temperature 1 matches the
/// label's argmax.
pub fn dataset_accuracy(model: &Model, ds: &LabeledDataset) -> Result<f64> {
    let truth = ds.hard_label_indices();
    let mut hits = 0usize;
    for (x, &t) in ds.inputs.iter().zip(&truth) {
        let p = model.predict(x, Some(1.0))?;
        if p.argmax() == t {
            hits += 1;
        }
    }
    Ok(hits as f64 / ds.len() as f64)
}

/// Step 3 of the pipeline: relabel the dataset with the teacher's
/// probability vectors evaluated at the teacher's training temperature.
pub fn soft_label_dataset(teacher: &Model, dataset: &LabeledDataset) -> Result<LabeledDataset> {
    let mut labels = Vec::with_capacity(dataset.len());
    for x in &dataset.inputs {
        let p = teacher.predict(x, None)?;
        labels.push(p.into_data());
    }
    LabeledDataset::new(dataset.inputs.clone(), labels)
}

#[derive(Debug)]
pub struct DistillOutcome {
    pub teacher: Model,
    pub student: Model,
    pub teacher_metrics: Vec<EpochMetrics>,
    pub student_metrics: Vec<EpochMetrics>,
}

/// The four-step pipeline: train teacher F at temperature T on hard labels,
/// relabel with its soft predictions, train a freshly initialized student F^d
/// of identical architecture at the same T on the soft labels.
pub fn distill(
    arch: Architecture,
    dataset: &LabeledDataset,
    eval: Option<&LabeledDataset>,
    config: &TrainConfig,
) -> Result<DistillOutcome> {
    if !dataset.has_hard_labels() {
        return Err(Error::InvalidArgument(
            "distill requires hard indicator labels".into(),
        ));
    }
    let (teacher, teacher_metrics) = train(arch.clone(), dataset, eval, config)?;
    let soft = soft_label_dataset(&teacher, dataset)?;
    let mut student_config = config.clone();
    // Fresh initialization with a derived seed so teacher and student differ.
    student_config.rng_seed = config.rng_seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
    let (student, student_metrics) = train(arch, &soft, eval, &student_config)?;
    Ok(DistillOutcome {
        teacher,
        student,
        teacher_metrics,
        student_metrics,
    })
}
