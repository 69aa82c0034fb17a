//! Classifier models: layer stacks ending in a temperature softmax, forward
//! inference producing logits Z(X) and probabilities F(X), and the Jacobian
//! of F with respect to the input.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, NodeId, Padding};
use crate::{Error, Result, Tensor};

const MODEL_MAGIC: &[u8; 4] = b"DDM1";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    ConvRelu {
        filters: usize,
        kernel: usize,
        padding: Padding,
    },
    MaxPool,
    DenseRelu {
        units: usize,
    },
    DenseLinear {
        units: usize,
    },
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Training-time dropout on the layer output; nonzero only on dense layers.
    pub dropout_rate: f32,
}

impl LayerSpec {
    pub fn plain(kind: LayerKind) -> Self {
        LayerSpec {
            kind,
            dropout_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub name: String,
    /// Per-sample input shape, e.g. [1,28,28] for conv stacks or [784] for MLPs.
    pub input_shape: Vec<usize>,
    pub class_count: usize,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// conv-relu(8,3x3) -> pool -> conv-relu(16,3x3) -> pool -> dense-relu(64)
    /// -> dense-relu(64) -> softmax(10), dropout 0.5 on the dense layers.
    pub fn mnist_small() -> Self {
        let conv = |filters| {
            LayerSpec::plain(LayerKind::ConvRelu {
                filters,
                kernel: 3,
                padding: Padding::Same,
            })
        };
        let dense = |units| LayerSpec {
            kind: LayerKind::DenseRelu { units },
            dropout_rate: 0.5,
        };
        Architecture {
            name: "mnist-small".into(),
            input_shape: vec![1, 28, 28],
            class_count: 10,
            layers: vec![
                conv(8),
                LayerSpec::plain(LayerKind::MaxPool),
                conv(16),
                LayerSpec::plain(LayerKind::MaxPool),
                dense(64),
                dense(64),
                LayerSpec::plain(LayerKind::DenseLinear { units: 10 }),
                LayerSpec::plain(LayerKind::Softmax),
            ],
        }
    }

    /// dense-relu(128) -> dense-relu(128) -> softmax(10), dropout 0.5.
    pub fn mlp_tiny() -> Self {
        let dense = |units| LayerSpec {
            kind: LayerKind::DenseRelu { units },
            dropout_rate: 0.5,
        };
        Architecture {
            name: "mlp-tiny".into(),
            input_shape: vec![784],
            class_count: 10,
            layers: vec![
                dense(128),
                dense(128),
                LayerSpec::plain(LayerKind::DenseLinear { units: 10 }),
                LayerSpec::plain(LayerKind::Softmax),
            ],
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "mnist-small" => Ok(Self::mnist_small()),
            "mlp-tiny" => Ok(Self::mlp_tiny()),
            other => Err(Error::InvalidArgument(format!(
                "unknown architecture '{other}' (expected mnist-small or mlp-tiny)"
            ))),
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let softmax_count = self
            .layers
            .iter()
            .filter(|l| l.kind == LayerKind::Softmax)
            .count();
        if softmax_count != 1 || self.layers.last().map(|l| &l.kind) != Some(&LayerKind::Softmax)
        {
            return Err(Error::InvalidArgument(
                "architecture must end with exactly one softmax layer".into(),
            ));
        }
        for l in &self.layers {
            if !(0.0..1.0).contains(&l.dropout_rate) {
                return Err(Error::InvalidArgument(format!(
                    "dropout rate {} outside [0,1)",
                    l.dropout_rate
                )));
            }
            let dense = matches!(
                l.kind,
                LayerKind::DenseRelu { .. } | LayerKind::DenseLinear { .. }
            );
            if l.dropout_rate != 0.0 && !dense {
                return Err(Error::InvalidArgument(
                    "dropout is only allowed on dense layers".into(),
                ));
            }
        }
        Ok(())
    }
}

/// How the forward pass is built: plain inference, or training with seeded
/// dropout masks on dense layers.
pub enum ForwardMode<'a> {
    Inference,
    Train { rng: &'a mut ChaCha8Rng },
}

/// Node handles for one forward pass through a [`Model`].
pub struct ForwardPass {
    pub input: NodeId,
    pub logits: NodeId,
    pub probabilities: NodeId,
    pub params: Vec<NodeId>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub arch: Architecture,
    /// Weight/bias tensors in layer order (weights then bias per parameterized layer).
    pub params: Vec<Tensor>,
    /// Training temperature; evaluation passes an override of 1.
    pub temperature: f32,
    pub seed: u64,
}

impl Model {
    /// Glorot-uniform initialization in +-sqrt(6/(fan_in+fan_out)), seeded.
    pub fn init(arch: Architecture, temperature: f32, seed: u64) -> Result<Model> {
        arch.validate()?;
        if temperature <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut shape = arch.input_shape.clone();
        for layer in &arch.layers {
            match layer.kind {
                LayerKind::ConvRelu {
                    filters,
                    kernel,
                    padding,
                } => {
                    let cin = shape[0];
                    let fan_in = cin * kernel * kernel;
                    let fan_out = filters * kernel * kernel;
                    let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
                    let n = filters * cin * kernel * kernel;
                    let w: Vec<f32> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                    params.push(Tensor::new(vec![filters, cin, kernel, kernel], w)?);
                    params.push(Tensor::zeros(vec![filters]));
                    let (h, w2) = (shape[1], shape[2]);
                    let (oh, ow) = match padding {
                        Padding::Same => (h, w2),
                        Padding::Valid => (h - kernel + 1, w2 - kernel + 1),
                    };
                    shape = vec![filters, oh, ow];
                }
                LayerKind::MaxPool => {
                    shape = vec![shape[0], shape[1] / 2, shape[2] / 2];
                }
                LayerKind::DenseRelu { units } | LayerKind::DenseLinear { units } => {
                    let fan_in: usize = shape.iter().product();
                    let bound = (6.0 / (fan_in + units) as f32).sqrt();
                    let w: Vec<f32> = (0..fan_in * units)
                        .map(|_| rng.gen_range(-bound..bound))
                        .collect();
                    params.push(Tensor::new(vec![fan_in, units], w)?);
                    params.push(Tensor::zeros(vec![units]));
                    shape = vec![units];
                }
                LayerKind::Softmax => {}
            }
        }
        Ok(Model {
            arch,
            params,
            temperature,
            seed,
        })
    }

    pub fn class_count(&self) -> usize {
        self.arch.class_count
    }

    /// Builds the full forward pass for a batch `x` of shape [B, ...input_shape]
    /// into `g`, at the given softmax temperature.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Tensor,
        temperature: f32,
        mode: ForwardMode,
    ) -> Result<ForwardPass> {
        if temperature <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let expected: Vec<usize> = self.arch.input_shape.clone();
        if x.shape().len() != expected.len() + 1 || x.shape()[1..] != expected[..] {
            return Err(Error::shape(
                "forward",
                format!("[B, {expected:?}]"),
                format!("{:?}", x.shape()),
            ));
        }
        let batch = x.shape()[0];
        let input = g.input(x, true);
        let mut cur = input;
        let mut param_ids = Vec::new();
        let mut next_param = 0usize;
        let mut dropout_rng = match mode {
            ForwardMode::Inference => None,
            ForwardMode::Train { rng } => Some(rng),
        };
        let mut logits = None;
        for layer in &self.arch.layers {
            match layer.kind {
                LayerKind::ConvRelu { padding, .. } => {
                    let w = g.param(self.params[next_param].clone());
                    let b = g.param(self.params[next_param + 1].clone());
                    next_param += 2;
                    param_ids.push(w);
                    param_ids.push(b);
                    let c = g.conv2d(cur, w, padding)?;
                    let c = g.add_bias(c, b)?;
                    cur = g.relu(c)?;
                }
                LayerKind::MaxPool => {
                    cur = g.maxpool2x2(cur)?;
                }
                LayerKind::DenseRelu { units } | LayerKind::DenseLinear { units } => {
                    if g.value(cur).shape().len() != 2 {
                        let flat = g.value(cur).len() / batch;
                        cur = g.reshape(cur, vec![batch, flat])?;
                    }
                    let w = g.param(self.params[next_param].clone());
                    let b = g.param(self.params[next_param + 1].clone());
                    next_param += 2;
                    param_ids.push(w);
                    param_ids.push(b);
                    let y = g.matmul(cur, w)?;
                    let y = g.add_bias(y, b)?;
                    if matches!(layer.kind, LayerKind::DenseRelu { .. }) {
                        cur = g.relu(y)?;
                        if layer.dropout_rate > 0.0 {
                            if let Some(rng) = dropout_rng.as_deref_mut() {
                                let keep = 1.0 - layer.dropout_rate;
                                let mask: Vec<f32> = (0..batch * units)
                                    .map(|_| {
                                        if rng.gen::<f32>() < layer.dropout_rate {
                                            0.0
                                        } else {
                                            1.0 / keep
                                        }
                                    })
                                    .collect();
                                cur = g.dropout(cur, mask)?;
                            }
                        }
                    } else {
                        cur = y;
                    }
                }
                LayerKind::Softmax => {
                    logits = Some(cur);
                    let scaled = g.scalar_div(cur, temperature)?;
                    cur = g.softmax(scaled)?;
                }
            }
        }
        Ok(ForwardPass {
            input,
            logits: logits.expect("validated architecture has a softmax"),
            probabilities: cur,
            params: param_ids,
        })
    }

    fn single_to_batch(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() != &self.arch.input_shape[..] {
            return Err(Error::shape(
                "model input",
                format!("{:?}", self.arch.input_shape),
                format!("{:?}", x.shape()),
            ));
        }
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        x.reshaped(shape)
    }

    /// Pre-softmax outputs Z(X) for one sample; independent of temperature.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let batch = self.single_to_batch(x)?;
        let mut g = Graph::new();
        let pass = self.forward(&mut g, batch, 1.0, ForwardMode::Inference)?;
        g.value(pass.logits).reshaped(vec![self.class_count()])
    }

    /// Probability vector F(X) at the model's training temperature, or at
    /// `temperature_override` when given (pass 1 for test-time evaluation).
    pub fn predict(&self, x: &Tensor, temperature_override: Option<f32>) -> Result<Tensor> {
        let t = temperature_override.unwrap_or(self.temperature);
        let batch = self.single_to_batch(x)?;
        let mut g = Graph::new();
        let pass = self.forward(&mut g, batch, t, ForwardMode::Inference)?;
        g.value(pass.probabilities)
            .reshaped(vec![self.class_count()])
    }

    /// Batched probabilities for [B, ...input_shape] at the given temperature.
    pub fn predict_batch(&self, x: &Tensor, temperature: f32) -> Result<Tensor> {
        let mut g = Graph::new();
        let pass = self.forward(&mut g, x.clone(), temperature, ForwardMode::Inference)?;
        Ok(g.value(pass.probabilities).clone())
    }

    /// N x M matrix of dF_i/dX_j at the given temperature, one backward pass
    /// per output component.
    pub fn input_jacobian(&self, x: &Tensor, temperature: f32) -> Result<Tensor> {
        let n = self.class_count();
        let m = self.arch.input_len();
        let batch = self.single_to_batch(x)?;
        let mut g = Graph::new();
        let pass = self.forward(&mut g, batch, temperature, ForwardMode::Inference)?;
        let mut rows = Vec::with_capacity(n * m);
        for i in 0..n {
            let mut seed = vec![0.0f32; n];
            seed[i] = 1.0;
            let grads = g.backward(pass.probabilities, Some(Tensor::new(vec![1, n], seed)?))?;
            let gx = grads.get(pass.input).ok_or_else(|| {
                Error::InvalidArgument("input did not receive a gradient".into())
            })?;
            gx.check_finite("input_jacobian")?;
            rows.extend_from_slice(gx.data());
        }
        Tensor::new(vec![n, m], rows)
    }

    /// Mean |dF_i/dX_j| over all (i,j) at temperature 1.
    pub fn mean_abs_input_gradient(&self, x: &Tensor) -> Result<f32> {
        let j = self.input_jacobian(x, 1.0)?;
        let sum: f64 = j.data().iter().map(|&v| v.abs() as f64).sum();
        Ok((sum / j.len() as f64) as f32)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MODEL_MAGIC)?;
        w.write_u32::<LittleEndian>(MODEL_VERSION)?;
        let name = self.arch.name.as_bytes();
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name)?;
        w.write_u32::<LittleEndian>(self.arch.class_count as u32)?;
        w.write_u32::<LittleEndian>(self.arch.input_shape.len() as u32)?;
        for &d in &self.arch.input_shape {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        w.write_u32::<LittleEndian>(self.arch.layers.len() as u32)?;
        for layer in &self.arch.layers {
            match layer.kind {
                LayerKind::ConvRelu {
                    filters,
                    kernel,
                    padding,
                } => {
                    w.write_u8(0)?;
                    w.write_u32::<LittleEndian>(filters as u32)?;
                    w.write_u32::<LittleEndian>(kernel as u32)?;
                    w.write_u8(match padding {
                        Padding::Valid => 0,
                        Padding::Same => 1,
                    })?;
                }
                LayerKind::MaxPool => w.write_u8(1)?,
                LayerKind::DenseRelu { units } => {
                    w.write_u8(2)?;
                    w.write_u32::<LittleEndian>(units as u32)?;
                }
                LayerKind::DenseLinear { units } => {
                    w.write_u8(3)?;
                    w.write_u32::<LittleEndian>(units as u32)?;
                }
                LayerKind::Softmax => w.write_u8(4)?,
            }
            w.write_f32::<LittleEndian>(layer.dropout_rate)?;
        }
        w.write_f32::<LittleEndian>(self.temperature)?;
        w.write_u64::<LittleEndian>(self.seed)?;
        w.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for p in &self.params {
            w.write_u32::<LittleEndian>(p.shape().len() as u32)?;
            for &d in p.shape() {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            for &v in p.data() {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::BadModelFile(format!(
                "bad magic {magic:?} in {}",
                path.display()
            )));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != MODEL_VERSION {
            return Err(Error::BadModelFile(format!(
                "unsupported version {version}"
            )));
        }
        let name_len = r.read_u32::<LittleEndian>()? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::BadModelFile("architecture name is not utf8".into()))?;
        let class_count = r.read_u32::<LittleEndian>()? as usize;
        let ndim = r.read_u32::<LittleEndian>()? as usize;
        let mut input_shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            input_shape.push(r.read_u32::<LittleEndian>()? as usize);
        }
        let layer_count = r.read_u32::<LittleEndian>()? as usize;
        let mut layers = Vec::with_capacity(layer_count);
        for _ in 0..layer_count {
            let kind = match r.read_u8()? {
                0 => {
                    let filters = r.read_u32::<LittleEndian>()? as usize;
                    let kernel = r.read_u32::<LittleEndian>()? as usize;
                    let padding = match r.read_u8()? {
                        0 => Padding::Valid,
                        1 => Padding::Same,
                        p => {
                            return Err(Error::BadModelFile(format!("bad padding tag {p}")));
                        }
                    };
                    LayerKind::ConvRelu {
                        filters,
                        kernel,
                        padding,
                    }
                }
                1 => LayerKind::MaxPool,
                2 => LayerKind::DenseRelu {
                    units: r.read_u32::<LittleEndian>()? as usize,
                },
                3 => LayerKind::DenseLinear {
                    units: r.read_u32::<LittleEndian>()? as usize,
                },
                4 => LayerKind::Softmax,
                k => return Err(Error::BadModelFile(format!("bad layer tag {k}"))),
            };
            let dropout_rate = r.read_f32::<LittleEndian>()?;
            layers.push(LayerSpec { kind, dropout_rate });
        }
        let temperature = r.read_f32::<LittleEndian>()?;
        let seed = r.read_u64::<LittleEndian>()?;
        let param_count = r.read_u32::<LittleEndian>()? as usize;
        let mut params = Vec::with_capacity(param_count);
        for _ in 0..param_count {
            let ndim = r.read_u32::<LittleEndian>()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.read_u32::<LittleEndian>()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(r.read_f32::<LittleEndian>()?);
            }
            params.push(Tensor::new(shape, data)?);
        }
        let arch = Architecture {
            name,
            input_shape,
            class_count,
            layers,
        };
        arch.validate()?;
        Ok(Model {
            arch,
            params,
            temperature,
            seed,
        })
    }
}
