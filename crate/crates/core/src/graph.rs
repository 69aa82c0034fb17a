//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Values are computed eagerly as nodes are inserted; `backward` replays the
//! tape in reverse, accumulating gradients additively over fan-out. The op
//! vocabulary is exactly what small conv/dense classifiers need. No fusion,
//! no graph rewrites: correctness and determinism over speed.

use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Debug, Clone)]
enum Op {
    /// Leaf tensor; gradients are tracked when `differentiable` is set.
    Leaf { differentiable: bool },
    Relu {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    /// Row bias ([B,N]+[N]) or channel bias ([B,C,H,W]+[C]).
    AddBias {
        x: NodeId,
        bias: NodeId,
    },
    MatMul {
        x: NodeId,
        w: NodeId,
    },
    Conv2d {
        x: NodeId,
        filters: NodeId,
        padding: Padding,
    },
    MaxPool2x2 {
        x: NodeId,
        /// Flat input index of the winning element per output cell.
        argmax: Vec<usize>,
    },
    Reshape {
        x: NodeId,
    },
    ScalarDiv {
        x: NodeId,
        divisor: f32,
    },
    /// Row-wise stabilized softmax over the last axis of a [B,N] tensor.
    Softmax {
        x: NodeId,
    },
    /// Inverted dropout; mask entries are 0 or 1/(1-rate).
    Dropout {
        x: NodeId,
        mask: Vec<f32>,
    },
    /// Mean cross-entropy of probability rows against fixed label rows.
    CrossEntropy {
        predictions: NodeId,
        labels: Tensor,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients keyed by node id, produced by [`Graph::backward`].
pub struct GradientMap {
    grads: Vec<Option<Tensor>>,
}

impl GradientMap {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &str, op: Op, value: Tensor) -> Result<NodeId> {
        value.check_finite(name)?;
        Ok(self.push(op, value))
    }

    pub fn input(&mut self, t: Tensor, differentiable: bool) -> NodeId {
        self.push(Op::Leaf { differentiable }, t)
    }

    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push(
            Op::Leaf {
                differentiable: true,
            },
            t,
        )
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(
            Op::Leaf {
                differentiable: false,
            },
            t,
        )
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&a| a.max(0.0)).collect(),
        )?;
        self.push_checked("relu", Op::Relu { x }, out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?}", va.shape()),
                format!("{:?}", vb.shape()),
            ));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push_checked("add", Op::Add { a, b }, out)
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let bn = vb.len();
        let ok = match vx.shape() {
            [_, n] => *n == bn,
            [_, c, _, _] => *c == bn,
            _ => false,
        };
        if vb.shape().len() != 1 || !ok {
            return Err(Error::shape(
                "add_bias",
                format!("bias matching {:?}", vx.shape()),
                format!("{:?}", vb.shape()),
            ));
        }
        let mut data = vx.data().to_vec();
        match vx.shape() {
            [b, n] => {
                for row in 0..*b {
                    for j in 0..*n {
                        data[row * n + j] += vb.data()[j];
                    }
                }
            }
            [b, c, h, w] => {
                let plane = h * w;
                for bi in 0..*b {
                    for ci in 0..*c {
                        let base = (bi * c + ci) * plane;
                        for p in 0..plane {
                            data[base + p] += vb.data()[ci];
                        }
                    }
                }
            }
            _ => unreachable!(),
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        self.push_checked("add_bias", Op::AddBias { x, bias }, out)
    }

    /// [B,M] x [M,N] -> [B,N]. Accumulates in f64, rounds to f32.
    pub fn matmul(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (b, m) = match vx.shape() {
            &[b, m] => (b, m),
            s => return Err(Error::shape("matmul", "rank-2 lhs", format!("{s:?}"))),
        };
        let (m2, n) = match vw.shape() {
            &[m2, n] => (m2, n),
            s => return Err(Error::shape("matmul", "rank-2 rhs", format!("{s:?}"))),
        };
        if m != m2 {
            return Err(Error::shape(
                "matmul",
                format!("[{b},{m}] x [{m},*]"),
                format!("[{m2},{n}]"),
            ));
        }
        let mut data = vec![0.0f32; b * n];
        for i in 0..b {
            for j in 0..n {
                let mut acc = 0.0f64;
                for k in 0..m {
                    acc += vx.data()[i * m + k] as f64 * vw.data()[k * n + j] as f64;
                }
                data[i * n + j] = acc as f32;
            }
        }
        let out = Tensor::new(vec![b, n], data)?;
        self.push_checked("matmul", Op::MatMul { x, w }, out)
    }

    /// [B,Cin,H,W] * [Cout,Cin,kh,kw] -> [B,Cout,H',W'], stride 1.
    pub fn conv2d(&mut self, x: NodeId, filters: NodeId, padding: Padding) -> Result<NodeId> {
        let (vx, vf) = (self.value(x), self.value(filters));
        let [b, cin, h, w] = match vx.shape() {
            &[b, c, h, w] => [b, c, h, w],
            s => return Err(Error::shape("conv2d", "rank-4 input", format!("{s:?}"))),
        };
        let [cout, fcin, kh, kw] = match vf.shape() {
            &[a, b2, c, d] => [a, b2, c, d],
            s => return Err(Error::shape("conv2d", "rank-4 filters", format!("{s:?}"))),
        };
        if cin != fcin {
            return Err(Error::shape(
                "conv2d",
                format!("{cin} input channels"),
                format!("filters with {fcin} channels"),
            ));
        }
        let (pad_h, pad_w) = match padding {
            Padding::Valid => (0, 0),
            Padding::Same => ((kh - 1) / 2, (kw - 1) / 2),
        };
        let (oh, ow) = match padding {
            Padding::Valid => {
                if h < kh || w < kw {
                    return Err(Error::shape(
                        "conv2d",
                        format!("input at least {kh}x{kw}"),
                        format!("{h}x{w}"),
                    ));
                }
                (h - kh + 1, w - kw + 1)
            }
            Padding::Same => (h, w),
        };
        let mut data = vec![0.0f32; b * cout * oh * ow];
        for bi in 0..b {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0f64;
                        for ci in 0..cin {
                            for ky in 0..kh {
                                let iy = (oy + ky) as isize - pad_h as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox + kx) as isize - pad_w as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let xi = ((bi * cin + ci) * h + iy as usize) * w + ix as usize;
                                    let fi = ((co * cin + ci) * kh + ky) * kw + kx;
                                    acc += vx.data()[xi] as f64 * vf.data()[fi] as f64;
                                }
                            }
                        }
                        data[((bi * cout + co) * oh + oy) * ow + ox] = acc as f32;
                    }
                }
            }
        }
        let out = Tensor::new(vec![b, cout, oh, ow], data)?;
        self.push_checked("conv2d", Op::Conv2d { x, filters, padding }, out)
    }

    /// 2x2 max pooling, stride 2; spatial extents must be even. Ties route to
    /// the row-major earliest maximal element.
    pub fn maxpool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let [b, c, h, w] = match vx.shape() {
            &[b, c, h, w] => [b, c, h, w],
            s => return Err(Error::shape("maxpool2x2", "rank-4 input", format!("{s:?}"))),
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "maxpool2x2",
                "even spatial extents",
                format!("{h}x{w}"),
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut data = vec![0.0f32; b * c * oh * ow];
        let mut argmax = vec![0usize; b * c * oh * ow];
        for bi in 0..b {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best_idx = 0;
                        let mut best = f32::NEG_INFINITY;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let xi =
                                    ((bi * c + ci) * h + oy * 2 + dy) * w + ox * 2 + dx;
                                let v = vx.data()[xi];
                                if v > best {
                                    best = v;
                                    best_idx = xi;
                                }
                            }
                        }
                        let oi = ((bi * c + ci) * oh + oy) * ow + ox;
                        data[oi] = best;
                        argmax[oi] = best_idx;
                    }
                }
            }
        }
        let out = Tensor::new(vec![b, c, oh, ow], data)?;
        self.push_checked("maxpool2x2", Op::MaxPool2x2 { x, argmax }, out)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let out = self.value(x).reshaped(shape)?;
        self.push_checked("reshape", Op::Reshape { x }, out)
    }

    pub fn scalar_div(&mut self, x: NodeId, divisor: f32) -> Result<NodeId> {
        if divisor == 0.0 || !divisor.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "scalar_div: divisor must be finite and nonzero, got {divisor}"
            )));
        }
        let vx = self.value(x);
        let out = Tensor::new(
            vx.shape().to_vec(),
            vx.data().iter().map(|&a| a / divisor).collect(),
        )?;
        self.push_checked("scalar_div", Op::ScalarDiv { x, divisor }, out)
    }

    /// Row-wise softmax with max-logit subtraction.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let (b, n) = match vx.shape() {
            &[b, n] => (b, n),
            s => return Err(Error::shape("softmax", "rank-2 input", format!("{s:?}"))),
        };
        let mut data = vec![0.0f32; b * n];
        for row in 0..b {
            let r = &vx.data()[row * n..(row + 1) * n];
            let max = r.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for (j, &z) in r.iter().enumerate() {
                let e = ((z - max) as f64).exp();
                data[row * n + j] = e as f32;
                sum += e;
            }
            for j in 0..n {
                data[row * n + j] = (data[row * n + j] as f64 / sum) as f32;
            }
        }
        let out = Tensor::new(vec![b, n], data)?;
        self.push_checked("softmax", Op::Softmax { x }, out)
    }

    /// Inverted dropout with a caller-supplied mask of 0 / (1-rate) scaling.
    pub fn dropout(&mut self, x: NodeId, mask: Vec<f32>) -> Result<NodeId> {
        let vx = self.value(x);
        if mask.len() != vx.len() {
            return Err(Error::shape(
                "dropout",
                format!("mask of {} elements", vx.len()),
                format!("{}", mask.len()),
            ));
        }
        let data = vx
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        self.push_checked("dropout", Op::Dropout { x, mask }, out)
    }

    /// Mean cross-entropy over batch rows: -(1/B) sum_b sum_i y_bi log(p_bi),
    /// probabilities clamped to 1e-12 before the log.
    pub fn cross_entropy(&mut self, predictions: NodeId, labels: Tensor) -> Result<NodeId> {
        let vp = self.value(predictions);
        if vp.shape() != labels.shape() || vp.shape().len() != 2 {
            return Err(Error::shape(
                "cross_entropy",
                format!("{:?}", vp.shape()),
                format!("{:?}", labels.shape()),
            ));
        }
        let (b, n) = (vp.shape()[0], vp.shape()[1]);
        let mut acc = 0.0f64;
        for row in 0..b {
            for j in 0..n {
                let y = labels.data()[row * n + j] as f64;
                if y != 0.0 {
                    let p = (vp.data()[row * n + j] as f64).max(1e-12);
                    acc -= y * p.ln();
                }
            }
        }
        let out = Tensor::scalar((acc / b as f64) as f32);
        self.push_checked(
            "cross_entropy",
            Op::CrossEntropy {
                predictions,
                labels,
            },
            out,
        )
    }

    /// Reverse-mode sweep from `seed`. `seed_gradient` must match the seed
    /// node's value shape; omitting it is only legal for scalar seeds (an
    /// implicit seed of 1).
    pub fn backward(&self, seed: NodeId, seed_gradient: Option<Tensor>) -> Result<GradientMap> {
        let seed_value = self.value(seed);
        let seed_grad = match seed_gradient {
            Some(g) => {
                if g.shape() != seed_value.shape() {
                    return Err(Error::shape(
                        "backward",
                        format!("{:?}", seed_value.shape()),
                        format!("{:?}", g.shape()),
                    ));
                }
                g
            }
            None => {
                if seed_value.len() != 1 {
                    return Err(Error::InvalidArgument(
                        "backward: non-scalar seed requires an explicit seed gradient".into(),
                    ));
                }
                Tensor::scalar(1.0)
            }
        };

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[seed.0] = Some(seed_grad);

        for id in (0..=seed.0).rev() {
            let Some(gy) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf { differentiable } => {
                    if *differentiable {
                        grads[id] = Some(gy);
                    }
                    continue;
                }
                Op::Relu { x } => {
                    let vx = self.value(*x);
                    let gx: Vec<f32> = vx
                        .data()
                        .iter()
                        .zip(gy.data())
                        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, vx.shape(), &gx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, self.value(*a).shape(), gy.data());
                    accumulate(&mut grads, *b, self.value(*b).shape(), gy.data());
                }
                Op::AddBias { x, bias } => {
                    let vx = self.value(*x);
                    accumulate(&mut grads, *x, vx.shape(), gy.data());
                    let bn = self.value(*bias).len();
                    let mut gb = vec![0.0f32; bn];
                    match vx.shape() {
                        [b, n] => {
                            for row in 0..*b {
                                for (j, g) in gb.iter_mut().enumerate() {
                                    *g += gy.data()[row * n + j];
                                }
                            }
                        }
                        [b, c, h, w] => {
                            let plane = h * w;
                            for bi in 0..*b {
                                for (ci, g) in gb.iter_mut().enumerate() {
                                    let base = (bi * c + ci) * plane;
                                    for p in 0..plane {
                                        *g += gy.data()[base + p];
                                    }
                                }
                            }
                        }
                        _ => unreachable!(),
                    }
                    accumulate(&mut grads, *bias, &[bn], &gb);
                }
                Op::MatMul { x, w } => {
                    let (vx, vw) = (self.value(*x), self.value(*w));
                    let (b, m) = (vx.shape()[0], vx.shape()[1]);
                    let n = vw.shape()[1];
                    // dX = dY . W^T
                    let mut gx = vec![0.0f32; b * m];
                    for i in 0..b {
                        for k in 0..m {
                            let mut acc = 0.0f64;
                            for j in 0..n {
                                acc += gy.data()[i * n + j] as f64 * vw.data()[k * n + j] as f64;
                            }
                            gx[i * m + k] = acc as f32;
                        }
                    }
                    // dW = X^T . dY
                    let mut gw = vec![0.0f32; m * n];
                    for k in 0..m {
                        for j in 0..n {
                            let mut acc = 0.0f64;
                            for i in 0..b {
                                acc += vx.data()[i * m + k] as f64 * gy.data()[i * n + j] as f64;
                            }
                            gw[k * n + j] = acc as f32;
                        }
                    }
                    accumulate(&mut grads, *x, &[b, m], &gx);
                    accumulate(&mut grads, *w, &[m, n], &gw);
                }
                Op::Conv2d {
                    x,
                    filters,
                    padding,
                } => {
                    let (vx, vf) = (self.value(*x), self.value(*filters));
                    let [b, cin, h, w] = [
                        vx.shape()[0],
                        vx.shape()[1],
                        vx.shape()[2],
                        vx.shape()[3],
                    ];
                    let [cout, _, kh, kw] = [
                        vf.shape()[0],
                        vf.shape()[1],
                        vf.shape()[2],
                        vf.shape()[3],
                    ];
                    let (pad_h, pad_w) = match padding {
                        Padding::Valid => (0, 0),
                        Padding::Same => ((kh - 1) / 2, (kw - 1) / 2),
                    };
                    let (oh, ow) = (node.value.shape()[2], node.value.shape()[3]);
                    let mut gx = vec![0.0f64; b * cin * h * w];
                    let mut gf = vec![0.0f64; cout * cin * kh * kw];
                    for bi in 0..b {
                        for co in 0..cout {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let g =
                                        gy.data()[((bi * cout + co) * oh + oy) * ow + ox] as f64;
                                    if g == 0.0 {
                                        continue;
                                    }
                                    for ci in 0..cin {
                                        for ky in 0..kh {
                                            let iy = (oy + ky) as isize - pad_h as isize;
                                            if iy < 0 || iy >= h as isize {
                                                continue;
                                            }
                                            for kx in 0..kw {
                                                let ix = (ox + kx) as isize - pad_w as isize;
                                                if ix < 0 || ix >= w as isize {
                                                    continue;
                                                }
                                                let xi = ((bi * cin + ci) * h + iy as usize) * w
                                                    + ix as usize;
                                                let fi = ((co * cin + ci) * kh + ky) * kw + kx;
                                                gx[xi] += g * vf.data()[fi] as f64;
                                                gf[fi] += g * vx.data()[xi] as f64;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    let gx: Vec<f32> = gx.iter().map(|&v| v as f32).collect();
                    let gf: Vec<f32> = gf.iter().map(|&v| v as f32).collect();
                    accumulate(&mut grads, *x, &[b, cin, h, w], &gx);
                    accumulate(&mut grads, *filters, &[cout, cin, kh, kw], &gf);
                }
                Op::MaxPool2x2 { x, argmax } => {
                    let vx = self.value(*x);
                    let mut gx = vec![0.0f32; vx.len()];
                    for (oi, &xi) in argmax.iter().enumerate() {
                        gx[xi] += gy.data()[oi];
                    }
                    accumulate(&mut grads, *x, vx.shape(), &gx);
                }
                Op::Reshape { x } => {
                    accumulate(&mut grads, *x, self.value(*x).shape(), gy.data());
                }
                Op::ScalarDiv { x, divisor } => {
                    let gx: Vec<f32> = gy.data().iter().map(|&g| g / divisor).collect();
                    accumulate(&mut grads, *x, self.value(*x).shape(), &gx);
                }
                Op::Softmax { x } => {
                    // dz_j = p_j * (g_j - <g, p>) per row
                    let p = &node.value;
                    let (b, n) = (p.shape()[0], p.shape()[1]);
                    let mut gx = vec![0.0f32; b * n];
                    for row in 0..b {
                        let pr = &p.data()[row * n..(row + 1) * n];
                        let gr = &gy.data()[row * n..(row + 1) * n];
                        let dot: f64 = pr
                            .iter()
                            .zip(gr)
                            .map(|(&pv, &gv)| pv as f64 * gv as f64)
                            .sum();
                        for j in 0..n {
                            gx[row * n + j] = (pr[j] as f64 * (gr[j] as f64 - dot)) as f32;
                        }
                    }
                    accumulate(&mut grads, *x, self.value(*x).shape(), &gx);
                }
                Op::Dropout { x, mask } => {
                    let gx: Vec<f32> = gy
                        .data()
                        .iter()
                        .zip(mask)
                        .map(|(&g, &m)| g * m)
                        .collect();
                    accumulate(&mut grads, *x, self.value(*x).shape(), &gx);
                }
                Op::CrossEntropy {
                    predictions,
                    labels,
                } => {
                    let vp = self.value(*predictions);
                    let (b, n) = (vp.shape()[0], vp.shape()[1]);
                    let g = gy.data()[0] as f64;
                    let mut gp = vec![0.0f32; b * n];
                    for row in 0..b {
                        for j in 0..n {
                            let y = labels.data()[row * n + j] as f64;
                            if y != 0.0 {
                                let p = vp.data()[row * n + j] as f64;
                                // zero gradient where the clamp is active
                                if p > 1e-12 {
                                    gp[row * n + j] = (-g * y / (p * b as f64)) as f32;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *predictions, vp.shape(), &gp);
                }
            }
        }

        // Drop gradients that landed on non-differentiable leaves.
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf {
                differentiable: false,
            } = node.op
            {
                grads[i] = None;
            }
        }
        Ok(GradientMap { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, shape: &[usize], g: &[f32]) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (dst, &src) in existing.data_mut().iter_mut().zip(g) {
                *dst += src;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), g.to_vec()).expect("gradient shape"));
        }
    }
}
