use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Abs(NodeId),
    MaxScalar(NodeId, f64),
    Mean(NodeId),
    Sum(NodeId),
    MatMul(NodeId, NodeId),
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeom,
        batch: usize,
    },
    BiasAdd(NodeId, NodeId),
    AvgPool2d(NodeId, usize),
    Reshape(NodeId),
    Crop {
        input: NodeId,
        origins: Vec<(usize, usize)>,
    },
    TopKMean {
        input: NodeId,
        selected: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape of op records. Inputs always precede outputs, so the
/// append order is a topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every leaf that requires them.
#[derive(Debug, Clone)]
pub struct Gradients {
    map: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.map.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

fn is_scalar(t: &Tensor) -> bool {
    t.numel() == 1 && t.ndim() <= 1
}

/// Adds `g` into a gradient slot, taking ownership when the slot is empty.
fn merge(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, v)| *b += v),
        None => *slot = Some(g),
    }
}

/// Per-channel sums of `[N, C, inner]` data.
fn channel_sums(data: &[f64], channels: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; channels];
    for (i, chunk) in data.chunks(inner).enumerate() {
        out[i % channels] += chunk.iter().sum::<f64>();
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input or parameter.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|&i| self.needs(i));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
            Tensor::from_parts(ta.shape().to_vec(), data)
        } else if is_scalar(tb) {
            let y = tb.data()[0];
            Tensor::from_parts(ta.shape().to_vec(), ta.data().iter().map(|x| f(*x, y)).collect())
        } else if is_scalar(ta) {
            let x = ta.data()[0];
            Tensor::from_parts(tb.shape().to_vec(), tb.data().iter().map(|y| f(x, *y)).collect())
        } else {
            return Err(Error::Dimension(format!(
                "{name}: shape {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        };
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a * factor` for a constant factor.
    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let t = self.value(a);
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| x * factor).collect());
        self.push("scale", value, Op::Scale(a, factor), &[a])
    }

    /// `a + offset` for a constant offset.
    pub fn add_scalar(&mut self, a: NodeId, offset: f64) -> Result<NodeId> {
        let t = self.value(a);
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| x + offset).collect());
        self.push("add_scalar", value, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| x.max(0.0)).collect());
        self.push("relu", value, Op::Relu(a), &[a])
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| x.abs()).collect());
        self.push("abs", value, Op::Abs(a), &[a])
    }

    /// Elementwise `max(a, c)`; the gradient passes only where `a > c`.
    pub fn max_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let t = self.value(a);
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| x.max(c)).collect());
        self.push("max_scalar", value, Op::MaxScalar(a, c), &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::Dimension("mean of an empty tensor".into()));
        }
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64);
        self.push("mean", value, Op::Mean(a), &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push("sum", value, Op::Sum(a), &[a])
    }

    /// `[m,k] · [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = match (ta.shape(), tb.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            (sa, sb) => {
                return Err(Error::Dimension(format!("matmul: {sa:?} x {sb:?}")));
            }
        };
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            ta.data(),
            kernels::Layout::row_major(k),
            tb.data(),
            kernels::Layout::row_major(n),
            0.0,
            &mut out,
        );
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    /// Cross-correlation of `[N,C,H,W]` with `[F,C,kh,kw]`.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        self.conv2d_impl(input, kernel, None, stride, padding)
    }

    /// [`Graph::conv2d`] followed by a per-filter bias `[F]`, as one node.
    pub fn conv2d_bias(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        self.conv2d_impl(input, kernel, Some(bias), stride, padding)
    }

    fn conv2d_impl(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (ti, tk) = (self.value(input), self.value(kernel));
        let (batch, c, h, w, f, kc, kh, kw) = match (ti.shape(), tk.shape()) {
            (&[n, c, h, w], &[f, kc, kh, kw]) => (n, c, h, w, f, kc, kh, kw),
            (si, sk) => {
                return Err(Error::Dimension(format!(
                    "conv2d expects [N,C,H,W] and [F,C,kh,kw], got {si:?} and {sk:?}"
                )));
            }
        };
        if stride == 0 {
            return Err(Error::Dimension("conv2d stride must be positive".into()));
        }
        if kc != c || kh > h + 2 * padding || kw > w + 2 * padding || kh == 0 || kw == 0 {
            return Err(Error::Dimension(format!(
                "conv2d kernel {:?} incompatible with input {:?} at padding {padding}",
                tk.shape(),
                ti.shape()
            )));
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            filters: f,
            kh,
            kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        };
        let bias_values = match bias {
            Some(b) => {
                let tb = self.value(b);
                if tb.shape() != [f] {
                    return Err(Error::Dimension(format!(
                        "conv2d bias {:?} does not match {f} filters",
                        tb.shape()
                    )));
                }
                Some(tb.data())
            }
            None => None,
        };
        let out = kernels::conv2d_forward(&geom, batch, ti.data(), tk.data(), bias_values);
        let value = Tensor::from_parts(vec![batch, f, geom.out_h, geom.out_w], out);
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                batch,
            },
            &inputs,
        )
    }

    /// Adds `bias[c]` to every element whose axis-1 index is `c`.
    pub fn bias_add(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if ta.ndim() < 2 || tb.ndim() != 1 || tb.shape()[0] != ta.shape()[1] {
            return Err(Error::Dimension(format!(
                "bias_add: bias {:?} does not match axis 1 of {:?}",
                tb.shape(),
                ta.shape()
            )));
        }
        let channels = ta.shape()[1];
        let inner: usize = ta.shape()[2..].iter().product();
        let mut data = Vec::with_capacity(ta.numel());
        for (i, chunk) in ta.data().chunks(inner.max(1)).enumerate() {
            let b = tb.data()[i % channels];
            data.extend(chunk.iter().map(|v| v + b));
        }
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push("bias_add", value, Op::BiasAdd(a, bias), &[a, bias])
    }

    /// Non-overlapping average pooling over the two trailing axes.
    pub fn avg_pool2d(&mut self, a: NodeId, size: usize) -> Result<NodeId> {
        let t = self.value(a);
        let (n, c, h, w) = match t.shape() {
            &[n, c, h, w] => (n, c, h, w),
            s => return Err(Error::Dimension(format!("avg_pool2d expects [N,C,H,W], got {s:?}"))),
        };
        if size == 0 || h % size != 0 || w % size != 0 {
            return Err(Error::Dimension(format!(
                "avg_pool2d window {size} does not tile {h}x{w}"
            )));
        }
        let out = kernels::avg_pool_forward(n * c, h, w, size, t.data());
        let value = Tensor::from_parts(vec![n, c, h / size, w / size], out);
        self.push("avg_pool2d", value, Op::AvgPool2d(a, size), &[a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    /// Flattens `[N, ...]` into `[N, prod(...)]`.
    pub fn flatten(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let lead = *shape
            .first()
            .ok_or_else(|| Error::Dimension("flatten of a scalar".into()))?;
        let rest = shape[1..].iter().product();
        self.reshape(a, &[lead, rest])
    }

    /// Crops a `size.0 x size.1` spatial window from each sample of `[N,C,H,W]`,
    /// sample `n` starting at `origins[n]`.
    pub fn crop(&mut self, a: NodeId, origins: &[(usize, usize)], size: (usize, usize)) -> Result<NodeId> {
        let t = self.value(a);
        let (n, c, h, w) = match t.shape() {
            &[n, c, h, w] => (n, c, h, w),
            s => return Err(Error::Dimension(format!("crop expects [N,C,H,W], got {s:?}"))),
        };
        if origins.len() != n {
            return Err(Error::Dimension(format!(
                "crop: {} origins for batch of {n}",
                origins.len()
            )));
        }
        let (ph, pw) = size;
        for &(r, col) in origins {
            if r + ph > h || col + pw > w {
                return Err(Error::Dimension(format!(
                    "crop window {ph}x{pw} at ({r},{col}) exceeds {h}x{w}"
                )));
            }
        }
        let mut data = Vec::with_capacity(n * c * ph * pw);
        for (s, &(r, col)) in origins.iter().enumerate() {
            for ch in 0..c {
                let plane = &t.data()[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
                for y in r..r + ph {
                    data.extend_from_slice(&plane[y * w + col..y * w + col + pw]);
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, ph, pw], data);
        self.push(
            "crop",
            value,
            Op::Crop {
                input: a,
                origins: origins.to_vec(),
            },
            &[a],
        )
    }

    /// For each sample of `[N, ...]`, the mean of its `k` largest entries.
    /// Ties are broken by ascending flat index. Output shape `[N]`.
    pub fn topk_mean(&mut self, a: NodeId, k: usize) -> Result<NodeId> {
        let t = self.value(a);
        let n = *t
            .shape()
            .first()
            .ok_or_else(|| Error::Dimension("topk_mean of a scalar".into()))?;
        let row = if n == 0 { 0 } else { t.numel() / n };
        if k == 0 || k > row {
            return Err(Error::Dimension(format!("topk_mean: k={k} with {row} entries per sample")));
        }
        let mut selected = Vec::with_capacity(n * k);
        let mut out = Vec::with_capacity(n);
        let mut order: Vec<usize> = Vec::with_capacity(row);
        for s in 0..n {
            let vals = &t.data()[s * row..(s + 1) * row];
            order.clear();
            order.extend(0..row);
            order.sort_by(|&i, &j| vals[j].total_cmp(&vals[i]).then(i.cmp(&j)));
            let mut acc = 0.0;
            for &i in &order[..k] {
                acc += vals[i];
                selected.push(s * row + i);
            }
            out.push(acc / k as f64);
        }
        let value = Tensor::from_parts(vec![n], out);
        self.push("topk_mean", value, Op::TopKMean { input: a, selected }, &[a])
    }

    /// Reverse pass from a scalar node. Returns the gradient of every leaf
    /// that requires one; leaves the loss does not depend on get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, dy, &mut grads);
        }
        let mut map = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let data = grads[idx].take().unwrap_or_else(|| vec![0.0; node.value.numel()]);
                map.insert(NodeId(idx), Tensor::from_parts(node.value.shape().to_vec(), data));
            }
        }
        for (idx, node) in self.nodes.iter().enumerate().skip(loss.0 + 1) {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                map.insert(NodeId(idx), Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { map })
    }

    /// Pushes `dy` (the gradient of `node`'s output) into its inputs' slots.
    fn propagate(&self, node: &Node, dy: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let negate = matches!(node.op, Op::Sub(..));
                if self.needs(*b) {
                    let gb = if negate { dy.iter().map(|d| -d).collect() } else { dy.clone() };
                    merge(&mut grads[b.0], self.reduce_to(*b, gb));
                }
                if self.needs(*a) {
                    merge(&mut grads[a.0], self.reduce_to(*a, dy));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let times = |t: &Tensor| -> Vec<f64> {
                    if t.numel() == 1 {
                        let v = t.data()[0];
                        dy.iter().map(|d| d * v).collect()
                    } else {
                        dy.iter().zip(t.data()).map(|(d, v)| d * v).collect()
                    }
                };
                if self.needs(*a) {
                    let ga = times(tb);
                    merge(&mut grads[a.0], self.reduce_to(*a, ga));
                }
                if self.needs(*b) {
                    let gb = times(ta);
                    merge(&mut grads[b.0], self.reduce_to(*b, gb));
                }
            }
            Op::Scale(a, factor) => {
                merge(&mut grads[a.0], dy.iter().map(|d| d * factor).collect());
            }
            Op::AddScalar(a) | Op::Reshape(a) => merge(&mut grads[a.0], dy),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let g = dy.iter().zip(x).map(|(d, v)| if *v > 0.0 { *d } else { 0.0 }).collect();
                merge(&mut grads[a.0], g);
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                let g = dy
                    .iter()
                    .zip(x)
                    .map(|(d, v)| {
                        if *v > 0.0 {
                            *d
                        } else if *v < 0.0 {
                            -d
                        } else {
                            0.0
                        }
                    })
                    .collect();
                merge(&mut grads[a.0], g);
            }
            Op::MaxScalar(a, c) => {
                let x = self.value(*a).data();
                let g = dy.iter().zip(x).map(|(d, v)| if v > c { *d } else { 0.0 }).collect();
                merge(&mut grads[a.0], g);
            }
            Op::Mean(a) => {
                let len = self.value(*a).numel();
                merge(&mut grads[a.0], vec![dy[0] / len as f64; len]);
            }
            Op::Sum(a) => {
                let len = self.value(*a).numel();
                merge(&mut grads[a.0], vec![dy[0]; len]);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.needs(*a) {
                    // dA = dC · Bᵀ
                    let mut g = vec![0.0; m * k];
                    kernels::gemm(
                        m,
                        n,
                        k,
                        &dy,
                        kernels::Layout::row_major(n),
                        tb.data(),
                        kernels::Layout::transposed(n),
                        0.0,
                        &mut g,
                    );
                    merge(&mut grads[a.0], g);
                }
                if self.needs(*b) {
                    // dB = Aᵀ · dC
                    let mut g = vec![0.0; k * n];
                    kernels::gemm(
                        k,
                        m,
                        n,
                        ta.data(),
                        kernels::Layout::transposed(k),
                        &dy,
                        kernels::Layout::row_major(n),
                        0.0,
                        &mut g,
                    );
                    merge(&mut grads[b.0], g);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                batch,
            } => {
                if let Some(bias) = bias.filter(|b| self.needs(*b)) {
                    merge(&mut grads[bias.0], channel_sums(&dy, geom.filters, geom.out_h * geom.out_w));
                }
                let (di, dk) = kernels::conv2d_backward(
                    geom,
                    *batch,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    &dy,
                    self.needs(*input),
                    self.needs(*kernel),
                );
                if let Some(g) = di {
                    merge(&mut grads[input.0], g);
                }
                if let Some(g) = dk {
                    merge(&mut grads[kernel.0], g);
                }
            }
            Op::BiasAdd(a, bias) => {
                let shape = self.shape(*a);
                let channels = shape[1];
                let inner: usize = shape[2..].iter().product();
                if self.needs(*bias) {
                    merge(&mut grads[bias.0], channel_sums(&dy, channels, inner));
                }
                if self.needs(*a) {
                    merge(&mut grads[a.0], dy);
                }
            }
            Op::AvgPool2d(a, size) => {
                let s = self.shape(*a);
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let mut g = vec![0.0; planes * h * w];
                kernels::avg_pool_backward(planes, h, w, *size, &dy, &mut g);
                merge(&mut grads[a.0], g);
            }
            Op::Crop { input, origins } => {
                let s = self.shape(*input);
                let (c, h, w) = (s[1], s[2], s[3]);
                let out_shape = node.value.shape();
                let (ph, pw) = (out_shape[2], out_shape[3]);
                let buf = grads[input.0].get_or_insert_with(|| vec![0.0; s.iter().product()]);
                let mut src = dy.chunks(pw);
                for (n, &(r, col)) in origins.iter().enumerate() {
                    for ch in 0..c {
                        let base = (n * c + ch) * h * w;
                        for y in r..r + ph {
                            let line = src.next().expect("crop gradient length");
                            let dst = &mut buf[base + y * w + col..base + y * w + col + pw];
                            dst.iter_mut().zip(line).for_each(|(b, d)| *b += d);
                        }
                    }
                }
            }
            Op::TopKMean { input, selected } => {
                let n = node.value.numel();
                let k = selected.len() / n.max(1);
                let len = self.value(*input).numel();
                let row = len / n.max(1);
                let buf = grads[input.0].get_or_insert_with(|| vec![0.0; len]);
                for &flat in selected {
                    buf[flat] += dy[flat / row] / k as f64;
                }
            }
        }
    }

    /// Sums a full-size gradient down to a scalar operand when it was broadcast.
    fn reduce_to(&self, id: NodeId, g: Vec<f64>) -> Vec<f64> {
        if self.value(id).numel() == g.len() {
            g
        } else {
            vec![g.iter().sum()]
        }
    }
}
