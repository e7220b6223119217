//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is the tape: every operation appends a node holding its
//! forward value, so node ids are already in topological order and
//! [`Graph::backward`] is a single reverse sweep. Graphs are built fresh
//! for each forward pass and dropped afterwards.
//!
//! ```
//! use fghash::autodiff::Graph;
//! use fghash::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.input(Tensor::scalar(5.0));
//! let xy = g.mul(x, y).unwrap();
//! let grads = g.backward(xy).unwrap();
//! assert_eq!(grads.wrt(&g, x).data(), &[5.0]);
//! ```

use crate::error::{contract_err, dim_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Relu,
    Sqrt,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Conv2d { input: NodeId, kernel: NodeId },
    AddBias { input: NodeId, bias: NodeId },
    Unary(Unary, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    MapProduct { input: NodeId, map: NodeId },
    MeanPool2(NodeId),
    GlobalAvgPool(NodeId),
    ChannelSum(NodeId),
    Softmax(NodeId),
    SelectChannel(NodeId, usize),
    Concat(Vec<NodeId>),
    Reshape(NodeId),
    Sum(NodeId),
    Norm2(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every tracked node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer for `id`, if the node lies on a path to the loss.
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `id` shaped like the node's value; zero when the node
    /// does not influence the loss.
    pub fn wrt(&self, graph: &Graph, id: NodeId) -> Tensor {
        let shape = graph.value(id).shape().to_vec();
        match self.get(id) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
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

    /// A constant leaf; never receives gradient.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push_leaf(&mut self, value: Tensor, tracked: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let tracked = inputs.iter().any(|i| self.nodes[i.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).rows_cols()?;
        let (k2, n) = self.value(b).rows_cols()?;
        if k != k2 {
            return dim_err(format!("matmul inner extents {k} vs {k2}"));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    /// Cross-correlation with `same` zero padding.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId) -> Result<NodeId> {
        let (h, w, c) = self.value(input).hwc()?;
        let ks = self.value(kernel).shape().to_vec();
        let [k, k2, kc, co] = ks[..] else {
            return dim_err(format!("conv kernel must be [k, k, C, C_out], got {ks:?}"));
        };
        if k != k2 || k % 2 == 0 {
            return dim_err(format!("conv kernel must be square with odd side, got {k}x{k2}"));
        }
        if kc != c {
            return dim_err(format!("conv channel mismatch: input {c}, kernel {kc}"));
        }
        let mut out = vec![0.0; h * w * co];
        let x = self.value(input).data();
        let kern = self.value(kernel).data();
        let pad = (k / 2) as isize;
        for oy in 0..h {
            for ox in 0..w {
                let orow = &mut out[(oy * w + ox) * co..(oy * w + ox + 1) * co];
                for ky in 0..k {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = ox as isize + kx as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let xbase = (iy as usize * w + ix as usize) * c;
                        for ci in 0..c {
                            let xv = x[xbase + ci];
                            if xv == 0.0 {
                                continue;
                            }
                            let kbase = ((ky * k + kx) * c + ci) * co;
                            for (o, kv) in orow.iter_mut().zip(&kern[kbase..kbase + co]) {
                                *o += xv * kv;
                            }
                        }
                    }
                }
            }
        }
        self.push(
            "conv2d",
            Tensor::new(vec![h, w, co], out)?,
            Op::Conv2d { input, kernel },
            &[input, kernel],
        )
    }

    /// Adds a per-channel bias along the last axis.
    pub fn add_bias(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let c = *self.value(input).shape().last().unwrap_or(&0);
        if self.value(bias).len() != c {
            return dim_err(format!(
                "bias length {} does not match channel count {c}",
                self.value(bias).len()
            ));
        }
        let b = self.value(bias).data();
        let mut out = self.value(input).clone();
        for chunk in out.data_mut().chunks_mut(c) {
            for (o, bv) in chunk.iter_mut().zip(b) {
                *o += bv;
            }
        }
        self.push("add_bias", out, Op::AddBias { input, bias }, &[input, bias])
    }

    pub fn unary(&mut self, op: Unary, x: NodeId) -> Result<NodeId> {
        let mut out = self.value(x).clone();
        match op {
            Unary::Tanh => out.data_mut().iter_mut().for_each(|v| *v = v.tanh()),
            Unary::Sigmoid => out
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 1.0 / (1.0 + (-*v).exp())),
            Unary::Relu => out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0)),
            Unary::Sqrt => {
                if let Some(bad) = out.data().iter().find(|v| **v < 0.0) {
                    return Err(Error::Domain(format!("sqrt of negative value {bad}")));
                }
                out.data_mut().iter_mut().for_each(|v| *v = v.sqrt());
            }
        }
        self.push("unary", out, Op::Unary(op, x), &[x])
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Unary::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Unary::Relu, x)
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Unary::Sqrt, x)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return dim_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: NodeId, b: NodeId, what: &str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<NodeId> {
        self.same_shape(a, b, what)?;
        let mut out = self.value(a).clone();
        for (o, bv) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o = f(*o, *bv);
        }
        self.push(what, out, op, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= factor);
        self.push("scale", out, Op::Scale(x, factor), &[x])
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v += c);
        self.push("add_scalar", out, Op::AddScalar(x), &[x])
    }

    /// Hadamard product of a `[H, W, C]` tensor with a `[H, W]` map,
    /// applied to every channel.
    pub fn hadamard_map(&mut self, input: NodeId, map: NodeId) -> Result<NodeId> {
        let (h, w, c) = self.value(input).hwc()?;
        if self.value(map).shape() != [h, w] {
            return dim_err(format!(
                "map of shape {:?} cannot weight a {h}x{w} tensor",
                self.value(map).shape()
            ));
        }
        let m = self.value(map).data();
        let mut out = self.value(input).clone();
        for (chunk, mv) in out.data_mut().chunks_mut(c).zip(m) {
            chunk.iter_mut().for_each(|v| *v *= mv);
        }
        self.push("hadamard_map", out, Op::MapProduct { input, map }, &[input, map])
    }

    /// 2x2 spatial mean pooling with stride 2.
    pub fn mean_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (h, w, c) = self.value(x).hwc()?;
        if h % 2 != 0 || w % 2 != 0 {
            return dim_err(format!("mean_pool2 needs even extents, got {h}x{w}"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0; oh * ow * c];
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = &mut out[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let base = ((2 * oy + dy) * w + 2 * ox + dx) * c;
                    for (d, s) in dst.iter_mut().zip(&src[base..base + c]) {
                        *d += 0.25 * s;
                    }
                }
            }
        }
        self.push("mean_pool2", Tensor::new(vec![oh, ow, c], out)?, Op::MeanPool2(x), &[x])
    }

    /// Per-channel spatial mean of a `[H, W, C]` tensor.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (h, w, c) = self.value(x).hwc()?;
        if h * w == 0 {
            return dim_err("global_avg_pool over empty spatial extent");
        }
        let mut out = vec![0.0; c];
        for chunk in self.value(x).data().chunks(c) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        let inv = 1.0 / (h * w) as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        self.push("global_avg_pool", Tensor::vector(out), Op::GlobalAvgPool(x), &[x])
    }

    /// Sums a `[H, W, C]` tensor over channels, flattened to `[H * W]`.
    pub fn channel_sum(&mut self, x: NodeId) -> Result<NodeId> {
        let (_, _, c) = self.value(x).hwc()?;
        let out: Vec<f64> = self.value(x).data().chunks(c).map(|ch| ch.iter().sum()).collect();
        self.push("channel_sum", Tensor::vector(out), Op::ChannelSum(x), &[x])
    }

    /// Softmax of a vector, computed with max subtraction.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.rank() != 1 || v.is_empty() {
            return dim_err(format!("softmax needs a nonempty vector, got {:?}", v.shape()));
        }
        let out = softmax(v.data());
        self.push("softmax", Tensor::vector(out), Op::Softmax(x), &[x])
    }

    /// Channel `j` of a `[H, W, C]` tensor as a `[H, W]` map.
    pub fn select_channel(&mut self, x: NodeId, j: usize) -> Result<NodeId> {
        let (h, w, c) = self.value(x).hwc()?;
        if j >= c {
            return dim_err(format!("channel {j} out of range for {c} channels"));
        }
        let out: Vec<f64> = self.value(x).data().chunks(c).map(|ch| ch[j]).collect();
        self.push("select_channel", Tensor::new(vec![h, w], out)?, Op::SelectChannel(x, j), &[x])
    }

    /// Concatenates tensors into one flat vector, in argument order.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut out = Vec::new();
        for p in parts {
            out.extend_from_slice(self.value(*p).data());
        }
        self.push("concat", Tensor::vector(out), Op::Concat(parts.to_vec()), parts)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Euclidean norm; the subgradient at the origin is taken as zero.
    pub fn norm2(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        self.push("norm2", Tensor::scalar(s), Op::Norm2(x), &[x])
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.mul(x, x)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return contract_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.tracked {
                self.propagate(idx, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }
        grads.iter_mut().enumerate().for_each(|(i, g)| {
            if !self.nodes[i].tracked {
                *g = None;
            }
        });
        Ok(Gradients { grads })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], id: NodeId) -> Option<&'a mut [f64]> {
        if !self.nodes[id.0].tracked {
            return None;
        }
        let len = self.nodes[id.0].value.len();
        Some(grads[id.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).rows_cols()?;
                let n = self.value(*b).shape()[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            let grow = &g[i * n..(i + 1) * n];
                            da[i * k + p] += dot(brow, grow);
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = av[i * k + p];
                            for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += a_ip * gv;
                            }
                        }
                    }
                }
            }
            Op::Conv2d { input, kernel } => self.conv_backward(*input, *kernel, g, grads)?,
            Op::AddBias { input, bias } => {
                if let Some(dx) = self.acc(grads, *input) {
                    dx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
                let c = self.value(*bias).len();
                if let Some(db) = self.acc(grads, *bias) {
                    for chunk in g.chunks(c) {
                        db.iter_mut().zip(chunk).for_each(|(d, gv)| *d += gv);
                    }
                }
            }
            Op::Unary(kind, x) => {
                let y = node.value.data();
                let xv = self.value(*x).data();
                let kind = *kind;
                if kind == Unary::Sqrt {
                    if let Some(i) = (0..y.len()).find(|&i| y[i] == 0.0 && g[i] != 0.0) {
                        return Err(Error::Domain(format!(
                            "sqrt derivative is unbounded at zero (element {i})"
                        )));
                    }
                }
                if let Some(dx) = self.acc(grads, *x) {
                    for i in 0..dx.len() {
                        let local = match kind {
                            Unary::Tanh => 1.0 - y[i] * y[i],
                            Unary::Sigmoid => y[i] * (1.0 - y[i]),
                            Unary::Relu => {
                                if xv[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Sqrt => {
                                if g[i] == 0.0 {
                                    0.0
                                } else {
                                    0.5 / y[i]
                                }
                            }
                        };
                        dx[i] += g[i] * local;
                    }
                }
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if let Some(d) = self.acc(grads, id) {
                        d.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
                if let Some(d) = self.acc(grads, *b) {
                    d.iter_mut().zip(g).for_each(|(d, gv)| *d -= gv);
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data().to_vec();
                let bv = self.value(*b).data();
                if let Some(d) = self.acc(grads, *a) {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(x, f) => {
                let f = *f;
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, gv)| *d += f * gv);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
            }
            Op::MapProduct { input, map } => {
                let (_, _, c) = self.value(*input).hwc()?;
                let xv = self.value(*input).data();
                let mv = self.value(*map).data();
                if let Some(dx) = self.acc(grads, *input) {
                    for (p, mval) in mv.iter().enumerate() {
                        for ch in 0..c {
                            dx[p * c + ch] += g[p * c + ch] * mval;
                        }
                    }
                }
                if let Some(dm) = self.acc(grads, *map) {
                    for (p, d) in dm.iter_mut().enumerate() {
                        *d += dot(&g[p * c..(p + 1) * c], &xv[p * c..(p + 1) * c]);
                    }
                }
            }
            Op::MeanPool2(x) => {
                let (h, w, c) = self.value(*x).hwc()?;
                let ow = w / 2;
                if let Some(dx) = self.acc(grads, *x) {
                    for iy in 0..h {
                        for ix in 0..w {
                            let src = ((iy / 2) * ow + ix / 2) * c;
                            let dst = (iy * w + ix) * c;
                            for ch in 0..c {
                                dx[dst + ch] += 0.25 * g[src + ch];
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let (h, w, c) = self.value(*x).hwc()?;
                let inv = 1.0 / (h * w) as f64;
                if let Some(dx) = self.acc(grads, *x) {
                    for chunk in dx.chunks_mut(c) {
                        chunk.iter_mut().zip(g).for_each(|(d, gv)| *d += gv * inv);
                    }
                }
            }
            Op::ChannelSum(x) => {
                let (_, _, c) = self.value(*x).hwc()?;
                if let Some(dx) = self.acc(grads, *x) {
                    for (chunk, gv) in dx.chunks_mut(c).zip(g) {
                        chunk.iter_mut().for_each(|d| *d += gv);
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let gy = dot(g, y);
                if let Some(dx) = self.acc(grads, *x) {
                    for i in 0..dx.len() {
                        dx[i] += y[i] * (g[i] - gy);
                    }
                }
            }
            Op::SelectChannel(x, j) => {
                let (_, _, c) = self.value(*x).hwc()?;
                let j = *j;
                if let Some(dx) = self.acc(grads, *x) {
                    for (p, gv) in g.iter().enumerate() {
                        dx[p * c + j] += gv;
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if let Some(d) = self.acc(grads, *p) {
                        d.iter_mut().zip(&g[offset..offset + len]).for_each(|(d, gv)| *d += gv);
                    }
                    offset += len;
                }
            }
            Op::Sum(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Norm2(x) => {
                let norm = node.value.data()[0];
                let xv = self.value(*x).data();
                if norm > 0.0 {
                    let f = g[0] / norm;
                    if let Some(d) = self.acc(grads, *x) {
                        d.iter_mut().zip(xv).for_each(|(d, v)| *d += f * v);
                    }
                }
            }
        }
        Ok(())
    }

    fn conv_backward(&self, input: NodeId, kernel: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let (h, w, c) = self.value(input).hwc()?;
        let ks = self.value(kernel).shape();
        let (k, co) = (ks[0], ks[3]);
        let pad = (k / 2) as isize;
        let x = self.value(input).data();
        let kern = self.value(kernel).data();
        let input_tracked = self.nodes[input.0].tracked;
        let kernel_tracked = self.nodes[kernel.0].tracked;
        let mut dx = if input_tracked { vec![0.0; x.len()] } else { Vec::new() };
        let mut dk = if kernel_tracked { vec![0.0; kern.len()] } else { Vec::new() };
        for oy in 0..h {
            for ox in 0..w {
                let grow = &g[(oy * w + ox) * co..(oy * w + ox + 1) * co];
                if grow.iter().all(|v| *v == 0.0) {
                    continue;
                }
                for ky in 0..k {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = ox as isize + kx as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let xbase = (iy as usize * w + ix as usize) * c;
                        for ci in 0..c {
                            let kbase = ((ky * k + kx) * c + ci) * co;
                            if input_tracked {
                                dx[xbase + ci] += dot(&kern[kbase..kbase + co], grow);
                            }
                            if kernel_tracked {
                                let xv = x[xbase + ci];
                                if xv != 0.0 {
                                    for (d, gv) in dk[kbase..kbase + co].iter_mut().zip(grow) {
                                        *d += xv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(d) = self.acc(grads, input) {
            d.iter_mut().zip(&dx).for_each(|(d, v)| *d += v);
        }
        if let Some(d) = self.acc(grads, kernel) {
            d.iter_mut().zip(&dk).for_each(|(d, v)| *d += v);
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// Numerically stable softmax of a plain slice.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
