//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every primitive is evaluated eagerly as it is pushed onto a [`Graph`], so
//! nodes are topologically ordered by construction. [`Graph::backward`] walks
//! the tape in reverse and accumulates adjoints with the chain rule.
//!
//! Conventions: the batch axis is leading, convolution is cross-correlation
//! (no kernel flip), and 2×2 max-pool ties resolve to the lowest flat index.

use std::sync::Arc;

use crate::error::{invalid, shape_err, Error, Result};
use crate::linalg::{gemm, Strides};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a per-example loss is reduced over the batch axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        padding: usize,
        cols: Vec<f64>,
    },
    BiasAdd(NodeId, NodeId),
    MaxPool2 {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Relu(NodeId),
    Reshape(NodeId),
    Sum(NodeId),
    Bilinear {
        input: NodeId,
        left: Arc<Tensor>,
        right: Arc<Tensor>,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        reduction: Reduction,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// A tape of evaluated primitives.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Adjoint of `id`, if the output depends on it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.adjoints.get(id.0).and_then(Option::as_ref)
    }

    /// Adjoint of `id`; zeros when the node was not reached.
    pub fn wrt(&self, id: NodeId) -> Tensor {
        match self.get(id) {
            Some(t) => t.clone(),
            None => Tensor::zeros(self.shapes[id.0].clone()),
        }
    }

    pub fn take(&mut self, id: NodeId) -> Tensor {
        match self.adjoints.get_mut(id.0).and_then(Option::take) {
            Some(t) => t,
            None => Tensor::zeros(self.shapes[id.0].clone()),
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool, name: &'static str) -> Result<NodeId> {
        value.check_finite(name)?;
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes
            .get(id.0)
            .ok_or_else(|| invalid(format!("node {} does not belong to this graph", id.0)))
    }

    fn grad_of(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// A differentiable leaf.
    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Leaf, value, true, "input")
    }

    /// A leaf that never receives an adjoint.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Leaf, value, false, "constant")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.node(a)?.value.add(&self.node(b)?.value)?;
        let rg = self.grad_of(&[a, b]);
        self.push(Op::Add(a, b), value, rg, "add")
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let value = self.node(a)?.value.scale(factor);
        let rg = self.grad_of(&[a]);
        self.push(Op::Scale(a, factor), value, rg, "scale")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.node(a)?.value.zip_map(&self.node(b)?.value, |x, y| x * y)?;
        let rg = self.grad_of(&[a, b]);
        self.push(Op::Mul(a, b), value, rg, "mul")
    }

    /// `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.node(a)?.value, &self.node(b)?.value);
        let (m, k, n) = match (va.shape(), vb.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (sa, sb) => return Err(shape_err("matmul", format!("{sa:?} × {sb:?}"))),
        };
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            va.data(),
            Strides::row_major(k),
            vb.data(),
            Strides::row_major(n),
            0.0,
            &mut out,
            Strides::row_major(n),
        );
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.grad_of(&[a, b]);
        self.push(Op::MatMul(a, b), value, rg, "matmul")
    }

    /// Stride-1 cross-correlation of `[N,C,H,W]` with `[O,C,k,k]`, zero padded.
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, padding: usize) -> Result<NodeId> {
        let (vx, vw) = (&self.node(input)?.value, &self.node(weight)?.value);
        let geo = ConvGeometry::new(vx.shape(), vw.shape(), padding)?;
        let cols = geo.im2col(vx.data());
        let mut out = vec![0.0; geo.n * geo.out_channels * geo.spatial_out()];
        let hw = geo.spatial_out();
        let ckk = geo.patch();
        for img in 0..geo.n {
            gemm(
                geo.out_channels,
                ckk,
                hw,
                1.0,
                vw.data(),
                Strides::row_major(ckk),
                &cols[img * hw..],
                Strides::row_major(geo.n * hw),
                0.0,
                &mut out[img * geo.out_channels * hw..],
                Strides::row_major(hw),
            );
        }
        let value = Tensor::new(vec![geo.n, geo.out_channels, geo.out_h, geo.out_w], out)?;
        let rg = self.grad_of(&[input, weight]);
        self.push(
            Op::Conv2d {
                input,
                weight,
                padding,
                cols,
            },
            value,
            rg,
            "conv2d",
        )
    }

    /// Adds `bias[c]` along axis 1 of `x`.
    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vb) = (&self.node(x)?.value, &self.node(bias)?.value);
        if vx.rank() < 2 || vb.rank() != 1 || vx.shape()[1] != vb.len() {
            return Err(shape_err("bias_add", format!("{:?} + {:?}", vx.shape(), vb.shape())));
        }
        let channels = vb.len();
        let inner: usize = vx.shape()[2..].iter().product();
        let mut value = vx.clone();
        for (i, chunk) in value.data_mut().chunks_mut(inner.max(1)).enumerate() {
            let b = vb.data()[i % channels];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        let rg = self.grad_of(&[x, bias]);
        self.push(Op::BiasAdd(x, bias), value, rg, "bias_add")
    }

    /// Non-overlapping 2×2 max pooling over the last two axes of `[N,C,H,W]`.
    pub fn max_pool2(&mut self, input: NodeId) -> Result<NodeId> {
        let vx = &self.node(input)?.value;
        let (n, c, h, w) = match *vx.shape() {
            [n, c, h, w] if h >= 2 && w >= 2 => (n, c, h, w),
            _ => return Err(shape_err("max_pool2", format!("{:?}", vx.shape()))),
        };
        let (oh, ow) = (h / 2, w / 2);
        let x = vx.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.grad_of(&[input]);
        self.push(Op::MaxPool2 { input, argmax }, value, rg, "max_pool2")
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.node(a)?.value.map(|v| v.max(0.0));
        let rg = self.grad_of(&[a]);
        self.push(Op::Relu(a), value, rg, "relu")
    }

    pub fn reshape(&mut self, a: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        let value = self.node(a)?.value.reshape(shape)?;
        let rg = self.grad_of(&[a]);
        self.push(Op::Reshape(a), value, rg, "reshape")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.node(a)?.value.sum());
        let rg = self.grad_of(&[a]);
        self.push(Op::Sum(a), value, rg, "sum")
    }

    /// `left · X · right` applied to every trailing `H×W` matrix of the input.
    pub fn bilinear(&mut self, input: NodeId, left: Arc<Tensor>, right: Arc<Tensor>) -> Result<NodeId> {
        let vx = &self.node(input)?.value;
        let value = apply_bilinear(vx, &left, &right, false)?;
        let rg = self.grad_of(&[input]);
        self.push(Op::Bilinear { input, left, right }, value, rg, "bilinear")
    }

    /// Softmax cross-entropy of `[N,K]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize], reduction: Reduction) -> Result<NodeId> {
        let vz = &self.node(logits)?.value;
        let (n, k) = match *vz.shape() {
            [n, k] if n == labels.len() => (n, k),
            _ => {
                return Err(shape_err(
                    "cross_entropy",
                    format!("logits {:?} with {} labels", vz.shape(), labels.len()),
                ))
            }
        };
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(invalid(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &vz.data()[i * k..(i + 1) * k];
            let (lse, p) = log_softmax_row(row);
            probs[i * k..(i + 1) * k].copy_from_slice(&p);
            total += lse - row[y];
        }
        if reduction == Reduction::Mean {
            total /= n as f64;
        }
        let rg = self.grad_of(&[logits]);
        self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                reduction,
                probs,
            },
            Tensor::scalar(total),
            rg,
            "cross_entropy",
        )
    }

    /// Active branch of every piecewise primitive: ReLU signs and max-pool
    /// winners. Two evaluations with equal patterns lie on the same smooth
    /// piece of the function.
    pub fn piecewise_pattern(&self) -> Vec<usize> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => pattern.extend(self.value(*a).data().iter().map(|&v| usize::from(v > 0.0))),
                Op::MaxPool2 { argmax, .. } => pattern.extend_from_slice(argmax),
                _ => {}
            }
        }
        pattern
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out = self.node(output)?;
        if out.value.len() != 1 {
            return Err(Error::NotScalar(out.value.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[output.0] = Some(Tensor::full(out.value.shape().to_vec(), 1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut adj)?;
            adj[idx] = Some(g);
        }
        let adjoints = adj
            .into_iter()
            .zip(&self.nodes)
            .map(|(a, n)| if n.requires_grad { a } else { None })
            .collect();
        Ok(Gradients {
            adjoints,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if self.wants(id) {
                        accumulate(adj, id, g.clone())?;
                    }
                }
            }
            Op::Scale(a, f) => accumulate(adj, *a, g.scale(*f))?,
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    accumulate(adj, *a, g.zip_map(vb, |x, y| x * y)?)?;
                }
                if self.wants(*b) {
                    accumulate(adj, *b, g.zip_map(va, |x, y| x * y)?)?;
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, g.data(), Strides::row_major(n), vb.data(), Strides::transposed(n), 0.0, &mut da, Strides::row_major(k));
                    accumulate(adj, *a, Tensor::new(vec![m, k], da)?)?;
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, va.data(), Strides::transposed(k), g.data(), Strides::row_major(n), 0.0, &mut db, Strides::row_major(n));
                    accumulate(adj, *b, Tensor::new(vec![k, n], db)?)?;
                }
            }
            Op::Conv2d {
                input,
                weight,
                padding,
                cols,
            } => {
                let (vx, vw) = (self.value(*input), self.value(*weight));
                let geo = ConvGeometry::new(vx.shape(), vw.shape(), *padding)?;
                let (hw, ckk, oc) = (geo.spatial_out(), geo.patch(), geo.out_channels);
                if self.wants(*weight) {
                    let mut dw = vec![0.0; oc * ckk];
                    for img in 0..geo.n {
                        gemm(
                            oc,
                            hw,
                            ckk,
                            1.0,
                            &g.data()[img * oc * hw..],
                            Strides::row_major(hw),
                            &cols[img * hw..],
                            Strides::transposed(geo.n * hw),
                            1.0,
                            &mut dw,
                            Strides::row_major(ckk),
                        );
                    }
                    accumulate(adj, *weight, Tensor::new(vw.shape().to_vec(), dw)?)?;
                }
                if self.wants(*input) {
                    let mut dcols = vec![0.0; ckk * geo.n * hw];
                    for img in 0..geo.n {
                        gemm(
                            ckk,
                            oc,
                            hw,
                            1.0,
                            vw.data(),
                            Strides::transposed(ckk),
                            &g.data()[img * oc * hw..],
                            Strides::row_major(hw),
                            0.0,
                            &mut dcols[img * hw..],
                            Strides::row_major(geo.n * hw),
                        );
                    }
                    let dx = geo.col2im(&dcols);
                    accumulate(adj, *input, Tensor::new(vx.shape().to_vec(), dx)?)?;
                }
            }
            Op::BiasAdd(x, bias) => {
                if self.wants(*x) {
                    accumulate(adj, *x, g.clone())?;
                }
                if self.wants(*bias) {
                    let vx = self.value(*x);
                    let channels = vx.shape()[1];
                    let inner: usize = vx.shape()[2..].iter().product();
                    let mut db = vec![0.0; channels];
                    for (i, chunk) in g.data().chunks(inner.max(1)).enumerate() {
                        db[i % channels] += chunk.iter().sum::<f64>();
                    }
                    accumulate(adj, *bias, Tensor::new(vec![channels], db)?)?;
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let mut dx = Tensor::zeros(self.value(*input).shape().to_vec());
                let d = dx.data_mut();
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    d[src] += gv;
                }
                accumulate(adj, *input, dx)?;
            }
            Op::Relu(a) => {
                let dx = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })?;
                accumulate(adj, *a, dx)?;
            }
            Op::Reshape(a) => {
                accumulate(adj, *a, g.reshape(self.value(*a).shape().to_vec())?)?;
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                accumulate(adj, *a, Tensor::full(shape, g.data()[0]))?;
            }
            Op::Bilinear { input, left, right } => {
                accumulate(adj, *input, apply_bilinear(g, left, right, true)?)?;
            }
            Op::CrossEntropy {
                logits,
                labels,
                reduction,
                probs,
            } => {
                let n = labels.len();
                let k = probs.len() / n;
                let mut scale = g.data()[0];
                if *reduction == Reduction::Mean {
                    scale /= n as f64;
                }
                let mut dz = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    dz[i * k + y] -= 1.0;
                }
                dz.iter_mut().for_each(|v| *v *= scale);
                accumulate(adj, *logits, Tensor::new(vec![n, k], dz)?)?;
            }
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Tensor>], id: NodeId, grad: Tensor) -> Result<()> {
    grad.check_finite("backward")?;
    match &mut adj[id.0] {
        Some(existing) => {
            existing.expect_same_shape(&grad, "backward")?;
            for (e, g) in existing.data_mut().iter_mut().zip(grad.data()) {
                *e += g;
            }
        }
        slot @ None => *slot = Some(grad),
    }
    Ok(())
}

/// Returns `(logsumexp, softmax)` of one logit row.
pub(crate) fn log_softmax_row(row: &[f64]) -> (f64, Vec<f64>) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let lse = max + total.ln();
    (lse, exps.into_iter().map(|e| e / total).collect())
}

/// Per-example softmax cross-entropy and argmax predictions of `[N,K]` logits.
pub fn cross_entropy_per_example(logits: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Vec<usize>)> {
    let (n, k) = match *logits.shape() {
        [n, k] if n == labels.len() => (n, k),
        _ => return Err(shape_err("cross_entropy", format!("{:?}", logits.shape()))),
    };
    let mut losses = Vec::with_capacity(n);
    let mut preds = Vec::with_capacity(n);
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(invalid(format!("label {y} out of range for {k} classes")));
        }
        let row = &logits.data()[i * k..(i + 1) * k];
        let (lse, _) = log_softmax_row(row);
        losses.push(lse - row[y]);
        preds.push(argmax(row));
    }
    Ok((losses, preds))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `left · X · right` (or `leftᵀ · X · rightᵀ` when `transpose`) per trailing matrix.
pub(crate) fn apply_bilinear(x: &Tensor, left: &Tensor, right: &Tensor, transpose: bool) -> Result<Tensor> {
    let rank = x.rank();
    if rank < 2 || left.rank() != 2 || right.rank() != 2 {
        return Err(shape_err("bilinear", format!("{:?}", x.shape())));
    }
    let (h, w) = (x.shape()[rank - 2], x.shape()[rank - 1]);
    let (lr, lc) = (left.shape()[0], left.shape()[1]);
    let (rr, rc) = (right.shape()[0], right.shape()[1]);
    let (oh, ih, ls) = if transpose {
        (lc, lr, Strides::transposed(lc))
    } else {
        (lr, lc, Strides::row_major(lc))
    };
    let (iw, ow, rs) = if transpose {
        (rc, rr, Strides::transposed(rc))
    } else {
        (rr, rc, Strides::row_major(rc))
    };
    if ih != h || iw != w {
        return Err(shape_err(
            "bilinear",
            format!("input {:?} vs left {:?} right {:?}", x.shape(), left.shape(), right.shape()),
        ));
    }
    let planes = x.len() / (h * w);
    let mut tmp = vec![0.0; h * ow];
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let xin = &x.data()[p * h * w..(p + 1) * h * w];
        gemm(h, w, ow, 1.0, xin, Strides::row_major(w), right.data(), rs, 0.0, &mut tmp, Strides::row_major(ow));
        gemm(oh, h, ow, 1.0, left.data(), ls, &tmp, Strides::row_major(ow), 0.0, &mut out[p * oh * ow..], Strides::row_major(ow));
    }
    let mut shape = x.shape().to_vec();
    shape[rank - 2] = oh;
    shape[rank - 1] = ow;
    Tensor::new(shape, out)
}

struct ConvGeometry {
    n: usize,
    in_channels: usize,
    h: usize,
    w: usize,
    out_channels: usize,
    k: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], w: &[usize], pad: usize) -> Result<Self> {
        let (n, c, h, wd) = match *x {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(shape_err("conv2d", format!("input must be [N,C,H,W], got {x:?}"))),
        };
        let (o, k) = match *w {
            [o, wc, k, k2] if wc == c && k == k2 => (o, k),
            _ => return Err(shape_err("conv2d", format!("weight {w:?} for input {x:?}"))),
        };
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err("conv2d", format!("kernel {k} larger than padded input {x:?}")));
        }
        Ok(Self {
            n,
            in_channels: c,
            h,
            w: wd,
            out_channels: o,
            k,
            pad,
            out_h: h + 2 * pad - k + 1,
            out_w: wd + 2 * pad - k + 1,
        })
    }

    fn spatial_out(&self) -> usize {
        self.out_h * self.out_w
    }

    fn patch(&self) -> usize {
        self.in_channels * self.k * self.k
    }

    /// Output columns `ox` whose input column `ox + kj − pad` is inside the image.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kj);
        let hi = (self.w + self.pad).saturating_sub(kj).min(self.out_w);
        (lo, hi.max(lo))
    }

    /// Row `(c, ki, kj)`, column `(img, oy, ox)`.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let hw = self.spatial_out();
        let row_len = self.n * hw;
        let mut cols = vec![0.0; self.patch() * row_len];
        for c in 0..self.in_channels {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let r = (c * self.k + ki) * self.k + kj;
                    let row = &mut cols[r * row_len..(r + 1) * row_len];
                    for img in 0..self.n {
                        let plane = &x[(img * self.in_channels + c) * self.h * self.w..];
                        for oy in 0..self.out_h {
                            let iy = (oy + ki) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let (lo, hi) = self.valid_cols(kj);
                            let src = &plane[iy as usize * self.w..];
                            let dst = &mut row[img * hw + oy * self.out_w..];
                            dst[lo..hi].copy_from_slice(&src[lo + kj - self.pad..hi + kj - self.pad]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let hw = self.spatial_out();
        let row_len = self.n * hw;
        let mut x = vec![0.0; self.n * self.in_channels * self.h * self.w];
        for c in 0..self.in_channels {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let r = (c * self.k + ki) * self.k + kj;
                    let row = &cols[r * row_len..(r + 1) * row_len];
                    for img in 0..self.n {
                        let base = (img * self.in_channels + c) * self.h * self.w;
                        for oy in 0..self.out_h {
                            let iy = (oy + ki) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let (lo, hi) = self.valid_cols(kj);
                            let src = &row[img * hw + oy * self.out_w..][lo..hi];
                            let dst = &mut x[base + iy as usize * self.w + lo + kj - self.pad..][..hi - lo];
                            for (d, v) in dst.iter_mut().zip(src) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
        x
    }
}
