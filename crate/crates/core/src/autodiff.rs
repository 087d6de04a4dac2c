//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its output
//! value and enough information to push an adjoint back to its inputs.
//! Nodes are only ever appended, so the tape order is a topological order and
//! [`Graph::backward`] is a single reverse sweep visiting each node once.
//!
//! Broadcasting is deliberately absent. Elementwise binary ops require equal
//! shapes; the only broadcast is [`Graph::bias_add`] over the channel axis.

use crate::error::{Error, Result};
use crate::kernels::{col2im_add, gemm, im2col, ConvGeom, MatView};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    ScalarMul(Var, f64),
    MatMul(Var, Var),
    Relu(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        batch: usize,
        c_out: usize,
    },
    BiasAdd(Var, Var),
    Reshape(Var),
    GlobalAvgPool(Var),
    Reduce {
        input: Var,
        index_map: Vec<usize>,
        scale: f64,
    },
    MaxRows {
        input: Var,
        argmax: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    MaskChannels {
        input: Var,
        mask: Vec<bool>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    /// Accumulated gradient; only present on parameter leaves.
    grad: Option<Vec<f64>>,
}

/// A computation record.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is accumulated by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        let n = value.len();
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].grad = Some(vec![0.0; n]);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Accumulated gradient of a parameter leaf, `None` for anything else.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g.clone()))
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Smallest distance of any recorded operation from a non-differentiable
    /// point: `|x|` over relu inputs, and the top-two gap in row maxima.
    /// Finite-difference probes smaller than this margin never cross a kink.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.value(*x).data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::MaxRows { input, argmax } => {
                    let t = self.value(*input);
                    let cols = t.shape()[1];
                    for (c, &best) in argmax.iter().enumerate() {
                        let top = t.data()[best * cols + c];
                        for r in 0..t.shape()[0] {
                            if r != best {
                                margin = margin.min(top - t.data()[r * cols + c]);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "{name} produced non-finite value {} at flat index {pos}",
                data[pos]
            )));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(Tensor::from_parts(shape, data), op, needs_grad))
    }

    fn same_shape(&self, name: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension(format!("{name}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.record(name, shape, data, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x + s).collect();
        let shape = t.shape().to_vec();
        self.record("add_scalar", shape, data, Op::AddScalar(a), &[a])
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x * s).collect();
        let shape = t.shape().to_vec();
        self.record("scalar_mul", shape, data, Op::ScalarMul(a, s), &[a])
    }

    /// `[m, k] · [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!("matmul: incompatible shapes {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            self.value(a).data(),
            MatView::row_major(m, k),
            self.value(b).data(),
            MatView::row_major(k, n),
            0.0,
            &mut out,
        );
        self.record("matmul", vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    /// Elementwise `max(0, x)`; the subgradient at exactly zero is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let shape = t.shape().to_vec();
        self.record("relu", shape, data, Op::Relu(a), &[a])
    }

    /// Cross-correlation of `[n, c_in, h, w]` with `[c_out, c_in, kh, kw]`,
    /// lowered to one matrix product per image.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (si, sk) = (self.value(input).shape(), self.value(kernel).shape());
        if si.len() != 4 || sk.len() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d expects rank-4 input and kernel, got {si:?} and {sk:?}"
            )));
        }
        if si[1] != sk[1] {
            return Err(Error::Dimension(format!(
                "conv2d: input has {} channels, kernel expects {}",
                si[1], sk[1]
            )));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be positive".into()));
        }
        let (batch, c_in, h, w) = (si[0], si[1], si[2], si[3]);
        let (c_out, kh, kw) = (sk[0], sk[2], sk[3]);
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::Dimension(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let geom = ConvGeom {
            c_in,
            h,
            w,
            kh,
            kw,
            stride,
            padding,
            h_out: (h + 2 * padding - kh) / stride + 1,
            w_out: (w + 2 * padding - kw) / stride + 1,
        };
        let (r, p) = (geom.patch_len(), geom.out_len());
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let mut out = vec![0.0; batch * c_out * p];
        let mut cols = vec![0.0; r * p];
        for n in 0..batch {
            im2col(&x[n * c_in * h * w..(n + 1) * c_in * h * w], &geom, &mut cols);
            gemm(
                k,
                MatView::row_major(c_out, r),
                &cols,
                MatView::row_major(r, p),
                0.0,
                &mut out[n * c_out * p..(n + 1) * c_out * p],
            );
        }
        let op = Op::Conv2d {
            input,
            kernel,
            geom,
            batch,
            c_out,
        };
        self.record("conv2d", vec![batch, c_out, geom.h_out, geom.w_out], out, op, &[input, kernel])
    }

    /// Adds `bias[c]` to every element of channel `c` (axis 1).
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.value(x).shape(), self.value(bias).shape());
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::Dimension(format!("bias_add: cannot add {sb:?} over axis 1 of {sx:?}")));
        }
        let channels = sx[1];
        let inner: usize = sx[2..].iter().product();
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[(i / inner) % channels])
            .collect();
        let shape = sx.to_vec();
        self.record("bias_add", shape, data, Op::BiasAdd(x, bias), &[x, bias])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let (shape, data) = (t.shape().to_vec(), t.into_data());
        self.record("reshape", shape, data, Op::Reshape(x), &[x])
    }

    /// `[n, ...] → [n, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        if s.is_empty() {
            return Err(Error::Dimension("flatten needs a leading batch axis".into()));
        }
        let n = s[0];
        let rest = self.value(x).len() / n;
        self.reshape(x, &[n, rest])
    }

    /// `[n, c, h, w] → [n, c]` by averaging over spatial positions.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        if s.len() != 4 {
            return Err(Error::Dimension(format!("global_avg_pool expects rank 4, got {s:?}")));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let inv = 1.0 / hw as f64;
        let data = self
            .value(x)
            .data()
            .chunks_exact(hw)
            .map(|plane| plane.iter().sum::<f64>() * inv)
            .collect();
        self.record("global_avg_pool", vec![n, c], data, Op::GlobalAvgPool(x), &[x])
    }

    /// Sums over `axes`, removing them from the shape.
    pub fn sum_over(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce("sum_over", x, axes, false)
    }

    /// Averages over `axes`, removing them from the shape.
    pub fn mean_over(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce("mean_over", x, axes, true)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.mean_over(x, &axes)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.sum_over(x, &axes)
    }

    fn reduce(&mut self, name: &str, x: Var, axes: &[usize], mean: bool) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let mut reduced = vec![false; shape.len()];
        for &a in axes {
            if a >= shape.len() || reduced[a] {
                return Err(Error::Dimension(format!("{name}: invalid axes {axes:?} for shape {shape:?}")));
            }
            reduced[a] = true;
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&d, _)| d)
            .collect();
        let count: usize = shape.iter().zip(&reduced).filter(|(_, &r)| r).map(|(&d, _)| d).product();
        let scale = if mean { 1.0 / count as f64 } else { 1.0 };

        let total = self.value(x).len();
        let mut index_map = Vec::with_capacity(total);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..total {
            let mut o = 0;
            for (k, &d) in shape.iter().enumerate() {
                if !reduced[k] {
                    o = o * d + idx[k];
                }
            }
            index_map.push(o);
            for k in (0..shape.len()).rev() {
                idx[k] += 1;
                if idx[k] < shape[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        let out_len: usize = out_shape.iter().product();
        let mut out = vec![0.0; out_len];
        for (&o, &v) in index_map.iter().zip(self.value(x).data()) {
            out[o] += v;
        }
        out.iter_mut().for_each(|v| *v *= scale);
        let op = Op::Reduce {
            input: x,
            index_map,
            scale,
        };
        self.record(name, out_shape, out, op, &[x])
    }

    /// Column-wise maximum of a `[rows, cols]` matrix. Ties go to the lowest
    /// row index, and the gradient flows only through that row.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        if s.len() != 2 {
            return Err(Error::Dimension(format!("max_rows expects rank 2, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let d = self.value(x).data();
        let mut argmax = vec![0usize; cols];
        let mut out = vec![0.0; cols];
        for c in 0..cols {
            let mut best = 0;
            for r in 1..rows {
                if d[r * cols + c] > d[best * cols + c] {
                    best = r;
                }
            }
            argmax[c] = best;
            out[c] = d[best * cols + c];
        }
        self.record("max_rows", vec![cols], out, Op::MaxRows { input: x, argmax }, &[x])
    }

    /// Row-wise argmax indices of the most recent [`Graph::max_rows`] node `v`.
    pub fn argmax_of(&self, v: Var) -> Option<&[usize]> {
        match &self.nodes[v.0].op {
            Op::MaxRows { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    /// Zeroes the channels (axis 1) where `mask` is true.
    pub fn mask_channels(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let s = self.value(x).shape();
        if s.len() < 2 || s[1] != mask.len() {
            return Err(Error::Dimension(format!(
                "mask of length {} does not match channels of {s:?}",
                mask.len()
            )));
        }
        let channels = s[1];
        let inner: usize = s[2..].iter().product();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if mask[(i / inner) % channels] { 0.0 } else { v })
            .collect();
        let shape = s.to_vec();
        let op = Op::MaskChannels {
            input: x,
            mask: mask.to_vec(),
        };
        self.record("mask_channels", shape, data, op, &[x])
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, stabilized by
    /// subtracting each row's maximum.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.value(logits).shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "softmax_cross_entropy: logits {s:?} vs {} labels",
                labels.len()
            )));
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index(format!("label {bad} out of range for {c} classes")));
        }
        let d = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &d[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            for j in 0..c {
                probs[i * c + j] = (row[j] - max).exp() / denom;
            }
            loss += denom.ln() - (row[labels[i]] - max);
        }
        loss /= n as f64;
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.record("softmax_cross_entropy", Vec::new(), vec![loss], op, &[logits])
    }

    /// Accumulates `∂loss/∂p` into every parameter leaf `p` reachable from
    /// `loss`. Calling it twice without [`Graph::zero_grads`] adds twice.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let end = loss.0 + 1;
        let mut adj: Vec<Option<Vec<f64>>> = (0..end).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..end).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            if let Some(acc) = self.nodes[i].grad.as_mut() {
                acc.iter_mut().zip(&g).for_each(|(a, &d)| *a += d);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        let mut send = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !wants(v) {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, &d)| *s += d));
                send(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, &d)| *s += d));
            }
            Op::Sub(a, b) => {
                send(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, &d)| *s += d));
                send(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, &d)| *s -= d));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                send(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * vb[k];
                    }
                });
                send(*b, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * va[k];
                    }
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                send(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] / vb[k];
                    }
                });
                send(*b, &mut |s| {
                    for k in 0..s.len() {
                        s[k] -= g[k] * va[k] / (vb[k] * vb[k]);
                    }
                });
            }
            Op::AddScalar(a) => {
                send(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, &d)| *s += d));
            }
            Op::ScalarMul(a, k) => {
                send(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, &d)| *s += k * d));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let gv = MatView::row_major(m, n);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                // dA = G·Bᵀ, dB = Aᵀ·G
                send(*a, &mut |s| gemm(g, gv, vb, MatView::row_major(k, n).t(), 1.0, s));
                send(*b, &mut |s| gemm(va, MatView::row_major(m, k).t(), g, gv, 1.0, s));
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                send(*a, &mut |s| {
                    for k in 0..s.len() {
                        if va[k] > 0.0 {
                            s[k] += g[k];
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                batch,
                c_out,
            } => {
                let (r, p) = (geom.patch_len(), geom.out_len());
                let img_len = geom.c_in * geom.h * geom.w;
                let x = self.value(*input).data();
                let k = self.value(*kernel).data();
                let mut cols = vec![0.0; r * p];
                let gview = MatView::row_major(*c_out, p);
                if wants(*kernel) {
                    let mut dk = vec![0.0; c_out * r];
                    for n in 0..*batch {
                        im2col(&x[n * img_len..(n + 1) * img_len], geom, &mut cols);
                        let gn = &g[n * c_out * p..(n + 1) * c_out * p];
                        gemm(gn, gview, &cols, MatView::row_major(r, p).t(), 1.0, &mut dk);
                    }
                    send(*kernel, &mut |s| s.iter_mut().zip(&dk).for_each(|(s, &d)| *s += d));
                }
                if wants(*input) {
                    send(*input, &mut |s| {
                        for n in 0..*batch {
                            let gn = &g[n * c_out * p..(n + 1) * c_out * p];
                            gemm(k, MatView::row_major(*c_out, r).t(), gn, gview, 0.0, &mut cols);
                            col2im_add(&cols, geom, &mut s[n * img_len..(n + 1) * img_len]);
                        }
                    });
                }
            }
            Op::BiasAdd(x, bias) => {
                let sx = self.value(*x).shape();
                let channels = sx[1];
                let inner: usize = sx[2..].iter().product();
                send(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, &d)| *s += d));
                send(*bias, &mut |s| {
                    for (k, &d) in g.iter().enumerate() {
                        s[(k / inner) % channels] += d;
                    }
                });
            }
            Op::Reshape(x) => {
                send(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, &d)| *s += d));
            }
            Op::GlobalAvgPool(x) => {
                let sx = self.value(*x).shape();
                let hw = sx[2] * sx[3];
                let inv = 1.0 / hw as f64;
                send(*x, &mut |s| {
                    for (k, plane) in s.chunks_exact_mut(hw).enumerate() {
                        plane.iter_mut().for_each(|v| *v += g[k] * inv);
                    }
                });
            }
            Op::Reduce {
                input,
                index_map,
                scale,
            } => {
                send(*input, &mut |s| {
                    for (k, &o) in index_map.iter().enumerate() {
                        s[k] += g[o] * scale;
                    }
                });
            }
            Op::MaxRows { input, argmax } => {
                let cols = argmax.len();
                send(*input, &mut |s| {
                    for (c, &r) in argmax.iter().enumerate() {
                        s[r * cols + c] += g[c];
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let c = probs.len() / n;
                let scale = g[0] / n as f64;
                send(*logits, &mut |s| {
                    for i in 0..n {
                        for j in 0..c {
                            let target = if j == labels[i] { 1.0 } else { 0.0 };
                            s[i * c + j] += scale * (probs[i * c + j] - target);
                        }
                    }
                });
            }
            Op::MaskChannels { input, mask } => {
                let sx = self.value(*input).shape();
                let channels = sx[1];
                let inner: usize = sx[2..].iter().product();
                send(*input, &mut |s| {
                    for (k, &d) in g.iter().enumerate() {
                        if !mask[(k / inner) % channels] {
                            s[k] += d;
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_of_ones_sums_the_window() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let k = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[9.0]);
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut g = Graph::new();
        let data = [0.3, -1.2, 4.0, 2.5];
        let x = g.constant(t(&[1, 1, 2, 2], &data));
        let k = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &data);
    }

    #[test]
    fn conv_channel_mismatch_is_dimension_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let k = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(matches!(g.conv2d(x, k, 1, 0), Err(Error::Dimension(_))));
        let k = g.constant(Tensor::zeros(&[1, 2, 5, 5]));
        assert!(matches!(g.conv2d(x, k, 1, 0), Err(Error::Dimension(_))));
        assert!(g.conv2d(x, k, 1, 1).is_ok());
    }

    #[test]
    fn relu_values_and_subgradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(t(&[2], &[-1.0, 2.0]));
        let w = g.constant(t(&[2], &[5.0, 5.0]));
        let y = g.relu(x).unwrap();
        let y = g.mul(y, w).unwrap();
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 5.0]);
    }

    #[test]
    fn reductions_and_pooling() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[2.0, 4.0]));
        let m = g.mean_all(x).unwrap();
        assert_eq!(g.value(m).item().unwrap(), 3.0);

        let x = g.constant(t(&[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 8.0]));
        let p = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(p).shape(), &[1, 2]);
        assert_eq!(g.value(p).data(), &[2.5, 2.0]);

        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let s0 = g.sum_over(x, &[0]).unwrap();
        assert_eq!(g.value(s0).data(), &[5.0, 7.0, 9.0]);
        let m1 = g.mean_over(x, &[1]).unwrap();
        assert_eq!(g.value(m1).data(), &[2.0, 5.0]);
        assert!(g.sum_over(x, &[2]).is_err());
    }

    #[test]
    fn matmul_by_identity() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let mut eye = Tensor::zeros(&[3, 3]).into_data();
        for i in 0..3 {
            eye[i * 4] = 1.0;
        }
        let mut g = Graph::new();
        let av = g.constant(a.clone());
        let iv = g.constant(t(&[3, 3], &eye));
        let p = g.matmul(av, iv).unwrap();
        assert_eq!(g.value(p), &a);
        let bad = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(av, bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.add(a, b), Err(Error::Dimension(_))));
        assert!(matches!(g.mul(a, b), Err(Error::Dimension(_))));
        let bias = g.constant(Tensor::zeros(&[2]));
        assert!(g.bias_add(b, bias).is_ok());
        assert!(matches!(g.bias_add(a, bias), Err(Error::Dimension(_))));
    }

    #[test]
    fn cross_entropy_edge_cases() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[1, 4]));
        let l = g.softmax_cross_entropy(z, &[2]).unwrap();
        assert!((g.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-15);

        let z = g.constant(t(&[1, 2], &[1000.0, 0.0]));
        let l = g.softmax_cross_entropy(z, &[0]).unwrap();
        let v = g.value(l).item().unwrap();
        assert!(v.is_finite() && v.abs() < 1e-300);

        assert!(matches!(g.softmax_cross_entropy(z, &[2]), Err(Error::Index(_))));
    }

    #[test]
    fn backward_simple_cases() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[2, 3], 0.7));
        let s = g.sum_all(x).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));

        let mut g = Graph::new();
        let x = g.param(t(&[1], &[3.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum_all(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);

        // accumulation without reset doubles exactly
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[12.0]);
        g.zero_grads();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0]);

        assert!(matches!(g.backward(sq), Ok(())));
        let v = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_never_receive_gradients() {
        let mut g = Graph::new();
        let c = g.constant(t(&[2], &[1.0, 2.0]));
        let p = g.param(t(&[2], &[3.0, 4.0]));
        let y = g.mul(c, p).unwrap();
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(p).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn max_rows_breaks_ties_low() {
        let mut g = Graph::new();
        let x = g.param(t(&[3, 2], &[1.0, 5.0, 1.0, 2.0, 0.0, 5.0]));
        let m = g.max_rows(x).unwrap();
        assert_eq!(g.value(m).data(), &[1.0, 5.0]);
        assert_eq!(g.argmax_of(m).unwrap(), &[0, 0]);
        let s = g.sum_all(m).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1], &[1.0]));
        let z = g.constant(t(&[1], &[0.0]));
        assert!(matches!(g.div(a, z), Err(Error::Numeric(_))));
        let big = g.constant(t(&[1], &[f64::MAX]));
        assert!(matches!(g.scalar_mul(big, 10.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn inputs_are_not_mutated() {
        let mut g = Graph::new();
        let xs = t(&[1, 2, 3, 3], &(0..18).map(|v| v as f64 - 9.0).collect::<Vec<_>>());
        let x = g.param(xs.clone());
        let k = g.param(Tensor::full(&[2, 2, 2, 2], 0.5));
        let y = g.conv2d(x, k, 1, 1).unwrap();
        let y = g.relu(y).unwrap();
        let y = g.mask_channels(y, &[true, false]).unwrap();
        let l = g.mean_all(y).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.value(x), &xs);
        assert_eq!(g.value(k), &Tensor::full(&[2, 2, 2, 2], 0.5));
    }
}
