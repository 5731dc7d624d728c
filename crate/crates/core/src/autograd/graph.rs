//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its output value and whatever it needs
//! for its backward rule. [`Graph::backward`] then walks the tape once, in
//! exact reverse order of execution.

use crate::autograd::kernels::{self, ConvGeometry};
use crate::error::{Error, Result};
use crate::layers::rmsnorm;
use crate::layers::topk::{self, KeepRatio, SiteStats};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sum(Var),
    Conv2d { input: Var, weight: Var, geom: ConvGeometry },
    Linear { input: Var, weight: Var, bias: Var },
    GlobalAvgPool(Var),
    RmsNorm { input: Var, scale: Var, bias: Var, inv_rms: Vec<T> },
    SparseTopK(Var),
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    recording: bool,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), recording: true, backward_done: false }
    }

    /// A graph that never tracks gradients; used for evaluation.
    pub fn inference() -> Self {
        Graph { recording: false, ..Self::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass w.r.t. a leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let requires_grad = value.requires_grad() && self.recording;
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn tracks(&self, inputs: &[Var]) -> bool {
        self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn finish(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = self.tracks(inputs);
        let op = if requires_grad { op } else { Op::Leaf };
        Ok(self.push(value, op, requires_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, format!("shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(self.value(a).shape(), data)?;
        self.finish("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(self.value(a).shape(), data)?;
        self.finish("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let c = T::of(factor);
        let data = self.value(a).data().iter().map(|&x| x * c).collect();
        let out = Tensor::new(self.value(a).shape(), data)?;
        self.finish("scale", out, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
        let out = Tensor::new(self.value(a).shape(), data)?;
        self.finish("relu", out, Op::Relu(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().copied().sum();
        let out = Tensor::new(&[1], vec![total])?;
        self.finish("sum", out, Op::Sum(a), &[a])
    }

    /// Cross-correlation of an NCHW input with an OIHW kernel, no bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let [n, cin, h, w] = self.value(input).dims4("conv2d")?;
        let [cout, wcin, kh, kw] = self.value(weight).dims4("conv2d")?;
        let shapes = || format!("input {:?}, weight {:?}", self.value(input).shape(), self.value(weight).shape());
        if wcin != cin {
            return Err(Error::dim("conv2d", format!("channel mismatch: {}", shapes())));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::dim("conv2d", format!("kernel extents must be odd: {}", shapes())));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be >= 1".into()));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::dim("conv2d", format!("kernel larger than padded input: {}", shapes())));
        }
        let geom = ConvGeometry {
            batch: n,
            in_channels: cin,
            height: h,
            width: w,
            out_channels: cout,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_height: (h + 2 * padding - kh) / stride + 1,
            out_width: (w + 2 * padding - kw) / stride + 1,
        };
        let mut data = vec![T::zero(); n * cout * geom.out_height * geom.out_width];
        kernels::conv2d_forward(&geom, self.value(input).data(), self.value(weight).data(), &mut data);
        let out = Tensor::new(&[n, cout, geom.out_height, geom.out_width], data)?;
        self.finish("conv2d", out, Op::Conv2d { input, weight, geom }, &[input, weight])
    }

    /// `out[n,k] = Σ_f input[n,f]·weight[k,f] + bias[k]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let [n, f] = self.value(input).dims2("linear")?;
        let [k, wf] = self.value(weight).dims2("linear")?;
        if wf != f || self.value(bias).shape() != [k] {
            return Err(Error::dim(
                "linear",
                format!(
                    "input {:?}, weight {:?}, bias {:?}",
                    self.value(input).shape(),
                    self.value(weight).shape(),
                    self.value(bias).shape()
                ),
            ));
        }
        let mut data = vec![T::zero(); n * k];
        kernels::linear_forward(
            n,
            f,
            k,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &mut data,
        );
        let out = Tensor::new(&[n, k], data)?;
        self.finish("linear", out, Op::Linear { input, weight, bias }, &[input, weight, bias])
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("global_avg_pool")?;
        if h == 0 || w == 0 {
            return Err(Error::dim("global_avg_pool", "empty spatial extent"));
        }
        let inv = T::one() / T::of((h * w) as f64);
        let data = self
            .value(input)
            .data()
            .chunks_exact(h * w)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new(&[n, c], data)?;
        self.finish("global_avg_pool", out, Op::GlobalAvgPool(input), &[input])
    }

    pub fn rmsnorm(&mut self, input: Var, scale: Var, bias: Var, eps: f64) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("rmsnorm")?;
        if self.value(scale).shape() != [c] || self.value(bias).shape() != [c] {
            return Err(Error::dim(
                "rmsnorm",
                format!(
                    "input has {c} channels but scale {:?} / bias {:?}",
                    self.value(scale).shape(),
                    self.value(bias).shape()
                ),
            ));
        }
        let mut data = vec![T::zero(); n * c * h * w];
        let mut inv_rms = vec![T::zero(); n * h * w];
        rmsnorm::rmsnorm_forward(
            self.value(input).data(),
            c,
            h * w,
            self.value(scale).data(),
            self.value(bias).data(),
            T::of(eps),
            &mut data,
            &mut inv_rms,
        );
        let out = Tensor::new(&[n, c, h, w], data)?;
        let inv_rms = if self.tracks(&[input, scale, bias]) { inv_rms } else { Vec::new() };
        self.finish("rmsnorm", out, Op::RmsNorm { input, scale, bias, inv_rms }, &[input, scale, bias])
    }

    /// ReLU followed by global per-sample top-k over all non-batch axes.
    pub fn sparse_topk(&mut self, input: Var, keep: KeepRatio) -> Result<(Var, SiteStats)> {
        let x = self.value(input);
        if x.ndim() < 2 || x.shape()[0] == 0 {
            return Err(Error::dim("sparse_topk", format!("expected a batched tensor, got {:?}", x.shape())));
        }
        let d = x.len() / x.shape()[0];
        let mut data = vec![T::zero(); x.len()];
        let stats = topk::topk_forward(x.data(), d, keep, &mut data);
        let out = Tensor::new(x.shape(), data)?;
        let v = self.finish("sparse_topk", out, Op::SparseTopK(input), &[input])?;
        Ok((v, stats))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [n, k] = self.value(logits).dims2("softmax_cross_entropy")?;
        if labels.len() != n {
            return Err(Error::dim("softmax_cross_entropy", format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Input(format!("label {bad} outside [0, {k})")));
        }
        let mut probs = vec![T::zero(); n * k];
        let mut total = 0.0f64;
        for ((row, p), &label) in self.value(logits).data().chunks_exact(k).zip(probs.chunks_exact_mut(k)).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (pi, &v) in p.iter_mut().zip(row) {
                *pi = (v - max).exp();
                z += *pi;
            }
            p.iter_mut().for_each(|pi| *pi /= z);
            total += (z.ln() - (row[label] - max)).as_f64();
        }
        let out = Tensor::new(&[1], vec![T::of(total / n as f64)])?;
        let labels = labels.to_vec();
        self.finish("softmax_cross_entropy", out, Op::SoftmaxCrossEntropy { logits, labels, probs }, &[logits])
    }

    fn grad_buffer(&mut self, v: Var) -> Option<Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(self.grads[v.0].take().unwrap_or_else(|| vec![T::zero(); len]))
    }

    fn restore(&mut self, v: Var, buf: Option<Vec<T>>) {
        if buf.is_some() {
            self.grads[v.0] = buf;
        }
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&Self, &mut [T])) {
        if let Some(mut buf) = self.grad_buffer(v) {
            f(self, &mut buf);
            self.restore(v, Some(buf));
        }
    }

    /// Backpropagates from a scalar loss.
    ///
    /// Returns how many nodes were visited. Each graph supports exactly one
    /// backward pass; leaf gradients stay readable via [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<usize> {
        if self.backward_done {
            return Err(Error::Usage("backward already ran on this graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!("backward needs a scalar loss, got shape {:?}", self.value(loss).shape())));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Usage("loss does not depend on any tensor that requires grad".into()));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![T::one()]);
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            visited += 1;
            self.propagate(i, &g);
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
            }
        }
        Ok(visited)
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        // Temporarily move the op out so `self` can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accumulate(v, |_, d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, |s, d| {
                    d.iter_mut().zip(g).zip(s.value(b).data()).for_each(|((d, &g), &y)| *d += g * y)
                });
                self.accumulate(b, |s, d| {
                    d.iter_mut().zip(g).zip(s.value(a).data()).for_each(|((d, &g), &x)| *d += g * x)
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(*a, |_, d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * c));
            }
            Op::Relu(a) => {
                let a = *a;
                self.accumulate(a, |s, d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(s.value(a).data()) {
                        if x > T::zero() {
                            *d += g;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = g[0];
                self.accumulate(*a, |_, d| d.iter_mut().for_each(|d| *d += g0));
            }
            Op::Conv2d { input, weight, geom } => {
                let (input, weight) = (*input, *weight);
                self.accumulate(weight, |s, dw| {
                    kernels::conv2d_backward(geom, s.value(input).data(), s.value(weight).data(), g, None, Some(dw))
                });
                self.accumulate(input, |s, dx| {
                    kernels::conv2d_backward(geom, s.value(input).data(), s.value(weight).data(), g, Some(dx), None)
                });
            }
            Op::Linear { input, weight, bias } => {
                let (input, weight, bias) = (*input, *weight, *bias);
                let [n, f] = self.value(input).dims2("linear").expect("checked in forward");
                let k = self.value(bias).len();
                self.accumulate(input, |s, dx| {
                    kernels::linear_backward(n, f, k, s.value(input).data(), s.value(weight).data(), g, Some(dx), None, None)
                });
                self.accumulate(weight, |s, dw| {
                    kernels::linear_backward(n, f, k, s.value(input).data(), s.value(weight).data(), g, None, Some(dw), None)
                });
                self.accumulate(bias, |s, db| {
                    kernels::linear_backward(n, f, k, s.value(input).data(), s.value(weight).data(), g, None, None, Some(db))
                });
            }
            Op::GlobalAvgPool(a) => {
                let a = *a;
                let [_, _, h, w] = self.value(a).dims4("global_avg_pool").expect("checked in forward");
                let inv = T::one() / T::of((h * w) as f64);
                self.accumulate(a, |_, d| {
                    for (plane, &gv) in d.chunks_exact_mut(h * w).zip(g) {
                        plane.iter_mut().for_each(|d| *d += gv * inv);
                    }
                });
            }
            Op::RmsNorm { input, scale, bias, inv_rms } => {
                let (input, scale, bias) = (*input, *scale, *bias);
                let [_, c, h, w] = self.value(input).dims4("rmsnorm").expect("checked in forward");
                let mut dx = self.grad_buffer(input);
                let mut ds = self.grad_buffer(scale);
                let mut db = self.grad_buffer(bias);
                rmsnorm::rmsnorm_backward(
                    self.value(input).data(),
                    c,
                    h * w,
                    self.value(scale).data(),
                    inv_rms,
                    g,
                    dx.as_deref_mut(),
                    ds.as_deref_mut(),
                    db.as_deref_mut(),
                );
                self.restore(input, dx);
                self.restore(scale, ds);
                self.restore(bias, db);
            }
            Op::SparseTopK(a) => {
                self.accumulate(*a, |s, d| topk::topk_backward(s.nodes[i].value.data(), g, d));
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let k = probs.len() / labels.len();
                let scale = g[0] / T::of(labels.len() as f64);
                self.accumulate(*logits, |_, d| {
                    for ((row, p), &label) in d.chunks_exact_mut(k).zip(probs.chunks_exact(k)).zip(labels) {
                        for (j, (d, &pj)) in row.iter_mut().zip(p).enumerate() {
                            let target = if j == label { T::one() } else { T::zero() };
                            *d += (pj - target) * scale;
                        }
                    }
                });
            }
        }
        self.nodes[i].op = op;
    }
}
