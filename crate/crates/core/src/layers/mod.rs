//! Parameterized layers: RMS normalization, the sparse top-k activation,
//! and thin conv/linear wrappers, all backed by a shared [`ParamStore`].

pub mod rmsnorm;
pub mod topk;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use rmsnorm::RMSNORM_EPS;
pub use topk::{topk_forward, topk_select, KeepRatio, SiteStats, SparseTopKActivation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

/// Graph handles for every parameter of a store, in store order.
#[derive(Debug, Clone)]
pub struct Bindings(Vec<Var>);

impl Bindings {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Places every parameter on the graph as a leaf.
    pub fn bind(&self, graph: &mut Graph<T>) -> Bindings {
        Bindings(self.tensors.iter().map(|t| graph.leaf(t.value_clone())).collect())
    }

    /// Adds the gradients of a finished backward pass into each parameter.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>, bindings: &Bindings) -> Result<()> {
        if bindings.0.len() != self.tensors.len() {
            return Err(Error::Usage("bindings do not belong to this parameter store".into()));
        }
        for (t, &v) in self.tensors.iter_mut().zip(&bindings.0) {
            match graph.grad(v) {
                Some(g) => t.accumulate_grad(g)?,
                None => t.accumulate_grad(&vec![T::zero(); t.len()])?,
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }
}

/// 3×3 or 1×1 convolution without bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, params: &Bindings, x: Var) -> Result<Var> {
        g.conv2d(x, params.var(self.weight), self.stride, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, params: &Bindings, x: Var) -> Result<Var> {
        g.linear(x, params.var(self.weight), params.var(self.bias))
    }
}

/// Channel RMS normalization with learnable per-channel scale and bias.
#[derive(Debug, Clone)]
pub struct RmsNorm2d {
    pub channels: usize,
    pub eps: f64,
    pub scale: ParamId,
    pub bias: ParamId,
}

impl RmsNorm2d {
    /// Registers `scale` (ones) and `bias` (zeros) under `prefix`.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, channels: usize) -> Self {
        let scale = store.add(format!("{prefix}.scale"), Tensor::full(&[channels], T::one()));
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(&[channels]));
        RmsNorm2d { channels, eps: RMSNORM_EPS, scale, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, params: &Bindings, x: Var) -> Result<Var> {
        g.rmsnorm(x, params.var(self.scale), params.var(self.bias), self.eps)
    }
}
