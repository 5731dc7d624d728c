//! Pre-activation wide residual network with a ReLU + top-k site in front of
//! every convolution of every block, plus one before the classifier head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{Bindings, Conv2d, KeepRatio, Linear, ParamStore, RmsNorm2d, SiteStats, SparseTopKActivation};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub depth: usize,
    pub widen_factor: usize,
    pub num_classes: usize,
    pub input_channels: usize,
}

impl ModelSpec {
    pub fn wrn(depth: usize, widen_factor: usize) -> Self {
        ModelSpec { depth, widen_factor, num_classes: 10, input_channels: IMAGE_CHANNELS }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 10 || (self.depth - 4) % 6 != 0 {
            return Err(Error::Config(format!(
                "WRN depth must have the form 6n+4 with n >= 1, got {}",
                self.depth
            )));
        }
        if self.widen_factor == 0 || self.num_classes == 0 || self.input_channels == 0 {
            return Err(Error::Config("widen factor, class count and input channels must be positive".into()));
        }
        Ok(())
    }

    pub fn blocks_per_group(&self) -> usize {
        (self.depth - 4) / 6
    }

    /// Stem width followed by the three group widths.
    pub fn channel_plan(&self) -> [usize; 4] {
        let k = self.widen_factor;
        [16, 16 * k, 32 * k, 64 * k]
    }
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::wrn(28, 4)
    }
}

/// What each sparsity site computes during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SiteActivation {
    TopK(KeepRatio),
    /// Plain ReLU with no selection.
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    pub activation: SiteActivation,
    /// Skip every RMSNorm layer (smoke checks of the residual path only).
    pub bypass_norm: bool,
}

impl ForwardOptions {
    pub fn topk(r: KeepRatio) -> Self {
        ForwardOptions { activation: SiteActivation::TopK(r), bypass_norm: false }
    }
}

/// Per-call byproducts of a forward pass; the model itself is not mutated.
#[derive(Debug, Clone, Default)]
pub struct ForwardReport {
    /// One entry per sparsity site, in network order.
    pub sites: Vec<SiteStats>,
    /// Output shapes of the three residual groups.
    pub group_shapes: Vec<Vec<usize>>,
    pub pooled_shape: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct BasicBlock {
    pub norm1: RmsNorm2d,
    pub sparse1: SparseTopKActivation,
    pub conv1: Conv2d,
    pub norm2: RmsNorm2d,
    pub sparse2: SparseTopKActivation,
    pub conv2: Conv2d,
    pub shortcut: Option<Conv2d>,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct WideResNet<T> {
    pub spec: ModelSpec,
    pub params: ParamStore<T>,
    pub stem: Conv2d,
    pub groups: Vec<Vec<BasicBlock>>,
    pub final_norm: RmsNorm2d,
    pub final_sparse: SparseTopKActivation,
    pub head: Linear,
}

struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    /// Kaiming normal, fan-out mode, ReLU gain.
    fn conv(&mut self, name: String, cin: usize, cout: usize, kernel: usize, stride: usize) -> Conv2d {
        let std = (2.0 / (cout * kernel * kernel) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let data = (0..cout * cin * kernel * kernel).map(|_| T::of(normal.sample(&mut self.rng))).collect();
        let weight = self.store.add(name, Tensor::new(&[cout, cin, kernel, kernel], data).expect("sized"));
        Conv2d { weight, stride, padding: kernel / 2 }
    }

    fn linear(&mut self, name: &str, fan_in: usize, out: usize) -> Linear {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..out * fan_in).map(|_| T::of(self.rng.random_range(-bound..bound))).collect();
        let weight = self.store.add(format!("{name}.weight"), Tensor::new(&[out, fan_in], data).expect("sized"));
        let bias = self.store.add(format!("{name}.bias"), Tensor::zeros(&[out]));
        Linear { weight, bias }
    }
}

impl<T: Scalar> WideResNet<T> {
    /// Builds and initializes a network; `seed` drives weight initialization.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder { store: &mut params, rng: ChaCha8Rng::seed_from_u64(seed) };
        let plan = spec.channel_plan();
        let stem = b.conv("stem.weight".into(), spec.input_channels, plan[0], 3, 1);
        let mut groups = Vec::with_capacity(3);
        let mut cin = plan[0];
        for (gi, (&cout, stride)) in plan[1..].iter().zip([1, 2, 2]).enumerate() {
            let mut blocks = Vec::with_capacity(spec.blocks_per_group());
            for bi in 0..spec.blocks_per_group() {
                let p = format!("group{gi}.block{bi}");
                let s = if bi == 0 { stride } else { 1 };
                let norm1 = RmsNorm2d::new(b.store, &format!("{p}.norm1"), cin);
                let conv1 = b.conv(format!("{p}.conv1.weight"), cin, cout, 3, s);
                let norm2 = RmsNorm2d::new(b.store, &format!("{p}.norm2"), cout);
                let conv2 = b.conv(format!("{p}.conv2.weight"), cout, cout, 3, 1);
                let shortcut = (s != 1 || cin != cout).then(|| b.conv(format!("{p}.shortcut.weight"), cin, cout, 1, s));
                blocks.push(BasicBlock {
                    norm1,
                    sparse1: SparseTopKActivation::new(format!("{p}.sparse1")),
                    conv1,
                    norm2,
                    sparse2: SparseTopKActivation::new(format!("{p}.sparse2")),
                    conv2,
                    shortcut,
                    stride: s,
                });
                cin = cout;
            }
            groups.push(blocks);
        }
        let final_norm = RmsNorm2d::new(b.store, "final.norm", cin);
        let head = b.linear("head", cin, spec.num_classes);
        Ok(WideResNet {
            spec,
            params,
            stem,
            groups,
            final_norm,
            final_sparse: SparseTopKActivation::new("final.sparse"),
            head,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    /// Number of ReLU + top-k sites: two per block plus the pre-head site.
    pub fn count_sparsity_sites(&self) -> usize {
        self.site_names().len()
    }

    pub fn site_names(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self
            .groups
            .iter()
            .flatten()
            .flat_map(|b| [b.sparse1.name.as_str(), b.sparse2.name.as_str()])
            .collect();
        names.push(&self.final_sparse.name);
        names
    }

    /// Records the forward pass onto `g`, returning the logits.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        params: &Bindings,
        images: Var,
        opts: ForwardOptions,
    ) -> Result<(Var, ForwardReport)> {
        let shape = g.value(images).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.spec.input_channels || shape[2] != IMAGE_SIDE || shape[3] != IMAGE_SIDE {
            return Err(Error::dim(
                "wrn forward",
                format!(
                    "expected images of shape [N, {}, {IMAGE_SIDE}, {IMAGE_SIDE}], got {shape:?}",
                    self.spec.input_channels
                ),
            ));
        }
        let mut report = ForwardReport::default();
        let site = |g: &mut Graph<T>, x: Var, report: &mut ForwardReport| -> Result<Var> {
            match opts.activation {
                SiteActivation::TopK(r) => {
                    let (y, stats) = g.sparse_topk(x, r)?;
                    report.sites.push(stats);
                    Ok(y)
                }
                SiteActivation::Relu => g.relu(x),
            }
        };
        let norm = |g: &mut Graph<T>, n: &RmsNorm2d, x: Var| -> Result<Var> {
            if opts.bypass_norm {
                Ok(x)
            } else {
                n.forward(g, params, x)
            }
        };

        let mut x = self.stem.forward(g, params, images)?;
        for group in &self.groups {
            for block in group {
                let pre = norm(g, &block.norm1, x)?;
                let pre = site(g, pre, &mut report)?;
                let shortcut = match &block.shortcut {
                    Some(proj) => proj.forward(g, params, pre)?,
                    None => x,
                };
                let h = block.conv1.forward(g, params, pre)?;
                let h = norm(g, &block.norm2, h)?;
                let h = site(g, h, &mut report)?;
                let h = block.conv2.forward(g, params, h)?;
                x = g.add(h, shortcut)?;
            }
            report.group_shapes.push(g.value(x).shape().to_vec());
        }
        let h = norm(g, &self.final_norm, x)?;
        let h = site(g, h, &mut report)?;
        let pooled = g.global_avg_pool(h)?;
        report.pooled_shape = g.value(pooled).shape().to_vec();
        let logits = self.head.forward(g, params, pooled)?;
        Ok((logits, report))
    }

    /// Gradient-free forward on a batch of images.
    pub fn predict(&self, images: Tensor<T>, opts: ForwardOptions) -> Result<(Tensor<T>, ForwardReport)> {
        let mut g = Graph::inference();
        let params = self.params.bind(&mut g);
        let x = g.leaf(images);
        let (logits, report) = self.forward(&mut g, &params, x, opts)?;
        Ok((g.value(logits).value_clone(), report))
    }
}
