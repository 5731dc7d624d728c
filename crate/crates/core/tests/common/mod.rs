//! Shared oracles and fixtures for the integration suites.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsetrain::data::synthetic::{write_synthetic_cifar, SyntheticSpec};
use sparsetrain::{Graph, KeepRatio, Result, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Reference top-k: ReLU, then a full stable sort of each sample by value
/// (descending) and keep the first `ceil(r·d)` positive entries.
pub fn sort_oracle(x: &[f64], d: usize, r: f64) -> Vec<f64> {
    let k = ((r * d as f64).ceil() as usize).clamp(1, d);
    let mut out = vec![0.0; x.len()];
    for (xs, ys) in x.chunks(d).zip(out.chunks_mut(d)) {
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| xs[b].partial_cmp(&xs[a]).unwrap());
        for &i in order.iter().take(k) {
            if xs[i] > 0.0 {
                ys[i] = xs[i];
            }
        }
    }
    out
}

/// Values drawn from a small grid so that ties (and zeros) are common.
pub fn tied_values(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let levels = rng.random_range(2..40);
    (0..len).map(|_| (rng.random_range(0..levels) as f64 - levels as f64 / 3.0) * 0.25).collect()
}

/// Distinct values at least `gap` apart (and away from zero), shuffled.
pub fn spaced_values(rng: &mut ChaCha8Rng, len: usize, gap: f64) -> Vec<f64> {
    use rand::seq::SliceRandom;
    let mut v: Vec<f64> = (0..len).map(|i| (i as f64 - len as f64 * 0.4 + 0.5) * gap).collect();
    v.shuffle(rng);
    v
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Finite-difference check outcome for one input coordinate.
#[derive(Debug, Clone, Copy)]
pub struct Probe {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    pub fn rel_err(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale < 1e-8 {
            (self.analytic - self.numeric).abs()
        } else {
            (self.analytic - self.numeric).abs() / scale
        }
    }
}

/// Compares backward gradients of the scalar built by `f` against central
/// differences with step `h`, on `per_input` random coordinates of each input.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], f: F, per_input: usize, h: f64, seed: u64) -> Vec<Probe>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.value_clone().with_requires_grad(true))).collect();
    let loss = f(&mut g, &vars).unwrap();
    assert_eq!(g.value(loss).len(), 1, "gradcheck needs a scalar");
    g.backward(loss).unwrap();
    let grads: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).expect("leaf grad").to_vec()).collect();

    let eval = |which: usize, index: usize, delta: f64| -> f64 {
        let mut g = Graph::inference();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut t = t.value_clone();
                if i == which {
                    t.data_mut()[index] += delta;
                }
                g.leaf(t)
            })
            .collect();
        let loss = f(&mut g, &vars).unwrap();
        g.value(loss).data()[0]
    };

    let mut rng = rng(seed);
    let mut probes = Vec::new();
    for (which, t) in inputs.iter().enumerate() {
        for _ in 0..per_input {
            let index = rng.random_range(0..t.len());
            let numeric = (eval(which, index, h) - eval(which, index, -h)) / (2.0 * h);
            probes.push(Probe { input: which, index, analytic: grads[which][index], numeric });
        }
    }
    probes
}

/// Reduces any tensor to a scalar through fixed random weights, so every
/// output coordinate contributes a distinct upstream gradient.
pub fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let w = random_tensor(&mut rng(seed), &shape, 1.0);
    let w = g.leaf(w);
    let y = g.mul(x, w)?;
    g.sum(y)
}

pub fn keep(r: f64) -> KeepRatio {
    KeepRatio::new(r).unwrap()
}

/// Where the CIFAR-10 binaries come from for this test process.
pub struct DataSource {
    pub dir: PathBuf,
    pub real: bool,
}

impl DataSource {
    pub fn label(&self) -> &'static str {
        if self.real {
            "CIFAR-10"
        } else {
            "synthetic CIFAR-format corpus"
        }
    }
}

fn has_cifar(dir: &Path) -> bool {
    sparsetrain::data::cifar_files(dir).iter().all(|p| p.is_file())
}

/// Real CIFAR-10 when `CIFAR10_DIR` (or `data/cifar-10-batches-bin` at the
/// workspace root) holds the six binary files; otherwise a full-size
/// synthetic corpus in the identical format, cached under the target dir.
pub fn cifar() -> &'static DataSource {
    static SOURCE: OnceLock<DataSource> = OnceLock::new();
    SOURCE.get_or_init(|| {
        let candidates = std::env::var_os("CIFAR10_DIR")
            .map(PathBuf::from)
            .into_iter()
            .chain(std::iter::once(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/cifar-10-batches-bin")));
        for dir in candidates {
            if has_cifar(&dir) {
                return DataSource { dir, real: true };
            }
        }
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("synthetic-cifar-v1");
        if !has_cifar(&dir) {
            let staging = Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("synthetic-cifar-{}", std::process::id()));
            write_synthetic_cifar(&staging, &SyntheticSpec::default()).unwrap();
            let _ = std::fs::remove_dir_all(&dir);
            std::fs::rename(&staging, &dir).unwrap();
        }
        DataSource { dir, real: false }
    })
}
