//! Global top-k activation: ReLU followed by keeping the `ceil(r·D)` largest
//! entries of each sample, flattened over (C, H, W).

use std::cmp::Ordering;
use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Fraction of a site's activations allowed to stay nonzero, `0 < r ≤ 1`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct KeepRatio(f64);

impl KeepRatio {
    pub const DENSE: KeepRatio = KeepRatio(1.0);

    pub fn new(r: f64) -> Result<Self> {
        if r.is_finite() && r > 0.0 && r <= 1.0 {
            Ok(KeepRatio(r))
        } else {
            Err(Error::Config(format!("keep ratio must lie in (0, 1], got {r}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }

    /// `ceil(r·d)` on the double-precision product, clamped to `1..=d`.
    pub fn keep_count(self, d: usize) -> usize {
        ((self.0 * d as f64).ceil() as usize).clamp(1, d.max(1))
    }
}

impl fmt::Display for KeepRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

fn total_cmp<T: Scalar>(a: T, b: T) -> Ordering {
    a.partial_cmp(&b).expect("finite values")
}

/// `k`-th largest value of `scratch` (1-based), reordering `scratch`.
fn kth_largest<T: Scalar>(scratch: &mut [T], k: usize) -> T {
    let (_, kth, _) = scratch.select_nth_unstable_by(k - 1, |a, b| total_cmp(*b, *a));
    *kth
}

/// Indices of the `k` largest entries, ascending by index.
///
/// Ties at the cutoff value are resolved in favour of the lower flat index,
/// so the result always equals the first `k` positions of a stable
/// descending sort.
pub fn topk_select<T: Scalar>(values: &[T], k: usize) -> Result<Vec<usize>> {
    let d = values.len();
    if k == 0 || k > d {
        return Err(Error::Usage(format!("top-k needs 1 <= k <= {d}, got k = {k}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("top-k selection over non-finite values".into()));
    }
    if k == d {
        return Ok((0..d).collect());
    }
    let mut scratch = values.to_vec();
    let cutoff = kth_largest(&mut scratch, k);
    let above = values.iter().filter(|&&v| v > cutoff).count();
    let mut ties_left = k - above;
    let mut kept = Vec::with_capacity(k);
    for (i, &v) in values.iter().enumerate() {
        if v > cutoff {
            kept.push(i);
        } else if v == cutoff && ties_left > 0 {
            ties_left -= 1;
            kept.push(i);
        }
    }
    debug_assert_eq!(kept.len(), k);
    Ok(kept)
}

/// Nonzero bookkeeping for one application of a sparsity site.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SiteStats {
    /// Nonzero outputs over the whole batch.
    pub nonzero: usize,
    /// `N·D`.
    pub total: usize,
    /// Per-sample size `D = C·H·W`.
    pub per_sample: usize,
    /// Per-sample budget `ceil(r·D)`.
    pub budget: usize,
}

impl SiteStats {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.nonzero as f64 / self.total as f64
        }
    }

    pub fn merge(&mut self, other: &SiteStats) {
        self.nonzero += other.nonzero;
        self.total += other.total;
        self.per_sample = other.per_sample;
        self.budget = self.budget.max(other.budget);
    }
}

/// ReLU then per-sample global top-k over `x` laid out as `n` samples of `d`.
pub fn topk_forward<T: Scalar>(x: &[T], d: usize, r: KeepRatio, out: &mut [T]) -> SiteStats {
    assert_eq!(x.len(), out.len());
    assert!(d > 0 && x.len() % d == 0);
    let k = r.keep_count(d);
    let mut scratch: Vec<T> = Vec::new();
    let mut nonzero = 0;
    for (xs, ys) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        scratch.clear();
        for (y, &v) in ys.iter_mut().zip(xs) {
            *y = if v > T::zero() { v } else { T::zero() };
            if v > T::zero() {
                scratch.push(v);
            }
        }
        if scratch.len() <= k {
            nonzero += scratch.len();
            continue;
        }
        let cutoff = kth_largest(&mut scratch, k);
        let above = ys.iter().filter(|&&v| v > cutoff).count();
        let mut ties_left = k - above;
        for y in ys.iter_mut() {
            if *y > cutoff {
                continue;
            }
            if *y == cutoff && ties_left > 0 {
                ties_left -= 1;
            } else {
                *y = T::zero();
            }
        }
        nonzero += k;
    }
    SiteStats { nonzero, total: x.len(), per_sample: d, budget: k }
}

/// Mask pass-through: gradient flows where the forward output is nonzero.
pub fn topk_backward<T: Scalar>(out: &[T], dout: &[T], dx: &mut [T]) {
    for ((d, &y), &g) in dx.iter_mut().zip(out).zip(dout) {
        if y > T::zero() {
            *d += g;
        }
    }
}

/// One ReLU + top-k site of the network. Holds no parameters; the keep
/// ratio is shared by every site and supplied per forward call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseTopKActivation {
    pub name: String,
}

impl SparseTopKActivation {
    pub fn new(name: impl Into<String>) -> Self {
        SparseTopKActivation { name: name.into() }
    }
}
