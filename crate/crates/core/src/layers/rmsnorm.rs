//! Channel-wise RMS normalization for NCHW feature maps.
//!
//! At every (n, h, w) the channel vector is divided by
//! `sqrt(mean_c(x²) + eps)`, then scaled and shifted per channel. There is
//! no mean-centering and no batch statistic.

use crate::scalar::Scalar;

pub const RMSNORM_EPS: f64 = 1e-10;

/// Forward pass. `inv_rms` receives `1/rms` for each of the `n·hw` locations.
#[allow(clippy::too_many_arguments)]
pub fn rmsnorm_forward<T: Scalar>(
    x: &[T],
    channels: usize,
    plane: usize,
    scale: &[T],
    bias: &[T],
    eps: T,
    out: &mut [T],
    inv_rms: &mut [T],
) {
    let inv_c = T::one() / T::of(channels as f64);
    let sample = channels * plane;
    for ((xs, ys), inv) in x.chunks_exact(sample).zip(out.chunks_exact_mut(sample)).zip(inv_rms.chunks_exact_mut(plane)) {
        inv.iter_mut().for_each(|v| *v = T::zero());
        for xc in xs.chunks_exact(plane) {
            inv.iter_mut().zip(xc).for_each(|(acc, &v)| *acc += v * v);
        }
        inv.iter_mut().for_each(|v| *v = T::one() / (*v * inv_c + eps).sqrt());
        for (c, (xc, yc)) in xs.chunks_exact(plane).zip(ys.chunks_exact_mut(plane)).enumerate() {
            let (s, b) = (scale[c], bias[c]);
            for ((y, &v), &r) in yc.iter_mut().zip(xc).zip(inv.iter()) {
                *y = s * v * r + b;
            }
        }
    }
}

/// Accumulates gradients for input, scale and bias.
#[allow(clippy::too_many_arguments)]
pub fn rmsnorm_backward<T: Scalar>(
    x: &[T],
    channels: usize,
    plane: usize,
    scale: &[T],
    inv_rms: &[T],
    dout: &[T],
    mut dx: Option<&mut [T]>,
    dscale: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    let inv_c = T::one() / T::of(channels as f64);
    let sample = channels * plane;
    let mut dscale_acc = vec![T::zero(); channels];
    let mut dbias_acc = vec![T::zero(); channels];
    let mut dot = vec![T::zero(); plane];
    for (n, (xs, gs)) in x.chunks_exact(sample).zip(dout.chunks_exact(sample)).enumerate() {
        let inv = &inv_rms[n * plane..(n + 1) * plane];
        dot.iter_mut().for_each(|v| *v = T::zero());
        for c in 0..channels {
            let xc = &xs[c * plane..(c + 1) * plane];
            let gc = &gs[c * plane..(c + 1) * plane];
            let mut ds = T::zero();
            let mut db = T::zero();
            for p in 0..plane {
                let xhat = xc[p] * inv[p];
                ds += gc[p] * xhat;
                db += gc[p];
                dot[p] += gc[p] * scale[c] * xhat;
            }
            dscale_acc[c] += ds;
            dbias_acc[c] += db;
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxs = &mut dx[n * sample..(n + 1) * sample];
            for c in 0..channels {
                let xc = &xs[c * plane..(c + 1) * plane];
                let gc = &gs[c * plane..(c + 1) * plane];
                let dc = &mut dxs[c * plane..(c + 1) * plane];
                for p in 0..plane {
                    let xhat = xc[p] * inv[p];
                    dc[p] += (gc[p] * scale[c] - xhat * dot[p] * inv_c) * inv[p];
                }
            }
        }
    }
    if let Some(ds) = dscale {
        ds.iter_mut().zip(&dscale_acc).for_each(|(d, &v)| *d += v);
    }
    if let Some(db) = dbias {
        db.iter_mut().zip(&dbias_acc).for_each(|(d, &v)| *d += v);
    }
}
