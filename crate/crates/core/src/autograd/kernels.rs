//! Raw forward/backward kernels on flat buffers.
//!
//! Convolution is lowered to im2col + GEMM over chunks of the batch. Column
//! buffers are rebuilt during backward instead of being kept alive, so the
//! tape only stores layer inputs.

use crate::scalar::Scalar;

/// Upper bound on elements in one im2col buffer.
const COLS_BUDGET: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_height * self.out_width
    }

    fn in_sample(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn out_sample(&self) -> usize {
        self.out_channels * self.out_plane()
    }

    fn chunk(&self) -> usize {
        (COLS_BUDGET / (self.col_rows() * self.out_plane()).max(1)).clamp(1, self.batch.max(1))
    }

    /// 1×1, stride 1, no padding: the input plane already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Writes the column matrix of one sample into `cols`, whose rows are
/// `row_stride` long; this sample occupies columns `col_offset..col_offset+P`.
fn im2col<T: Scalar>(g: &ConvGeometry, x: &[T], cols: &mut [T], row_stride: usize, col_offset: usize) {
    let (ow, oh) = (g.out_width, g.out_height);
    let p = g.padding as isize;
    let mut row = 0;
    for ci in 0..g.in_channels {
        let plane = &x[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let dst = &mut cols[row * row_stride + col_offset..row * row_stride + col_offset + oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride) as isize + ky as isize - p;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride) as isize + kx as isize - p;
                        *v = if ix < 0 || ix >= g.width as isize { T::zero() } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds a column matrix back onto one input sample.
fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], row_stride: usize, col_offset: usize, dx: &mut [T]) {
    let (ow, oh) = (g.out_width, g.out_height);
    let p = g.padding as isize;
    let mut row = 0;
    for ci in 0..g.in_channels {
        let plane = &mut dx[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let src = &cols[row * row_stride + col_offset..row * row_stride + col_offset + oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride) as isize + ky as isize - p;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, &v) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = (ox * g.stride) as isize + kx as isize - p;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Fills `cols` (rows × chunk·P) for samples `n0..n0+b`.
fn build_cols<T: Scalar>(g: &ConvGeometry, x: &[T], n0: usize, b: usize, cols: &mut [T]) {
    let width = b * g.out_plane();
    for s in 0..b {
        let xs = &x[(n0 + s) * g.in_sample()..(n0 + s + 1) * g.in_sample()];
        if g.is_pointwise() {
            for ci in 0..g.in_channels {
                let plane = &xs[ci * g.out_plane()..(ci + 1) * g.out_plane()];
                cols[ci * width + s * g.out_plane()..ci * width + (s + 1) * g.out_plane()].copy_from_slice(plane);
            }
        } else {
            im2col(g, xs, cols, width, s * g.out_plane());
        }
    }
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeometry, x: &[T], w: &[T], out: &mut [T]) {
    let (k, pl) = (g.col_rows(), g.out_plane());
    let chunk = g.chunk();
    let mut cols = vec![T::zero(); k * chunk * pl];
    let mut tmp = vec![T::zero(); g.out_channels * chunk * pl];
    let mut n0 = 0;
    while n0 < g.batch {
        let b = chunk.min(g.batch - n0);
        let width = b * pl;
        build_cols(g, x, n0, b, &mut cols);
        unsafe {
            T::gemm(
                g.out_channels,
                k,
                width,
                T::one(),
                w.as_ptr(),
                k as isize,
                1,
                cols.as_ptr(),
                width as isize,
                1,
                T::zero(),
                tmp.as_mut_ptr(),
                width as isize,
                1,
            );
        }
        for s in 0..b {
            let dst = &mut out[(n0 + s) * g.out_sample()..(n0 + s + 1) * g.out_sample()];
            for co in 0..g.out_channels {
                dst[co * pl..(co + 1) * pl].copy_from_slice(&tmp[co * width + s * pl..co * width + (s + 1) * pl]);
            }
        }
        n0 += b;
    }
}

/// Accumulates input and/or weight gradients of a convolution.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    x: &[T],
    w: &[T],
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let (k, pl) = (g.col_rows(), g.out_plane());
    let chunk = g.chunk();
    let mut cols = vec![T::zero(); k * chunk * pl];
    let mut dtmp = vec![T::zero(); g.out_channels * chunk * pl];
    let mut n0 = 0;
    while n0 < g.batch {
        let b = chunk.min(g.batch - n0);
        let width = b * pl;
        for s in 0..b {
            let src = &dout[(n0 + s) * g.out_sample()..(n0 + s + 1) * g.out_sample()];
            for co in 0..g.out_channels {
                dtmp[co * width + s * pl..co * width + (s + 1) * pl].copy_from_slice(&src[co * pl..(co + 1) * pl]);
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            build_cols(g, x, n0, b, &mut cols);
            // dW(Cout×K) += dOut(Cout×width) · colsᵀ(width×K)
            unsafe {
                T::gemm(
                    g.out_channels,
                    width,
                    k,
                    T::one(),
                    dtmp.as_ptr(),
                    width as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    width as isize,
                    T::one(),
                    dw.as_mut_ptr(),
                    k as isize,
                    1,
                );
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            // dCols(K×width) = Wᵀ(K×Cout) · dOut(Cout×width)
            unsafe {
                T::gemm(
                    k,
                    g.out_channels,
                    width,
                    T::one(),
                    w.as_ptr(),
                    1,
                    k as isize,
                    dtmp.as_ptr(),
                    width as isize,
                    1,
                    T::zero(),
                    cols.as_mut_ptr(),
                    width as isize,
                    1,
                );
            }
            for s in 0..b {
                let dxs = &mut dx[(n0 + s) * g.in_sample()..(n0 + s + 1) * g.in_sample()];
                if g.is_pointwise() {
                    for ci in 0..g.in_channels {
                        let src = &cols[ci * width + s * pl..ci * width + (s + 1) * pl];
                        dxs[ci * pl..(ci + 1) * pl].iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                    }
                } else {
                    col2im(g, &cols, width, s * pl, dxs);
                }
            }
        }
        n0 += b;
    }
}

/// `out(N×K) = x(N×F) · wᵀ + bias`.
pub fn linear_forward<T: Scalar>(n: usize, f: usize, k: usize, x: &[T], w: &[T], bias: &[T], out: &mut [T]) {
    for row in out.chunks_exact_mut(k) {
        row.copy_from_slice(bias);
    }
    unsafe {
        T::gemm(n, f, k, T::one(), x.as_ptr(), f as isize, 1, w.as_ptr(), 1, f as isize, T::one(), out.as_mut_ptr(), k as isize, 1);
    }
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Scalar>(
    n: usize,
    f: usize,
    k: usize,
    x: &[T],
    w: &[T],
    dout: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    if let Some(dx) = dx {
        unsafe {
            T::gemm(n, k, f, T::one(), dout.as_ptr(), k as isize, 1, w.as_ptr(), f as isize, 1, T::one(), dx.as_mut_ptr(), f as isize, 1);
        }
    }
    if let Some(dw) = dw {
        unsafe {
            T::gemm(k, n, f, T::one(), dout.as_ptr(), 1, k as isize, x.as_ptr(), f as isize, 1, T::one(), dw.as_mut_ptr(), f as isize, 1);
        }
    }
    if let Some(db) = db {
        for row in dout.chunks_exact(k) {
            db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geometry(n: usize, cin: usize, h: usize, w: usize, cout: usize, k: usize, stride: usize, pad: usize) -> ConvGeometry {
        ConvGeometry {
            batch: n,
            in_channels: cin,
            height: h,
            width: w,
            out_channels: cout,
            kernel_h: k,
            kernel_w: k,
            stride,
            padding: pad,
            out_height: (h + 2 * pad - k) / stride + 1,
            out_width: (w + 2 * pad - k) / stride + 1,
        }
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)>
        let g = geometry(1, 2, 5, 4, 1, 3, 2, 1);
        let x: Vec<f64> = (0..g.in_sample()).map(|i| (i as f64 * 0.37).sin()).collect();
        let width = g.out_plane();
        let c: Vec<f64> = (0..g.col_rows() * width).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; c.len()];
        im2col(&g, &x, &mut cols, width, 0);
        let mut dx = vec![0.0; x.len()];
        col2im(&g, &c, width, 0, &mut dx);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn chunking_matches_single_sample_calls() {
        let g = geometry(5, 3, 6, 6, 4, 3, 1, 1);
        let x: Vec<f64> = (0..g.batch * g.in_sample()).map(|i| ((i * 7 % 13) as f64) - 6.0).collect();
        let w: Vec<f64> = (0..g.out_channels * g.col_rows()).map(|i| ((i * 5 % 11) as f64) - 5.0).collect();
        let mut out = vec![0.0; g.batch * g.out_sample()];
        conv2d_forward(&g, &x, &w, &mut out);
        let one = ConvGeometry { batch: 1, ..g };
        for n in 0..g.batch {
            let mut o = vec![0.0; g.out_sample()];
            conv2d_forward(&one, &x[n * g.in_sample()..(n + 1) * g.in_sample()], &w, &mut o);
            assert_eq!(o, out[n * g.out_sample()..(n + 1) * g.out_sample()]);
        }
    }
}
