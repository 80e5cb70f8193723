//! Convolution and matrix-product kernels.
//!
//! Convolutions lower to one GEMM over the whole batch through an im2col
//! buffer laid out as `(C·K·K) × (N·OH·OW)`.

use crate::par;

/// Output extent and leading pad for a "ceil" convolution: the output has
/// `ceil(len / stride)` positions and the remaining padding goes after.
pub fn out_extent(len: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = len.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(len);
    (out, total / 2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(n: usize, c_in: usize, h: usize, w: usize, c_out: usize, k: usize, stride: usize) -> Self {
        let (oh, pad_top) = out_extent(h, k, stride);
        let (ow, pad_left) = out_extent(w, k, stride);
        ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad_top,
            pad_left,
            oh,
            ow,
        }
    }

    pub fn ckk(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    pub fn cols(&self) -> usize {
        self.n * self.out_plane()
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.n, self.c_in, self.h, self.w]
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.n, self.c_out, self.oh, self.ow]
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.k, self.k]
    }

    #[inline]
    fn source(&self, o: usize, kk: usize, pad: usize, len: usize) -> Option<usize> {
        let p = (o * self.stride + kk) as isize - pad as isize;
        (p >= 0 && (p as usize) < len).then_some(p as usize)
    }
}

/// `c = alpha · op(a) · op(b) + beta · c` with `op(a)` of size `m × k`.
#[allow(clippy::too_many_arguments)]
pub fn sgemm(m: usize, k: usize, n: usize, a: &[f32], ta: bool, b: &[f32], tb: bool, beta: f32, c: &mut [f32]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the dense layouts.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn dgemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the dense layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let cols = g.cols();
    let plane = g.out_plane();
    let mut out = vec![0f32; g.ckk() * cols];
    par::for_each_chunk_mut(&mut out, cols, |row, dst| {
        let c = row / (g.k * g.k);
        let ky = (row / g.k) % g.k;
        let kx = row % g.k;
        for n in 0..g.n {
            let src = &x[(n * g.c_in + c) * g.h * g.w..][..g.h * g.w];
            let d = &mut dst[n * plane..(n + 1) * plane];
            for oy in 0..g.oh {
                let Some(iy) = g.source(oy, ky, g.pad_top, g.h) else {
                    continue;
                };
                for ox in 0..g.ow {
                    if let Some(ix) = g.source(ox, kx, g.pad_left, g.w) {
                        d[oy * g.ow + ox] = src[iy * g.w + ix];
                    }
                }
            }
        }
    });
    out
}

/// Adjoint of [`im2col`]: scatters columns back onto the input grid.
pub fn col2im(cols: &[f32], g: &ConvGeom) -> Vec<f32> {
    let ncols = g.cols();
    let plane = g.out_plane();
    let kk = g.k * g.k;
    let mut out = vec![0f32; g.n * g.c_in * g.h * g.w];
    par::for_each_chunk_mut(&mut out, g.h * g.w, |nc, dst| {
        let n = nc / g.c_in;
        let c = nc % g.c_in;
        for r in 0..kk {
            let (ky, kx) = (r / g.k, r % g.k);
            let src = &cols[(c * kk + r) * ncols + n * plane..][..plane];
            for oy in 0..g.oh {
                let Some(iy) = g.source(oy, ky, g.pad_top, g.h) else {
                    continue;
                };
                for ox in 0..g.ow {
                    if let Some(ix) = g.source(ox, kx, g.pad_left, g.w) {
                        dst[iy * g.w + ix] += src[oy * g.ow + ox];
                    }
                }
            }
        }
    });
    out
}

/// `(N, O, L)` → `(O, N·L)`.
fn batch_to_rows(x: &[f32], n: usize, o: usize, l: usize) -> Vec<f32> {
    let mut out = vec![0f32; x.len()];
    for b in 0..n {
        for c in 0..o {
            out[c * n * l + b * l..][..l].copy_from_slice(&x[(b * o + c) * l..][..l]);
        }
    }
    out
}

/// `(O, N·L)` → `(N, O, L)`.
fn rows_to_batch(x: &[f32], n: usize, o: usize, l: usize) -> Vec<f32> {
    let mut out = vec![0f32; x.len()];
    for b in 0..n {
        for c in 0..o {
            out[(b * o + c) * l..][..l].copy_from_slice(&x[c * n * l + b * l..][..l]);
        }
    }
    out
}

pub fn conv_forward(x: &[f32], weight: &[f32], g: &ConvGeom) -> Vec<f32> {
    let cols = im2col(x, g);
    let mut y = vec![0f32; g.c_out * g.cols()];
    sgemm(g.c_out, g.ckk(), g.cols(), weight, false, &cols, false, 0.0, &mut y);
    rows_to_batch(&y, g.n, g.c_out, g.out_plane())
}

/// Gradient of a convolution with respect to its input, given the output
/// gradient `gy` (also the transposed convolution of `gy` by `weight`).
pub fn conv_input_grad(gy: &[f32], weight: &[f32], g: &ConvGeom) -> Vec<f32> {
    let rows = batch_to_rows(gy, g.n, g.c_out, g.out_plane());
    let mut cols = vec![0f32; g.ckk() * g.cols()];
    sgemm(g.ckk(), g.c_out, g.cols(), weight, true, &rows, false, 0.0, &mut cols);
    col2im(&cols, g)
}

/// Gradient of a convolution with respect to its weight.
pub fn conv_weight_grad(x: &[f32], gy: &[f32], g: &ConvGeom) -> Vec<f32> {
    let cols = im2col(x, g);
    let rows = batch_to_rows(gy, g.n, g.c_out, g.out_plane());
    let mut dw = vec![0f32; g.c_out * g.ckk()];
    sgemm(g.c_out, g.cols(), g.ckk(), &rows, false, &cols, true, 0.0, &mut dw);
    dw
}
