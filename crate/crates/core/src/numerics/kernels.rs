//! Plain (non-differentiable) dense kernels. The autodiff graph calls into
//! these for its forward passes and for most adjoints.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};


/// `out[m×n] = a[m×k] · b[k×n]`, all row-major.
pub fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    mm_acc(a, b, m, k, n, &mut out);
    out
}

/// Strided matrix view: row and column step in elements.
pub type Strides = (usize, usize);

/// `out ← β·out + a·b` for an `m×k` operand `a` and a `k×n` operand `b`,
/// every matrix addressed through its strides. With `β = 0` the previous
/// contents of `out` are ignored.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): Strides,
    b: &[f64],
    (rsb, csb): Strides,
    beta: f64,
    out: &mut [f64],
    (rsc, csc): Strides,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(out.len() > (m - 1) * rsc + (n - 1) * csc);
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let o = &mut out[i * rsc + j * csc];
                *o = if beta == 0.0 { 0.0 } else { *o * beta };
            }
        }
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above keep every index the kernel touches in
    // bounds, and `out` is a unique borrow so it cannot alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            out.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// `out += a · b`.
pub fn mm_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    gemm(m, k, n, a, (k, 1), b, (n, 1), 1.0, out, (n, 1));
}

/// `out[m×n] = a[m×k] · b[n×k]ᵀ`.
pub fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a, (k, 1), b, (1, k), 0.0, &mut out, (n, 1));
    out
}

/// `out[m×n] += a[k×m]ᵀ · b[k×n]`.
pub fn mm_tn_acc(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    gemm(m, k, n, a, (1, m), b, (n, 1), 1.0, out, (n, 1));
}

/// Transpose of a row-major `rows×cols` block.
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut out = vec![0.0; rows * cols];
    for (i, row) in a.chunks(cols).enumerate() {
        for (j, &v) in row.iter().enumerate() {
            out[j * rows + i] = v;
        }
    }
    out
}

/// Dot product with four independent accumulators, combined in a fixed order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Standard matrix product of two 2-D tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0) {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
    Ok(Tensor::from_parts(vec![m, n], mm(a.data(), b.data(), m, k, n)))
}

/// `eˣ` for `x ≤ 0`, within a few ulp of `f64::exp`. Arguments below −708
/// are treated as −708 (result ≈ 3e-308 instead of a subnormal). Branch
/// free, so loops over it vectorise.
#[inline]
pub fn exp_nonpositive(x: f64) -> f64 {
    const SHIFT: f64 = 6_755_399_441_055_744.0; // 1.5·2⁵²
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let x = if x < -708.0 { -708.0 } else { x };
    let t = x * std::f64::consts::LOG2_E + SHIFT;
    let n = t - SHIFT;
    let r = (x - n * LN2_HI) - n * LN2_LO;
    let mut p = 1.0 / 479_001_600.0;
    for c in [
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * r + c;
    }
    let k = t.to_bits() as i64 - SHIFT.to_bits() as i64;
    p * f64::from_bits(((k + 1023) as u64) << 52)
}

/// In-place softmax of one row, with max subtraction.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = exp_nonpositive(*v - max);
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Row-wise softmax of a 2-D tensor.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::shape("softmax_rows", format!("{:?}", x.shape())));
    }
    x.check_finite("softmax_rows input")?;
    let cols = x.dim(1);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(cols) {
        softmax_in_place(row);
    }
    Ok(out)
}

/// Border handling for image-domain convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Mirror without repeating the edge sample (`dcb|abcd|cba`).
    Reflect,
    Zero,
    /// No padding; only fully covered output positions.
    Valid,
}

impl Padding {
    fn amount(self, k: usize) -> usize {
        match self {
            Padding::Valid => 0,
            Padding::Reflect | Padding::Zero => k / 2,
        }
    }
}

/// Mirror index `i` into `0..n` (reflect mode, any overshoot).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Geometry of a 2-D convolution, shared by the forward kernel and adjoints.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: Padding,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(
        c_in: usize,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::invalid("kernel", format!("size {k} must be odd")));
        }
        if stride == 0 {
            return Err(Error::invalid("stride", "must be at least 1"));
        }
        let pad = padding.amount(k);
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        if k > ph || k > pw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {k}x{k} larger than padded input {ph}x{pw}"),
            ));
        }
        Ok(ConvGeometry {
            c_in,
            h,
            w,
            k,
            stride,
            padding,
            h_out: (ph - k) / stride + 1,
            w_out: (pw - k) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_len(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Source pixel for output position `(oy, ox)` and tap `(ky, kx)`, or
    /// `None` when the tap lands in zero padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let pad = self.padding.amount(self.k) as isize;
        let y = (oy * self.stride + ky) as isize - pad;
        let x = (ox * self.stride + kx) as isize - pad;
        match self.padding {
            Padding::Valid => Some((y as usize, x as usize)),
            Padding::Reflect => Some((reflect_index(y, self.h), reflect_index(x, self.w))),
            Padding::Zero => {
                if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
                    None
                } else {
                    Some((y as usize, x as usize))
                }
            }
        }
    }

    /// Unfolds `x[c_in×h×w]` into columns `[c_in·k·k × h_out·w_out]`.
    pub fn im2col(&self, x: &[f64]) -> Vec<f64> {
        self.im2col_band(x, 0, self.h_out)
    }

    /// Columns for output rows `oy0..oy1` only.
    pub fn im2col_band(&self, x: &[f64], oy0: usize, oy1: usize) -> Vec<f64> {
        let n = (oy1 - oy0) * self.w_out;
        let mut cols = vec![0.0; self.patch_len() * n];
        for c in 0..self.c_in {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in oy0..oy1 {
                        for ox in 0..self.w_out {
                            if let Some((y, xx)) = self.source(oy, ox, ky, kx) {
                                dst[(oy - oy0) * self.w_out + ox] = plane[y * self.w + xx];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters column gradients back
    /// onto the input, accumulating where padding reuses a pixel.
    pub fn col2im_acc(&self, cols: &[f64], dx: &mut [f64]) {
        self.col2im_band_acc(cols, 0, self.h_out, dx)
    }

    pub fn col2im_band_acc(&self, cols: &[f64], oy0: usize, oy1: usize, dx: &mut [f64]) {
        let n = (oy1 - oy0) * self.w_out;
        for c in 0..self.c_in {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in oy0..oy1 {
                        for ox in 0..self.w_out {
                            if let Some((y, xx)) = self.source(oy, ox, ky, kx) {
                                plane[y * self.w + xx] += src[(oy - oy0) * self.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Output-row bands whose column buffers stay near [`BAND_BUDGET`]
    /// values.
    pub fn bands(&self) -> Vec<(usize, usize)> {
        let per_row = (self.patch_len() * self.w_out).max(1);
        let rows = (BAND_BUDGET / per_row).clamp(1, self.h_out);
        (0..self.h_out)
            .step_by(rows)
            .map(|a| (a, (a + rows).min(self.h_out)))
            .collect()
    }
}

/// Target size of one im2col band, in values.
pub const BAND_BUDGET: usize = 1 << 20;

/// Copies band `oy0..oy1` of every channel row of `full[c × h_out·w_out]`
/// into a contiguous `[c × band]` matrix.
fn band_rows(full: &[f64], c: usize, geom: &ConvGeometry, oy0: usize, oy1: usize) -> Vec<f64> {
    let n = geom.out_len();
    let (a, b) = (oy0 * geom.w_out, oy1 * geom.w_out);
    let mut out = Vec::with_capacity(c * (b - a));
    for ch in 0..c {
        out.extend_from_slice(&full[ch * n + a..ch * n + b]);
    }
    out
}

/// Forward convolution: `kernel[c_out × patch]` applied to `x`, returning
/// `[c_out × h_out·w_out]`.
pub fn conv_forward(geom: &ConvGeometry, kernel: &[f64], bias: Option<&[f64]>, x: &[f64]) -> Vec<f64> {
    let c_out = kernel.len() / geom.patch_len();
    let n = geom.out_len();
    let bands = geom.bands();
    let results: Vec<Vec<f64>> = bands
        .par_iter()
        .map(|&(oy0, oy1)| {
            let cols = geom.im2col_band(x, oy0, oy1);
            let nb = (oy1 - oy0) * geom.w_out;
            let mut out = vec![0.0; c_out * nb];
            if let Some(b) = bias {
                for (o, row) in out.chunks_mut(nb).enumerate() {
                    row.fill(b[o]);
                }
            }
            mm_acc(kernel, &cols, c_out, geom.patch_len(), nb, &mut out);
            out
        })
        .collect();
    let mut out = vec![0.0; c_out * n];
    for (&(oy0, oy1), band) in bands.iter().zip(&results) {
        let nb = (oy1 - oy0) * geom.w_out;
        for o in 0..c_out {
            out[o * n + oy0 * geom.w_out..o * n + oy1 * geom.w_out]
                .copy_from_slice(&band[o * nb..(o + 1) * nb]);
        }
    }
    out
}

/// Adjoints of [`conv_forward`] for the kernel and the input, given the
/// output adjoint `dy[c_out × h_out·w_out]`. Band contributions are reduced
/// in band order.
pub fn conv_backward(
    geom: &ConvGeometry,
    kernel: &[f64],
    x: &[f64],
    dy: &[f64],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let plen = geom.patch_len();
    let c_out = kernel.len() / plen;
    let bands = geom.bands();
    let parts: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = bands
        .par_iter()
        .map(|&(oy0, oy1)| {
            let nb = (oy1 - oy0) * geom.w_out;
            let dyb = band_rows(dy, c_out, geom, oy0, oy1);
            let dw = want_dw.then(|| {
                let cols = geom.im2col_band(x, oy0, oy1);
                mm_nt(&dyb, &cols, c_out, nb, plen)
            });
            let dcols = want_dx.then(|| {
                let mut d = vec![0.0; plen * nb];
                mm_tn_acc(kernel, &dyb, c_out, plen, nb, &mut d);
                d
            });
            (dcols, dw)
        })
        .collect();
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dw = want_dw.then(|| vec![0.0; kernel.len()]);
    for (&(oy0, oy1), (dcols, dwb)) in bands.iter().zip(parts) {
        if let (Some(dx), Some(dcols)) = (dx.as_mut(), dcols) {
            geom.col2im_band_acc(&dcols, oy0, oy1, dx);
        }
        if let (Some(dw), Some(dwb)) = (dw.as_mut(), dwb) {
            dw.iter_mut().zip(dwb).for_each(|(a, b)| *a += b);
        }
    }
    (dx, dw)
}

/// Convolution with optional per-output-channel bias.
pub fn conv2d_with_bias(
    x: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    if x.rank() != 3 || kernel.rank() != 4 {
        return Err(Error::shape(
            "conv2d",
            format!("input {:?}, kernel {:?}", x.shape(), kernel.shape()),
        ));
    }
    let (c_out, c_in, kh, kw) = (kernel.dim(0), kernel.dim(1), kernel.dim(2), kernel.dim(3));
    if c_in != x.dim(0) || kh != kw {
        return Err(Error::shape(
            "conv2d",
            format!("input {:?}, kernel {:?}", x.shape(), kernel.shape()),
        ));
    }
    if let Some(b) = bias {
        if b.len() != c_out {
            return Err(Error::shape("conv2d", format!("bias {:?}", b.shape())));
        }
    }
    let geom = ConvGeometry::new(c_in, x.dim(1), x.dim(2), kh, stride, padding)?;
    let out = conv_forward(&geom, kernel.data(), bias.map(Tensor::data), x.data());
    Ok(Tensor::from_parts(vec![c_out, geom.h_out, geom.w_out], out))
}

/// 2-D cross-correlation of `x[C_in×H×W]` with `kernel[C_out×C_in×k×k]`.
pub fn conv2d(x: &Tensor, kernel: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    conv2d_with_bias(x, kernel, None, stride, padding)
}

/// Layer normalization over the last axis of `x[T×D]`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    if x.rank() != 2 || gain.len() != x.dim(1) || bias.len() != x.dim(1) {
        return Err(Error::shape(
            "layer_norm",
            format!("x {:?}, gain {:?}, bias {:?}", x.shape(), gain.shape(), bias.shape()),
        ));
    }
    let d = x.dim(1);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        let (mean, rstd) = row_stats(row, eps);
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * rstd * gain.data()[j] + bias.data()[j];
        }
    }
    Ok(out)
}

/// Mean and reciprocal standard deviation (population variance + eps).
pub(crate) fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Reflect-pads a `C×H×W` tensor to `C×(H+top+bottom)×(W+left+right)`.
pub fn pad_reflect(x: &Tensor, top: usize, bottom: usize, left: usize, right: usize) -> Tensor {
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let (nh, nw) = (h + top + bottom, w + left + right);
    let mut out = vec![0.0; c * nh * nw];
    for ch in 0..c {
        let plane = x.channel(ch);
        for y in 0..nh {
            let sy = reflect_index(y as isize - top as isize, h);
            for xx in 0..nw {
                let sx = reflect_index(xx as isize - left as isize, w);
                out[(ch * nh + y) * nw + xx] = plane[sy * w + sx];
            }
        }
    }
    Tensor::from_parts(vec![c, nh, nw], out)
}

/// Copies the window `[y0..y0+h, x0..x0+w]` out of a `C×H×W` tensor.
pub fn crop(x: &Tensor, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor> {
    let (c, sh, sw) = (x.dim(0), x.dim(1), x.dim(2));
    if y0 + h > sh || x0 + w > sw {
        return Err(Error::shape(
            "crop",
            format!("window {h}x{w}+{y0}+{x0} outside {sh}x{sw}"),
        ));
    }
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let plane = x.channel(ch);
        for y in y0..y0 + h {
            out.extend_from_slice(&plane[y * sw + x0..y * sw + x0 + w]);
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}
