//! Dense row-major tensors and the raw numerical kernels behind them.
//!
//! Images and feature maps use the `[C, H, W]` layout. The kernels in this
//! module operate on plain slices so that the autodiff tape can call them for
//! both the forward value and the adjoint without re-validating shapes.

use crate::error::{invalid, shape_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(format!("shape {shape:?} holds {n} values, got {}", data.len())));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// Panics on an invalid shape; for internal use where the shape is known good.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            s => Err(shape_err(format!("expected [C, H, W], got {s:?}"))),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other)?;
        Ok(Tensor::from_parts(self.shape.clone(), self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect()))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    /// `self += k * other`
    pub fn axpy(&mut self, k: f64, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Channels `[start, start + len)` of a `[C, H, W]` tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let (c, h, w) = self.chw()?;
        if len == 0 || start + len > c {
            return Err(shape_err(format!("channel slice {start}..{} of {c}", start + len)));
        }
        let plane = h * w;
        Ok(Tensor::from_parts(vec![len, h, w], self.data[start * plane..(start + len) * plane].to_vec()))
    }

    /// Concatenate `[C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| invalid("concat of zero tensors"))?;
        let (_, h, w) = first.chw()?;
        let mut c = 0;
        let mut data = Vec::new();
        for p in parts {
            let (pc, ph, pw) = p.chw()?;
            if (ph, pw) != (h, w) {
                return Err(shape_err(format!("concat spatial mismatch {:?} vs {:?}", p.shape, first.shape)));
            }
            c += pc;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor::from_parts(vec![c, h, w], data))
    }

    pub fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err(format!("shape mismatch {:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(invalid(format!("shape {shape:?} must be non-empty with extents >= 1")));
    }
    Ok(())
}

/// Cross-correlation (no kernel flip) with zero padding.
///
/// `input` is `[C_in, H, W]`, `kernel` is `[C_out, C_in, k, k]` with `k` odd.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let geo = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    Ok(Tensor::from_parts(geo.out_shape(), geo.forward(input.data(), kernel.data(), None)))
}

/// Shape bookkeeping for one convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let &[c_in, h, w] = input else {
            return Err(shape_err(format!("conv input must be [C, H, W], got {input:?}")));
        };
        let &[c_out, kc, kh, kw] = kernel else {
            return Err(shape_err(format!("conv kernel must be [C_out, C_in, k, k], got {kernel:?}")));
        };
        if kc != c_in {
            return Err(shape_err(format!("kernel expects {kc} input channels, input has {c_in}")));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(shape_err(format!("kernel must be square with odd extent, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(invalid("stride must be >= 1"));
        }
        // Trailing rows/columns that do not fill a whole stride are dropped.
        let span = |n: usize| -> Result<usize> {
            let padded = n + 2 * pad;
            if padded < kh {
                return Err(shape_err(format!("extent {n} with padding {pad} is smaller than kernel {kh}")));
            }
            Ok((padded - kh) / stride + 1)
        };
        Ok(Self { c_in, h, w, c_out, k: kh, stride, pad, oh: span(h)?, ow: span(w)? })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.c_out, self.oh, self.ow]
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let n = self.oh * self.ow;
        let mut cols = vec![0.0; self.patch_len() * n];
        for ci in 0..self.c_in {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (ci * self.k + ki) * self.k + kj;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[oy * self.ow + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let n = self.oh * self.ow;
        let mut x = vec![0.0; self.c_in * self.h * self.w];
        for ci in 0..self.c_in {
            let plane = &mut x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (ci * self.k + ki) * self.k + kj;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                plane[iy as usize * self.w + ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward(&self, x: &[f64], kernel: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
        let n = self.oh * self.ow;
        let mut out = vec![0.0; self.c_out * n];
        if let Some(b) = bias {
            for (co, chunk) in out.chunks_mut(n).enumerate() {
                chunk.fill(b[co]);
            }
        }
        let owned;
        let cols: &[f64] = if self.is_pointwise() {
            x
        } else {
            owned = self.im2col(x);
            &owned
        };
        // out[C_out, n] += kernel[C_out, P] * cols[P, n]
        gemm(self.c_out, self.patch_len(), n, kernel, false, cols, false, &mut out, 1.0);
        out
    }

    /// Returns `(d_input, d_kernel, d_bias)` for upstream gradient `g`.
    pub fn backward(&self, x: &[f64], kernel: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.oh * self.ow;
        let p = self.patch_len();
        let owned;
        let cols: &[f64] = if self.is_pointwise() {
            x
        } else {
            owned = self.im2col(x);
            &owned
        };
        let mut dk = vec![0.0; self.c_out * p];
        // dk[C_out, P] = g[C_out, n] * cols[P, n]^T
        gemm(self.c_out, n, p, g, false, cols, true, &mut dk, 0.0);
        let mut dcols = vec![0.0; p * n];
        // dcols[P, n] = kernel[C_out, P]^T * g[C_out, n]
        gemm(p, self.c_out, n, kernel, true, g, false, &mut dcols, 0.0);
        let dx = if self.is_pointwise() { dcols } else { self.col2im(&dcols) };
        let db = g.chunks(n).map(|c| c.iter().sum()).collect();
        (dx, dk, db)
    }
}

/// `c = a * b + beta * c` for row-major `a: m x k`, `b: k x n`, `c: m x n`.
/// `ta`/`tb` select the transposed storage (`a` stored `k x m`, `b` stored `n x k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slice lengths are checked above against the stated extents
    // and strides, so every access stays in bounds.
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

/// Nearest-neighbour x2 upsampling of a `[C, H, W]` buffer.
pub(crate) fn upsample_nearest2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                out[(ch * oh + y) * ow + xx] = x[(ch * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample_nearest2_adjoint(g: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                out[(ch * h + y / 2) * w + xx / 2] += g[(ch * oh + y) * ow + xx];
            }
        }
    }
    out
}

/// Source taps `(i0, i1, weight of i1)` of a half-pixel-centred x2 linear
/// upsampling along an axis of length `n`, with edge clamping.
fn bilinear_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear x2 upsampling of a `[C, H, W]` buffer (half-pixel centres, clamped edges).
pub(crate) fn upsample_bilinear2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let ty = bilinear_taps(h);
    let tx = bilinear_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (xx, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out[(ch * oh + y) * ow + xx] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub(crate) fn upsample_bilinear2_adjoint(g: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let ty = bilinear_taps(h);
    let tx = bilinear_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (xx, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = g[(ch * oh + y) * ow + xx];
                plane[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                plane[y0 * w + x1] += v * (1.0 - fy) * fx;
                plane[y1 * w + x0] += v * fy * (1.0 - fx);
                plane[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    out
}

/// Non-overlapping `kh x kw` average pooling of a `[C, H, W]` buffer.
pub(crate) fn avgpool(x: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize) -> Vec<f64> {
    let (oh, ow) = (h / kh, w / kw);
    let norm = 1.0 / (kh * kw) as f64;
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out[(ch * oh + y / kh) * ow + xx / kw] += x[(ch * h + y) * w + xx] * norm;
            }
        }
    }
    out
}

pub(crate) fn avgpool_adjoint(g: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize) -> Vec<f64> {
    let (oh, ow) = (h / kh, w / kw);
    let norm = 1.0 / (kh * kw) as f64;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out[(ch * h + y) * w + xx] = g[(ch * oh + y / kh) * ow + xx / kw] * norm;
            }
        }
    }
    out
}
