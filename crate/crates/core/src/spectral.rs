//! 2D FFT and window-based frequency channel attention (WFCA).
//!
//! WFCA gates a spectrum per channel and per rectangular frequency window:
//! the mean magnitude of each window is fed through a two-layer gating
//! network (affine, ReLU, affine, sigmoid) and every coefficient is scaled by
//! its window's gate. Each bin's gate is averaged with the gate of its mirror
//! bin `(-u, -v)`, which keeps the gated spectrum of a real image Hermitian so
//! that the inverse transform stays real.

use num_complex::Complex64;

use crate::autodiff::{Bound, Graph, Var};
use crate::error::{invalid, shape_err, Result};
use crate::optim::ParamSet;
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Largest imaginary residue tolerated when inverting to a real image.
pub const IMAG_RESIDUE_LIMIT: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor {
    pub re: Tensor,
    pub im: Tensor,
}

impl ComplexTensor {
    pub fn new(re: Tensor, im: Tensor) -> Result<Self> {
        re.expect_same_shape(&im)?;
        Ok(Self { re, im })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { re: Tensor::zeros(shape), im: Tensor::zeros(shape) }
    }

    pub fn shape(&self) -> &[usize] {
        self.re.shape()
    }

    /// `sum |X|^2`.
    pub fn sq_norm(&self) -> f64 {
        self.re.sq_norm() + self.im.sq_norm()
    }
}

/// Forward 2D DFT per channel, unnormalized:
/// `X[u, v] = sum x[m, n] exp(-2 pi i (u m / H + v n / W))`.
pub fn fft2(x: &Tensor) -> Result<ComplexTensor> {
    let (re, im) = fft2_planes(x, None)?;
    Ok(ComplexTensor { re, im })
}

/// Inverse 2D DFT with `1 / (H W)` normalization, returning the real part.
/// Fails with a numerical-contract error when the imaginary residue reaches
/// [`IMAG_RESIDUE_LIMIT`].
pub fn ifft2(x: &ComplexTensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let re = g.constant(x.re.clone());
    let im = g.constant(x.im.clone());
    let out = g.ifft2(re, im)?;
    Ok(g.value(out).clone())
}

fn check_pow2(shape: &[usize]) -> Result<(usize, usize, usize)> {
    let &[c, h, w] = shape else {
        return Err(shape_err(format!("expected [C, H, W], got {shape:?}")));
    };
    if !h.is_power_of_two() || !w.is_power_of_two() {
        return Err(shape_err(format!("FFT extents must be powers of two, got {h}x{w}")));
    }
    Ok((c, h, w))
}

/// In-place iterative radix-2 FFT. `inverse` flips the twiddle sign only.
fn fft_inplace(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = sign * std::f64::consts::TAU / len as f64;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let tw = Complex64::from_polar(1.0, step * k as f64);
                let a = buf[start + k];
                let b = buf[start + k + half] * tw;
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

fn transform_planes(re: &Tensor, im: Option<&Tensor>, inverse: bool) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = check_pow2(re.shape())?;
    if let Some(im) = im {
        re.expect_same_shape(im)?;
    }
    let mut buf: Vec<Complex64> = match im {
        Some(im) => re.data().iter().zip(im.data()).map(|(&a, &b)| Complex64::new(a, b)).collect(),
        None => re.data().iter().map(|&a| Complex64::new(a, 0.0)).collect(),
    };
    let mut column = vec![Complex64::default(); h];
    for plane in buf.chunks_mut(h * w) {
        for row in plane.chunks_mut(w) {
            fft_inplace(row, inverse);
        }
        for x in 0..w {
            for y in 0..h {
                column[y] = plane[y * w + x];
            }
            fft_inplace(&mut column, inverse);
            for y in 0..h {
                plane[y * w + x] = column[y];
            }
        }
    }
    let norm = if inverse { 1.0 / (h * w) as f64 } else { 1.0 };
    let shape = vec![c, h, w];
    Ok((
        Tensor::from_parts(shape.clone(), buf.iter().map(|z| z.re * norm).collect()),
        Tensor::from_parts(shape, buf.iter().map(|z| z.im * norm).collect()),
    ))
}

pub(crate) fn fft2_planes(re: &Tensor, im: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
    transform_planes(re, im, false)
}

pub(crate) fn ifft2_planes(re: &Tensor, im: &Tensor) -> Result<(Tensor, Tensor)> {
    transform_planes(re, Some(im), true)
}

/// Shape of a WFCA gate network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WfcaConfig {
    pub channels: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub hidden: usize,
}

impl WfcaConfig {
    /// 4x4 window grid, hidden width twice the descriptor length.
    pub fn new(channels: usize) -> Self {
        Self { channels, grid_h: 4, grid_w: 4, hidden: 2 * channels * 16 }
    }

    pub fn descriptors(&self) -> usize {
        self.channels * self.grid_h * self.grid_w
    }

    pub fn add_params(&self, ps: &mut ParamSet, prefix: &str, rng: &mut RngStream) -> Result<()> {
        let (n, hid) = (self.descriptors(), self.hidden);
        // Descriptors are unnormalized spectral magnitudes (they grow with the
        // window size), so the first layer starts small to keep gates away
        // from saturation.
        let s1 = 1.0 / n as f64;
        let s2 = (1.0 / hid as f64).sqrt();
        ps.push(&format!("{prefix}fc1.w"), rng.randn(&[hid, n])?.scale(s1))?;
        ps.push(&format!("{prefix}fc1.b"), Tensor::zeros(&[hid, 1]))?;
        ps.push(&format!("{prefix}fc2.w"), rng.randn(&[n, hid])?.scale(s2))?;
        ps.push(&format!("{prefix}fc2.b"), Tensor::zeros(&[n, 1]))?;
        Ok(())
    }

    /// Gate the spectrum `(re, im)` on a graph, reading weights from `bound`.
    pub fn apply(&self, g: &mut Graph, bound: &Bound, prefix: &str, re: Var, im: Var) -> Result<(Var, Var)> {
        let (c, h, w) = g.value(re).chw()?;
        if c != self.channels {
            return Err(invalid(format!("WFCA built for {} channels, spectrum has {c}", self.channels)));
        }
        if h % self.grid_h != 0 || w % self.grid_w != 0 {
            return Err(invalid(format!("{}x{} window grid does not divide {h}x{w}", self.grid_h, self.grid_w)));
        }
        let p = |name: &str| bound[format!("{prefix}{name}").as_str()];
        let mag = g.magnitude(re, im)?;
        let desc = g.avgpool(mag, h / self.grid_h, w / self.grid_w)?;
        let d = g.reshape(desc, &[self.descriptors(), 1])?;
        let z = g.matmul(p("fc1.w"), d)?;
        let z = g.add(z, p("fc1.b"))?;
        let z = g.relu(z);
        let z = g.matmul(p("fc2.w"), z)?;
        let z = g.add(z, p("fc2.b"))?;
        let gates = g.sigmoid(z);
        let gates = g.reshape(gates, &[c, self.grid_h, self.grid_w])?;
        let map = g.mirror_gate(gates, h, w)?;
        Ok((g.mul(re, map)?, g.mul(im, map)?))
    }
}

/// Learnable WFCA weights.
#[derive(Clone, Debug, PartialEq)]
pub struct WfcaParams {
    pub config: WfcaConfig,
    pub params: ParamSet,
}

impl WfcaParams {
    pub fn new(config: WfcaConfig, rng: &mut RngStream) -> Result<Self> {
        let mut params = ParamSet::new();
        config.add_params(&mut params, "", rng)?;
        Ok(Self { config, params })
    }

    /// All weights and biases zero: every gate is exactly 0.5.
    pub fn zeros(config: WfcaConfig) -> Self {
        let mut p = Self::new(config, &mut RngStream::new(0, 0)).expect("valid config");
        p.params.map_params(|_, t| Tensor::zeros(t.shape()));
        p
    }
}

/// Window-based frequency channel attention on a spectrum.
pub fn wfca(x: &ComplexTensor, p: &WfcaParams) -> Result<ComplexTensor> {
    let mut g = Graph::new();
    let bound = g.bind(&p.params);
    let re = g.constant(x.re.clone());
    let im = g.constant(x.im.clone());
    let (r, i) = p.config.apply(&mut g, &bound, "", re, im)?;
    Ok(ComplexTensor { re: g.value(r).clone(), im: g.value(i).clone() })
}

/// Per-window gates `[C, Gh, Gw]` before mirror averaging.
pub fn wfca_gates(x: &ComplexTensor, p: &WfcaParams) -> Result<Tensor> {
    let cfg = p.config;
    let (_, h, w) = x.re.chw()?;
    let mut g = Graph::new();
    let bound = g.bind(&p.params);
    let re = g.constant(x.re.clone());
    let im = g.constant(x.im.clone());
    let mag = g.magnitude(re, im)?;
    let desc = g.avgpool(mag, h / cfg.grid_h, w / cfg.grid_w)?;
    let d = g.reshape(desc, &[cfg.descriptors(), 1])?;
    let z = g.matmul(bound["fc1.w"], d)?;
    let z = g.add(z, bound["fc1.b"])?;
    let z = g.relu(z);
    let z = g.matmul(bound["fc2.w"], z)?;
    let z = g.add(z, bound["fc2.b"])?;
    let gates = g.sigmoid(z);
    g.value(gates).reshape(&[cfg.channels, cfg.grid_h, cfg.grid_w])
}
