//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! A [`Graph`] records every operation applied to its variables. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and
//! produces the adjoint of every node that depends on a differentiable leaf.
//! The operator set is fixed and small: exactly what the denoiser, the
//! suppression network and the losses are built from.

use std::ops::Index;

use crate::error::{invalid, shape_err, Result};
use crate::optim::ParamSet;
use crate::spectral::{fft2_planes, ifft2_planes};
use crate::tensor::{self, ConvGeometry, Tensor};
use crate::wavelet::{haar_analysis, haar_synthesis};
use crate::Error;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddChannel(Var, Var),
    MulChannel(Var, Var),
    Conv2d { x: Var, k: Var, b: Option<Var>, geo: ConvGeometry },
    Matmul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Exp2(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    SliceChannels { x: Var, start: usize },
    UpsampleNearest(Var),
    UpsampleBilinear(Var),
    AvgPool { x: Var, kh: usize, kw: usize },
    Dwt2(Var),
    Idwt2(Var),
    FftRe(Var),
    FftIm(Var),
    Ifft2 { re: Var, im: Var },
    Magnitude { re: Var, im: Var },
    MirrorGate { g: Var, h: usize, w: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape of recorded tensor operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Parameters of a [`ParamSet`] bound as differentiable leaves of a graph.
#[derive(Clone, Debug)]
pub struct Bound {
    entries: Vec<(String, Var)>,
}

impl Bound {
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.entries.iter().map(|(_, v)| *v)
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Index<&str> for Bound {
    type Output = Var;

    fn index(&self, name: &str) -> &Var {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
            .unwrap_or_else(|| panic!("no bound parameter named {name:?}"))
    }
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` if `v` does not
    /// influence the loss through a differentiable path.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    /// Gradient tensors for every parameter of `bound`, zero where absent.
    pub fn collect(&self, bound: &Bound) -> Vec<Tensor> {
        bound
            .vars()
            .map(|v| match &self.grads[v.0] {
                Some(g) => Tensor::from_parts(self.shapes[v.0].clone(), g.clone()),
                None => Tensor::zeros(&self.shapes[v.0]),
            })
            .collect()
    }

    /// Add these gradients into the gradient slots of `params`.
    pub fn accumulate_into(&self, bound: &Bound, params: &mut ParamSet) -> Result<()> {
        if bound.len() != params.len() {
            return Err(invalid("bound variables do not match the parameter set"));
        }
        for (i, v) in bound.vars().enumerate() {
            if let Some(g) = &self.grads[v.0] {
                let slot = params.grad_mut(i);
                for (a, b) in slot.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        Ok(())
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Window index of every frequency bin and of its mirror `(-u, -v)`.
fn mirror_windows(h: usize, w: usize, gh: usize, gw: usize) -> Vec<(usize, usize)> {
    let (wh, ww) = (h / gh, w / gw);
    let mut out = Vec::with_capacity(h * w);
    for u in 0..h {
        for v in 0..w {
            let (mu, mv) = ((h - u) % h, (w - v) % w);
            out.push(((u / wh) * gw + v / ww, (mu / wh) * gw + mv / ww));
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Bind every parameter of `params` as a differentiable leaf.
    pub fn bind(&mut self, params: &ParamSet) -> Bound {
        let entries = params.iter().map(|(name, t)| (name.to_string(), self.leaf(t.clone()))).collect();
        Bound { entries }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).scale(k);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, k), ng)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        let ng = self.ng(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    /// `x[c, :, :] + v[c]` for `x: [C, H, W]`, `v: [C]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let out = self.channel_broadcast(x, v, |a, b| a + b)?;
        let ng = self.ng(x) || self.ng(v);
        Ok(self.push(out, Op::AddChannel(x, v), ng))
    }

    /// `x[c, :, :] * v[c]` for `x: [C, H, W]`, `v: [C]`.
    pub fn mul_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let out = self.channel_broadcast(x, v, |a, b| a * b)?;
        let ng = self.ng(x) || self.ng(v);
        Ok(self.push(out, Op::MulChannel(x, v), ng))
    }

    fn channel_broadcast(&self, x: Var, v: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let xt = self.value(x);
        let (c, h, w) = xt.chw()?;
        let vt = self.value(v);
        if vt.len() != c {
            return Err(shape_err(format!("channel vector of {} for {c} channels", vt.len())));
        }
        let plane = h * w;
        let data = xt.data().iter().enumerate().map(|(i, &a)| f(a, vt.data()[i / plane])).collect();
        Ok(Tensor::from_parts(xt.shape().to_vec(), data))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let geo = ConvGeometry::new(self.value(x).shape(), self.value(k).shape(), stride, padding)?;
        if let Some(b) = b {
            if self.value(b).len() != geo.c_out {
                return Err(shape_err(format!("bias of {} for {} output channels", self.value(b).len(), geo.c_out)));
            }
        }
        let out = geo.forward(self.value(x).data(), self.value(k).data(), b.map(|b| self.value(b).data()));
        let ng = self.ng(x) || self.ng(k) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(Tensor::from_parts(geo.out_shape(), out), Op::Conv2d { x, k, b, geo }, ng))
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = match (self.value(a).shape(), self.value(b).shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (sa, sb) => return Err(shape_err(format!("matmul {sa:?} x {sb:?}"))),
        };
        let mut out = vec![0.0; m * n];
        tensor::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::Matmul(a, b), ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        let ng = self.ng(x);
        self.push(v, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(v, Op::Sigmoid(x), ng)
    }

    /// Elementwise `2^x`.
    pub fn exp2(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::exp2);
        let ng = self.ng(x);
        self.push(v, Op::Exp2(x), ng)
    }

    /// Elementwise clamp; the gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(x).clamp(lo, hi);
        let ng = self.ng(x);
        self.push(v, Op::Clamp { x, lo, hi }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(v, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        let ng = self.ng(x);
        self.push(v, Op::Mean(x), ng)
    }

    /// Per-element mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::Reshape(x), ng))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_channels(&tensors)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(v, Op::Concat(parts.to_vec()), ng))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).slice_channels(start, len)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::SliceChannels { x, start }, ng))
    }

    pub fn upsample_nearest(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let v = tensor::upsample_nearest2(self.value(x).data(), c, h, w);
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_parts(vec![c, 2 * h, 2 * w], v), Op::UpsampleNearest(x), ng))
    }

    pub fn upsample_bilinear(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let v = tensor::upsample_bilinear2(self.value(x).data(), c, h, w);
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_parts(vec![c, 2 * h, 2 * w], v), Op::UpsampleBilinear(x), ng))
    }

    /// Non-overlapping `kh x kw` average pooling.
    pub fn avgpool(&mut self, x: Var, kh: usize, kw: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if kh == 0 || kw == 0 || h % kh != 0 || w % kw != 0 {
            return Err(shape_err(format!("pool {kh}x{kw} does not tile {h}x{w}")));
        }
        let v = tensor::avgpool(self.value(x).data(), c, h, w, kh, kw);
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_parts(vec![c, h / kh, w / kw], v), Op::AvgPool { x, kh, kw }, ng))
    }

    /// Haar analysis: `[C, H, W]` to stacked subbands `[4C, H/2, W/2]`
    /// ordered LL, LH, HL, HH.
    pub fn dwt2(&mut self, x: Var) -> Result<Var> {
        let v = haar_analysis(self.value(x))?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::Dwt2(x), ng))
    }

    /// Haar synthesis: stacked `[4C, h, w]` subbands to `[C, 2h, 2w]`.
    pub fn idwt2(&mut self, x: Var) -> Result<Var> {
        let v = haar_synthesis(self.value(x))?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::Idwt2(x), ng))
    }

    /// Unnormalized 2D DFT of a real `[C, H, W]` tensor, as (real, imaginary) parts.
    pub fn fft2(&mut self, x: Var) -> Result<(Var, Var)> {
        let (re, im) = fft2_planes(self.value(x), None)?;
        let ng = self.ng(x);
        let r = self.push(re, Op::FftRe(x), ng);
        let i = self.push(im, Op::FftIm(x), ng);
        Ok((r, i))
    }

    /// Real part of the normalized inverse DFT. Fails if the imaginary
    /// residue exceeds `1e-6`, i.e. the spectrum was not Hermitian.
    pub fn ifft2(&mut self, re: Var, im: Var) -> Result<Var> {
        same_shape(self.value(re), self.value(im), "ifft2 parts")?;
        let (out, imag) = ifft2_planes(self.value(re), self.value(im))?;
        let residue = imag.max_abs();
        if residue >= crate::spectral::IMAG_RESIDUE_LIMIT {
            return Err(Error::NumericalContract(format!(
                "inverse transform left an imaginary residue of {residue:e}"
            )));
        }
        let ng = self.ng(re) || self.ng(im);
        Ok(self.push(out, Op::Ifft2 { re, im }, ng))
    }

    /// Elementwise complex magnitude `sqrt(re^2 + im^2)`.
    pub fn magnitude(&mut self, re: Var, im: Var) -> Result<Var> {
        let v = self.value(re).zip_map(self.value(im), f64::hypot)?;
        let ng = self.ng(re) || self.ng(im);
        Ok(self.push(v, Op::Magnitude { re, im }, ng))
    }

    /// Expand per-window gates `[C, Gh, Gw]` to a per-bin map `[C, H, W]`,
    /// averaging each bin's window gate with that of its mirror bin
    /// `(-u, -v)` so the map is Hermitian-symmetric.
    pub fn mirror_gate(&mut self, g: Var, h: usize, w: usize) -> Result<Var> {
        let (c, gh, gw) = self.value(g).chw()?;
        if !h.is_multiple_of(gh) || !w.is_multiple_of(gw) {
            return Err(invalid(format!("{gh}x{gw} window grid does not divide {h}x{w}")));
        }
        let map = mirror_windows(h, w, gh, gw);
        let gv = self.value(g).data();
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            let base = ch * gh * gw;
            out.extend(map.iter().map(|&(a, b)| 0.5 * (gv[base + a] + gv[base + b])));
        }
        let ng = self.ng(g);
        Ok(self.push(Tensor::from_parts(vec![c, h, w], out), Op::MirrorGate { g, h, w }, ng))
    }

    /// Adjoints of every node with respect to the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(invalid(format!("backward needs a scalar loss, got shape {:?}", self.value(loss).shape())));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&delta) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: impl FnOnce() -> Vec<f64>) {
        if self.ng(v) {
            self.acc(grads, v, delta());
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.value(v).data();
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_with(grads, a, || g.to_vec());
                self.acc_with(grads, b, || g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc_with(grads, a, || g.to_vec());
                self.acc_with(grads, b, || g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                self.acc_with(grads, a, || g.iter().zip(val(b)).map(|(g, y)| g * y).collect());
                self.acc_with(grads, b, || g.iter().zip(val(a)).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, k) => self.acc_with(grads, a, || g.iter().map(|v| v * k).collect()),
            Op::AddScalar(a) => self.acc_with(grads, a, || g.to_vec()),
            Op::AddChannel(x, v) => {
                let plane = out.len() / self.value(v).len();
                self.acc_with(grads, x, || g.to_vec());
                self.acc_with(grads, v, || g.chunks(plane).map(|c| c.iter().sum()).collect());
            }
            Op::MulChannel(x, v) => {
                let plane = out.len() / self.value(v).len();
                let vv = val(v);
                self.acc_with(grads, x, || g.iter().enumerate().map(|(i, g)| g * vv[i / plane]).collect());
                self.acc_with(grads, v, || {
                    g.chunks(plane)
                        .zip(val(x).chunks(plane))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(a, b)| a * b).sum())
                        .collect()
                });
            }
            Op::Conv2d { x, k, b, geo } => {
                let (dx, dk, db) = geo.backward(val(x), val(k), g);
                self.acc(grads, x, dx);
                self.acc(grads, k, dk);
                if let Some(b) = b {
                    self.acc(grads, b, db);
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.value(a).shape()[0], self.value(a).shape()[1]);
                let n = self.value(b).shape()[1];
                self.acc_with(grads, a, || {
                    let mut da = vec![0.0; m * k];
                    tensor::gemm(m, n, k, g, false, val(b), true, &mut da, 0.0);
                    da
                });
                self.acc_with(grads, b, || {
                    let mut db = vec![0.0; k * n];
                    tensor::gemm(k, m, n, val(a), true, g, false, &mut db, 0.0);
                    db
                });
            }
            Op::Relu(x) => {
                self.acc_with(grads, x, || g.iter().zip(val(x)).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect())
            }
            Op::Sigmoid(x) => {
                self.acc_with(grads, x, || g.iter().zip(out.data()).map(|(g, s)| g * s * (1.0 - s)).collect())
            }
            Op::Exp2(x) => self
                .acc_with(grads, x, || g.iter().zip(out.data()).map(|(g, y)| g * y * std::f64::consts::LN_2).collect()),
            Op::Clamp { x, lo, hi } => self.acc_with(grads, x, || {
                g.iter().zip(val(x)).map(|(g, &x)| if x > lo && x < hi { *g } else { 0.0 }).collect()
            }),
            Op::Sum(x) => self.acc_with(grads, x, || vec![g[0]; self.value(x).len()]),
            Op::Mean(x) => {
                let n = self.value(x).len();
                self.acc_with(grads, x, || vec![g[0] / n as f64; n]);
            }
            Op::Reshape(x) => self.acc_with(grads, x, || g.to_vec()),
            Op::Concat(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc_with(grads, p, || g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::SliceChannels { x, start } => self.acc_with(grads, x, || {
                let plane = out.shape()[1] * out.shape()[2];
                let mut d = vec![0.0; self.value(x).len()];
                d[start * plane..start * plane + g.len()].copy_from_slice(g);
                d
            }),
            Op::UpsampleNearest(x) => self.acc_with(grads, x, || {
                let s = self.value(x).shape();
                tensor::upsample_nearest2_adjoint(g, s[0], s[1], s[2])
            }),
            Op::UpsampleBilinear(x) => self.acc_with(grads, x, || {
                let s = self.value(x).shape();
                tensor::upsample_bilinear2_adjoint(g, s[0], s[1], s[2])
            }),
            Op::AvgPool { x, kh, kw } => self.acc_with(grads, x, || {
                let s = self.value(x).shape();
                tensor::avgpool_adjoint(g, s[0], s[1], s[2], kh, kw)
            }),
            // The Haar transform is orthonormal, so each direction's adjoint is the other.
            Op::Dwt2(x) => self.acc_with(grads, x, || {
                haar_synthesis(&Tensor::from_parts(out.shape().to_vec(), g.to_vec()))
                    .expect("subband stack shape recorded at forward time")
                    .into_data()
            }),
            Op::Idwt2(x) => self.acc_with(grads, x, || {
                haar_analysis(&Tensor::from_parts(out.shape().to_vec(), g.to_vec()))
                    .expect("image shape recorded at forward time")
                    .into_data()
            }),
            // For real x: Re X = C x and Im X = -S x with C, S the symmetric
            // cosine/sine matrices, so the adjoints are C g = Re F(g) and
            // -S g = Im F(g).
            Op::FftRe(x) => self.acc_with(grads, x, || {
                let gt = Tensor::from_parts(out.shape().to_vec(), g.to_vec());
                fft2_planes(&gt, None).expect("validated at forward time").0.into_data()
            }),
            Op::FftIm(x) => self.acc_with(grads, x, || {
                let gt = Tensor::from_parts(out.shape().to_vec(), g.to_vec());
                fft2_planes(&gt, None).expect("validated at forward time").1.into_data()
            }),
            // y = (C Xre - S Xim) / N, so dXre = Re F(g) / N and dXim = Im F(g) / N.
            Op::Ifft2 { re, im } => {
                if self.ng(re) || self.ng(im) {
                    let gt = Tensor::from_parts(out.shape().to_vec(), g.to_vec());
                    let n = (out.shape()[1] * out.shape()[2]) as f64;
                    let (fr, fi) = fft2_planes(&gt, None).expect("validated at forward time");
                    self.acc_with(grads, re, || fr.data().iter().map(|v| v / n).collect());
                    self.acc_with(grads, im, || fi.data().iter().map(|v| v / n).collect());
                }
            }
            Op::Magnitude { re, im } => {
                let ratio = |num: &[f64]| -> Vec<f64> {
                    g.iter()
                        .zip(num)
                        .zip(out.data())
                        .map(|((g, n), m)| if *m > 0.0 { g * n / m } else { 0.0 })
                        .collect()
                };
                self.acc_with(grads, re, || ratio(val(re)));
                self.acc_with(grads, im, || ratio(val(im)));
            }
            Op::MirrorGate { g: gv, h, w } => self.acc_with(grads, gv, || {
                let (c, gh, gw) = self.value(gv).chw().expect("checked at forward time");
                let map = mirror_windows(h, w, gh, gw);
                let mut d = vec![0.0; c * gh * gw];
                for ch in 0..c {
                    let base = ch * gh * gw;
                    for (bin, &(a, b)) in map.iter().enumerate() {
                        let gg = 0.5 * g[ch * h * w + bin];
                        d[base + a] += gg;
                        d[base + b] += gg;
                    }
                }
                d
            }),
        }
    }
}
