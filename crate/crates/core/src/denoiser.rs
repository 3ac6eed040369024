//! Convolutional U-Nets: the conditional noise predictor and the small
//! three-stage U-Net used inside the suppression network.
//!
//! Both are plain conv + ReLU stacks without normalization. Downsampling is a
//! stride-2 3x3 convolution, upsampling is nearest-neighbour followed by a
//! skip concatenation and a 3x3 convolution.

use crate::autodiff::{Bound, Graph, Var};
use crate::error::{invalid, shape_err, Result};
use crate::optim::ParamSet;
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    /// Number of stride-2 stages.
    pub depth: usize,
    /// Width of the sinusoidal timestep embedding; 0 disables it.
    pub time_embed_dim: usize,
}

impl UNetConfig {
    /// Noise predictor for `channels`-channel images: input is the noisy
    /// sample concatenated with the condition.
    pub fn denoiser(channels: usize) -> Self {
        Self { in_channels: 2 * channels, out_channels: channels, base_width: 16, depth: 2, time_embed_dim: 32 }
    }

    /// Encoder, bottleneck, decoder; no time input.
    pub fn unet3(in_channels: usize, out_channels: usize, base_width: usize) -> Self {
        Self { in_channels, out_channels, base_width, depth: 1, time_embed_dim: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_width == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(invalid(format!("degenerate U-Net config {self:?}")));
        }
        if !self.time_embed_dim.is_multiple_of(2) {
            return Err(invalid(format!("time embedding width {} must be even", self.time_embed_dim)));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// `(name, [C_out, C_in, k, k] or [rows, cols])` for every weight, in order.
    fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut conv = |name: String, c_out: usize, c_in: usize, k: usize| {
            out.push((format!("{name}.w"), vec![c_out, c_in, k, k]));
            out.push((format!("{name}.b"), vec![c_out]));
        };
        let w0 = self.width(0);
        conv("conv_in".into(), w0, self.in_channels, 3);
        for i in 1..=self.depth {
            conv(format!("down{i}"), self.width(i), self.width(i - 1), 3);
        }
        conv("mid".into(), self.width(self.depth), self.width(self.depth), 3);
        for i in (1..=self.depth).rev() {
            conv(format!("up{i}"), self.width(i - 1), self.width(i) + self.width(i - 1), 3);
        }
        conv("out".into(), self.out_channels, w0, 3);
        if self.time_embed_dim > 0 {
            out.push(("time.w".into(), vec![w0, self.time_embed_dim]));
            out.push(("time.b".into(), vec![w0, 1]));
        }
        out
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    fn check_input(&self, shape: &[usize]) -> Result<(usize, usize)> {
        let &[c, h, w] = shape else {
            return Err(shape_err(format!("U-Net input must be [C, H, W], got {shape:?}")));
        };
        if c != self.in_channels {
            return Err(shape_err(format!("U-Net expects {} input channels, got {c}", self.in_channels)));
        }
        let m = 1 << self.depth;
        if h % m != 0 || w % m != 0 {
            return Err(shape_err(format!("extents {h}x{w} are not divisible by {m}")));
        }
        Ok((h, w))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNetParams {
    pub config: UNetConfig,
    pub params: ParamSet,
}

impl UNetParams {
    /// He-normal kernels, zero biases.
    pub fn init(config: UNetConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        for (name, shape) in config.layout() {
            let t = if name.ends_with(".b") {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                rng.randn(&shape)?.scale((2.0 / fan_in as f64).sqrt())
            };
            params.push(&name, t)?;
        }
        Ok(Self { config, params })
    }

    /// Like [`UNetParams::init`] but the output convolution starts at zero,
    /// so the initial prediction is identically zero.
    pub fn init_denoiser(config: UNetConfig, rng: &mut RngStream) -> Result<Self> {
        let mut p = Self::init(config, rng)?;
        let w = p.params.get_mut("out.w").expect("layout has an output layer");
        *w = Tensor::zeros(w.shape());
        Ok(p)
    }

    /// Every parameter zero.
    pub fn zeros(config: UNetConfig) -> Result<Self> {
        let mut p = Self::init(config, &mut RngStream::new(0, 0))?;
        p.params.map_params(|_, t| Tensor::zeros(t.shape()));
        Ok(p)
    }
}

/// Sinusoidal timestep embedding: pairs `(sin(t w_k), cos(t w_k))` with
/// `w_k = 10000^(-2k/dim)`.
pub fn sinusoidal_embed(t: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(invalid(format!("embedding width {dim} must be even and positive")));
    }
    let mut v = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let omega = 10000f64.powf(-2.0 * k as f64 / dim as f64);
        let a = t as f64 * omega;
        v.push(a.sin());
        v.push(a.cos());
    }
    Tensor::new(&[dim], v)
}

fn conv(g: &mut Graph, b: &Bound, prefix: &str, name: &str, x: Var, stride: usize) -> Result<Var> {
    let w = b[format!("{prefix}{name}.w").as_str()];
    let bias = b[format!("{prefix}{name}.b").as_str()];
    g.conv2d(x, w, Some(bias), stride, 1)
}

/// Record a U-Net forward pass on `g`. `t` is required exactly when the
/// config has a time embedding.
pub fn unet_graph(g: &mut Graph, b: &Bound, prefix: &str, cfg: &UNetConfig, x: Var, t: Option<usize>) -> Result<Var> {
    cfg.check_input(g.value(x).shape())?;
    let mut h = conv(g, b, prefix, "conv_in", x, 1)?;
    match (cfg.time_embed_dim, t) {
        (0, _) => {}
        (dim, Some(t)) => {
            let emb = g.constant(sinusoidal_embed(t, dim)?.reshape(&[dim, 1])?);
            let proj = g.matmul(b[format!("{prefix}time.w").as_str()], emb)?;
            let proj = g.add(proj, b[format!("{prefix}time.b").as_str()])?;
            h = g.add_channel(h, proj)?;
        }
        (_, None) => return Err(invalid("time-conditioned U-Net called without a timestep")),
    }
    h = g.relu(h);

    let mut skips = Vec::with_capacity(cfg.depth);
    for i in 1..=cfg.depth {
        skips.push(h);
        let d = conv(g, b, prefix, &format!("down{i}"), h, 2)?;
        h = g.relu(d);
    }
    let m = conv(g, b, prefix, "mid", h, 1)?;
    h = g.relu(m);
    for i in (1..=cfg.depth).rev() {
        let up = g.upsample_nearest(h)?;
        let cat = g.concat(&[up, skips[i - 1]])?;
        let c = conv(g, b, prefix, &format!("up{i}"), cat, 1)?;
        h = g.relu(c);
    }
    conv(g, b, prefix, "out", h, 1)
}

/// Noise estimate `eps_theta(x_t, t, cond)`.
pub fn predict_noise(p: &UNetParams, x_t: &Tensor, t: usize, cond: &Tensor) -> Result<Tensor> {
    x_t.expect_same_shape(cond)?;
    let mut g = Graph::new();
    let b = g.bind(&p.params);
    let x = g.constant(Tensor::concat_channels(&[x_t, cond])?);
    let out = unet_graph(&mut g, &b, "", &p.config, x, Some(t))?;
    Ok(g.value(out).clone())
}

/// Forward pass of a time-free U-Net.
pub fn unet3_forward(p: &UNetParams, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = g.bind(&p.params);
    let xv = g.constant(x.clone());
    let out = unet_graph(&mut g, &b, "", &p.config, xv, None)?;
    Ok(g.value(out).clone())
}

/// Record `eps_theta` on a graph with parameters already bound.
pub fn predict_noise_graph(
    g: &mut Graph,
    b: &Bound,
    cfg: &UNetConfig,
    x_t: &Tensor,
    t: usize,
    cond: &Tensor,
) -> Result<Var> {
    x_t.expect_same_shape(cond)?;
    let x = g.constant(Tensor::concat_channels(&[x_t, cond])?);
    unet_graph(g, b, "", cfg, x, Some(t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_values() {
        let e = sinusoidal_embed(0, 8).unwrap();
        assert_eq!(e.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let e = sinusoidal_embed(1, 4).unwrap();
        let want = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
        for (a, b) in e.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(sinusoidal_embed(3, 5).is_err());
        let e = sinusoidal_embed(987, 32).unwrap();
        assert!(e.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn shapes_and_counts() {
        let cfg = UNetConfig::denoiser(3);
        let p = UNetParams::init_denoiser(cfg, &mut RngStream::new(1, 0)).unwrap();
        assert_eq!(p.params.numel(), cfg.param_count());
        let x = RngStream::new(2, 0).randn(&[3, 32, 32]).unwrap();
        let c = RngStream::new(2, 1).randn(&[3, 32, 32]).unwrap();
        let out = predict_noise(&p, &x, 17, &c).unwrap();
        assert_eq!(out.shape(), &[3, 32, 32]);
        // zero output layer
        assert_eq!(out.max_abs(), 0.0);
        assert!(predict_noise(&p, &x.slice_channels(0, 3).unwrap(), 1, &c).is_ok());
        let odd = Tensor::zeros(&[3, 6, 6]);
        assert!(matches!(predict_noise(&p, &odd, 1, &odd), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn unet3_shapes() {
        let cfg = UNetConfig::unet3(9, 5, 8);
        let p = UNetParams::init(cfg, &mut RngStream::new(3, 0)).unwrap();
        let x = RngStream::new(3, 1).randn(&[9, 16, 16]).unwrap();
        assert_eq!(unet3_forward(&p, &x).unwrap().shape(), &[5, 16, 16]);
        assert!(unet3_forward(&p, &Tensor::zeros(&[9, 7, 8])).is_err());
        let z = UNetParams::zeros(cfg).unwrap();
        assert_eq!(unet3_forward(&z, &x).unwrap().max_abs(), 0.0);
    }
}
