//! Wavelet suppression: the per-branch feature extraction network (WFEN),
//! the cross-branch subtraction, and the interactive dual-branch sampler.
//!
//! A WFEN splits its input into Haar subbands. The three detail subbands go
//! through a 1x1 convolution and a small U-Net; the result is upsampled back
//! to full resolution and re-analysed so that its detail subbands can stand
//! in for the originals. The approximation subband is gated in the frequency
//! domain by WFCA. Synthesis of the four new subbands, scaled by a learned
//! per-channel gain, is the suppression signal that gets subtracted from the
//! other branch.

use crate::autodiff::{Bound, Graph, Var};
use crate::denoiser::{predict_noise, unet_graph, UNetConfig, UNetParams};
use crate::diffusion::{reverse_step, NoiseSchedule};
use crate::error::{invalid, shape_err, Result};
use crate::optim::ParamSet;
use crate::par;
use crate::rng::RngStream;
use crate::spectral::WfcaConfig;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WfenConfig {
    /// Image channels `C`.
    pub channels: usize,
    /// Width `C_f` after the 1x1 projection of the `3C` detail channels.
    pub feat_channels: usize,
    pub unet_width: usize,
}

impl WfenConfig {
    pub fn new(channels: usize) -> Self {
        Self { channels, feat_channels: 8, unet_width: 8 }
    }

    pub fn unet(&self) -> UNetConfig {
        UNetConfig::unet3(self.feat_channels, 3 * self.channels, self.unet_width)
    }

    pub fn wfca(&self) -> WfcaConfig {
        WfcaConfig::new(self.channels)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let &[c, h, w] = shape else {
            return Err(shape_err(format!("WFEN input must be [C, H, W], got {shape:?}")));
        };
        if c != self.channels {
            return Err(shape_err(format!("WFEN built for {} channels, input has {c}", self.channels)));
        }
        if h < 8 || w < 8 || !h.is_power_of_two() || !w.is_power_of_two() {
            return Err(shape_err(format!("WFEN needs power-of-two extents of at least 8, got {h}x{w}")));
        }
        Ok(())
    }
}

/// Learnable weights of one WFEN, in a single flat set with prefixes
/// `conv1x1.`, `unet.`, `wfca.` and the output gain `out_gain`.
#[derive(Clone, Debug, PartialEq)]
pub struct WfenParams {
    pub config: WfenConfig,
    pub params: ParamSet,
}

impl WfenParams {
    /// Random inner weights with a zero output gain: the initial suppression
    /// signal is exactly zero.
    pub fn init(config: WfenConfig, rng: &mut RngStream) -> Result<Self> {
        let c3 = 3 * config.channels;
        let mut params = ParamSet::new();
        let k = rng.randn(&[config.feat_channels, c3, 1, 1])?.scale((2.0 / c3 as f64).sqrt());
        params.push("conv1x1.w", k)?;
        params.push("conv1x1.b", Tensor::zeros(&[config.feat_channels]))?;
        let unet = UNetParams::init(config.unet(), rng)?;
        for (name, t) in unet.params.iter() {
            params.push(&format!("unet.{name}"), t.clone())?;
        }
        config.wfca().add_params(&mut params, "wfca.", rng)?;
        params.push("out_gain", Tensor::zeros(&[config.channels]))?;
        Ok(Self { config, params })
    }

    /// Every weight zero.
    pub fn zeros(config: WfenConfig) -> Result<Self> {
        let mut p = Self::init(config, &mut RngStream::new(0, 0))?;
        p.params.map_params(|_, t| Tensor::zeros(t.shape()));
        Ok(p)
    }
}

/// Record a WFEN forward pass on `g`.
pub fn wfen_graph(g: &mut Graph, b: &Bound, cfg: &WfenConfig, x: Var) -> Result<Var> {
    cfg.check_input(g.value(x).shape())?;
    let c = cfg.channels;
    let bands = g.dwt2(x)?;
    let ll = g.slice_channels(bands, 0, c)?;
    let details = g.slice_channels(bands, c, 3 * c)?;

    // High-frequency path.
    let f = g.conv2d(details, b["conv1x1.w"], Some(b["conv1x1.b"]), 1, 0)?;
    let f = unet_graph(g, b, "unet.", &cfg.unet(), f, None)?;
    let f_up = g.upsample_bilinear(f)?;
    let sub = g.dwt2(f_up)?;
    // sub is [LL | LH | HL | HH] with 3C channels each; take the C-channel
    // group matching each detail orientation.
    let lh = g.slice_channels(sub, 3 * c, c)?;
    let hl = g.slice_channels(sub, 6 * c + c, c)?;
    let hh = g.slice_channels(sub, 9 * c + 2 * c, c)?;

    // Low-frequency path.
    let (re, im) = g.fft2(ll)?;
    let (re, im) = cfg.wfca().apply(g, b, "wfca.", re, im)?;
    let ll2 = g.ifft2(re, im)?;

    let stacked = g.concat(&[ll2, lh, hl, hh])?;
    let out = g.idwt2(stacked)?;
    g.mul_channel(out, b["out_gain"])
}

/// Suppression signal of one branch.
pub fn wfen_forward(p: &WfenParams, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = g.bind(&p.params);
    let xv = g.constant(x.clone());
    let out = wfen_graph(&mut g, &b, &p.config, xv)?;
    Ok(g.value(out).clone())
}

/// When suppression runs during sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WsmSchedule {
    /// Position on a 10-point grid over `1..=T`; 0 means no intermediate insertion.
    pub alpha_index: u32,
    pub steps: usize,
    /// Suppress once after the step that produces `x_{alpha}`.
    pub intermediate: bool,
    /// Suppress once more on the final `x_0` pair.
    pub final_step: bool,
}

impl WsmSchedule {
    pub fn new(alpha_index: u32, steps: usize, intermediate: bool, final_step: bool) -> Result<Self> {
        if alpha_index > 10 {
            return Err(invalid(format!("alpha_index {alpha_index} outside 0..=10")));
        }
        if steps == 0 {
            return Err(invalid("schedule needs at least one step"));
        }
        Ok(Self { alpha_index, steps, intermediate, final_step })
    }

    /// No suppression at all.
    pub fn disabled(steps: usize) -> Self {
        Self { alpha_index: 0, steps, intermediate: false, final_step: false }
    }

    /// Intermediate insertion timestep `round(alpha_index T / 10)`, if any.
    pub fn alpha_step(&self) -> Option<usize> {
        if self.alpha_index == 0 {
            return None;
        }
        let t = (self.alpha_index as f64 * self.steps as f64 / 10.0).round() as usize;
        Some(t.clamp(1, self.steps))
    }

    /// Timesteps `t` after whose reverse step suppression runs.
    pub fn insertion_timesteps(&self) -> Vec<usize> {
        match (self.intermediate, self.alpha_step()) {
            (true, Some(t)) => vec![t],
            _ => Vec::new(),
        }
    }

    pub fn is_disabled(&self) -> bool {
        self.insertion_timesteps().is_empty() && !self.final_step
    }
}

/// Both branch intermediates at a common timestep, with their conditions.
#[derive(Clone, Debug, PartialEq)]
pub struct DualState {
    pub x1: Tensor,
    pub x2: Tensor,
    pub t: usize,
    pub cond1: Tensor,
    pub cond2: Tensor,
}

impl DualState {
    pub fn new(x1: Tensor, x2: Tensor, t: usize, cond1: Tensor, cond2: Tensor) -> Result<Self> {
        for other in [&x2, &cond1, &cond2] {
            x1.expect_same_shape(other)?;
        }
        Ok(Self { x1, x2, t, cond1, cond2 })
    }
}

/// Subtract each branch's suppression signal from the other branch. Both
/// signals are computed from the incoming state.
pub fn apply_suppression(state: &DualState, p1: &WfenParams, p2: &WfenParams) -> Result<DualState> {
    let (out1, out2) = par::join(|| wfen_forward(p1, &state.x1), || wfen_forward(p2, &state.x2));
    let (out1, out2) = (out1?, out2?);
    Ok(DualState { x1: state.x1.sub(&out2)?, x2: state.x2.sub(&out1)?, ..state.clone() })
}

/// The four networks used by the dual sampler.
#[derive(Clone, Copy, Debug)]
pub struct DualModels<'a> {
    pub eps1: &'a UNetParams,
    pub eps2: &'a UNetParams,
    pub wfen1: &'a WfenParams,
    pub wfen2: &'a WfenParams,
}

/// Bookkeeping from one sampling run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SampleTrace {
    pub suppressions: usize,
}

/// Random streams of branch 1 and branch 2 within a sampling stream.
pub fn branch_streams(rng: &RngStream) -> (RngStream, RngStream) {
    (rng.substream(1), rng.substream(2))
}

/// Plain conditional ancestral sampling for one branch, unclamped. Draws
/// `x_T` and then the per-step noise from `rng`.
pub fn reverse_sample_raw(eps: &UNetParams, cond: &Tensor, s: &NoiseSchedule, rng: &mut RngStream) -> Result<Tensor> {
    let mut x = rng.randn(cond.shape())?;
    for t in (1..=s.steps()).rev() {
        let e = predict_noise(eps, &x, t, cond)?;
        x = reverse_step(&x, t, &e, rng, s)?;
    }
    Ok(x)
}

/// Run both reverse chains from `T` down to 0 with suppression after the
/// scheduled intermediate steps. The final-output suppression and the clamp
/// are not applied here; see [`finish_dual`].
#[allow(clippy::too_many_arguments)]
pub fn dual_reverse_chain(
    models: DualModels<'_>,
    cond1: &Tensor,
    cond2: &Tensor,
    s: &NoiseSchedule,
    insert_at: &[usize],
    rng1: &mut RngStream,
    rng2: &mut RngStream,
    trace: &mut SampleTrace,
) -> Result<DualState> {
    cond1.expect_same_shape(cond2)?;
    let x1 = rng1.randn(cond1.shape())?;
    let x2 = rng2.randn(cond2.shape())?;
    let mut state = DualState::new(x1, x2, s.steps(), cond1.clone(), cond2.clone())?;
    for t in (1..=s.steps()).rev() {
        let (x1, x2) = par::join(
            || -> Result<Tensor> {
                let e = predict_noise(models.eps1, &state.x1, t, &state.cond1)?;
                reverse_step(&state.x1, t, &e, rng1, s)
            },
            || -> Result<Tensor> {
                let e = predict_noise(models.eps2, &state.x2, t, &state.cond2)?;
                reverse_step(&state.x2, t, &e, rng2, s)
            },
        );
        state.x1 = x1?;
        state.x2 = x2?;
        state.t = t - 1;
        if insert_at.contains(&t) {
            state = apply_suppression(&state, models.wfen1, models.wfen2)?;
            trace.suppressions += 1;
        }
    }
    Ok(state)
}

/// Optional final suppression on the `x_0` pair, then clamp to `[-1, 1]`.
pub fn finish_dual(
    state: &DualState,
    models: DualModels<'_>,
    final_step: bool,
    trace: &mut SampleTrace,
) -> Result<(Tensor, Tensor)> {
    let state = if final_step {
        trace.suppressions += 1;
        apply_suppression(state, models.wfen1, models.wfen2)?
    } else {
        state.clone()
    };
    Ok((state.x1.clamp(-1.0, 1.0), state.x2.clamp(-1.0, 1.0)))
}

/// Interactive dual-branch sampling with both conditions set to `mixture`.
pub fn dual_reverse_sample(
    mixture: &Tensor,
    models: DualModels<'_>,
    s: &NoiseSchedule,
    w: &WsmSchedule,
    rng: &RngStream,
) -> Result<(Tensor, Tensor)> {
    dual_reverse_sample_traced(mixture, mixture, models, s, w, rng).map(|(a, b, _)| (a, b))
}

/// [`dual_reverse_sample`] with separate branch conditions and a count of
/// suppression applications.
pub fn dual_reverse_sample_traced(
    cond1: &Tensor,
    cond2: &Tensor,
    models: DualModels<'_>,
    s: &NoiseSchedule,
    w: &WsmSchedule,
    rng: &RngStream,
) -> Result<(Tensor, Tensor, SampleTrace)> {
    if w.steps != s.steps() {
        return Err(invalid(format!(
            "suppression schedule built for {} steps, noise schedule has {}",
            w.steps,
            s.steps()
        )));
    }
    let (mut r1, mut r2) = branch_streams(rng);
    let mut trace = SampleTrace::default();
    let state = dual_reverse_chain(models, cond1, cond2, s, &w.insertion_timesteps(), &mut r1, &mut r2, &mut trace)?;
    let (a, b) = finish_dual(&state, models, w.final_step, &mut trace)?;
    Ok((a, b, trace))
}
