//! Noise schedules, forward noising, and the single-chain reverse update.
//!
//! Timesteps are 1-based: `t = 1..=T` index the noising steps and `t = 0`
//! denotes clean data, with `alpha_bar(0) = 1`.

use crate::error::{invalid, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Leading coefficient of the reverse-process mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MeanRule {
    /// `1 / sqrt(alpha_t)`, the standard DDPM posterior mean.
    #[default]
    Standard,
    /// `1 / sqrt(alpha_bar_t)`, as printed in the model description. Kept for
    /// fidelity experiments; it agrees with `Standard` only at `t = 1`.
    CumulativeAlpha,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
    pub mean_rule: MeanRule,
}

impl NoiseSchedule {
    /// Linear betas from `beta_start` to `beta_end` over `steps` steps.
    ///
    /// `beta_start == beta_end` is accepted (a constant schedule); otherwise
    /// the betas strictly increase.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(invalid(format!("need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}")));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + i as f64 * (beta_end - beta_start) / (steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        for a in &alphas {
            alpha_bars.push(alpha_bars.last().unwrap() * a);
        }
        let sigmas = betas.iter().map(|b| b.sqrt()).collect();
        Ok(Self { betas, alphas, alpha_bars, sigmas, mean_rule: MeanRule::Standard })
    }

    pub fn with_mean_rule(mut self, rule: MeanRule) -> Self {
        self.mean_rule = rule;
        self
    }

    /// Number of noising steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(invalid(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

/// Shorthand for [`NoiseSchedule::linear`].
pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(steps, beta_start, beta_end)
}

/// A sample and the timestep it sits at.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionState {
    pub x: Tensor,
    pub t: usize,
}

/// Closed-form `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_sample(x0: &Tensor, t: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    x0.expect_same_shape(eps)
        .map_err(|_| invalid(format!("noise shape {:?} differs from data shape {:?}", eps.shape(), x0.shape())))?;
    if t > s.steps() {
        return Err(invalid(format!("timestep {t} outside 0..={}", s.steps())));
    }
    let ab = s.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// One Markov noising step `sqrt(1 - beta_t) x_prev + sqrt(beta_t) z`.
pub fn forward_step(x_prev: &Tensor, t: usize, rng: &mut RngStream, s: &NoiseSchedule) -> Result<Tensor> {
    s.check_step(t)?;
    let z = rng.randn(x_prev.shape())?;
    let (a, b) = ((1.0 - s.beta(t)).sqrt(), s.beta(t).sqrt());
    x_prev.zip_map(&z, |x, z| a * x + b * z)
}

/// Mean of `p(x_{t-1} | x_t)` given a noise prediction.
pub fn posterior_mean(x_t: &Tensor, t: usize, eps_pred: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    s.check_step(t)?;
    x_t.expect_same_shape(eps_pred).map_err(|_| {
        invalid(format!("prediction shape {:?} differs from sample shape {:?}", eps_pred.shape(), x_t.shape()))
    })?;
    let lead = match s.mean_rule {
        MeanRule::Standard => 1.0 / s.alpha(t).sqrt(),
        MeanRule::CumulativeAlpha => 1.0 / s.alpha_bar(t).sqrt(),
    };
    let k = s.beta(t) / (1.0 - s.alpha_bar(t)).sqrt();
    x_t.zip_map(eps_pred, |x, e| lead * (x - k * e))
}

/// Ancestral step to `x_{t-1}`; no noise is injected at `t = 1`.
pub fn reverse_step(
    x_t: &Tensor,
    t: usize,
    eps_pred: &Tensor,
    rng: &mut RngStream,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    let mean = posterior_mean(x_t, t, eps_pred, s)?;
    if t == 1 {
        return Ok(mean);
    }
    let z = rng.randn(x_t.shape())?;
    let sigma = s.sigma(t);
    mean.zip_map(&z, |m, z| m + sigma * z)
}
