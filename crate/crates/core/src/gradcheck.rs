//! Central-difference verification of tape gradients.

use crate::autodiff::{Bound, Graph, Var};
use crate::error::{Error, Result};
use crate::optim::ParamSet;
use crate::rng::RngStream;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    /// `set/name[index]` of the worst coordinate.
    pub worst_param: String,
    /// Tape and finite-difference gradients at the worst coordinate.
    pub worst_values: (f64, f64),
    pub coordinates_checked: usize,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    pub h: f64,
    pub tolerance: f64,
    /// Coordinates sampled per parameter tensor; smaller tensors are checked fully.
    pub coords_per_tensor: usize,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { h: 1e-5, tolerance: 1e-4, coords_per_tensor: 64 }
    }
}

/// Relative error with the scale floored at `noise`, so exactly-zero
/// gradients are compared against rounding level instead of zero.
fn rel_err(analytic: f64, numeric: f64, noise: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(noise);
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compare tape gradients of `loss_fn` against central differences.
///
/// `loss_fn` receives a fresh graph and one [`Bound`] per parameter set and
/// must return a scalar. It is evaluated twice at the unperturbed point; any
/// difference between the two values is reported as a contract violation.
pub fn gradcheck<F>(mut loss_fn: F, params: &[ParamSet], opts: GradcheckOptions) -> Result<GradcheckReport>
where
    F: FnMut(&mut Graph, &[Bound]) -> Result<Var>,
{
    fn eval<F>(loss_fn: &mut F, sets: &[ParamSet]) -> Result<f64>
    where
        F: FnMut(&mut Graph, &[Bound]) -> Result<Var>,
    {
        let mut g = Graph::new();
        let bound: Vec<Bound> = sets.iter().map(|p| g.bind(p)).collect();
        let loss = loss_fn(&mut g, &bound)?;
        Ok(g.value(loss).item())
    }

    let f0 = eval(&mut loss_fn, params)?;
    let f0_again = eval(&mut loss_fn, params)?;
    if f0.to_bits() != f0_again.to_bits() {
        return Err(Error::ContractViolation(format!("loss closure is not deterministic ({f0} then {f0_again})")));
    }

    let analytic: Vec<Vec<_>> = {
        let mut g = Graph::new();
        let bound: Vec<Bound> = params.iter().map(|p| g.bind(p)).collect();
        let loss = loss_fn(&mut g, &bound)?;
        let grads = g.backward(loss)?;
        bound.iter().map(|b| grads.collect(b)).collect()
    };

    // The difference quotient carries rounding error of about
    // eps * |f| / h. Flooring the scale at that error (with margin) divided by
    // the tolerance lets a coordinate pass only if its absolute error is
    // within a few rounding units, which is the best a quotient can resolve.
    let noise = 8.0 * f64::EPSILON * f0.abs().max(1.0) / (opts.h * opts.tolerance);
    let mut picker = RngStream::new(0x6772_6164, 0);
    let mut sets: Vec<ParamSet> = params.to_vec();
    let mut worst = (0.0f64, String::new(), (0.0, 0.0));
    let mut checked = 0;

    for s in 0..sets.len() {
        #[allow(clippy::needless_range_loop)]
        for t in 0..sets[s].len() {
            let n = sets[s].param(t).len();
            let coords: Vec<usize> = if n <= opts.coords_per_tensor {
                (0..n).collect()
            } else {
                let mut all: Vec<usize> = (0..n).collect();
                picker.shuffle(&mut all);
                all.truncate(opts.coords_per_tensor);
                all
            };
            for i in coords {
                let orig = sets[s].param(t).data()[i];
                sets[s].param_mut(t).data_mut()[i] = orig + opts.h;
                let plus = eval(&mut loss_fn, &sets)?;
                sets[s].param_mut(t).data_mut()[i] = orig - opts.h;
                let minus = eval(&mut loss_fn, &sets)?;
                sets[s].param_mut(t).data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * opts.h);
                let a = analytic[s][t].data()[i];
                let err = rel_err(a, numeric, noise);
                checked += 1;
                if err > worst.0 || worst.1.is_empty() {
                    let name = sets[s].names().nth(t).unwrap_or("?");
                    worst = (err, format!("{s}/{name}[{i}]"), (a, numeric));
                }
            }
        }
    }
    Ok(GradcheckReport {
        max_rel_err: worst.0,
        worst_param: worst.1,
        worst_values: worst.2,
        coordinates_checked: checked,
        tolerance: opts.tolerance,
    })
}

/// Built-in gradient checks over the model components, at small sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradTarget {
    /// Conditional noise predictor on 3x8x8 inputs.
    Denoiser,
    /// Time-free U-Net on 9x8x8 inputs.
    Unet3,
    /// Frequency gating alone.
    Wfca,
    /// Full suppression network on 3x8x8 inputs.
    Wfen,
    /// Suppression loss with respect to both suppression signals.
    WfenLoss,
}

impl GradTarget {
    pub const ALL: [GradTarget; 5] =
        [GradTarget::Denoiser, GradTarget::Unet3, GradTarget::Wfca, GradTarget::Wfen, GradTarget::WfenLoss];

    pub fn name(self) -> &'static str {
        match self {
            GradTarget::Denoiser => "denoiser",
            GradTarget::Unet3 => "unet3",
            GradTarget::Wfca => "wfca",
            GradTarget::Wfen => "wfen",
            GradTarget::WfenLoss => "wfen-loss",
        }
    }
}

impl std::str::FromStr for GradTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GradTarget::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| crate::error::invalid(format!("unknown gradcheck target {s:?}")))
    }
}

/// Random weights with every tensor (including output gains) non-zero.
fn randomized(ps: &ParamSet, rng: &mut RngStream, scale: f64) -> Result<ParamSet> {
    let mut out = ps.clone();
    for i in 0..out.len() {
        let shape = out.param(i).shape().to_vec();
        *out.param_mut(i) = rng.randn(&shape)?.scale(scale);
    }
    Ok(out)
}

/// Loss `sum(out * r)` for a fixed random `r`, so every output element
/// contributes with a generic weight.
fn project(g: &mut Graph, out: Var, r: &crate::tensor::Tensor) -> Result<Var> {
    let rv = g.constant(r.clone());
    let p = g.mul(out, rv)?;
    Ok(g.sum(p))
}

/// Run one built-in gradient check.
pub fn check_target(target: GradTarget, seed: u64, opts: GradcheckOptions) -> Result<GradcheckReport> {
    use crate::denoiser::{unet_graph, UNetConfig, UNetParams};
    use crate::objectives::wfen_loss_graph;
    use crate::spectral::{WfcaConfig, WfcaParams};
    use crate::suppression::{wfen_graph, WfenConfig, WfenParams};

    let mut rng = RngStream::new(seed, 0x6763);
    match target {
        GradTarget::Denoiser => {
            let cfg = UNetConfig::denoiser(3);
            let p = UNetParams::init(cfg, &mut rng)?;
            let p = randomized(&p.params, &mut rng, 0.3)?;
            let x = rng.randn(&[6, 8, 8])?;
            let r = rng.randn(&[3, 8, 8])?;
            gradcheck(
                |g, b| {
                    let xv = g.constant(x.clone());
                    let out = unet_graph(g, &b[0], "", &cfg, xv, Some(37))?;
                    project(g, out, &r)
                },
                &[p],
                opts,
            )
        }
        GradTarget::Unet3 => {
            let cfg = UNetConfig::unet3(9, 9, 8);
            let p = randomized(&UNetParams::init(cfg, &mut rng)?.params, &mut rng, 0.3)?;
            let x = rng.randn(&[9, 8, 8])?;
            let r = rng.randn(&[9, 8, 8])?;
            gradcheck(
                |g, b| {
                    let xv = g.constant(x.clone());
                    let out = unet_graph(g, &b[0], "", &cfg, xv, None)?;
                    project(g, out, &r)
                },
                &[p],
                opts,
            )
        }
        GradTarget::Wfca => {
            let cfg = WfcaConfig::new(3);
            let p = randomized(&WfcaParams::new(cfg, &mut rng)?.params, &mut rng, 0.05)?;
            let x = rng.randn(&[3, 8, 8])?;
            let r = rng.randn(&[3, 8, 8])?;
            gradcheck(
                |g, b| {
                    let xv = g.constant(x.clone());
                    let (re, im) = g.fft2(xv)?;
                    let (re, im) = cfg.apply(g, &b[0], "", re, im)?;
                    let out = g.ifft2(re, im)?;
                    project(g, out, &r)
                },
                &[p],
                opts,
            )
        }
        GradTarget::Wfen => {
            let cfg = WfenConfig::new(3);
            let init = WfenParams::init(cfg, &mut rng)?;
            let mut p = randomized(&init.params, &mut rng, 0.3)?;
            // Gate weights see raw spectral magnitudes; keep them in the
            // sigmoid's responsive range.
            p.map_params(|name, t| if name.starts_with("wfca.") { t.scale(0.05) } else { t.clone() });
            let x = rng.randn(&[3, 8, 8])?;
            let r = rng.randn(&[3, 8, 8])?;
            gradcheck(
                |g, b| {
                    let xv = g.constant(x.clone());
                    let out = wfen_graph(g, &b[0], &cfg, xv)?;
                    project(g, out, &r)
                },
                &[p],
                opts,
            )
        }
        GradTarget::WfenLoss => {
            let mut p = ParamSet::new();
            p.push("x_out1", rng.randn(&[3, 8, 8])?.scale(0.5))?;
            p.push("x_out2", rng.randn(&[3, 8, 8])?.scale(0.5))?;
            let xt = [rng.randn(&[3, 8, 8])?, rng.randn(&[3, 8, 8])?];
            let refs = [rng.randn(&[3, 8, 8])?, rng.randn(&[3, 8, 8])?];
            gradcheck(
                |g, b| {
                    let x = [g.constant(xt[0].clone()), g.constant(xt[1].clone())];
                    let rv = [g.constant(refs[0].clone()), g.constant(refs[1].clone())];
                    let (l, _) = wfen_loss_graph(g, x, [b[0]["x_out1"], b[0]["x_out2"]], rv)?;
                    Ok(l)
                },
                &[p],
                opts,
            )
        }
    }
}
