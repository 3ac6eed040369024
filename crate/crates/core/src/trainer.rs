//! Joint training of both noise predictors and both suppression networks,
//! checkpoints, and the ablation and sweep harnesses.
//!
//! Randomness is split by purpose. With `seed` the configured seed:
//! stream 1 initializes parameters, stream 2 (substream = iteration, then
//! sample index) draws timesteps and noise, stream 3 (substream = epoch)
//! shuffles the training set, stream 4 (substream = validation index) drives
//! validation sampling and stream 5 (substream = test index) drives
//! evaluation sampling.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Graph;
use crate::dataset::{generate_samples, generate_split, DatasetKind, DatasetSpec, MixtureSample, Split, CHANNELS};
use crate::denoiser::{predict_noise_graph, UNetConfig, UNetParams};
use crate::diffusion::{forward_sample, MeanRule, NoiseSchedule};
use crate::error::{invalid, Error, Result};
use crate::evaluation::{evaluate_separation, mean, mixture_baseline, MetricReport};
use crate::objectives::{total_loss, wfen_loss_graph, LossReport};
use crate::optim::{AdamConfig, AdamState, ParamSet};
use crate::par;
use crate::rng::RngStream;
use crate::suppression::{
    branch_streams, dual_reverse_chain, dual_reverse_sample, finish_dual, wfen_graph, DualModels, SampleTrace,
    WfenConfig, WfenParams, WsmSchedule,
};
use crate::tensor::Tensor;

const STREAM_INIT: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_VALIDATION: u64 = 4;
const STREAM_EVAL: u64 = 5;
/// Stream for sampling arbitrary user-supplied mixtures.
pub const STREAM_SEPARATE: u64 = 6;

/// Every knob of a training run, read from a flat `key = value` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    // Data.
    pub kind: DatasetKind,
    pub train_count: usize,
    pub test_count: usize,
    pub size: usize,
    pub dataset_seed: u64,
    pub mix_low: f64,
    pub mix_high: f64,
    pub tau: f64,
    // Diffusion.
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Use `1 / sqrt(alpha_bar_t)` as the reverse-mean coefficient.
    pub paper_exact_eq6: bool,
    // Objective.
    pub gamma: f64,
    pub alpha_index: u32,
    pub wsm_enabled: bool,
    /// Score suppression against the clean sources instead of the conditions.
    pub clean_reference: bool,
    // Optimizer.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_iterations: u64,
    // Validation and early stopping.
    pub val_interval: u64,
    pub val_count: usize,
    /// Validation rounds without strict improvement before stopping.
    pub patience: usize,
    /// Test mixtures scored by evaluation and ablation; 0 means all.
    pub eval_count: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let d = DatasetSpec::default();
        Self {
            kind: d.kind,
            train_count: d.train,
            test_count: d.test,
            size: d.size,
            dataset_seed: d.seed,
            mix_low: d.mix_low,
            mix_high: d.mix_high,
            tau: d.tau,
            steps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
            paper_exact_eq6: false,
            gamma: 3.0,
            alpha_index: 5,
            wsm_enabled: true,
            clean_reference: false,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            max_iterations: 2000,
            val_interval: 200,
            val_count: 16,
            patience: 20,
            eval_count: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Canonical text form; every field, fixed order.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// First 8 bytes of the SHA-256 of [`TrainConfig::to_toml`].
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        u64::from_be_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
    }

    pub fn dataset(&self) -> DatasetSpec {
        DatasetSpec {
            kind: self.kind,
            train: self.train_count,
            test: self.test_count,
            size: self.size,
            seed: self.dataset_seed,
            mix_low: self.mix_low,
            mix_high: self.mix_high,
            tau: self.tau,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let rule = if self.paper_exact_eq6 { MeanRule::CumulativeAlpha } else { MeanRule::Standard };
        Ok(NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)?.with_mean_rule(rule))
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps }
    }

    /// Sampling schedule used for validation and default separation:
    /// suppression at `alpha` and on the output when enabled, none otherwise.
    pub fn wsm_schedule(&self) -> Result<WsmSchedule> {
        if self.wsm_enabled {
            WsmSchedule::new(self.alpha_index, self.steps, true, true)
        } else {
            Ok(WsmSchedule::disabled(self.steps))
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.dataset().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.schedule().map_err(|e| Error::Config(e.to_string()))?;
        if !(self.gamma > 0.0) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if self.alpha_index > 10 {
            return bad(format!("alpha_index must lie in 0..=10, got {}", self.alpha_index));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be a finite non-negative number, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if self.batch_size == 0 || self.train_count == 0 {
            return bad("batch_size and train_count must be positive".into());
        }
        if self.val_interval == 0 || self.patience == 0 {
            return bad("val_interval and patience must be positive".into());
        }
        Ok(())
    }
}

/// The four trainable networks.
#[derive(Clone, Debug, PartialEq)]
pub struct Models {
    pub eps1: UNetParams,
    pub eps2: UNetParams,
    pub wfen1: WfenParams,
    pub wfen2: WfenParams,
}

impl Models {
    pub fn init(seed: u64) -> Result<Self> {
        let root = RngStream::new(seed, STREAM_INIT);
        let ucfg = UNetConfig::denoiser(CHANNELS);
        let wcfg = WfenConfig::new(CHANNELS);
        Ok(Self {
            eps1: UNetParams::init_denoiser(ucfg, &mut root.named("eps1"))?,
            eps2: UNetParams::init_denoiser(ucfg, &mut root.named("eps2"))?,
            wfen1: WfenParams::init(wcfg, &mut root.named("wfen1"))?,
            wfen2: WfenParams::init(wcfg, &mut root.named("wfen2"))?,
        })
    }

    pub fn dual(&self) -> DualModels<'_> {
        DualModels { eps1: &self.eps1, eps2: &self.eps2, wfen1: &self.wfen1, wfen2: &self.wfen2 }
    }

    fn sets(&self) -> [&ParamSet; 4] {
        [&self.eps1.params, &self.eps2.params, &self.wfen1.params, &self.wfen2.params]
    }

    fn sets_mut(&mut self) -> [&mut ParamSet; 4] {
        [&mut self.eps1.params, &mut self.eps2.params, &mut self.wfen1.params, &mut self.wfen2.params]
    }
}

const SET_NAMES: [&str; 4] = ["eps1", "eps2", "wfen1", "wfen2"];

/// Mutable training state: parameters, optimizer moments, iteration count.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub models: Models,
    pub opt: [AdamState; 4],
    pub iteration: u64,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let models = Models::init(cfg.seed)?;
        let opt = models.sets().map(|p| AdamState::new(p, cfg.adam()));
        Ok(Self { models, opt, iteration: 0 })
    }
}

struct SampleGrads {
    grads: Vec<Vec<Tensor>>,
    l_diff: f64,
    l_wfen: f64,
    clamps: usize,
}

fn sample_grads(
    s: &MixtureSample,
    models: &Models,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<SampleGrads> {
    let t = 1 + rng.below(sched.steps() as u64) as usize;
    let e1 = rng.randn(s.source1.shape())?;
    let e2 = rng.randn(s.source2.shape())?;
    let xt1 = forward_sample(&s.source1, t, &e1, sched)?;
    let xt2 = forward_sample(&s.source2, t, &e2, sched)?;

    let mut g = Graph::new();
    let b1 = g.bind(&models.eps1.params);
    let b2 = g.bind(&models.eps2.params);
    let p1 = predict_noise_graph(&mut g, &b1, &models.eps1.config, &xt1, t, &s.mixture)?;
    let p2 = predict_noise_graph(&mut g, &b2, &models.eps2.config, &xt2, t, &s.mixture)?;
    let ev1 = g.constant(e1);
    let ev2 = g.constant(e2);
    let m1 = g.mse(p1, ev1)?;
    let m2 = g.mse(p2, ev2)?;
    let l_diff_v = g.add(m1, m2)?;
    let mut loss = g.scale(l_diff_v, cfg.gamma);

    let (wfen_bound, l_wfen, clamps) = if cfg.wsm_enabled {
        let w1 = g.bind(&models.wfen1.params);
        let w2 = g.bind(&models.wfen2.params);
        let x1 = g.constant(xt1);
        let x2 = g.constant(xt2);
        let o1 = wfen_graph(&mut g, &w1, &models.wfen1.config, x1)?;
        let o2 = wfen_graph(&mut g, &w2, &models.wfen2.config, x2)?;
        let (r1, r2) = if cfg.clean_reference {
            (s.source1.clone(), s.source2.clone())
        } else {
            (s.mixture.clone(), s.mixture.clone())
        };
        let refs = [g.constant(r1), g.constant(r2)];
        let (lw, clamps) = wfen_loss_graph(&mut g, [x1, x2], [o1, o2], refs)?;
        loss = g.add(loss, lw)?;
        (Some((w1, w2)), g.value(lw).item(), clamps)
    } else {
        (None, 2.0, 0)
    };

    let grads = g.backward(loss)?;
    let mut out = vec![grads.collect(&b1), grads.collect(&b2)];
    match wfen_bound {
        Some((w1, w2)) => {
            out.push(grads.collect(&w1));
            out.push(grads.collect(&w2));
        }
        None => {
            for p in [&models.wfen1.params, &models.wfen2.params] {
                out.push(p.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect());
            }
        }
    }
    Ok(SampleGrads { grads: out, l_diff: g.value(l_diff_v).item(), l_wfen, clamps })
}

/// One optimization step on `batch`. Each sample draws its own timestep and
/// noise from `rng.substream(index)`; per-sample gradients are summed in
/// index order, so the result does not depend on the thread count.
pub fn train_step(
    batch: &[&MixtureSample],
    state: &mut TrainState,
    rng: &RngStream,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let models = &state.models;
    let per_sample: Vec<Result<SampleGrads>> =
        par::map_range(batch.len(), |i| sample_grads(batch[i], models, cfg, sched, &mut rng.substream(i as u64)));
    let per_sample: Vec<SampleGrads> = per_sample.into_iter().collect::<Result<_>>()?;

    let n = batch.len() as f64;
    let l_diff = per_sample.iter().map(|s| s.l_diff).sum::<f64>() / n;
    let l_wfen = per_sample.iter().map(|s| s.l_wfen).sum::<f64>() / n;
    let clamps = per_sample.iter().map(|s| s.clamps).sum();
    let it = state.iteration;
    for (term, v) in [("l_diff", l_diff), ("l_wfen", l_wfen)] {
        if !v.is_finite() {
            return Err(Error::Divergence { iteration: it, term: term.into() });
        }
    }
    let l_total = total_loss(l_diff, l_wfen, cfg.gamma)?;

    let active = if cfg.wsm_enabled { 4 } else { 2 };
    let sets = state.models.sets_mut();
    for (k, set) in sets.into_iter().enumerate().take(active) {
        set.zero_grads();
        for s in &per_sample {
            set.add_grads(&s.grads[k], 1.0 / n)?;
        }
        if set.grads().iter().any(|g| !g.all_finite()) {
            return Err(Error::Divergence { iteration: it, term: format!("{} gradient", SET_NAMES[k]) });
        }
    }
    // Update only after every gradient is known to be finite.
    let sets = state.models.sets_mut();
    for (k, set) in sets.into_iter().enumerate().take(active) {
        state.opt[k].step(set)?;
        if !set.all_finite() {
            return Err(Error::Divergence { iteration: it, term: format!("{} parameters", SET_NAMES[k]) });
        }
    }
    state.iteration += 1;
    Ok(LossReport { l_diff, l_wfen, l_total, clamp_activations: clamps })
}

/// Progress notifications from [`train`].
#[derive(Clone, Debug, PartialEq)]
pub enum TrainEvent {
    Step { iteration: u64, report: LossReport },
    Validation { iteration: u64, psnr: f64, improved: bool },
    EarlyStop { iteration: u64 },
}

impl TrainEvent {
    /// One line of the training log.
    pub fn log_line(&self) -> String {
        match self {
            TrainEvent::Step { iteration, report } => format!(
                "iter {iteration} l_diff {:.6} l_wfen {:.6} l_total {:.6} clamps {}",
                report.l_diff, report.l_wfen, report.l_total, report.clamp_activations
            ),
            TrainEvent::Validation { iteration, psnr, improved } => {
                format!("val {iteration} psnr {psnr:.4}{}", if *improved { " best" } else { "" })
            }
            TrainEvent::EarlyStop { iteration } => format!("early-stop {iteration}"),
        }
    }
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best validated state, or the final state when no validation ran.
    pub checkpoint: Checkpoint,
    pub losses: Vec<LossReport>,
    /// `(iteration, mean PSNR)` of each validation round.
    pub validation: Vec<(u64, f64)>,
    pub iterations_run: u64,
    pub stopped_early: bool,
}

/// A training failure with the last state whose parameters were all finite.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub last_finite: Option<Box<Checkpoint>>,
}

impl std::fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for TrainFailure {}

impl From<TrainFailure> for Error {
    fn from(f: TrainFailure) -> Self {
        f.error
    }
}

impl From<Error> for TrainFailure {
    fn from(error: Error) -> Self {
        TrainFailure { error, last_finite: None }
    }
}

/// Mean separation PSNR of `models` over `samples`, sampling sample `j` from
/// `RngStream::new(seed, stream).substream(j)`.
fn score(
    models: &Models,
    samples: &[MixtureSample],
    sched: &NoiseSchedule,
    wsm: &WsmSchedule,
    seed: u64,
    stream: u64,
) -> Result<MetricReport> {
    let root = RngStream::new(seed, stream);
    let results = par::map_range(samples.len(), |j| -> Result<_> {
        let s = &samples[j];
        let (o1, o2) = dual_reverse_sample(&s.mixture, models.dual(), sched, wsm, &root.substream(j as u64))?;
        evaluate_separation((&o1, &o2), (&s.source1, &s.source2))
    });
    let mut report = MetricReport::default();
    for (j, r) in results.into_iter().enumerate() {
        report.push(format!("{j}"), r?);
    }
    Ok(report)
}

/// Validation PSNR of the models stored in a checkpoint, as computed during
/// training.
pub fn validation_psnr(ckpt: &Checkpoint) -> Result<f64> {
    let cfg = &ckpt.config;
    let samples = generate_samples(&cfg.dataset(), Split::Validation, cfg.val_count)?;
    let report = score(&ckpt.models, &samples, &cfg.schedule()?, &cfg.wsm_schedule()?, cfg.seed, STREAM_VALIDATION)?;
    Ok(report.mean_psnr())
}

/// Full training run.
pub fn train(
    cfg: &TrainConfig,
    on_event: &mut dyn FnMut(&TrainEvent),
) -> std::result::Result<TrainOutcome, TrainFailure> {
    cfg.validate()?;
    let sched = cfg.schedule()?;
    let wsm = cfg.wsm_schedule()?;
    let data = generate_split(&cfg.dataset(), Split::Train)?;
    let val = generate_samples(&cfg.dataset(), Split::Validation, cfg.val_count)?;
    let mut state = TrainState::new(cfg)?;

    let n = data.len();
    let bs = cfg.batch_size.min(n);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = usize::MAX;
    let mut epoch = 0u64;

    let mut losses = Vec::new();
    let mut validation = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut stale = 0usize;
    let mut stopped_early = false;

    while state.iteration < cfg.max_iterations {
        if cursor == usize::MAX || cursor + bs > n {
            order = (0..n).collect();
            RngStream::new(cfg.seed, STREAM_SHUFFLE).substream(epoch).shuffle(&mut order);
            epoch += 1;
            cursor = 0;
        }
        let batch: Vec<&MixtureSample> = order[cursor..cursor + bs].iter().map(|&i| &data[i]).collect();
        cursor += bs;
        let rng = RngStream::new(cfg.seed, STREAM_TRAIN).substream(state.iteration);
        let report = match train_step(&batch, &mut state, &rng, cfg, &sched) {
            Ok(r) => r,
            Err(error) => {
                let last = Checkpoint::capture(cfg, &state);
                return Err(TrainFailure { error, last_finite: Some(Box::new(last)) });
            }
        };
        losses.push(report);
        on_event(&TrainEvent::Step { iteration: state.iteration, report });

        if cfg.val_count > 0 && state.iteration % cfg.val_interval == 0 {
            let snapshot = Checkpoint::capture(cfg, &state);
            let psnr = score(&snapshot.models, &val, &sched, &wsm, cfg.seed, STREAM_VALIDATION)?.mean_psnr();
            validation.push((state.iteration, psnr));
            let improved = best.as_ref().is_none_or(|(b, _)| psnr > *b);
            on_event(&TrainEvent::Validation { iteration: state.iteration, psnr, improved });
            if improved {
                best = Some((psnr, snapshot));
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    stopped_early = true;
                    on_event(&TrainEvent::EarlyStop { iteration: state.iteration });
                    break;
                }
            }
        }
    }

    let checkpoint = match best {
        Some((psnr, mut c)) => {
            c.scalars.push(("val.best_psnr".into(), psnr));
            c
        }
        None => Checkpoint::capture(cfg, &state),
    };
    Ok(TrainOutcome { checkpoint, losses, validation, iterations_run: state.iteration, stopped_early })
}

fn quantize(p: &ParamSet) -> ParamSet {
    let mut q = p.clone();
    q.map_params(|_, t| t.map(|v| v as f32 as f64));
    q.zero_grads();
    q
}

const MAGIC: &[u8; 4] = b"DSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A serializable snapshot of a training run. All tensors are rounded to
/// single precision on capture, so a loaded checkpoint equals the captured one.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: u64,
    pub config: TrainConfig,
    pub iteration: u64,
    pub models: Models,
    pub opt: [AdamState; 4],
    /// Named metadata values such as the best validation PSNR.
    pub scalars: Vec<(String, f64)>,
}

impl Checkpoint {
    pub fn capture(cfg: &TrainConfig, state: &TrainState) -> Self {
        let m = &state.models;
        let models = Models {
            eps1: UNetParams { config: m.eps1.config, params: quantize(&m.eps1.params) },
            eps2: UNetParams { config: m.eps2.config, params: quantize(&m.eps2.params) },
            wfen1: WfenParams { config: m.wfen1.config, params: quantize(&m.wfen1.params) },
            wfen2: WfenParams { config: m.wfen2.config, params: quantize(&m.wfen2.params) },
        };
        let q = |v: &Vec<Tensor>| v.iter().map(|t| t.map(|x| x as f32 as f64)).collect();
        let opt = state.opt.clone().map(|mut a| {
            a.m = q(&a.m);
            a.v = q(&a.v);
            a
        });
        Self {
            version: CHECKPOINT_VERSION,
            config_hash: cfg.hash(),
            config: cfg.clone(),
            iteration: state.iteration,
            models,
            opt,
            scalars: Vec::new(),
        }
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.scalars.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    /// Refuse a checkpoint written under a different configuration.
    pub fn check_config(&self, cfg: &TrainConfig, force: bool) -> Result<()> {
        let h = cfg.hash();
        if h != self.config_hash && !force {
            return Err(Error::ConfigMismatch { checkpoint: self.config_hash, config: h });
        }
        Ok(())
    }

    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (k, set) in self.models.sets().into_iter().enumerate() {
            for (name, t) in set.iter() {
                out.push((format!("{}/{name}", SET_NAMES[k]), t));
            }
        }
        for (k, a) in self.opt.iter().enumerate() {
            let names: Vec<&str> = self.models.sets()[k].names().collect();
            for (which, ts) in [("m", &a.m), ("v", &a.v)] {
                for (name, t) in names.iter().zip(ts) {
                    out.push((format!("adam.{}.{which}/{name}", SET_NAMES[k]), t));
                }
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&self.version.to_le_bytes());
        b.extend_from_slice(&self.config_hash.to_le_bytes());
        b.extend_from_slice(&self.iteration.to_le_bytes());
        let text = self.config.to_toml();
        put_str(&mut b, &text);
        let tensors = self.tensors();
        b.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            put_str(&mut b, &name);
            b.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &e in t.shape() {
                b.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in t.data() {
                b.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let counters: Vec<(String, u64)> =
            self.opt.iter().enumerate().map(|(k, a)| (format!("adam.{}.step", SET_NAMES[k]), a.step)).collect();
        b.extend_from_slice(&(counters.len() as u32).to_le_bytes());
        for (name, v) in counters {
            put_str(&mut b, &name);
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&(self.scalars.len() as u32).to_le_bytes());
        for (name, v) in &self.scalars {
            put_str(&mut b, name);
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    /// Parse a checkpoint. The embedded configuration must hash to the stored
    /// hash unless `force` is set.
    pub fn from_bytes(bytes: &[u8], force: bool) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Parse { offset: 0, message: "not a checkpoint file".into() });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Parse { offset: 4, message: format!("unsupported checkpoint version {version}") });
        }
        let config_hash = r.u64()?;
        let iteration = r.u64()?;
        let config = TrainConfig::from_toml(&r.string()?)?;
        if config.hash() != config_hash && !force {
            return Err(Error::ConfigMismatch { checkpoint: config_hash, config: config.hash() });
        }
        let mut state = TrainState::new(&config)?;
        state.iteration = iteration;
        let mut ckpt = Checkpoint::capture(&config, &state);
        ckpt.config_hash = config_hash;

        let count = r.u32()? as usize;
        let mut seen = 0;
        for _ in 0..count {
            let at = r.pos;
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<_>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(4 * len)?;
            let data: Vec<f64> =
                raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
            let slot = ckpt
                .slot_mut(&name)
                .ok_or_else(|| Error::Parse { offset: at, message: format!("unknown tensor {name:?}") })?;
            if slot.shape() != shape.as_slice() {
                return Err(Error::Parse {
                    offset: at,
                    message: format!("tensor {name:?} has shape {shape:?}, expected {:?}", slot.shape()),
                });
            }
            *slot = Tensor::new(&shape, data)?;
            seen += 1;
        }
        if seen != ckpt.tensors().len() {
            return Err(Error::Parse { offset: r.pos, message: "checkpoint is missing tensors".into() });
        }
        let counters = r.u32()?;
        for _ in 0..counters {
            let at = r.pos;
            let name = r.string()?;
            let v = r.u64()?;
            let k = SET_NAMES
                .iter()
                .position(|s| name == format!("adam.{s}.step"))
                .ok_or_else(|| Error::Parse { offset: at, message: format!("unknown counter {name:?}") })?;
            ckpt.opt[k].step = v;
        }
        let scalars = r.u32()?;
        for _ in 0..scalars {
            let name = r.string()?;
            let v = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
            ckpt.scalars.push((name, v));
        }
        if r.pos != bytes.len() {
            return Err(Error::Parse { offset: r.pos, message: "trailing bytes".into() });
        }
        Ok(ckpt)
    }

    fn slot_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let (head, pname) = name.split_once('/')?;
        if let Some(k) = SET_NAMES.iter().position(|s| *s == head) {
            return self.models.sets_mut()[k].get_mut(pname);
        }
        let rest = head.strip_prefix("adam.")?;
        let (set, which) = rest.split_once('.')?;
        let k = SET_NAMES.iter().position(|s| *s == set)?;
        let idx = self.models.sets()[k].index_of(pname)?;
        match which {
            "m" => self.opt[k].m.get_mut(idx),
            "v" => self.opt[k].v.get_mut(idx),
            _ => None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path, force: bool) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, force)
    }
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    b.extend_from_slice(&(s.len() as u32).to_le_bytes());
    b.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos,
                message: format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let at = self.pos;
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Parse { offset: at, message: "string is not UTF-8".into() })
    }
}

/// Ablation configurations: where suppression is applied during sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationConfig {
    /// No suppression.
    I,
    /// At `t = alpha` only.
    II,
    /// On the final output only.
    III,
    /// Both.
    IV,
}

impl AblationConfig {
    pub const ALL: [AblationConfig; 4] =
        [AblationConfig::I, AblationConfig::II, AblationConfig::III, AblationConfig::IV];

    pub fn label(self) -> &'static str {
        match self {
            AblationConfig::I => "I",
            AblationConfig::II => "II",
            AblationConfig::III => "III",
            AblationConfig::IV => "IV",
        }
    }

    pub fn at_alpha(self) -> bool {
        matches!(self, AblationConfig::II | AblationConfig::IV)
    }

    pub fn at_output(self) -> bool {
        matches!(self, AblationConfig::III | AblationConfig::IV)
    }

    pub fn schedule(self, alpha_index: u32, steps: usize) -> Result<WsmSchedule> {
        WsmSchedule::new(alpha_index, steps, self.at_alpha(), self.at_output())
    }
}

/// Metrics of all four ablation configurations on the same samples.
#[derive(Clone, Debug, Default)]
pub struct AblationEval {
    pub reports: [MetricReport; 4],
    pub baseline_psnr: f64,
}

/// Score the four configurations on `samples`. Configurations that differ
/// only in the output suppression share their sampling trajectory, and all
/// four start from the same noise.
pub fn evaluate_ablation(
    models: &Models,
    samples: &[MixtureSample],
    sched: &NoiseSchedule,
    alpha_index: u32,
    seed: u64,
) -> Result<AblationEval> {
    let alpha = WsmSchedule::new(alpha_index, sched.steps(), true, false)?.insertion_timesteps();
    let root = RngStream::new(seed, STREAM_EVAL);
    let per = par::map_range(samples.len(), |j| -> Result<[_; 4]> {
        let s = &samples[j];
        let stream = root.substream(j as u64);
        let run = |insert: &[usize]| -> Result<(_, _)> {
            let (mut r1, mut r2) = branch_streams(&stream);
            let mut tr = SampleTrace::default();
            let raw =
                dual_reverse_chain(models.dual(), &s.mixture, &s.mixture, sched, insert, &mut r1, &mut r2, &mut tr)?;
            let plain = finish_dual(&raw, models.dual(), false, &mut tr)?;
            let fin = finish_dual(&raw, models.dual(), true, &mut tr)?;
            Ok((plain, fin))
        };
        let (i, iii) = run(&[])?;
        let (ii, iv) = run(&alpha)?;
        let src = (&s.source1, &s.source2);
        Ok([
            evaluate_separation((&i.0, &i.1), src)?,
            evaluate_separation((&ii.0, &ii.1), src)?,
            evaluate_separation((&iii.0, &iii.1), src)?,
            evaluate_separation((&iv.0, &iv.1), src)?,
        ])
    });
    let mut out = AblationEval::default();
    for (j, r) in per.into_iter().enumerate() {
        for (k, m) in r?.into_iter().enumerate() {
            out.reports[k].push(format!("{j}"), m);
        }
    }
    out.baseline_psnr = mean(
        samples
            .iter()
            .map(|s| mixture_baseline(&s.mixture, (&s.source1, &s.source2)))
            .collect::<Result<Vec<_>>>()?
            .into_iter(),
    );
    Ok(out)
}

/// Test samples scored by evaluation runs.
pub fn eval_samples(cfg: &TrainConfig) -> Result<Vec<MixtureSample>> {
    let n = if cfg.eval_count == 0 { cfg.test_count } else { cfg.eval_count.min(cfg.test_count) };
    generate_samples(&cfg.dataset(), Split::Test, n)
}

/// Score trained models on the test split under one sampling schedule.
pub fn evaluate_models(models: &Models, cfg: &TrainConfig, wsm: &WsmSchedule) -> Result<MetricReport> {
    score(models, &eval_samples(cfg)?, &cfg.schedule()?, wsm, cfg.seed, STREAM_EVAL)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub config: AblationConfig,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
}

impl AblationRow {
    pub fn mean_psnr(&self) -> f64 {
        mean(self.psnr.iter().copied())
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.ssim.iter().copied())
    }
}

/// The ablation table over several seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub alpha_index: u32,
    pub rows: Vec<AblationRow>,
    /// Mixture-vs-source PSNR per seed.
    pub baseline: Vec<f64>,
}

impl AblationTable {
    pub fn row(&self, c: AblationConfig) -> &AblationRow {
        self.rows.iter().find(|r| r.config == c).expect("all four rows present")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(s, "seeds: {}", seeds.join(", "));
        let _ = writeln!(s, "{:<6} {:<12} {:<12} {:>10} {:>8}", "config", "WSM@alpha", "WSM@output", "PSNR", "SSIM");
        for r in &self.rows {
            let mark = |b: bool| if b { "yes" } else { "no" };
            let alpha = if r.config.at_alpha() { format!("yes (a={})", self.alpha_index) } else { "no".into() };
            let _ = writeln!(
                s,
                "{:<6} {:<12} {:<12} {:>10.4} {:>8.4}",
                r.config.label(),
                alpha,
                mark(r.config.at_output()),
                r.mean_psnr(),
                r.mean_ssim()
            );
        }
        let _ = writeln!(s, "mixture baseline PSNR {:.4}", mean(self.baseline.iter().copied()));
        s
    }

    /// `config,seed,psnr,ssim` rows, one per configuration and seed.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("config,seed,psnr,ssim\n");
        for r in &self.rows {
            for (k, seed) in self.seeds.iter().enumerate() {
                let _ = writeln!(s, "{},{seed},{:.6},{:.6}", r.config.label(), r.psnr[k], r.ssim[k]);
            }
        }
        s
    }
}

/// Models and test scores of one seed.
pub struct SeedRun {
    pub seed: u64,
    pub outcome: TrainOutcome,
    pub ablation: AblationEval,
}

/// Train once per seed and score the four configurations. Denoiser training
/// does not depend on where suppression is applied, so one run serves all
/// four rows.
pub fn run_ablation(
    cfg: &TrainConfig,
    seeds: &[u64],
    on_event: &mut dyn FnMut(u64, &TrainEvent),
) -> Result<(AblationTable, Vec<SeedRun>)> {
    let mut runs = Vec::new();
    for &seed in seeds {
        let c = TrainConfig { seed, wsm_enabled: true, ..cfg.clone() };
        let outcome = train(&c, &mut |e| on_event(seed, e))?;
        let samples = eval_samples(&c)?;
        let ablation = evaluate_ablation(&outcome.checkpoint.models, &samples, &c.schedule()?, c.alpha_index, seed)?;
        runs.push(SeedRun { seed, outcome, ablation });
    }
    let rows = AblationConfig::ALL
        .iter()
        .enumerate()
        .map(|(k, &config)| AblationRow {
            config,
            psnr: runs.iter().map(|r| r.ablation.reports[k].mean_psnr()).collect(),
            ssim: runs.iter().map(|r| r.ablation.reports[k].mean_ssim()).collect(),
        })
        .collect();
    let table = AblationTable {
        seeds: seeds.to_vec(),
        alpha_index: cfg.alpha_index,
        rows,
        baseline: runs.iter().map(|r| r.ablation.baseline_psnr).collect(),
    };
    Ok((table, runs))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
}

/// Per-value scores of a one-parameter sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepCurve {
    pub parameter: String,
    pub seeds: Vec<u64>,
    pub points: Vec<SweepPoint>,
}

impl SweepCurve {
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<12} {:>10} {:>8}\n", self.parameter, "PSNR", "SSIM");
        for p in &self.points {
            let _ = writeln!(
                s,
                "{:<12} {:>10.4} {:>8.4}",
                p.value,
                mean(p.psnr.iter().copied()),
                mean(p.ssim.iter().copied())
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{},seed,psnr,ssim\n", self.parameter);
        for p in &self.points {
            for (k, seed) in self.seeds.iter().enumerate() {
                let _ = writeln!(s, "{},{seed},{:.6},{:.6}", p.value, p.psnr[k], p.ssim[k]);
            }
        }
        s
    }
}

/// Retrain for every `gamma` and score with the configured sampler.
pub fn gamma_sweep(
    cfg: &TrainConfig,
    gammas: &[f64],
    seeds: &[u64],
    on_event: &mut dyn FnMut(u64, &TrainEvent),
) -> Result<SweepCurve> {
    let mut points = Vec::new();
    for &gamma in gammas {
        let mut p = SweepPoint { value: gamma, psnr: Vec::new(), ssim: Vec::new() };
        for &seed in seeds {
            let c = TrainConfig { gamma, seed, ..cfg.clone() };
            let out = train(&c, &mut |e| on_event(seed, e))?;
            let r = evaluate_models(&out.checkpoint.models, &c, &c.wsm_schedule()?)?;
            p.psnr.push(r.mean_psnr());
            p.ssim.push(r.mean_ssim());
        }
        points.push(p);
    }
    Ok(SweepCurve { parameter: "gamma".into(), seeds: seeds.to_vec(), points })
}

/// Train once per seed, then score the full-suppression sampler at every
/// insertion index. Training does not depend on the insertion point.
pub fn alpha_sweep(
    cfg: &TrainConfig,
    alphas: &[u32],
    seeds: &[u64],
    on_event: &mut dyn FnMut(u64, &TrainEvent),
) -> Result<SweepCurve> {
    let mut points: Vec<SweepPoint> =
        alphas.iter().map(|&a| SweepPoint { value: a as f64, psnr: Vec::new(), ssim: Vec::new() }).collect();
    for &seed in seeds {
        let c = TrainConfig { seed, wsm_enabled: true, ..cfg.clone() };
        let out = train(&c, &mut |e| on_event(seed, e))?;
        for (p, &a) in points.iter_mut().zip(alphas) {
            let r = evaluate_models(&out.checkpoint.models, &c, &WsmSchedule::new(a, c.steps, true, true)?)?;
            p.psnr.push(r.mean_psnr());
            p.ssim.push(r.mean_ssim());
        }
    }
    Ok(SweepCurve { parameter: "alpha_index".into(), seeds: seeds.to_vec(), points })
}
