use dualsep::denoiser::{UNetConfig, UNetParams};
use dualsep::diffusion::NoiseSchedule;
use dualsep::rng::RngStream;
use dualsep::suppression::{
    apply_suppression, branch_streams, dual_reverse_chain, dual_reverse_sample, dual_reverse_sample_traced,
    finish_dual, reverse_sample_raw, wfen_forward, DualModels, DualState, SampleTrace, WfenConfig, WfenParams,
    WsmSchedule,
};
use dualsep::wavelet::{dwt2, idwt2, WaveletSubbands};
use dualsep::{Error, Tensor};

fn randn(shape: &[usize], seed: u64) -> Tensor {
    RngStream::new(seed, 17).randn(shape).unwrap()
}

fn set(p: &mut WfenParams, name: &str, t: Tensor) {
    *p.params.get_mut(name).unwrap() = t;
}

/// Each pixel replaced by the mean of its 2x2 block, computed directly.
fn block_mean(x: &Tensor) -> Tensor {
    let (c, h, w) = x.chw().unwrap();
    let d = x.data();
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, r, col) = (i / (h * w), (i / w) % h, i % w);
        let (r0, c0) = (r & !1, col & !1);
        let at = |a: usize, b: usize| d[ch * h * w + a * w + b];
        (at(r0, c0) + at(r0, c0 + 1) + at(r0 + 1, c0) + at(r0 + 1, c0 + 1)) / 4.0
    })
}

#[test]
fn zero_weights_give_half_the_approximation() {
    let cfg = WfenConfig::new(3);
    let mut p = WfenParams::zeros(cfg).unwrap();
    set(&mut p, "out_gain", Tensor::full(&[3], 1.0));
    let x = randn(&[3, 32, 32], 1);
    let out = wfen_forward(&p, &x).unwrap();

    // composed from the transform modules
    let s = dwt2(&x).unwrap();
    let z = Tensor::zeros(s.ll.shape());
    let composed = idwt2(&WaveletSubbands { ll: s.ll.scale(0.5), lh: z.clone(), hl: z.clone(), hh: z }).unwrap();
    assert!(out.max_abs_diff(&composed).unwrap() < 1e-12);
    // and from block averages, with no transform at all
    assert!(out.max_abs_diff(&block_mean(&x).scale(0.5)).unwrap() < 1e-12);
}

#[test]
fn zero_input_gives_zero_output() {
    let cfg = WfenConfig::new(3);
    let mut p = WfenParams::init(cfg, &mut RngStream::new(4, 0)).unwrap();
    set(&mut p, "out_gain", Tensor::full(&[3], 0.7));
    let out = wfen_forward(&p, &Tensor::zeros(&[3, 16, 16])).unwrap();
    assert_eq!(out.shape(), &[3, 16, 16]);
    assert_eq!(out.max_abs(), 0.0);
    let x = randn(&[3, 32, 32], 5);
    assert_eq!(wfen_forward(&p, &x).unwrap().shape(), x.shape());
}

#[test]
fn size_violations_are_shape_errors() {
    let p = WfenParams::zeros(WfenConfig::new(3)).unwrap();
    for shape in [[3, 6, 8], [3, 4, 4], [3, 12, 16], [2, 8, 8]] {
        let err = wfen_forward(&p, &Tensor::zeros(&shape)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)), "{shape:?}: {err}");
    }
}

/// A single-channel WFEN whose output is `gain * sigmoid(bias) * blockmean(x)`.
fn gated_block_mean(bias: f64, gain: f64) -> WfenParams {
    let mut p = WfenParams::zeros(WfenConfig::new(1)).unwrap();
    let n = p.params.get("wfca.fc2.b").unwrap().shape().to_vec();
    set(&mut p, "wfca.fc2.b", Tensor::full(&n, bias));
    set(&mut p, "out_gain", Tensor::full(&[1], gain));
    p
}

#[test]
fn handcrafted_subtraction() {
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let (p1, p2) = (gated_block_mean(0.8, 1.5), gated_block_mean(-1.2, 0.4));
    let x1 = randn(&[1, 8, 8], 6);
    let x2 = randn(&[1, 8, 8], 7);
    let cond = Tensor::zeros(&[1, 8, 8]);
    let state = DualState::new(x1.clone(), x2.clone(), 9, cond.clone(), cond).unwrap();
    let next = apply_suppression(&state, &p1, &p2).unwrap();
    let (bm1, bm2) = (block_mean(&x1), block_mean(&x2));
    for i in 0..64 {
        let want1 = x1.data()[i] - 0.4 * sig(-1.2) * bm2.data()[i];
        let want2 = x2.data()[i] - 1.5 * sig(0.8) * bm1.data()[i];
        assert!((next.x1.data()[i] - want1).abs() < 1e-12);
        assert!((next.x2.data()[i] - want2).abs() < 1e-12);
    }
    assert_eq!(next.t, 9);
    // no hidden state: the same input gives the same update
    assert_eq!(apply_suppression(&state, &p1, &p2).unwrap(), next);
}

#[test]
fn suppression_swaps_with_labels() {
    let mut p1 = WfenParams::init(WfenConfig::new(3), &mut RngStream::new(8, 0)).unwrap();
    let mut p2 = WfenParams::init(WfenConfig::new(3), &mut RngStream::new(9, 0)).unwrap();
    set(&mut p1, "out_gain", Tensor::full(&[3], 0.3));
    set(&mut p2, "out_gain", Tensor::full(&[3], -0.2));
    let (x1, x2, c) = (randn(&[3, 16, 16], 10), randn(&[3, 16, 16], 11), randn(&[3, 16, 16], 12));
    let a =
        apply_suppression(&DualState::new(x1.clone(), x2.clone(), 3, c.clone(), c.clone()).unwrap(), &p1, &p2).unwrap();
    let b = apply_suppression(&DualState::new(x2, x1, 3, c.clone(), c).unwrap(), &p2, &p1).unwrap();
    assert_eq!(a.x1, b.x2);
    assert_eq!(a.x2, b.x1);
}

struct Nets {
    eps1: UNetParams,
    eps2: UNetParams,
    w1: WfenParams,
    w2: WfenParams,
}

impl Nets {
    fn new(seed: u64, gain: f64) -> Self {
        let ucfg = UNetConfig::denoiser(3);
        let wcfg = WfenConfig::new(3);
        let mut w1 = WfenParams::init(wcfg, &mut RngStream::new(seed, 3)).unwrap();
        let mut w2 = WfenParams::init(wcfg, &mut RngStream::new(seed, 4)).unwrap();
        set(&mut w1, "out_gain", Tensor::full(&[3], gain));
        set(&mut w2, "out_gain", Tensor::full(&[3], gain));
        // scaled-down random denoisers keep the short chains bounded
        let mut eps1 = UNetParams::init(ucfg, &mut RngStream::new(seed, 1)).unwrap();
        let mut eps2 = UNetParams::init(ucfg, &mut RngStream::new(seed, 2)).unwrap();
        for e in [&mut eps1, &mut eps2] {
            let w = e.params.get_mut("out.w").unwrap();
            *w = w.scale(0.1);
        }
        Self { eps1, eps2, w1, w2 }
    }

    fn models(&self) -> DualModels<'_> {
        DualModels { eps1: &self.eps1, eps2: &self.eps2, wfen1: &self.w1, wfen2: &self.w2 }
    }

    fn swapped(&self) -> DualModels<'_> {
        DualModels { eps1: &self.eps2, eps2: &self.eps1, wfen1: &self.w2, wfen2: &self.w1 }
    }
}

#[test]
fn disabled_schedule_equals_two_plain_samplers() {
    let nets = Nets::new(20, 0.5);
    let s = NoiseSchedule::linear(12, 1e-4, 0.02).unwrap();
    let mix = randn(&[3, 8, 8], 21).clamp(-1.0, 1.0);
    let rng = RngStream::new(22, 6);
    let (o1, o2) = dual_reverse_sample(&mix, nets.models(), &s, &WsmSchedule::disabled(12), &rng).unwrap();
    let (mut r1, mut r2) = branch_streams(&rng);
    let a = reverse_sample_raw(&nets.eps1, &mix, &s, &mut r1).unwrap().clamp(-1.0, 1.0);
    let b = reverse_sample_raw(&nets.eps2, &mix, &s, &mut r2).unwrap().clamp(-1.0, 1.0);
    assert_eq!(o1, a);
    assert_eq!(o2, b);
}

#[test]
fn zero_gain_suppression_changes_nothing() {
    let nets = Nets::new(23, 0.0);
    let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
    let mix = randn(&[3, 8, 8], 24).clamp(-1.0, 1.0);
    let rng = RngStream::new(25, 6);
    let off = dual_reverse_sample(&mix, nets.models(), &s, &WsmSchedule::disabled(10), &rng).unwrap();
    let on = dual_reverse_sample(&mix, nets.models(), &s, &WsmSchedule::new(5, 10, true, true).unwrap(), &rng).unwrap();
    assert_eq!(off, on);
}

#[test]
fn full_schedule_suppresses_twice() {
    let nets = Nets::new(26, 0.2);
    let s = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
    let w = WsmSchedule::new(5, 200, true, true).unwrap();
    assert_eq!(w.insertion_timesteps(), vec![100]);
    let mix = randn(&[3, 8, 8], 27).clamp(-1.0, 1.0);
    let (a, b, trace) = dual_reverse_sample_traced(&mix, &mix, nets.models(), &s, &w, &RngStream::new(28, 6)).unwrap();
    assert_eq!(trace.suppressions, 2);
    assert!(a.data().iter().chain(b.data()).all(|v| (-1.0..=1.0).contains(v)));

    for (intermediate, fin, count) in [(false, false, 0), (true, false, 1), (false, true, 1)] {
        let w = WsmSchedule::new(5, 200, intermediate, fin).unwrap();
        let (_, _, t) = dual_reverse_sample_traced(&mix, &mix, nets.models(), &s, &w, &RngStream::new(28, 6)).unwrap();
        assert_eq!(t.suppressions, count);
    }
}

#[test]
fn sampler_is_label_equivariant() {
    let nets = Nets::new(29, 0.4);
    let s = NoiseSchedule::linear(16, 1e-4, 0.02).unwrap();
    let (c1, c2) = (randn(&[3, 8, 8], 30).clamp(-1.0, 1.0), randn(&[3, 8, 8], 31).clamp(-1.0, 1.0));
    let root = RngStream::new(32, 6);
    let (ra, rb) = branch_streams(&root);
    let insert = [8];

    let mut tr = SampleTrace::default();
    let fwd =
        dual_reverse_chain(nets.models(), &c1, &c2, &s, &insert, &mut ra.clone(), &mut rb.clone(), &mut tr).unwrap();
    let fwd = finish_dual(&fwd, nets.models(), true, &mut tr).unwrap();
    let rev =
        dual_reverse_chain(nets.swapped(), &c2, &c1, &s, &insert, &mut rb.clone(), &mut ra.clone(), &mut tr).unwrap();
    let rev = finish_dual(&rev, nets.swapped(), true, &mut tr).unwrap();
    assert_eq!(fwd.0, rev.1);
    assert_eq!(fwd.1, rev.0);
    assert_eq!(tr.suppressions, 4);
}

#[test]
fn schedule_steps_must_match() {
    let nets = Nets::new(33, 0.0);
    let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
    let mix = Tensor::zeros(&[3, 8, 8]);
    let w = WsmSchedule::new(5, 20, true, true).unwrap();
    assert!(dual_reverse_sample(&mix, nets.models(), &s, &w, &RngStream::new(0, 6)).is_err());
}
