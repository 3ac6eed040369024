//! PSNR, SSIM and permutation-aware scoring of separated image pairs.
//!
//! The CSV report has the header
//! `id,psnr1,psnr2,ssim1,ssim2,assignment` followed by one row per sample
//! and a final `mean` row. `psnr_k`/`ssim_k` score the output matched to
//! source `k`; `assignment` is `identity` or `swapped`.

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// PSNR reported for (near-)identical images.
pub const PSNR_CAP: f64 = 100.0;
/// Dynamic range of images in `[-1, 1]`.
pub const DEFAULT_RANGE: f64 = 2.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn same(x: &Tensor, y: &Tensor) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(invalid(format!("metric inputs differ in shape: {:?} vs {:?}", x.shape(), y.shape())));
    }
    Ok(())
}

/// `10 log10(max_val^2 / mse)`, capped at 100 dB.
pub fn psnr(x: &Tensor, y: &Tensor, max_val: f64) -> Result<f64> {
    same(x, y)?;
    if !(max_val > 0.0) {
        return Err(invalid(format!("max_val must be positive, got {max_val}")));
    }
    let mse = x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    if mse < 1e-12 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP))
}

/// Channel mean of a `[C, H, W]` image.
fn grayscale(x: &Tensor) -> Result<(Vec<f64>, usize, usize)> {
    let (c, h, w) = x.chw()?;
    let plane = h * w;
    let mut g = vec![0.0; plane];
    for ch in 0..c {
        for (o, v) in g.iter_mut().zip(&x.data()[ch * plane..(ch + 1) * plane]) {
            *o += v;
        }
    }
    g.iter_mut().for_each(|v| *v /= c as f64);
    Ok((g, h, w))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g1: Vec<f64> =
        (0..SSIM_WINDOW).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g1.iter().sum();
    let g1: Vec<f64> = g1.iter().map(|v| v / s).collect();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g1 {
        for b in &g1 {
            w.push(a * b);
        }
    }
    w
}

/// Valid-mode weighted local mean of `img` under `win`.
fn filter(img: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let k = SSIM_WINDOW;
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for dy in 0..k {
                let row = &img[(y + dy) * w + x..(y + dy) * w + x + k];
                for (v, c) in row.iter().zip(&win[dy * k..(dy + 1) * k]) {
                    acc += v * c;
                }
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Mean structural similarity on grayscale (channel-mean) images with
/// dynamic range 2.
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    ssim_with_range(x, y, DEFAULT_RANGE)
}

/// [`ssim`] with an explicit dynamic range.
pub fn ssim_with_range(x: &Tensor, y: &Tensor, range: f64) -> Result<f64> {
    same(x, y)?;
    let (gx, h, w) = grayscale(x)?;
    let (gy, _, _) = grayscale(y)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(invalid(format!("SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let win = gaussian_window();
    let c1 = (K1 * range).powi(2);
    let c2 = (K2 * range).powi(2);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = filter(&gx, h, w, &win);
    let my = filter(&gy, h, w, &win);
    let sxx = filter(&prod(&gx, &gx), h, w, &win);
    let syy = filter(&prod(&gy, &gy), h, w, &win);
    let sxy = filter(&prod(&gx, &gy), h, w, &win);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cxy = sxy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

/// Scores of one separated pair under the better output-to-source assignment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeparationMetrics {
    /// PSNR of the output matched to source 1 and to source 2.
    pub psnr: [f64; 2],
    pub ssim: [f64; 2],
    /// Output 2 was matched to source 1.
    pub swapped: bool,
}

impl SeparationMetrics {
    pub fn mean_psnr(&self) -> f64 {
        0.5 * (self.psnr[0] + self.psnr[1])
    }

    pub fn mean_ssim(&self) -> f64 {
        0.5 * (self.ssim[0] + self.ssim[1])
    }
}

/// Score `outputs` against `sources`, choosing the assignment with the higher
/// mean PSNR; ties keep the identity assignment.
pub fn evaluate_separation(outputs: (&Tensor, &Tensor), sources: (&Tensor, &Tensor)) -> Result<SeparationMetrics> {
    let (o1, o2) = outputs;
    let (s1, s2) = sources;
    let id = [psnr(o1, s1, DEFAULT_RANGE)?, psnr(o2, s2, DEFAULT_RANGE)?];
    let sw = [psnr(o2, s1, DEFAULT_RANGE)?, psnr(o1, s2, DEFAULT_RANGE)?];
    if sw[0] + sw[1] > id[0] + id[1] {
        Ok(SeparationMetrics { psnr: sw, ssim: [ssim(o2, s1)?, ssim(o1, s2)?], swapped: true })
    } else {
        Ok(SeparationMetrics { psnr: id, ssim: [ssim(o1, s1)?, ssim(o2, s2)?], swapped: false })
    }
}

/// Per-sample metrics with their means.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub ids: Vec<String>,
    pub samples: Vec<SeparationMetrics>,
}

impl MetricReport {
    pub fn push(&mut self, id: impl Into<String>, m: SeparationMetrics) {
        self.ids.push(id.into());
        self.samples.push(m);
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean over samples of the per-sample two-source mean PSNR.
    pub fn mean_psnr(&self) -> f64 {
        mean(self.samples.iter().map(SeparationMetrics::mean_psnr))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.samples.iter().map(SeparationMetrics::mean_ssim))
    }

    fn channel_means(&self) -> ([f64; 2], [f64; 2]) {
        let p = [0, 1].map(|k| mean(self.samples.iter().map(|s| s.psnr[k])));
        let q = [0, 1].map(|k| mean(self.samples.iter().map(|s| s.ssim[k])));
        (p, q)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,psnr1,psnr2,ssim1,ssim2,assignment\n");
        for (id, m) in self.ids.iter().zip(&self.samples) {
            s.push_str(&format!(
                "{id},{:.6},{:.6},{:.6},{:.6},{}\n",
                m.psnr[0],
                m.psnr[1],
                m.ssim[0],
                m.ssim[1],
                if m.swapped { "swapped" } else { "identity" }
            ));
        }
        let (p, q) = self.channel_means();
        s.push_str(&format!("mean,{:.6},{:.6},{:.6},{:.6},\n", p[0], p[1], q[0], q[1]));
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<16} {:>10} {:>10} {:>8} {:>8}  assignment\n", "id", "PSNR1", "PSNR2", "SSIM1", "SSIM2");
        for (id, m) in self.ids.iter().zip(&self.samples) {
            s.push_str(&format!(
                "{id:<16} {:>10.4} {:>10.4} {:>8.4} {:>8.4}  {}\n",
                m.psnr[0],
                m.psnr[1],
                m.ssim[0],
                m.ssim[1],
                if m.swapped { "swapped" } else { "identity" }
            ));
        }
        let (p, q) = self.channel_means();
        s.push_str(&format!("{:<16} {:>10.4} {:>10.4} {:>8.4} {:>8.4}\n", "mean", p[0], p[1], q[0], q[1]));
        s.push_str(&format!("overall PSNR {:.4} dB, SSIM {:.4}\n", self.mean_psnr(), self.mean_ssim()));
        s
    }
}

pub(crate) fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// PSNR of the unseparated mixture against each source, averaged; the
/// reference a separator has to beat.
pub fn mixture_baseline(mixture: &Tensor, sources: (&Tensor, &Tensor)) -> Result<f64> {
    Ok(0.5 * (psnr(mixture, sources.0, DEFAULT_RANGE)? + psnr(mixture, sources.1, DEFAULT_RANGE)?))
}
