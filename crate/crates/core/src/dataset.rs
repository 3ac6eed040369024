//! Synthetic two-source corpora, PPM image I/O and the corpus manifest.
//!
//! Three toy families are provided:
//!
//! * `stripes-blobs`: oriented sinusoidal stripes and Gaussian blobs on a dark
//!   background, mixed linearly with a random coefficient.
//! * `rain-toy`: a smooth blob background with a layer of thin diagonal
//!   streaks composited through a binary mask with transparency `tau`.
//! * `snow-toy`: a smooth gradient background with a layer of bright dots,
//!   composited the same way.
//!
//! All images are `[3, H, W]` with values in `[-1, 1]`.
//!
//! The manifest has one line per sample with six tab-separated columns:
//! `id  source1  source2  mixture  kind  coefficient`. Paths are relative to
//! the manifest's directory; `kind` is `linear` or `mask`, and `coefficient`
//! is the blend weight `a` or the transparency `tau`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::par;
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    StripesBlobs,
    RainToy,
    SnowToy,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::StripesBlobs => "stripes-blobs",
            DatasetKind::RainToy => "rain-toy",
            DatasetKind::SnowToy => "snow-toy",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stripes-blobs" => Ok(DatasetKind::StripesBlobs),
            "rain-toy" => Ok(DatasetKind::RainToy),
            "snow-toy" => Ok(DatasetKind::SnowToy),
            other => Err(invalid(format!("unknown dataset kind {other:?}"))),
        }
    }
}

/// Everything needed to regenerate a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub train: usize,
    pub test: usize,
    /// Square image side.
    pub size: usize,
    pub seed: u64,
    /// Range of the linear blend coefficient.
    pub mix_low: f64,
    pub mix_high: f64,
    /// Mask transparency for the rain and snow families.
    pub tau: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::StripesBlobs,
            train: 500,
            test: 50,
            size: 32,
            seed: 0,
            mix_low: 0.3,
            mix_high: 0.7,
            tau: 1.0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 || !self.size.is_power_of_two() {
            return Err(invalid(format!("image size must be a power of two of at least 8, got {}", self.size)));
        }
        if !(0.0 <= self.mix_low && self.mix_low <= self.mix_high && self.mix_high <= 1.0) {
            return Err(invalid(format!(
                "need 0 <= mix_low <= mix_high <= 1, got {} and {}",
                self.mix_low, self.mix_high
            )));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(invalid(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        Ok(())
    }

    pub fn shape(&self) -> [usize; 3] {
        [CHANNELS, self.size, self.size]
    }

    /// Parse the flat `key = value` text form.
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec is always serializable")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    /// Held-out mixtures used for early stopping; never written to disk.
    Validation,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e00,
            Split::Test => 0x7465_7374_0000,
            Split::Validation => 0x7661_6c00_0000,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Validation => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MixDescriptor {
    Linear { a: f64 },
    Mask { mask: Tensor, tau: f64 },
}

impl MixDescriptor {
    pub fn kind(&self) -> &'static str {
        match self {
            MixDescriptor::Linear { .. } => "linear",
            MixDescriptor::Mask { .. } => "mask",
        }
    }

    pub fn coefficient(&self) -> f64 {
        match self {
            MixDescriptor::Linear { a } => *a,
            MixDescriptor::Mask { tau, .. } => *tau,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSample {
    pub source1: Tensor,
    pub source2: Tensor,
    pub mixture: Tensor,
    pub mix: MixDescriptor,
}

/// `a * s1 + (1 - a) * s2`.
pub fn mix_linear(s1: &Tensor, s2: &Tensor, a: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&a) {
        return Err(invalid(format!("blend coefficient {a} outside [0, 1]")));
    }
    s1.zip_map(s2, |x, y| a * x + (1.0 - a) * y)
        .map_err(|_| invalid(format!("source shapes {:?} and {:?} differ", s1.shape(), s2.shape())))
}

/// `(1 - tau m) * background + tau m * overlay` with a binary mask `m`.
pub fn mix_mask(background: &Tensor, overlay: &Tensor, mask: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(invalid(format!("tau {tau} outside (0, 1]")));
    }
    if background.shape() != overlay.shape() || background.shape() != mask.shape() {
        return Err(invalid("background, overlay and mask must share a shape"));
    }
    if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(invalid("mask must contain only 0 and 1"));
    }
    let data = background
        .data()
        .iter()
        .zip(overlay.data())
        .zip(mask.data())
        .map(|((&b, &o), &m)| (1.0 - tau * m) * b + tau * m * o)
        .collect();
    Tensor::new(background.shape(), data)
}

struct Layers {
    s1: Tensor,
    s2: Tensor,
    mask: Option<Tensor>,
}

/// Oriented stripes; returns the image and the orientation in `[0, pi)`.
fn stripes(rng: &mut RngStream, n: usize) -> (Tensor, f64) {
    let theta = rng.uniform_range(0.0, std::f64::consts::PI);
    let freq = rng.uniform_range(1.5, 4.0);
    let phase = rng.uniform_range(0.0, std::f64::consts::TAU);
    let amp: Vec<f64> = (0..CHANNELS).map(|_| rng.uniform_range(0.6, 0.9)).collect();
    let (c, s) = (theta.cos(), theta.sin());
    let k = std::f64::consts::TAU * freq / n as f64;
    let img = Tensor::from_fn(&[CHANNELS, n, n], |i| {
        let ch = i / (n * n);
        let (y, x) = ((i / n) % n, i % n);
        amp[ch] * (k * (x as f64 * c + y as f64 * s) + phase).sin()
    });
    (img, theta)
}

fn blobs(rng: &mut RngStream, n: usize, background: f64) -> Tensor {
    let count = 2 + rng.below(3) as usize;
    let nf = n as f64;
    let specs: Vec<(f64, f64, f64, [f64; CHANNELS])> = (0..count)
        .map(|_| {
            let cy = rng.uniform_range(0.15, 0.85) * nf;
            let cx = rng.uniform_range(0.15, 0.85) * nf;
            let sigma = rng.uniform_range(0.1, 0.2) * nf;
            let amp = [0; CHANNELS].map(|_| rng.uniform_range(0.6, 1.4));
            (cy, cx, sigma, amp)
        })
        .collect();
    Tensor::from_fn(&[CHANNELS, n, n], |i| {
        let ch = i / (n * n);
        let (y, x) = (((i / n) % n) as f64, (i % n) as f64);
        let v = specs.iter().fold(background, |acc, (cy, cx, sg, amp)| {
            let r2 = (y - cy).powi(2) + (x - cx).powi(2);
            acc + amp[ch] * (-r2 / (2.0 * sg * sg)).exp()
        });
        v.clamp(-1.0, 1.0)
    })
}

fn gradient(rng: &mut RngStream, n: usize) -> Tensor {
    let base = [0; CHANNELS].map(|_| rng.uniform_range(-0.7, 0.1));
    let slope = [0; CHANNELS].map(|_| rng.uniform_range(-0.4, 0.4));
    let theta = rng.uniform_range(0.0, std::f64::consts::TAU);
    let (c, s) = (theta.cos(), theta.sin());
    Tensor::from_fn(&[CHANNELS, n, n], |i| {
        let ch = i / (n * n);
        let (y, x) = (((i / n) % n) as f64 / n as f64 - 0.5, ((i % n) as f64) / n as f64 - 0.5);
        (base[ch] + slope[ch] * (x * c + y * s)).clamp(-1.0, 1.0)
    })
}

/// Replicate a per-pixel mask over the channels.
fn mask_image(pixels: &[bool], n: usize) -> Tensor {
    Tensor::from_fn(&[CHANNELS, n, n], |i| if pixels[i % (n * n)] { 1.0 } else { 0.0 })
}

/// Overlay layer: `value` where masked, `-1` elsewhere.
fn layer(pixels: &[bool], n: usize, value: [f64; CHANNELS]) -> Tensor {
    Tensor::from_fn(&[CHANNELS, n, n], |i| if pixels[i % (n * n)] { value[i / (n * n)] } else { -1.0 })
}

fn streaks(rng: &mut RngStream, n: usize) -> Vec<bool> {
    let mut px = vec![false; n * n];
    let count = n / 4 + rng.below(n as u64 / 4) as usize;
    // Shared slant; rain falls roughly in one direction per image.
    let slope = rng.uniform_range(0.3, 0.7);
    for _ in 0..count {
        let x0 = rng.uniform_range(0.0, n as f64);
        let y0 = rng.uniform_range(-(n as f64) / 4.0, n as f64);
        let len = rng.uniform_range(0.2, 0.5) * n as f64;
        let steps = len.ceil() as usize;
        for k in 0..steps {
            let y = y0 + k as f64;
            let x = x0 + slope * k as f64;
            let (yi, xi) = (y.floor() as isize, x.floor() as isize);
            if (0..n as isize).contains(&yi) {
                let xi = xi.rem_euclid(n as isize) as usize;
                px[yi as usize * n + xi] = true;
            }
        }
    }
    px
}

fn dots(rng: &mut RngStream, n: usize) -> Vec<bool> {
    let mut px = vec![false; n * n];
    let count = n / 2 + rng.below(n as u64 / 2) as usize;
    for _ in 0..count {
        let cy = rng.uniform_range(0.0, n as f64);
        let cx = rng.uniform_range(0.0, n as f64);
        let r = rng.uniform_range(0.6, 1.6);
        for y in 0..n {
            for x in 0..n {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                if dy * dy + dx * dx <= r * r {
                    px[y * n + x] = true;
                }
            }
        }
    }
    px
}

fn synth_layers(rng: &mut RngStream, spec: &DatasetSpec) -> Layers {
    let n = spec.size;
    match spec.kind {
        DatasetKind::StripesBlobs => {
            let (s1, _) = stripes(rng, n);
            let s2 = blobs(rng, n, -0.6);
            Layers { s1, s2, mask: None }
        }
        DatasetKind::RainToy => {
            let s1 = blobs(rng, n, -0.3);
            let px = streaks(rng, n);
            let tint = rng.uniform_range(0.7, 0.95);
            let s2 = layer(&px, n, [tint - 0.05, tint, tint + 0.05].map(|v: f64| v.min(1.0)));
            Layers { s1, s2, mask: Some(mask_image(&px, n)) }
        }
        DatasetKind::SnowToy => {
            let s1 = gradient(rng, n);
            let px = dots(rng, n);
            let s2 = layer(&px, n, [1.0; CHANNELS]);
            Layers { s1, s2, mask: Some(mask_image(&px, n)) }
        }
    }
}

/// Two source images drawn from the spec's families.
pub fn synth_sources(rng: &mut RngStream, spec: &DatasetSpec) -> (Tensor, Tensor) {
    let l = synth_layers(rng, spec);
    (l.s1, l.s2)
}

/// Orientation of a freshly drawn stripe image; exposed for coverage checks.
pub fn stripe_orientation(rng: &mut RngStream, size: usize) -> f64 {
    stripes(rng, size).1
}

/// Sample `index` of a split. Each sample owns an independent substream.
pub fn generate_sample(spec: &DatasetSpec, split: Split, index: usize) -> Result<MixtureSample> {
    spec.validate()?;
    let mut rng = RngStream::new(spec.seed, split.stream()).substream(index as u64);
    let l = synth_layers(&mut rng, spec);
    match l.mask {
        None => {
            let a = rng.uniform_range(spec.mix_low, spec.mix_high);
            let mixture = mix_linear(&l.s1, &l.s2, a)?;
            Ok(MixtureSample { source1: l.s1, source2: l.s2, mixture, mix: MixDescriptor::Linear { a } })
        }
        Some(mask) => {
            let mixture = mix_mask(&l.s1, &l.s2, &mask, spec.tau)?;
            Ok(MixtureSample {
                source1: l.s1,
                source2: l.s2,
                mixture,
                mix: MixDescriptor::Mask { mask, tau: spec.tau },
            })
        }
    }
}

/// Every sample of a split, in index order.
pub fn generate_split(spec: &DatasetSpec, split: Split) -> Result<Vec<MixtureSample>> {
    spec.validate()?;
    let n = match split {
        Split::Train => spec.train,
        Split::Test => spec.test,
        Split::Validation => return Err(invalid("the validation split has no fixed size; use generate_samples")),
    };
    generate_samples(spec, split, n)
}

/// The first `n` samples of a split, in index order.
pub fn generate_samples(spec: &DatasetSpec, split: Split, n: usize) -> Result<Vec<MixtureSample>> {
    spec.validate()?;
    par::map_range(n, |i| generate_sample(spec, split, i)).into_iter().collect()
}

fn to_byte(v: f64) -> u8 {
    (127.5 * (v + 1.0)).round().clamp(0.0, 255.0) as u8
}

fn from_byte(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

/// Binary PPM (P6, maxval 255) encoding of a `[3, H, W]` image in `[-1, 1]`.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = img.chw()?;
    if c != CHANNELS {
        return Err(invalid(format!("PPM images need 3 channels, got {c}")));
    }
    if let Some(v) = img.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
        return Err(invalid(format!("pixel value {v} outside [-1, 1]")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    let plane = h * w;
    for i in 0..plane {
        for ch in 0..CHANNELS {
            out.push(to_byte(img.data()[ch * plane + i]));
        }
    }
    Ok(out)
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse { offset: self.pos, message: message.into() }
    }

    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse { offset: start, message: format!("{what} out of range") })
    }
}

/// Decode a binary PPM into a `[3, H, W]` image in `[-1, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut hd = Header { bytes, pos: 0 };
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(hd.err("missing P6 magic"));
    }
    hd.pos = 2;
    let w = hd.number("width")?;
    let h = hd.number("height")?;
    let maxval = hd.number("maxval")?;
    if w == 0 || h == 0 {
        return Err(hd.err("zero image extent"));
    }
    if maxval != 255 {
        return Err(hd.err(format!("unsupported maxval {maxval}")));
    }
    if hd.pos >= bytes.len() || !bytes[hd.pos].is_ascii_whitespace() {
        return Err(hd.err("expected a single whitespace byte before pixel data"));
    }
    hd.pos += 1;
    let need = 3 * w * h;
    let have = bytes.len() - hd.pos;
    if have < need {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: format!("truncated pixel data: expected {need} bytes, found {have} ({} missing)", need - have),
        });
    }
    if have > need {
        return Err(Error::Parse { offset: hd.pos + need, message: format!("{} trailing bytes", have - need) });
    }
    let px = &bytes[hd.pos..];
    let plane = w * h;
    Ok(Tensor::from_fn(&[CHANNELS, h, w], |i| from_byte(px[3 * (i % plane) + i / plane])))
}

pub fn save_image(path: &Path, img: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(img)?)?;
    Ok(())
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    decode_ppm(&fs::read(path)?)
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub source1: PathBuf,
    pub source2: PathBuf,
    pub mixture: PathBuf,
    pub kind: String,
    pub coefficient: f64,
}

impl ManifestEntry {
    pub fn split(&self) -> Option<Split> {
        if self.id.starts_with("train-") {
            Some(Split::Train)
        } else if self.id.starts_with("test-") {
            Some(Split::Test)
        } else {
            None
        }
    }
}

pub const MANIFEST_NAME: &str = "manifest.tsv";

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            e.id,
            e.source1.display(),
            e.source2.display(),
            e.mixture.display(),
            e.kind,
            e.coefficient
        ));
    }
    s
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let body = line.trim_end_matches(['\n', '\r']);
        if !body.is_empty() {
            let cols: Vec<&str> = body.split('\t').collect();
            if cols.len() != 6 {
                return Err(Error::Parse { offset, message: format!("expected 6 columns, found {}", cols.len()) });
            }
            let coefficient = cols[5]
                .parse()
                .map_err(|_| Error::Parse { offset, message: format!("bad coefficient {:?}", cols[5]) })?;
            out.push(ManifestEntry {
                id: cols[0].to_string(),
                source1: cols[1].into(),
                source2: cols[2].into(),
                mixture: cols[3].into(),
                kind: cols[4].to_string(),
                coefficient,
            });
        }
        offset += line.len();
    }
    Ok(out)
}

/// Summary printed after writing a corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusStats {
    pub train: usize,
    pub test: usize,
    pub size: usize,
    pub linear: usize,
    pub mask: usize,
}

/// Write every sample as three PPM files plus the manifest.
pub fn write_corpus(spec: &DatasetSpec, dir: &Path) -> Result<CorpusStats> {
    spec.validate()?;
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let mut stats = CorpusStats { train: spec.train, test: spec.test, size: spec.size, linear: 0, mask: 0 };
    for split in [Split::Train, Split::Test] {
        for (i, s) in generate_split(spec, split)?.into_iter().enumerate() {
            let id = format!("{}-{i:05}", split.label());
            let names = ["s1", "s2", "mix"].map(|k| PathBuf::from(format!("{id}-{k}.ppm")));
            for (name, img) in names.iter().zip([&s.source1, &s.source2, &s.mixture]) {
                save_image(&dir.join(name), img)?;
            }
            match s.mix {
                MixDescriptor::Linear { .. } => stats.linear += 1,
                MixDescriptor::Mask { .. } => stats.mask += 1,
            }
            let [source1, source2, mixture] = names;
            entries.push(ManifestEntry {
                id,
                source1,
                source2,
                mixture,
                kind: s.mix.kind().to_string(),
                coefficient: s.mix.coefficient(),
            });
        }
    }
    fs::write(dir.join(MANIFEST_NAME), format_manifest(&entries))?;
    Ok(stats)
}

/// A corpus sample read back from disk.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub entry: ManifestEntry,
    pub source1: Tensor,
    pub source2: Tensor,
    pub mixture: Tensor,
}

/// Read the manifest in `dir` and, optionally restricted to one split, every
/// referenced image.
pub fn load_corpus(dir: &Path, split: Option<Split>) -> Result<Vec<LoadedSample>> {
    let entries = parse_manifest(&fs::read_to_string(dir.join(MANIFEST_NAME))?)?;
    entries
        .into_iter()
        .filter(|e| split.is_none() || e.split() == split)
        .map(|e| {
            Ok(LoadedSample {
                source1: load_image(&dir.join(&e.source1))?,
                source2: load_image(&dir.join(&e.source2))?,
                mixture: load_image(&dir.join(&e.mixture))?,
                entry: e,
            })
        })
        .collect()
}
