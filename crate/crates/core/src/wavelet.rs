//! Single-level orthonormal 2D Haar transform.
//!
//! For each non-overlapping 2x2 block `[[a, b], [c, d]]`:
//!
//! ```text
//! LL = (a + b + c + d) / 2      LH = (a - b + c - d) / 2
//! HL = (a + b - c - d) / 2      HH = (a - b - c + d) / 2
//! ```
//!
//! LH responds to differences between columns (horizontal high-pass) and HL
//! to differences between rows. The transform matrix is symmetric and
//! orthogonal, so synthesis applies the same butterflies.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

/// The four half-resolution subbands of a `[C, H, W]` image.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletSubbands {
    pub ll: Tensor,
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
}

impl WaveletSubbands {
    pub fn shape(&self) -> &[usize] {
        self.ll.shape()
    }

    /// Sum of squares over all four subbands.
    pub fn energy(&self) -> f64 {
        self.ll.sq_norm() + self.lh.sq_norm() + self.hl.sq_norm() + self.hh.sq_norm()
    }

    /// Stack into `[4C, h, w]` ordered LL, LH, HL, HH.
    pub fn stacked(&self) -> Result<Tensor> {
        Tensor::concat_channels(&[&self.ll, &self.lh, &self.hl, &self.hh])
    }

    pub fn from_stacked(t: &Tensor) -> Result<Self> {
        let (c4, _, _) = t.chw()?;
        if c4 % 4 != 0 {
            return Err(shape_err(format!("{c4} stacked channels is not a multiple of 4")));
        }
        let c = c4 / 4;
        Ok(Self {
            ll: t.slice_channels(0, c)?,
            lh: t.slice_channels(c, c)?,
            hl: t.slice_channels(2 * c, c)?,
            hh: t.slice_channels(3 * c, c)?,
        })
    }
}

/// Haar analysis of a `[C, H, W]` tensor with even `H` and `W`.
pub fn dwt2(x: &Tensor) -> Result<WaveletSubbands> {
    WaveletSubbands::from_stacked(&haar_analysis(x)?)
}

/// Exact inverse of [`dwt2`].
pub fn idwt2(s: &WaveletSubbands) -> Result<Tensor> {
    let shape = s.ll.shape();
    if [&s.lh, &s.hl, &s.hh].iter().any(|b| b.shape() != shape) {
        return Err(invalid(format!(
            "subband shapes differ: {:?} {:?} {:?} {:?}",
            s.ll.shape(),
            s.lh.shape(),
            s.hl.shape(),
            s.hh.shape()
        )));
    }
    haar_synthesis(&s.stacked()?)
}

/// `[C, H, W]` to stacked `[4C, H/2, W/2]`.
pub(crate) fn haar_analysis(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err(format!("Haar analysis needs even extents, got {h}x{w}")));
    }
    let (hh, hw) = (h / 2, w / 2);
    let band = c * hh * hw;
    let src = x.data();
    let mut out = vec![0.0; 4 * band];
    for ch in 0..c {
        for i in 0..hh {
            for j in 0..hw {
                let top = (ch * h + 2 * i) * w + 2 * j;
                let bot = top + w;
                let (a, b, cc, d) = (src[top], src[top + 1], src[bot], src[bot + 1]);
                let o = (ch * hh + i) * hw + j;
                out[o] = 0.5 * (a + b + cc + d);
                out[band + o] = 0.5 * (a - b + cc - d);
                out[2 * band + o] = 0.5 * (a + b - cc - d);
                out[3 * band + o] = 0.5 * (a - b - cc + d);
            }
        }
    }
    Ok(Tensor::from_parts(vec![4 * c, hh, hw], out))
}

/// Stacked `[4C, h, w]` to `[C, 2h, 2w]`.
pub(crate) fn haar_synthesis(s: &Tensor) -> Result<Tensor> {
    let (c4, hh, hw) = s.chw()?;
    if c4 % 4 != 0 {
        return Err(shape_err(format!("{c4} stacked channels is not a multiple of 4")));
    }
    let c = c4 / 4;
    let (h, w) = (2 * hh, 2 * hw);
    let band = c * hh * hw;
    let src = s.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..hh {
            for j in 0..hw {
                let o = (ch * hh + i) * hw + j;
                let (ll, lh, hl, hh_) = (src[o], src[band + o], src[2 * band + o], src[3 * band + o]);
                let top = (ch * h + 2 * i) * w + 2 * j;
                let bot = top + w;
                out[top] = 0.5 * (ll + lh + hl + hh_);
                out[top + 1] = 0.5 * (ll - lh + hl - hh_);
                out[bot] = 0.5 * (ll + lh - hl - hh_);
                out[bot + 1] = 0.5 * (ll - lh - hl + hh_);
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use proptest::prelude::*;

    fn one(v: f64) -> Tensor {
        Tensor::scalar(v).reshape(&[1, 1, 1]).unwrap()
    }

    #[test]
    fn constant_image_only_fills_ll() {
        let s = dwt2(&Tensor::full(&[2, 4, 6], 0.3)).unwrap();
        assert!(s.ll.data().iter().all(|&v| (v - 0.6).abs() < 1e-15));
        for b in [&s.lh, &s.hl, &s.hh] {
            assert!(b.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_block_values() {
        let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = dwt2(&x).unwrap();
        assert_eq!((s.ll.item(), s.lh.item(), s.hl.item(), s.hh.item()), (5.0, -1.0, -2.0, 0.0));
        let back = idwt2(&WaveletSubbands { ll: one(5.0), lh: one(-1.0), hl: one(-2.0), hh: one(0.0) }).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn odd_extent_rejected() {
        assert!(matches!(dwt2(&Tensor::zeros(&[3, 5, 6])), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn mismatched_subbands_rejected() {
        let z = Tensor::zeros(&[1, 2, 2]);
        let s = WaveletSubbands { ll: z.clone(), lh: z.clone(), hl: z, hh: Tensor::zeros(&[1, 2, 3]) };
        assert!(matches!(idwt2(&s), Err(crate::Error::InvalidArgument(_))));
    }

    #[test]
    fn zero_subbands_give_zero_image() {
        let z = Tensor::zeros(&[2, 3, 3]);
        let s = WaveletSubbands { ll: z.clone(), lh: z.clone(), hl: z.clone(), hh: z };
        assert_eq!(idwt2(&s).unwrap(), Tensor::zeros(&[2, 6, 6]));
    }

    #[test]
    fn random_round_trip() {
        let x = RngStream::new(11, 0).randn(&[3, 32, 32]).unwrap();
        let s = dwt2(&x).unwrap();
        assert!(idwt2(&s).unwrap().max_abs_diff(&x).unwrap() < 1e-12);
        assert!((s.energy() - x.sq_norm()).abs() <= 1e-10 * x.sq_norm());
    }

    proptest! {
        #[test]
        fn constant_shift_moves_only_ll(seed in any::<u64>(), v in -3.0f64..3.0) {
            let x = RngStream::new(seed, 1).randn(&[2, 4, 8]).unwrap();
            let a = dwt2(&x).unwrap();
            let b = dwt2(&x.map(|p| p + v)).unwrap();
            prop_assert!(b.lh.max_abs_diff(&a.lh).unwrap() < 1e-12);
            prop_assert!(b.hl.max_abs_diff(&a.hl).unwrap() < 1e-12);
            prop_assert!(b.hh.max_abs_diff(&a.hh).unwrap() < 1e-12);
            let shifted = a.ll.map(|p| p + 2.0 * v);
            prop_assert!(b.ll.max_abs_diff(&shifted).unwrap() < 1e-12);
        }

        #[test]
        fn linear(seed in any::<u64>(), ka in -2.0f64..2.0, kb in -2.0f64..2.0) {
            let mut rng = RngStream::new(seed, 2);
            let x = rng.randn(&[1, 6, 4]).unwrap();
            let y = rng.randn(&[1, 6, 4]).unwrap();
            let combo = x.scale(ka).add(&y.scale(kb)).unwrap();
            let lhs = haar_analysis(&combo).unwrap();
            let rhs = haar_analysis(&x).unwrap().scale(ka).add(&haar_analysis(&y).unwrap().scale(kb)).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
        }
    }
}
