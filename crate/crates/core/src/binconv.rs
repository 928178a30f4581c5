//! Bit-packed binary convolution.
//!
//! Signs are packed along the channel axis: bit `c % 64` of word `c / 64` at
//! a given pixel holds channel `c`, with `+1 -> 1` and `-1 -> 0`. Lanes past
//! the channel count are always zero and are excluded through the word mask,
//! so a tap's contribution to the `+-1` dot product is
//! `2 * popcount(xnor(a, b) & mask) - C`.
//!
//! Spatial padding taps are skipped entirely. This reproduces a zero-padded
//! real convolution of the sign tensors exactly; padding with `-1` would not.

use crate::error::{Error, Result};
use crate::tensor::{conv_output_extent, Tensor};

pub const WORD_BITS: usize = 64;

/// Sign tensor packed along the channel axis.
///
/// The logical shape is `[N, C, H, W]` for activations or `[O, C, k, k]` for
/// weights; storage is `[N][H][W][words_per_pixel]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitTensor {
    shape: [usize; 4],
    words: Vec<u64>,
    valid_mask: Vec<u64>,
}

impl BitTensor {
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn words_per_pixel(&self) -> usize {
        self.valid_mask.len()
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn valid_mask(&self) -> &[u64] {
        &self.valid_mask
    }

    /// Packed words of pixel `(n, y, x)`.
    pub fn pixel(&self, n: usize, y: usize, x: usize) -> &[u64] {
        let [_, _, h, w] = self.shape;
        let wpp = self.words_per_pixel();
        let start = ((n * h + y) * w + x) * wpp;
        &self.words[start..start + wpp]
    }

    /// Expands back to a dense `+-1` tensor.
    pub fn unpack(&self) -> Tensor {
        let [n, c, h, w] = self.shape;
        let mut out = Tensor::zeros(&self.shape);
        let data = out.data_mut();
        for s in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let px = self.pixel(s, y, x);
                    for ch in 0..c {
                        let bit = (px[ch / WORD_BITS] >> (ch % WORD_BITS)) & 1;
                        data[((s * c + ch) * h + y) * w + x] = if bit == 1 { 1.0 } else { -1.0 };
                    }
                }
            }
        }
        out
    }
}

fn lane_masks(channels: usize) -> Vec<u64> {
    let wpp = channels.div_ceil(WORD_BITS).max(1);
    (0..wpp)
        .map(|i| {
            let lanes = channels.saturating_sub(i * WORD_BITS).min(WORD_BITS);
            if lanes == WORD_BITS {
                u64::MAX
            } else {
                (1u64 << lanes) - 1
            }
        })
        .collect()
}

/// Packs a rank-4 tensor whose every element is exactly `+1` or `-1`.
pub fn pack(signs: &Tensor) -> Result<BitTensor> {
    let (n, c, h, w) = signs.dims4()?;
    let valid_mask = lane_masks(c);
    let wpp = valid_mask.len();
    let mut words = vec![0u64; n * h * w * wpp];
    let data = signs.data();
    for s in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let i = ((s * c + ch) * h + y) * w + x;
                    let v = data[i];
                    if v == 1.0 {
                        words[((s * h + y) * w + x) * wpp + ch / WORD_BITS] |= 1 << (ch % WORD_BITS);
                    } else if v != -1.0 {
                        return Err(Error::NonSignValue { index: i, value: v });
                    }
                }
            }
        }
    }
    Ok(BitTensor {
        shape: [n, c, h, w],
        words,
        valid_mask,
    })
}

/// Applies `sign` (with `sign(0) = +1`) and packs the result.
pub fn pack_signs_of(real: &Tensor) -> Result<BitTensor> {
    pack(&real.map(|v| if v >= 0.0 { 1.0 } else { -1.0 }))
}

/// `+-1` dot product of two packed vectors whose valid lanes are the low
/// `valid_count` bits.
#[inline]
pub fn xnor_popcount_dot(a: &[u64], b: &[u64], valid_count: usize) -> i64 {
    debug_assert_eq!(a.len(), b.len());
    let mut agree = 0u32;
    let full = valid_count / WORD_BITS;
    for i in 0..full {
        agree += (!(a[i] ^ b[i])).count_ones();
    }
    let rem = valid_count % WORD_BITS;
    if rem != 0 {
        let mask = (1u64 << rem) - 1;
        agree += (!(a[full] ^ b[full]) & mask).count_ones();
    }
    2 * agree as i64 - valid_count as i64
}

/// Binary convolution of packed signs. Outputs are integers stored as `f64`.
pub fn binary_conv2d(input: &BitTensor, weight: &BitTensor, stride: usize, pad: usize) -> Result<Tensor> {
    let [n, c, h, w] = input.shape;
    let [o, wc, kh, kw] = weight.shape;
    if wc != c {
        return Err(Error::shape(format!(
            "binary conv input has {c} channels but weight expects {wc}"
        )));
    }
    if kh != kw {
        return Err(Error::shape(format!("non-square kernel {kh}x{kw}")));
    }
    let k = kh;
    let oh = conv_output_extent(h, k, stride, pad)?;
    let ow = conv_output_extent(w, k, stride, pad)?;
    let wpp = input.words_per_pixel();
    let row = k * k * wpp;
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    let data = out.data_mut();
    // Bit-level im2col: one contiguous patch per output pixel, with a mask
    // that is zero on padding taps and on unused lanes.
    let mut patch = vec![0u64; row];
    let mut mask = vec![0u64; row];
    for s in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut valid = 0i64;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        let at = (ky * k + kx) * wpp;
                        if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                            patch[at..at + wpp].fill(0);
                            mask[at..at + wpp].fill(0);
                        } else {
                            patch[at..at + wpp].copy_from_slice(input.pixel(s, iy as usize, ix as usize));
                            mask[at..at + wpp].copy_from_slice(&input.valid_mask);
                            valid += c as i64;
                        }
                    }
                }
                for oc in 0..o {
                    let wrow = &weight.words[oc * row..(oc + 1) * row];
                    let mut agree = 0u32;
                    for ((a, b), m) in patch.iter().zip(wrow).zip(&mask) {
                        agree += (!(a ^ b) & m).count_ones();
                    }
                    data[((s * o + oc) * oh + oy) * ow + ox] = (2 * agree as i64 - valid) as f64;
                }
            }
        }
    }
    Ok(out)
}

/// Per-output-channel scaling of a binary convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleFactors {
    /// Learned factors; always positive.
    pub gamma: Vec<f64>,
    /// Mean-absolute-weight factors, only for the XNOR-style baseline.
    pub alpha_analytic: Option<Vec<f64>>,
}

impl ScaleFactors {
    pub fn ones(channels: usize) -> Self {
        ScaleFactors {
            gamma: vec![1.0; channels],
            alpha_analytic: None,
        }
    }

    pub fn learned(gamma: Vec<f64>) -> Result<Self> {
        if let Some(g) = gamma.iter().find(|g| !(**g > 0.0)) {
            return Err(Error::invalid(format!("scale factor {g} is not positive")));
        }
        Ok(ScaleFactors {
            gamma,
            alpha_analytic: None,
        })
    }
}

/// Multiplies channel `o` of `[N, O, H, W]` by `factors[o]`.
pub fn scale_channels(x: &Tensor, factors: &[f64]) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    if factors.len() != c {
        return Err(Error::shape(format!(
            "{} scale factors for {c} channels",
            factors.len()
        )));
    }
    let hw = h * w;
    let mut out = x.clone();
    for (i, plane) in out.data_mut().chunks_exact_mut(hw).enumerate() {
        let f = factors[i % c];
        plane.iter_mut().for_each(|v| *v *= f);
    }
    Ok(out)
}

pub fn scale_output(conv_out: &Tensor, scale: &ScaleFactors) -> Result<Tensor> {
    scale_channels(conv_out, &scale.gamma)
}

/// `alpha_o = mean |W_o|` over each output filter.
pub fn analytic_alpha(weight: &Tensor) -> Result<Vec<f64>> {
    let (o, c, kh, kw) = weight.dims4()?;
    let per = c * kh * kw;
    Ok((0..o)
        .map(|i| weight.data()[i * per..(i + 1) * per].iter().map(|v| v.abs()).sum::<f64>() / per as f64)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::conv2d_ref;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn expand(word: u64, lanes: usize) -> Vec<i64> {
        (0..lanes).map(|i| if (word >> i) & 1 == 1 { 1 } else { -1 }).collect()
    }

    #[test]
    fn pack_64_all_plus() {
        let t = Tensor::full(&[1, 64, 1, 1], 1.0);
        let b = pack(&t).unwrap();
        assert_eq!(b.words(), &[u64::MAX]);
        assert_eq!(b.valid_mask(), &[u64::MAX]);
        assert_eq!(b.valid_mask()[0].count_ones(), 64);
    }

    #[test]
    fn pack_three_channels() {
        let t = Tensor::new(vec![1, 3, 1, 1], vec![1.0, -1.0, 1.0]).unwrap();
        let b = pack(&t).unwrap();
        assert_eq!(b.words(), &[0b101]);
        assert_eq!(b.valid_mask(), &[0b111]);
    }

    #[test]
    fn pack_rejects_non_sign() {
        let t = Tensor::new(vec![1, 2, 1, 1], vec![1.0, 0.5]).unwrap();
        assert!(matches!(pack(&t), Err(Error::NonSignValue { index: 1, .. })));
        let z = Tensor::new(vec![1, 1, 1, 1], vec![0.0]).unwrap();
        assert!(pack(&z).is_err());
    }

    #[test]
    fn pack_multiword_masks() {
        let t = Tensor::full(&[1, 70, 1, 1], 1.0);
        let b = pack(&t).unwrap();
        assert_eq!(b.valid_mask(), &[u64::MAX, 0b11_1111]);
        assert_eq!(b.words(), &[u64::MAX, 0b11_1111]);
    }

    #[test]
    fn dot_identical_and_antipodal() {
        let a = [0xDEAD_BEEF_u64, 0x1F];
        assert_eq!(xnor_popcount_dot(&a, &a, 69), 69);
        let neg = [!a[0], !a[1] & 0x1F];
        assert_eq!(xnor_popcount_dot(&a, &neg, 69), -69);
    }

    #[test]
    fn dot_eight_lane_example() {
        let a = 0b1011_0010u64;
        let b = 0b1001_1010u64;
        let oracle: i64 = expand(a, 8).iter().zip(expand(b, 8)).map(|(x, y)| x * y).sum();
        assert_eq!(xnor_popcount_dot(&[a], &[b], 8), oracle);
        assert_eq!(oracle, 4);
    }

    #[test]
    fn conv_all_plus_full_agreement() {
        for c in [1, 7, 64, 65] {
            let x = pack(&Tensor::full(&[1, c, 5, 5], 1.0)).unwrap();
            let w = pack(&Tensor::full(&[2, c, 3, 3], 1.0)).unwrap();
            let out = binary_conv2d(&x, &w, 1, 0).unwrap();
            assert!(out.data().iter().all(|&v| v == 9.0 * c as f64));
        }
    }

    #[test]
    fn conv_corner_pixel_padding() {
        // One +1 pixel at (0,0), the rest -1; 3x3 all-plus weights, pad 1.
        // Output (0,0) sees the 2x2 in-bounds window: +1 -1 -1 -1 = -2.
        // Output (1,1) sees all 9 taps: 1 - 8 = -7.
        let mut x = Tensor::full(&[1, 1, 3, 3], -1.0);
        x.data_mut()[0] = 1.0;
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let out = binary_conv2d(&pack(&x).unwrap(), &pack(&w).unwrap(), 1, 1).unwrap();
        assert_eq!(out.at4(0, 0, 0, 0), -2.0);
        assert_eq!(out.at4(0, 0, 1, 1), -7.0);
        // top edge middle: 6 in-bounds taps, one of them +1
        assert_eq!(out.at4(0, 0, 0, 1), -4.0);
        assert_eq!(out, conv2d_ref(&x, &w, 1, 1).unwrap());
    }

    #[test]
    fn conv_shape_mismatch() {
        let x = pack(&Tensor::full(&[1, 3, 4, 4], 1.0)).unwrap();
        let w = pack(&Tensor::full(&[1, 4, 3, 3], 1.0)).unwrap();
        assert!(binary_conv2d(&x, &w, 1, 1).is_err());
    }

    #[test]
    fn scale_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut rng);
        assert_eq!(scale_output(&x, &ScaleFactors::ones(3)).unwrap(), x);
        let s = ScaleFactors::learned(vec![1.0, 2.0, 0.5]).unwrap();
        let y = scale_output(&x, &s).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                for i in 0..2 {
                    for j in 0..2 {
                        assert_eq!(y.at4(n, c, i, j), x.at4(n, c, i, j) * s.gamma[c]);
                    }
                }
            }
        }
        assert!(scale_output(&x, &ScaleFactors::ones(2)).is_err());
        assert!(ScaleFactors::learned(vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn alpha_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let signs = Tensor::random_signs(&[3, 2, 3, 3], &mut rng);
        assert_eq!(analytic_alpha(&signs).unwrap(), vec![1.0; 3]);
        assert_eq!(analytic_alpha(&Tensor::full(&[2, 2, 1, 1], 0.5)).unwrap(), vec![0.5; 2]);
        let w = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut rng);
        let alpha = analytic_alpha(&w).unwrap();
        for (o, a) in alpha.iter().enumerate() {
            let oracle: f64 = (0..27).map(|i| w.data()[o * 27 + i].abs()).sum::<f64>() / 27.0;
            assert!((a - oracle).abs() < 1e-14);
        }
    }

    proptest! {
        #[test]
        fn pack_unpack_roundtrip(n in 1usize..3, c in 1usize..130, h in 1usize..4, w in 1usize..4, seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::random_signs(&[n, c, h, w], &mut rng);
            let b = pack(&t).unwrap();
            prop_assert_eq!(b.unpack(), t);
            for (i, word) in b.words().iter().enumerate() {
                prop_assert_eq!(word & !b.valid_mask()[i % b.words_per_pixel()], 0);
            }
        }

        #[test]
        fn dot_symmetric(a0: u64, a1: u64, b0: u64, b1: u64, lanes in 1usize..=128) {
            let mask = lane_masks(lanes);
            let a = [a0 & mask[0], a1 & *mask.get(1).unwrap_or(&0)];
            let b = [b0 & mask[0], b1 & *mask.get(1).unwrap_or(&0)];
            let wpp = mask.len();
            prop_assert_eq!(xnor_popcount_dot(&a[..wpp], &b[..wpp], lanes), xnor_popcount_dot(&b[..wpp], &a[..wpp], lanes));
            prop_assert_eq!(xnor_popcount_dot(&a[..wpp], &a[..wpp], lanes), lanes as i64);
        }

        #[test]
        fn conv_range_and_parity(c in 1usize..20, k in prop::sample::select(vec![1usize, 3]), seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::random_signs(&[1, c, 4, 4], &mut rng);
            let w = Tensor::random_signs(&[2, c, k, k], &mut rng);
            let out = binary_conv2d(&pack(&x).unwrap(), &pack(&w).unwrap(), 1, 0).unwrap();
            let bound = (k * k * c) as f64;
            for &v in out.data() {
                prop_assert!(v.abs() <= bound);
                prop_assert_eq!((v as i64 - bound as i64).rem_euclid(2), 0);
            }
        }
    }
}
