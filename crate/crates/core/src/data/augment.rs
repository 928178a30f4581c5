use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CROP_PAD: usize = 4;
pub const MAX_ROTATION_DEG: f64 = 15.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentPolicy {
    /// Identity.
    Eval,
    /// Reflect-pad 4 and crop, horizontal flip, rotation within +-15 degrees.
    CifarTrain,
}

/// One draw of the random transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    /// Crop offsets into the padded image, in `0..=2 * CROP_PAD`.
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
    pub angle_deg: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        dy: CROP_PAD,
        dx: CROP_PAD,
        flip: false,
        angle_deg: 0.0,
    };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        AugmentParams {
            dy: rng.random_range(0..=2 * CROP_PAD),
            dx: rng.random_range(0..=2 * CROP_PAD),
            flip: rng.random_bool(0.5),
            angle_deg: rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
        }
    }

    /// Applies crop, then flip, then rotation to one `[C, H, W]` image.
    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        let [c, h, w] = <[usize; 3]>::try_from(image.shape())
            .map_err(|_| Error::shape(format!("expected [C, H, W], got {:?}", image.shape())))?;
        if h <= CROP_PAD || w <= CROP_PAD {
            return Err(Error::shape(format!("{h}x{w} image too small to reflect-pad by {CROP_PAD}")));
        }
        let reflect = |i: isize, n: usize| -> usize {
            let n = n as isize;
            let i = if i < 0 { -i } else { i };
            (if i >= n { 2 * n - 2 - i } else { i }) as usize
        };
        let src = image.data();
        let mut cropped = vec![0.0; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                let sy = reflect(y as isize + self.dy as isize - CROP_PAD as isize, h);
                for x in 0..w {
                    let sx = reflect(x as isize + self.dx as isize - CROP_PAD as isize, w);
                    let ox = if self.flip { w - 1 - x } else { x };
                    cropped[(ch * h + y) * w + ox] = src[(ch * h + sy) * w + sx];
                }
            }
        }
        if self.angle_deg == 0.0 {
            return Tensor::new(vec![c, h, w], cropped);
        }
        let (sin, cos) = self.angle_deg.to_radians().sin_cos();
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let mut out = vec![0.0; c * h * w];
        for y in 0..h {
            for x in 0..w {
                let (rx, ry) = (x as f64 - cx, y as f64 - cy);
                let xs = cx + cos * rx + sin * ry;
                let ys = cy - sin * rx + cos * ry;
                let (x0, y0) = (xs.floor(), ys.floor());
                let (fx, fy) = (xs - x0, ys - y0);
                let taps = [
                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                    (y0, x0 + 1.0, (1.0 - fy) * fx),
                    (y0 + 1.0, x0, fy * (1.0 - fx)),
                    (y0 + 1.0, x0 + 1.0, fy * fx),
                ];
                for ch in 0..c {
                    let mut v = 0.0;
                    for &(ty, tx, wt) in &taps {
                        if wt != 0.0 && ty >= 0.0 && tx >= 0.0 && (ty as usize) < h && (tx as usize) < w {
                            v += wt * cropped[(ch * h + ty as usize) * w + tx as usize];
                        }
                    }
                    out[(ch * h + y) * w + x] = v;
                }
            }
        }
        Tensor::new(vec![c, h, w], out)
    }
}

/// Augments one `[C, H, W]` image.
pub fn augment<R: Rng + ?Sized>(image: &Tensor, rng: &mut R, policy: AugmentPolicy) -> Result<Tensor> {
    match policy {
        AugmentPolicy::Eval => Ok(image.clone()),
        AugmentPolicy::CifarTrain => AugmentParams::sample(rng).apply(image),
    }
}

/// Augments every image of `[N, C, H, W]`. Each sample gets its own stream
/// seeded from `rng`, so results do not depend on processing order.
pub fn augment_batch<R: Rng + ?Sized>(images: &Tensor, rng: &mut R, policy: AugmentPolicy) -> Result<Tensor> {
    if policy == AugmentPolicy::Eval {
        return Ok(images.clone());
    }
    let (n, c, h, w) = images.dims4()?;
    let seeds: Vec<u64> = (0..n).map(|_| rng.random()).collect();
    let mut parts = Vec::with_capacity(n);
    for (i, seed) in seeds.into_iter().enumerate() {
        let img = images.slice_outer(i, i + 1).reshape(&[c, h, w])?;
        let mut sample_rng = ChaCha8Rng::seed_from_u64(seed);
        parts.push(augment(&img, &mut sample_rng, policy)?.reshape(&[1, c, h, w])?);
    }
    Tensor::concat_outer(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[c, h, w], |i| i as f64)
    }

    #[test]
    fn eval_is_identity() {
        let x = ramp(3, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&x, &mut rng, AugmentPolicy::Eval).unwrap(), x);
        assert_eq!(AugmentParams::IDENTITY.apply(&x).unwrap(), x);
    }

    #[test]
    fn double_flip_is_identity() {
        let x = ramp(2, 6, 7);
        let flip = AugmentParams {
            flip: true,
            ..AugmentParams::IDENTITY
        };
        let once = flip.apply(&x).unwrap();
        assert_ne!(once, x);
        assert_eq!(once.data()[0], x.data()[6]);
        assert_eq!(flip.apply(&once).unwrap(), x);
    }

    #[test]
    fn crop_reflects_without_repeating_edge() {
        let x = ramp(1, 6, 6);
        let shifted = AugmentParams {
            dy: CROP_PAD,
            dx: CROP_PAD - 1,
            ..AugmentParams::IDENTITY
        }
        .apply(&x)
        .unwrap();
        // column -1 reflects to column 1
        assert_eq!(shifted.data()[0], x.data()[1]);
        assert_eq!(shifted.data()[1], x.data()[0]);
    }

    #[test]
    fn quarter_turn_moves_corners() {
        let mut x = Tensor::zeros(&[1, 5, 5]);
        x.data_mut()[0] = 1.0; // (0, 0)
        let rot = AugmentParams {
            angle_deg: 90.0,
            ..AugmentParams::IDENTITY
        };
        let y = rot.apply(&x).unwrap();
        // output (y, x) samples input (4 - x, y), so input (0, 0) lands on
        // output (0, 4)
        let hot: Vec<usize> = y.data().iter().enumerate().filter(|(_, v)| **v > 0.5).map(|(i, _)| i).collect();
        assert_eq!(hot, vec![4]);
        assert!((y.sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rotation_zero_fills() {
        let x = Tensor::full(&[1, 8, 8], 1.0);
        let y = AugmentParams {
            angle_deg: 15.0,
            ..AugmentParams::IDENTITY
        }
        .apply(&x)
        .unwrap();
        assert!(y.data()[0] < 1.0);
        assert!((y.data()[4 * 8 + 4] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_small_rejected() {
        assert!(AugmentParams::IDENTITY.apply(&ramp(1, 4, 4)).is_err());
    }

    proptest! {
        #[test]
        fn shape_preserved(seed in any::<u64>(), h in 5usize..12, w in 5usize..12) {
            let x = ramp(3, h, w);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = augment(&x, &mut rng, AugmentPolicy::CifarTrain).unwrap();
            prop_assert_eq!(y.shape(), x.shape());
            prop_assert!(y.is_finite());
        }

        #[test]
        fn batch_matches_per_sample_streams(seed in any::<u64>()) {
            let xs = Tensor::from_fn(&[3, 1, 6, 6], |i| (i % 7) as f64);
            let a = augment_batch(&xs, &mut ChaCha8Rng::seed_from_u64(seed), AugmentPolicy::CifarTrain).unwrap();
            let b = augment_batch(&xs, &mut ChaCha8Rng::seed_from_u64(seed), AugmentPolicy::CifarTrain).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
