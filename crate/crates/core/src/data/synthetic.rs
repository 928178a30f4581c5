use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{channel_stats, normalize_channels, Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gaussian class templates plus per-sample Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub classes: usize,
    pub n: usize,
    /// `[C, H, W]`
    pub image_shape: [usize; 3],
    /// Standard deviation of the per-sample noise; templates have unit scale.
    pub noise: f64,
    pub split: Split,
}

impl SyntheticSpec {
    pub fn new(seed: u64, classes: usize, n: usize, image_shape: [usize; 3]) -> Self {
        SyntheticSpec {
            seed,
            classes,
            n,
            image_shape,
            noise: 1.0,
            split: Split::Train,
        }
    }

    pub fn with_noise(self, noise: f64) -> Self {
        SyntheticSpec { noise, ..self }
    }

    /// Same templates, fresh samples.
    pub fn test_split(&self, n: usize) -> Self {
        SyntheticSpec {
            n,
            split: Split::Test,
            ..self.clone()
        }
    }
}

/// Raw class templates, `[classes, C, H, W]`; a function of `seed` only.
pub fn synthetic_templates(seed: u64, classes: usize, image_shape: [usize; 3]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c, h, w] = image_shape;
    Tensor::randn(&[classes, c, h, w], 1.0, &mut rng)
}

/// Balanced labels in shuffled order. Train and test splits draw from
/// separate streams but share templates.
pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::invalid(format!("{} classes; need at least 2", spec.classes)));
    }
    if spec.n == 0 || spec.image_shape.contains(&0) {
        return Err(Error::invalid("synthetic dataset needs n > 0 and a non-empty image shape"));
    }
    if !(spec.noise >= 0.0) {
        return Err(Error::invalid(format!("noise {} must be >= 0", spec.noise)));
    }
    let templates = synthetic_templates(spec.seed, spec.classes, spec.image_shape);
    let stream = match spec.split {
        Split::Train => 1,
        Split::Test => 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let mut labels: Vec<usize> = (0..spec.n).map(|i| i % spec.classes).collect();
    labels.shuffle(&mut rng);
    let [c, h, w] = spec.image_shape;
    let inner = c * h * w;
    let noise = Tensor::randn(&[spec.n, c, h, w], spec.noise, &mut rng);
    let mut raw = noise;
    for (i, &l) in labels.iter().enumerate() {
        let t = &templates.data()[l * inner..(l + 1) * inner];
        raw.data_mut()[i * inner..(i + 1) * inner].iter_mut().zip(t).for_each(|(x, t)| *x += t);
    }
    // Constants of the generating distribution, so every split of a spec
    // shares them: template statistics plus the noise variance.
    let (mean, template_std) = channel_stats(&templates)?;
    let std: Vec<f64> = template_std.iter().map(|s| (s * s + spec.noise * spec.noise).sqrt().max(1e-12)).collect();
    let images = normalize_channels(&raw, &mean, &std)?;
    Dataset::new(images, labels, spec.classes, spec.split, mean, std)
}
