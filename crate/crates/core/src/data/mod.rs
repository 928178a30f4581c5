//! Datasets: CIFAR binary batches, seeded synthetic data, augmentation.

mod augment;
mod cifar;
mod synthetic;

pub use augment::{augment, augment_batch, AugmentParams, AugmentPolicy, CROP_PAD, MAX_ROTATION_DEG};
pub use cifar::{load_cifar, parse_cifar_records, CifarVariant};
pub use synthetic::{synthetic_dataset, synthetic_templates, SyntheticSpec};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{read_checkpoint, write_checkpoint, Checkpoint};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Normalized images with labels and the constants used to normalize them.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    /// Per-channel constants applied as `(x - mean) / std`.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    num_classes: usize,
    split: Split,
}

const DATASET_TAG: &str = "DATASET";

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, split: Split, mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        let (n, c, _, _) = images.dims4()?;
        if labels.len() != n {
            return Err(Error::shape(format!("{} labels for {n} images", labels.len())));
        }
        if mean.len() != c || std.len() != c {
            return Err(Error::shape(format!("normalization constants for {} channels, images have {c}", mean.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!("label {bad} outside {num_classes} classes")));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            split,
            mean,
            std,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (self.images.select_outer(indices), indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Applies this dataset's normalization to raw `[N, C, H, W]` values.
    pub fn normalize(&self, raw: &Tensor) -> Result<Tensor> {
        normalize_channels(raw, &self.mean, &self.std)
    }

    /// Mean and standard deviation as checkpoint side entries.
    pub fn normalization_entries(&self) -> Vec<(String, Tensor)> {
        let c = self.mean.len();
        vec![
            ("data.mean".into(), Tensor::new(vec![c], self.mean.clone()).expect("length checked")),
            ("data.std".into(), Tensor::new(vec![c], self.std.clone()).expect("length checked")),
        ]
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let labels = Tensor::new(vec![self.len()], self.labels.iter().map(|&l| l as f64).collect())?;
        let mut entries = vec![("images".to_string(), self.images.clone()), ("labels".to_string(), labels)];
        entries.extend(self.normalization_entries());
        Ok(Checkpoint {
            tag: DATASET_TAG.into(),
            config_json: serde_json::to_string(&DatasetMeta {
                num_classes: self.num_classes,
                split: self.split,
            })?,
            entries,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.tag != DATASET_TAG {
            return Err(Error::Format {
                offset: 8,
                message: format!("expected a dataset container, found {}", ckpt.tag),
            });
        }
        let meta: DatasetMeta = serde_json::from_str(&ckpt.config_json)?;
        let get = |name: &str| ckpt.get(name).ok_or_else(|| Error::Config(format!("dataset container lacks {name}")));
        let labels = get("labels")?.data().iter().map(|&v| v as usize).collect();
        Dataset::new(
            get("images")?.clone(),
            labels,
            meta.num_classes,
            meta.split,
            get("data.mean")?.data().to_vec(),
            get("data.std")?.data().to_vec(),
        )
    }

    /// Writes the dataset in the checkpoint container format. Pixel values
    /// are stored as `f32`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        write_checkpoint(std::io::BufWriter::new(file), &self.to_checkpoint()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Dataset::from_checkpoint(&read_checkpoint(&std::fs::read(path)?)?)
    }
}

/// Per-channel mean and (population) standard deviation of `[N, C, H, W]`.
pub fn channel_stats(images: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, c, h, w) = images.dims4()?;
    let hw = h * w;
    let count = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for s in 0..n {
        for ch in 0..c {
            mean[ch] += images.data()[(s * c + ch) * hw..][..hw].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for s in 0..n {
        for ch in 0..c {
            let m = mean[ch];
            var[ch] += images.data()[(s * c + ch) * hw..][..hw].iter().map(|x| (x - m) * (x - m)).sum::<f64>();
        }
    }
    let std = var.iter().map(|v| (v / count).sqrt().max(1e-12)).collect();
    Ok((mean, std))
}

pub fn normalize_channels(raw: &Tensor, mean: &[f64], std: &[f64]) -> Result<Tensor> {
    let (n, c, h, w) = raw.dims4()?;
    if mean.len() != c || std.len() != c {
        return Err(Error::shape(format!("normalization constants for {} channels, images have {c}", mean.len())));
    }
    let hw = h * w;
    let mut out = raw.clone();
    for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
        let ch = i % c;
        chunk.iter_mut().for_each(|x| *x = (*x - mean[ch]) / std[ch]);
    }
    debug_assert_eq!(out.numel(), n * c * hw);
    Ok(out)
}
