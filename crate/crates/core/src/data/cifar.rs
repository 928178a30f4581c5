use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{channel_stats, normalize_channels, Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PIXELS: usize = 3 * 32 * 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    /// Label bytes per record.
    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + PIXELS
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    fn files(self, split: Split) -> (&'static str, Vec<&'static str>) {
        match (self, split) {
            (CifarVariant::Cifar10, Split::Train) => (
                "cifar-10-batches-bin",
                vec![
                    "data_batch_1.bin",
                    "data_batch_2.bin",
                    "data_batch_3.bin",
                    "data_batch_4.bin",
                    "data_batch_5.bin",
                ],
            ),
            (CifarVariant::Cifar10, Split::Test) => ("cifar-10-batches-bin", vec!["test_batch.bin"]),
            (CifarVariant::Cifar100, Split::Train) => ("cifar-100-binary", vec!["train.bin"]),
            (CifarVariant::Cifar100, Split::Test) => ("cifar-100-binary", vec!["test.bin"]),
        }
    }
}

/// Parses raw records into `(pixels in [0, 1] as [N, 3, 32, 32], labels)`.
/// CIFAR-100 records carry a coarse then a fine label; the fine one is used.
pub fn parse_cifar_records(bytes: &[u8], variant: CifarVariant) -> Result<(Tensor, Vec<usize>)> {
    let rec = variant.record_len();
    if !bytes.len().is_multiple_of(rec) {
        let whole = bytes.len() / rec * rec;
        return Err(Error::Format {
            offset: whole as u64,
            message: format!(
                "{} bytes is not a multiple of the {rec}-byte record; {} trailing bytes",
                bytes.len(),
                bytes.len() - whole
            ),
        });
    }
    let n = bytes.len() / rec;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * PIXELS);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let label = r[variant.label_bytes() - 1] as usize;
        if label >= variant.num_classes() {
            return Err(Error::Format {
                offset: (i * rec + variant.label_bytes() - 1) as u64,
                message: format!("label {label} outside {} classes", variant.num_classes()),
            });
        }
        labels.push(label);
        pixels.extend(r[variant.label_bytes()..].iter().map(|&p| p as f64 / 255.0));
    }
    Ok((Tensor::new(vec![n, 3, 32, 32], pixels)?, labels))
}

fn read_split(dir: &Path, variant: CifarVariant, split: Split) -> Result<(Tensor, Vec<usize>)> {
    let (sub, files) = variant.files(split);
    let root: PathBuf = if dir.join(sub).is_dir() { dir.join(sub) } else { dir.to_path_buf() };
    let mut parts = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let path = root.join(f);
        let bytes = std::fs::read(&path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        let (x, y) = parse_cifar_records(&bytes, variant)?;
        parts.push(x);
        labels.extend(y);
    }
    Ok((Tensor::concat_outer(&parts)?, labels))
}

/// Loads both splits, standardizing each channel with train-split statistics.
pub fn load_cifar(dir: impl AsRef<Path>, variant: CifarVariant) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let (train_raw, train_labels) = read_split(dir, variant, Split::Train)?;
    let (test_raw, test_labels) = read_split(dir, variant, Split::Test)?;
    let (mean, std) = channel_stats(&train_raw)?;
    let k = variant.num_classes();
    let train = Dataset::new(normalize_channels(&train_raw, &mean, &std)?, train_labels, k, Split::Train, mean.clone(), std.clone())?;
    let test = Dataset::new(normalize_channels(&test_raw, &mean, &std)?, test_labels, k, Split::Test, mean, std)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(variant: CifarVariant, label: u8, seed: u8) -> Vec<u8> {
        let mut r = match variant {
            CifarVariant::Cifar10 => vec![label],
            CifarVariant::Cifar100 => vec![label / 5, label],
        };
        r.extend((0..PIXELS).map(|i| (i as u8).wrapping_mul(seed)));
        r
    }

    #[test]
    fn one_record_fixture_round_trips() {
        let bytes = record(CifarVariant::Cifar10, 7, 3);
        let (x, y) = parse_cifar_records(&bytes, CifarVariant::Cifar10).unwrap();
        assert_eq!(y, vec![7]);
        assert_eq!(x.shape(), &[1, 3, 32, 32]);
        // channel-planar: red plane first, row-major
        assert_eq!(x.at4(0, 0, 0, 1), 3.0 / 255.0);
        assert_eq!(x.at4(0, 1, 0, 0), ((1024usize * 3) as u8) as f64 / 255.0);
        assert_eq!(x.at4(0, 2, 31, 31), ((3071usize * 3) as u8) as f64 / 255.0);
    }

    #[test]
    fn counts_and_first_label() {
        let mut bytes = Vec::new();
        for (i, l) in [4u8, 1, 9].iter().enumerate() {
            bytes.extend(record(CifarVariant::Cifar10, *l, i as u8));
        }
        let (x, y) = parse_cifar_records(&bytes, CifarVariant::Cifar10).unwrap();
        assert_eq!(x.shape()[0], 3);
        assert_eq!(y[0], bytes[0] as usize);
        assert_eq!(y, vec![4, 1, 9]);
    }

    #[test]
    fn cifar100_uses_fine_label() {
        let bytes = record(CifarVariant::Cifar100, 87, 1);
        assert_eq!(bytes.len(), 3074);
        let (_, y) = parse_cifar_records(&bytes, CifarVariant::Cifar100).unwrap();
        assert_eq!(y, vec![87]);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let mut bytes = record(CifarVariant::Cifar10, 1, 1);
        bytes.extend(record(CifarVariant::Cifar10, 2, 1));
        bytes.truncate(3073 + 100);
        match parse_cifar_records(&bytes, CifarVariant::Cifar10) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 3073),
            other => panic!("{other:?}"),
        }
        let bad = record(CifarVariant::Cifar10, 12, 1);
        assert!(matches!(
            parse_cifar_records(&bad, CifarVariant::Cifar10),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn load_from_directory() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("cifar-10-batches-bin");
        std::fs::create_dir(&sub).unwrap();
        for (i, f) in ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"]
            .iter()
            .enumerate()
        {
            let mut b = record(CifarVariant::Cifar10, i as u8, 1 + i as u8);
            b.extend(record(CifarVariant::Cifar10, 9, 2));
            std::fs::write(sub.join(f), b).unwrap();
        }
        std::fs::write(sub.join("test_batch.bin"), record(CifarVariant::Cifar10, 3, 5)).unwrap();
        let (train, test) = load_cifar(dir.path(), CifarVariant::Cifar10).unwrap();
        assert_eq!(train.len(), 10);
        assert_eq!(test.len(), 1);
        assert_eq!(train.labels[..2], [0, 9]);
        assert_eq!(test.mean, train.mean);
        let (again, _) = load_cifar(dir.path(), CifarVariant::Cifar10).unwrap();
        assert_eq!(again, train);
    }
}
