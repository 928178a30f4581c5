use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use r2b::data::{load_cifar, synthetic_dataset, AugmentPolicy, CifarVariant, Dataset, SyntheticSpec};
use r2b::distill::{Preset, Schedule};
use r2b::network::{NetConfig, NetVariant};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Cifar10,
    Cifar100,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSettings {
    pub classes: usize,
    pub train: usize,
    pub test: usize,
    pub image_size: usize,
    pub noise: f64,
}

impl Default for SyntheticSettings {
    fn default() -> Self {
        SyntheticSettings {
            classes: 4,
            train: 2000,
            test: 500,
            image_size: 8,
            noise: 1.0,
        }
    }
}

/// Everything a run depends on. Written to the run directory before any
/// work starts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetKind,
    pub data_dir: Option<PathBuf>,
    pub synthetic: SyntheticSettings,
    pub preset: Preset,
    /// Stage of the preset run by `train`, by name or index.
    pub stage: Option<String>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub mixup_alpha: Option<f64>,
    pub augment: Option<AugmentPolicy>,
    /// Network stage widths and depths; dataset-dependent when absent.
    pub widths: Option<Vec<usize>>,
    pub blocks: Option<Vec<usize>>,
    pub threads: usize,
    pub deterministic: bool,
    /// Teacher checkpoint for a `train` stage that matches a teacher.
    pub teacher: Option<PathBuf>,
    /// Checkpoint the `train` student starts from.
    pub init: Option<PathBuf>,
    /// Explicit schedule for `distill`, replacing the preset.
    pub schedule: Option<Schedule>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dataset: DatasetKind::Synthetic,
            data_dir: None,
            synthetic: SyntheticSettings::default(),
            preset: Preset::Sb,
            stage: None,
            epochs: None,
            batch_size: None,
            lr: None,
            mixup_alpha: None,
            augment: None,
            widths: None,
            blocks: None,
            threads: 1,
            deterministic: false,
            teacher: None,
            init: None,
            schedule: None,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    fn num_classes(&self) -> usize {
        match self.dataset {
            DatasetKind::Cifar10 => 10,
            DatasetKind::Cifar100 => 100,
            DatasetKind::Synthetic => self.synthetic.classes,
        }
    }

    pub fn network(&self) -> NetConfig {
        let (widths, blocks) = match self.dataset {
            DatasetKind::Synthetic => (vec![16, 32], vec![2, 2]),
            _ => (vec![64, 128, 256, 512], vec![2, 2, 2, 2]),
        };
        NetConfig::reduced(
            NetVariant::FullBin,
            self.num_classes(),
            self.widths.clone().unwrap_or(widths),
            self.blocks.clone().unwrap_or(blocks),
        )
        .with_seed(self.seed)
    }

    /// The preset (or explicit) schedule with every override applied.
    pub fn schedule(&self) -> Schedule {
        let mut s = match &self.schedule {
            Some(s) => s.clone(),
            None => self.preset.schedule(&self.network()),
        };
        if let Some(e) = self.epochs {
            s = s.with_epochs(e);
        }
        s = s.with_seed(self.seed);
        let synthetic = self.dataset == DatasetKind::Synthetic;
        s.map_policies(|p| {
            if synthetic {
                p.augment = AugmentPolicy::Eval;
                p.mixup_alpha = 0.0;
                p.batch_size = 64;
            }
            if let Some(a) = self.augment {
                p.augment = a;
            }
            if let Some(m) = self.mixup_alpha {
                p.mixup_alpha = m;
            }
            if let Some(b) = self.batch_size {
                p.batch_size = b;
            }
            if let Some(lr) = self.lr {
                p.lr = lr;
            }
        })
    }

    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match self.dataset {
            DatasetKind::Synthetic => {
                let s = &self.synthetic;
                let spec = SyntheticSpec::new(self.seed, s.classes, s.train, [3, s.image_size, s.image_size]).with_noise(s.noise);
                Ok((synthetic_dataset(&spec)?, synthetic_dataset(&spec.test_split(s.test))?))
            }
            kind => {
                let Some(dir) = &self.data_dir else {
                    bail!("{kind:?} needs a data directory: pass --data-dir or set R2B_DATA_DIR");
                };
                let variant = if kind == DatasetKind::Cifar10 { CifarVariant::Cifar10 } else { CifarVariant::Cifar100 };
                Ok(load_cifar(dir, variant)?)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_round_trip() {
        let c = RunConfig {
            epochs: Some(3),
            preset: Preset::RealToBin,
            ..RunConfig::default()
        };
        let back: RunConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c: RunConfig = toml::from_str("seed = 3\npreset = \"sb-att\"\n[synthetic]\nclasses = 6\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.preset, Preset::SbAtt);
        assert_eq!(c.synthetic.classes, 6);
        assert_eq!(c.synthetic.train, 2000);
        assert_eq!(c.network().num_classes, 6);
    }

    #[test]
    fn overrides_reach_every_stage() {
        let c = RunConfig {
            epochs: Some(2),
            lr: Some(0.01),
            ..RunConfig::default()
        };
        for st in c.schedule().stages {
            assert_eq!(st.policy().epochs, 2);
            assert_eq!(st.optimizer.lr, 0.01);
            assert_eq!(st.optimizer.mixup_alpha, 0.0);
        }
    }
}
