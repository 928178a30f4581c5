//! Static per-sample operation counts.
//!
//! Counting convention:
//!
//! | op | cost |
//! |---|---|
//! | binary conv (signs x signs) | `k*k*C*O*H'*W'` BOPs |
//! | real conv / linear | one FLOP per multiply-add, plus biases |
//! | batch norm | 2 FLOPs per element |
//! | ReLU, PReLU, sign, tanh, sigmoid, skip add | 1 FLOP per element |
//! | output scaling (learned or analytic) | 1 FLOP per output element |
//! | max pool | `k*k` FLOPs per output element |
//! | global average pool | 1 FLOP per input element |
//!
//! Counting a multiply-add once reproduces the usual 1.8 GFLOP figure for a
//! real ResNet-18 at 224x224.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::gating::bottleneck_width;
use crate::network::{Binarize, BlockKind, ConvLayer, DownsampleMode, Network, Scaling, WeightMode};
use crate::tensor::conv_output_extent;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub bops: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct OpCount {
    pub bops: u64,
    pub flops: u64,
    pub layers: Vec<LayerCost>,
}

impl OpCount {
    fn push(&mut self, name: impl Into<String>, bops: u64, flops: u64) {
        self.bops += bops;
        self.flops += flops;
        self.layers.push(LayerCost {
            name: name.into(),
            bops,
            flops,
        });
    }

    /// Plain-text table, one row per layer plus a total.
    pub fn table(&self) -> String {
        let width = self.layers.iter().map(|l| l.name.len()).max().unwrap_or(5).max(5);
        let mut out = format!("{:<width$}  {:>14}  {:>14}\n", "layer", "BOPs", "FLOPs");
        for l in &self.layers {
            out += &format!("{:<width$}  {:>14}  {:>14}\n", l.name, l.bops, l.flops);
        }
        out += &format!("{:<width$}  {:>14}  {:>14}\n", "total", self.bops, self.flops);
        out += &format!("{:<width$}  {:>14.4e}  {:>14.4e}\n", "", self.bops as f64, self.flops as f64);
        out
    }
}

const BN: u64 = 2;

fn conv_extent(conv: &ConvLayer, h: usize, w: usize) -> Result<(usize, usize)> {
    Ok((
        conv_output_extent(h, conv.kernel, conv.stride, conv.pad)?,
        conv_output_extent(w, conv.kernel, conv.stride, conv.pad)?,
    ))
}

fn macs(conv: &ConvLayer, oh: usize, ow: usize) -> u64 {
    (conv.kernel * conv.kernel * conv.in_channels * conv.out_channels * oh * ow) as u64
}

/// Counts operations for one sample of shape `[C, H, W]`.
pub fn count_ops(net: &Network, input_shape: [usize; 3]) -> Result<OpCount> {
    let cfg = net.config();
    let [c, mut h, mut w] = input_shape;
    if c != cfg.in_channels {
        return Err(Error::shape(format!("network expects {} input channels, got {c}", cfg.in_channels)));
    }
    if h == 0 || w == 0 {
        return Err(Error::shape("input extent must be fixed and positive"));
    }
    let variant = cfg.variant;
    let sign_conv = variant.binarize() == Binarize::Sign && variant.weight_mode() == WeightMode::Binary;
    let mut count = OpCount::default();

    let stem = &net.stem;
    let (oh, ow) = conv_extent(&stem.conv, h, w)?;
    let area = (stem.conv.out_channels * oh * ow) as u64;
    count.push("stem.conv", 0, macs(&stem.conv, oh, ow));
    count.push("stem.bn", 0, BN * area);
    count.push("stem.act", 0, area);
    (h, w) = (oh, ow);
    if stem.max_pool {
        let (ph, pw) = (conv_output_extent(h, 3, 2, 1)?, conv_output_extent(w, 3, 2, 1)?);
        count.push("stem.maxpool", 0, 9 * (stem.conv.out_channels * ph * pw) as u64);
        (h, w) = (ph, pw);
    }

    let mut idx_in_stage = 0;
    let mut stage = 0;
    for (bi, block) in net.blocks.iter().enumerate() {
        if bi > 0 && block.stride != 1 {
            stage += 1;
            idx_in_stage = 0;
        }
        let name = format!("stage{stage}.block{idx_in_stage}");
        idx_in_stage += 1;
        let (hin, win) = (h, w);
        let out_c = block.out_channels;
        match &block.kind {
            BlockKind::Real { conv1, conv2, .. } => {
                let (h1, w1) = conv_extent(conv1, h, w)?;
                let a1 = (out_c * h1 * w1) as u64;
                count.push(format!("{name}.conv1"), 0, macs(conv1, h1, w1));
                count.push(format!("{name}.bn1"), 0, BN * a1);
                count.push(format!("{name}.relu1"), 0, a1);
                let (h2, w2) = conv_extent(conv2, h1, w1)?;
                let a2 = (out_c * h2 * w2) as u64;
                count.push(format!("{name}.conv2"), 0, macs(conv2, h2, w2));
                count.push(format!("{name}.bn2"), 0, BN * a2);
                count.push(format!("{name}.add"), 0, a2);
                count.push(format!("{name}.relu2"), 0, a2);
                (h, w) = (h2, w2);
            }
            BlockKind::Binary { units } => {
                for (u, unit) in units.iter().enumerate() {
                    let uname = format!("{name}.unit{u}");
                    let cin = unit.conv.in_channels;
                    let a_in = (cin * h * w) as u64;
                    count.push(format!("{uname}.bn"), 0, BN * a_in);
                    count.push(format!("{uname}.binarize"), 0, a_in);
                    let (oh, ow) = conv_extent(&unit.conv, h, w)?;
                    let a_out = (out_c * oh * ow) as u64;
                    if sign_conv {
                        count.push(format!("{uname}.conv"), macs(&unit.conv, oh, ow), 0);
                    } else {
                        count.push(format!("{uname}.conv"), 0, macs(&unit.conv, oh, ow));
                    }
                    if cfg.scaling != Scaling::None {
                        count.push(format!("{uname}.scale"), 0, a_out);
                    }
                    if unit.gate.is_some() {
                        let m = bottleneck_width(cin, cfg.gate_ratio) as u64;
                        let (ci, co) = (cin as u64, out_c as u64);
                        // pool, fc1 + bias + PReLU, fc2 + bias + sigmoid, gamma * G
                        let flops = a_in + (ci * m + 2 * m) + (m * co + 2 * co) + co;
                        count.push(format!("{uname}.gate"), 0, flops);
                    }
                    count.push(format!("{uname}.act"), 0, a_out);
                    if cfg.double_skip || u == 1 {
                        count.push(format!("{uname}.add"), 0, a_out);
                    }
                    (h, w) = (oh, ow);
                }
            }
        }
        if let Some(ds) = &block.downsample {
            let (oh, ow) = conv_extent(&ds.conv, hin, win)?;
            let binary_ds = variant.is_binary_architecture() && cfg.downsample == DownsampleMode::Binary;
            let m = macs(&ds.conv, oh, ow);
            if binary_ds {
                count.push(format!("{name}.downsample.binarize"), 0, (block.in_channels * hin * win) as u64);
            }
            if binary_ds && sign_conv {
                count.push(format!("{name}.downsample.conv"), m, 0);
            } else {
                count.push(format!("{name}.downsample.conv"), 0, m);
            }
            count.push(format!("{name}.downsample.bn"), 0, BN * (out_c * oh * ow) as u64);
        }
    }

    let last_c = net.blocks.last().map_or(cfg.widths[0], |b| b.out_channels);
    count.push("head.pool", 0, (last_c * h * w) as u64);
    count.push("head.fc", 0, (last_c * cfg.num_classes + cfg.num_classes) as u64);
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Arch, NetConfig, NetVariant, StemKind};

    fn arch(a: Arch) -> Network {
        Network::build(a.config(1000, StemKind::Imagenet)).unwrap()
    }

    #[test]
    fn totals_are_breakdown_sums() {
        for a in Arch::ALL {
            let c = count_ops(&arch(a), [3, 224, 224]).unwrap();
            assert_eq!(c.bops, c.layers.iter().map(|l| l.bops).sum::<u64>());
            assert_eq!(c.flops, c.layers.iter().map(|l| l.flops).sum::<u64>());
        }
    }

    #[test]
    fn real_resnet18_hand_count() {
        // conv MACs of a real ResNet-18 at 224: stem 118.0M + blocks 1.6982G
        // + downsample 5.8M, an independent tally
        let stem = 7 * 7 * 3 * 64 * 112 * 112;
        let mut body = 0;
        for (c, h) in [(64, 56), (128, 28), (256, 14), (512, 7)] {
            let cin = if c == 64 { 64 } else { c / 2 };
            body += 9 * cin * c * h * h + 3 * 9 * c * c * h * h;
            if c != 64 {
                body += cin * c * h * h;
            }
        }
        let c = count_ops(&arch(Arch::FullPrecision), [3, 224, 224]).unwrap();
        let conv_flops: u64 = c.layers.iter().filter(|l| l.name.contains("conv")).map(|l| l.flops).sum();
        assert_eq!(conv_flops, (stem + body) as u64);
        assert_eq!(c.bops, 0);
    }

    #[test]
    fn binary_macs_match_real_conv_macs() {
        let real = count_ops(&arch(Arch::FullPrecision), [3, 224, 224]).unwrap();
        let bin = count_ops(&arch(Arch::Bnn), [3, 224, 224]).unwrap();
        let body: u64 = real
            .layers
            .iter()
            .filter(|l| l.name.starts_with("stage") && l.name.contains("conv"))
            .map(|l| l.flops)
            .sum();
        assert_eq!(bin.bops, body);
    }

    #[test]
    fn non_binary_variants_have_no_bops() {
        for v in [NetVariant::RealTeacher, NetVariant::RealSoft, NetVariant::BinAct] {
            let net = Network::build(NetConfig::resnet18(v, 10, StemKind::Cifar)).unwrap();
            assert_eq!(count_ops(&net, [3, 32, 32]).unwrap().bops, 0);
        }
    }

    #[test]
    fn gating_overhead_small() {
        let with = count_ops(&arch(Arch::RealToBinary), [3, 224, 224]).unwrap();
        let mut cfg = Arch::RealToBinary.config(1000, StemKind::Imagenet);
        cfg.gating = false;
        let without = count_ops(&Network::build(cfg).unwrap(), [3, 224, 224]).unwrap();
        let overhead = (with.flops - without.flops) as f64 / without.flops as f64;
        assert!(overhead > 0.0 && overhead <= 0.02, "{overhead}");
        assert_eq!(with.bops, without.bops);
    }

    #[test]
    fn body_scales_with_area() {
        let net = Network::build(NetConfig::resnet18(NetVariant::FullBin, 10, StemKind::Cifar)).unwrap();
        let a = count_ops(&net, [3, 32, 32]).unwrap();
        let b = count_ops(&net, [3, 64, 64]).unwrap();
        assert_eq!(b.bops, 4 * a.bops);
        let conv = |c: &OpCount| -> u64 { c.layers.iter().filter(|l| l.name == "stem.conv").map(|l| l.flops).sum() };
        assert_eq!(conv(&b), 4 * conv(&a));
    }

    #[test]
    fn bad_input_rejected() {
        let net = arch(Arch::Bnn);
        assert!(count_ops(&net, [1, 224, 224]).is_err());
        assert!(count_ops(&net, [3, 0, 224]).is_err());
    }
}
