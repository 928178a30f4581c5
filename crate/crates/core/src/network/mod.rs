//! ResNet builders for the real teacher and the binary-architecture
//! variants of the progressive pipeline.
//!
//! A binary-architecture conv unit always runs
//! `BatchNorm -> binarize -> conv -> scale (-> gate) -> PReLU -> + skip`,
//! with the skip addition last. With double skips every unit carries its own
//! residual; without them one residual wraps each pair of units.
//!
//! `REAL_SOFT`, `BIN_ACT` and `FULL_BIN` share one parameter layout and only
//! differ in how the forward pass reads it: `tanh` or `sign` on activations,
//! real or `sign` weights. Switching variant never touches a parameter value.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::binconv::{analytic_alpha, binary_conv2d, pack};
use crate::error::{Error, Result};
use crate::gating::{GateLayer, GatingParams, DEFAULT_COMPRESSION};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::{BatchNormConfig, Mode, RunningStats, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NetVariant {
    /// Standard real-valued ResNet.
    RealTeacher,
    /// Binary architecture, `tanh` activations, real weights.
    RealSoft,
    /// Binary architecture, `sign` activations, real weights.
    BinAct,
    /// Binary architecture, `sign` activations and weights.
    FullBin,
}

impl NetVariant {
    pub const ALL: [NetVariant; 4] = [
        NetVariant::RealTeacher,
        NetVariant::RealSoft,
        NetVariant::BinAct,
        NetVariant::FullBin,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            NetVariant::RealTeacher => "REAL_TEACHER",
            NetVariant::RealSoft => "REAL_SOFT",
            NetVariant::BinAct => "BIN_ACT",
            NetVariant::FullBin => "FULL_BIN",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.tag().eq_ignore_ascii_case(tag) || v.tag().replace('_', "-").eq_ignore_ascii_case(tag))
    }

    pub fn binarize(self) -> Binarize {
        match self {
            NetVariant::RealTeacher => Binarize::None,
            NetVariant::RealSoft => Binarize::Tanh,
            NetVariant::BinAct | NetVariant::FullBin => Binarize::Sign,
        }
    }

    pub fn weight_mode(self) -> WeightMode {
        match self {
            NetVariant::FullBin => WeightMode::Binary,
            _ => WeightMode::Real,
        }
    }

    pub fn is_binary_architecture(self) -> bool {
        self != NetVariant::RealTeacher
    }
}

impl std::fmt::Display for NetVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Binarize {
    None,
    Tanh,
    Sign,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    Real,
    Binary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DownsampleMode {
    Real,
    Binary,
}

/// Per-channel rescaling of binary convolution outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scaling {
    /// No rescaling (plain BNN).
    None,
    /// `mean |W_o|`, recomputed from the latent weights (XNOR-style baseline).
    Analytic,
    /// Learned positive factors, stored as logarithms.
    Learned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StemKind {
    /// 3x3 stride-1 convolution, no pooling.
    Cifar,
    /// 7x7 stride-2 convolution followed by 3x3 stride-2 max pooling.
    Imagenet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub variant: NetVariant,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Output channels of each stage.
    pub widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub stem: StemKind,
    pub gating: bool,
    pub gate_ratio: usize,
    pub double_skip: bool,
    pub downsample: DownsampleMode,
    pub scaling: Scaling,
    pub prelu_per_channel: bool,
    pub batchnorm: BatchNormConfig,
    /// Seed of the parameter initialization.
    pub seed: u64,
}

impl NetConfig {
    /// ResNet-18 layout: four stages of two blocks.
    pub fn resnet18(variant: NetVariant, num_classes: usize, stem: StemKind) -> Self {
        NetConfig {
            variant,
            in_channels: 3,
            num_classes,
            widths: vec![64, 128, 256, 512],
            blocks_per_stage: vec![2, 2, 2, 2],
            stem,
            gating: variant.is_binary_architecture(),
            gate_ratio: DEFAULT_COMPRESSION,
            double_skip: true,
            downsample: DownsampleMode::Real,
            scaling: Scaling::Learned,
            prelu_per_channel: true,
            batchnorm: BatchNormConfig::default(),
            seed: 0,
        }
    }

    /// Narrow CIFAR-stem network with `blocks_per_stage` blocks per stage.
    pub fn reduced(variant: NetVariant, num_classes: usize, widths: Vec<usize>, blocks_per_stage: Vec<usize>) -> Self {
        NetConfig {
            widths,
            blocks_per_stage,
            ..Self::resnet18(variant, num_classes, StemKind::Cifar)
        }
    }

    pub fn with_variant(&self, variant: NetVariant) -> Self {
        NetConfig {
            variant,
            ..self.clone()
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        NetConfig { seed, ..self }
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks_per_stage.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.blocks_per_stage.len() {
            return Err(Error::Config(format!(
                "{} stage widths for {} stage depths",
                self.widths.len(),
                self.blocks_per_stage.len()
            )));
        }
        if self.widths.contains(&0) || self.blocks_per_stage.contains(&0) {
            return Err(Error::Config("stage widths and depths must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("{} classes; need at least 2", self.num_classes)));
        }
        if self.in_channels == 0 || self.gate_ratio == 0 {
            return Err(Error::Config("input channels and gate ratio must be positive".into()));
        }
        Ok(())
    }
}

/// Named ResNet-18 configurations compared by the operation counter, from
/// the plain binary baseline up to the full real-to-binary model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    /// Binary downsample, one skip per block, no scaling.
    Bnn,
    /// `Bnn` plus analytic per-channel scaling.
    Xnor,
    /// `Xnor` plus a skip around every conv unit.
    DoubleSkip,
    /// `DoubleSkip` with a real-valued downsample.
    BiReal,
    /// Learned scaling, data-driven gating, real downsample, double skips.
    RealToBinary,
    /// The real-valued teacher.
    FullPrecision,
}

impl Arch {
    pub const ALL: [Arch; 6] = [
        Arch::Bnn,
        Arch::Xnor,
        Arch::DoubleSkip,
        Arch::BiReal,
        Arch::RealToBinary,
        Arch::FullPrecision,
    ];

    /// Command-line name, e.g. `resnet18-bireal`.
    pub fn name(self) -> &'static str {
        match self {
            Arch::Bnn => "resnet18-bnn",
            Arch::Xnor => "resnet18-xnor",
            Arch::DoubleSkip => "resnet18-doubleskip",
            Arch::BiReal => "resnet18-bireal",
            Arch::RealToBinary => "resnet18-fullbin",
            Arch::FullPrecision => "resnet18-real",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name)
    }

    pub fn config(self, num_classes: usize, stem: StemKind) -> NetConfig {
        let base = NetConfig::resnet18(NetVariant::FullBin, num_classes, stem);
        let bnn = NetConfig {
            gating: false,
            double_skip: false,
            downsample: DownsampleMode::Binary,
            scaling: Scaling::None,
            ..base.clone()
        };
        match self {
            Arch::Bnn => bnn,
            Arch::Xnor => NetConfig {
                scaling: Scaling::Analytic,
                ..bnn
            },
            Arch::DoubleSkip => NetConfig {
                scaling: Scaling::Analytic,
                double_skip: true,
                ..bnn
            },
            Arch::BiReal => NetConfig {
                scaling: Scaling::Analytic,
                double_skip: true,
                downsample: DownsampleMode::Real,
                ..bnn
            },
            Arch::RealToBinary => base,
            Arch::FullPrecision => NetConfig::resnet18(NetVariant::RealTeacher, num_classes, stem),
        }
    }
}

/// Descriptive view of one residual block.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub binarize: Binarize,
    pub weight_mode: WeightMode,
    pub gating: bool,
    pub downsample_mode: Option<DownsampleMode>,
    pub double_skip: bool,
}

#[derive(Clone, Debug)]
pub(crate) struct ConvLayer {
    pub weight: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct BnLayer {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: usize,
}

/// One `BN -> binarize -> conv -> scale -> gate -> PReLU` unit.
#[derive(Clone, Debug)]
pub(crate) struct BinaryUnit {
    pub bn: BnLayer,
    pub conv: ConvLayer,
    pub log_scale: Option<ParamId>,
    pub gate: Option<GateLayer>,
    pub slope: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct Downsample {
    pub conv: ConvLayer,
    pub bn: BnLayer,
}

#[derive(Clone, Debug)]
pub(crate) enum BlockKind {
    Real {
        conv1: ConvLayer,
        bn1: BnLayer,
        conv2: ConvLayer,
        bn2: BnLayer,
    },
    Binary {
        units: [BinaryUnit; 2],
    },
}

#[derive(Clone, Debug)]
pub(crate) struct Block {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub kind: BlockKind,
    pub downsample: Option<Downsample>,
}

#[derive(Clone, Debug)]
pub(crate) struct Stem {
    pub conv: ConvLayer,
    pub bn: BnLayer,
    /// PReLU slope for binary architectures; ReLU otherwise.
    pub slope: Option<ParamId>,
    pub max_pool: bool,
}

#[derive(Clone, Debug)]
pub(crate) struct Head {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// A built network: structure, parameters and batch-norm running statistics.
#[derive(Clone, Debug)]
pub struct Network {
    pub(crate) config: NetConfig,
    pub(crate) store: ParamStore,
    pub(crate) stats: Vec<RunningStats>,
    pub(crate) stem: Stem,
    pub(crate) blocks: Vec<Block>,
    pub(crate) head: Head,
    /// Use the packed xnor-popcount kernel for fully binary units when no
    /// gradient is needed.
    pub packed_inference: bool,
}

/// How a forward pass treats parameters and batch norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pass {
    pub mode: Mode,
    /// Record parameters as trainable graph leaves.
    pub trainable: bool,
}

impl Pass {
    pub const TRAIN: Pass = Pass {
        mode: Mode::Train,
        trainable: true,
    };
    pub const EVAL: Pass = Pass {
        mode: Mode::Eval,
        trainable: false,
    };
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Block outputs, stem to head.
    pub transfer: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct BlockOutput {
    pub output: Var,
    /// Activation exposed for attention matching (the block output).
    pub transfer: Var,
    /// Batch-norm outputs of each unit, before binarization.
    pub prebin: Vec<Var>,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    stats: &'a mut Vec<RunningStats>,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> ConvLayer {
        let fan_in = (cin * kernel * kernel) as f64;
        let w = Tensor::randn(&[cout, cin, kernel, kernel], (2.0 / fan_in).sqrt(), &mut self.rng);
        ConvLayer {
            weight: self.store.add(format!("{name}.weight"), ParamKind::ConvWeight, w),
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            pad,
        }
    }

    fn bn(&mut self, name: &str, channels: usize) -> BnLayer {
        let gamma = self.store.add(format!("{name}.gamma"), ParamKind::BatchNormScale, Tensor::full(&[channels], 1.0));
        let beta = self.store.add(format!("{name}.beta"), ParamKind::BatchNormShift, Tensor::zeros(&[channels]));
        self.stats.push(RunningStats::new(channels));
        BnLayer {
            name: name.to_string(),
            gamma,
            beta,
            stats: self.stats.len() - 1,
        }
    }

    fn slope(&mut self, name: &str, channels: usize, per_channel: bool) -> ParamId {
        let n = if per_channel { channels } else { 1 };
        self.store.add(format!("{name}.slope"), ParamKind::PreluSlope, Tensor::full(&[n], 0.25))
    }
}

impl Network {
    pub fn build(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut stats = Vec::new();
        let mut b = Builder {
            store: &mut store,
            stats: &mut stats,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let binary_arch = config.variant.is_binary_architecture();
        let w0 = config.widths[0];
        let stem = match config.stem {
            StemKind::Cifar => Stem {
                conv: b.conv("stem.conv", config.in_channels, w0, 3, 1, 1),
                bn: b.bn("stem.bn", w0),
                slope: binary_arch.then(|| b.slope("stem.act", w0, config.prelu_per_channel)),
                max_pool: false,
            },
            StemKind::Imagenet => Stem {
                conv: b.conv("stem.conv", config.in_channels, w0, 7, 2, 3),
                bn: b.bn("stem.bn", w0),
                slope: binary_arch.then(|| b.slope("stem.act", w0, config.prelu_per_channel)),
                max_pool: true,
            },
        };

        let mut blocks = Vec::new();
        let mut cin = w0;
        for (s, (&width, &depth)) in config.widths.iter().zip(&config.blocks_per_stage).enumerate() {
            for i in 0..depth {
                let stride = if s > 0 && i == 0 { 2 } else { 1 };
                let name = format!("stage{s}.block{i}");
                let downsample = (stride != 1 || cin != width).then(|| Downsample {
                    conv: b.conv(&format!("{name}.downsample.conv"), cin, width, 1, stride, 0),
                    bn: b.bn(&format!("{name}.downsample.bn"), width),
                });
                let kind = if binary_arch {
                    let mut unit = |u: usize, uin: usize, ustride: usize| {
                        let uname = format!("{name}.unit{u}");
                        let bn = b.bn(&format!("{uname}.bn"), uin);
                        let conv = b.conv(&format!("{uname}.conv"), uin, width, 3, ustride, 1);
                        let log_scale = (config.scaling == Scaling::Learned).then(|| {
                            b.store.add(format!("{uname}.log_scale"), ParamKind::LogScale, Tensor::zeros(&[width]))
                        });
                        let gate = config.gating.then(|| {
                            let p = GatingParams::init(uin, width, config.gate_ratio, &mut b.rng);
                            GateLayer::register(b.store, &format!("{uname}.gate"), p)
                        });
                        let slope = b.slope(&format!("{uname}.act"), width, config.prelu_per_channel);
                        BinaryUnit {
                            bn,
                            conv,
                            log_scale,
                            gate,
                            slope,
                        }
                    };
                    let u0 = unit(0, cin, stride);
                    let u1 = unit(1, width, 1);
                    BlockKind::Binary { units: [u0, u1] }
                } else {
                    BlockKind::Real {
                        conv1: b.conv(&format!("{name}.conv1"), cin, width, 3, stride, 1),
                        bn1: b.bn(&format!("{name}.bn1"), width),
                        conv2: b.conv(&format!("{name}.conv2"), width, width, 3, 1, 1),
                        bn2: b.bn(&format!("{name}.bn2"), width),
                    }
                };
                blocks.push(Block {
                    in_channels: cin,
                    out_channels: width,
                    stride,
                    kind,
                    downsample,
                });
                cin = width;
            }
        }

        let bound = 1.0 / (cin as f64).sqrt();
        let fc_w = Tensor::uniform(&[config.num_classes, cin], bound, &mut b.rng);
        let fc_b = Tensor::uniform(&[config.num_classes], bound, &mut b.rng);
        let head = Head {
            weight: b.store.add("head.fc.weight", ParamKind::LinearWeight, fc_w),
            bias: b.store.add("head.fc.bias", ParamKind::Bias, fc_b),
        };
        let mut net = Network {
            config,
            store,
            stats,
            stem,
            blocks,
            head,
            packed_inference: true,
        };
        net.refresh_sign_constraints();
        Ok(net)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn variant(&self) -> NetVariant {
        self.config.variant
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.stats
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Shape of every parameter, by name, in registration order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.store.iter().map(|(_, p)| (p.name.clone(), p.value.shape().to_vec())).collect()
    }

    /// Number of convolutions whose activations and weights are both binary.
    pub fn binary_conv_count(&self) -> usize {
        let v = self.config.variant;
        if v.binarize() != Binarize::Sign || v.weight_mode() != WeightMode::Binary {
            return 0;
        }
        let per_block = 2;
        let ds = if self.config.downsample == DownsampleMode::Binary {
            self.blocks.iter().filter(|b| b.downsample.is_some()).count()
        } else {
            0
        };
        self.blocks.len() * per_block + ds
    }

    pub fn block_configs(&self) -> Vec<BlockConfig> {
        let v = self.config.variant;
        self.blocks
            .iter()
            .map(|b| BlockConfig {
                in_channels: b.in_channels,
                out_channels: b.out_channels,
                stride: b.stride,
                binarize: v.binarize(),
                weight_mode: v.weight_mode(),
                gating: matches!(&b.kind, BlockKind::Binary { units } if units[0].gate.is_some()),
                downsample_mode: b.downsample.as_ref().map(|_| {
                    if v.is_binary_architecture() {
                        self.config.downsample
                    } else {
                        DownsampleMode::Real
                    }
                }),
                double_skip: v.is_binary_architecture() && self.config.double_skip,
            })
            .collect()
    }

    /// Reinterprets the same parameters as another binary-architecture
    /// variant. No parameter value changes.
    pub fn set_variant(&mut self, variant: NetVariant) -> Result<()> {
        if variant.is_binary_architecture() != self.config.variant.is_binary_architecture() {
            return Err(Error::Config(format!(
                "cannot reinterpret a {} network as {}",
                self.config.variant, variant
            )));
        }
        self.config.variant = variant;
        self.refresh_sign_constraints();
        Ok(())
    }

    fn binarized_weight_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if self.config.variant.weight_mode() != WeightMode::Binary {
            return ids;
        }
        for b in &self.blocks {
            if let BlockKind::Binary { units } = &b.kind {
                ids.extend(units.iter().map(|u| u.conv.weight));
            }
            if let (Some(ds), DownsampleMode::Binary) = (&b.downsample, self.config.downsample) {
                ids.push(ds.conv.weight);
            }
        }
        ids
    }

    fn refresh_sign_constraints(&mut self) {
        let ids = self.binarized_weight_ids();
        for p in self.store.iter_mut() {
            p.sign_constrained = false;
        }
        for id in ids {
            self.store.get_mut(id).sign_constrained = true;
        }
    }

    /// Copies parameters and running statistics from a network with the same
    /// layout (the checkpoint hand-off between pipeline stages).
    pub fn load_from(&mut self, other: &Network) -> Result<()> {
        self.store.copy_values_from(&other.store)?;
        if self.stats.len() != other.stats.len() {
            return Err(Error::shape("batch-norm layer count differs"));
        }
        self.stats.clone_from(&other.stats);
        Ok(())
    }

    fn batchnorm(&mut self, g: &mut Graph, bn: &BnLayer, x: Var, pass: Pass) -> Result<Var> {
        let gamma = g.bind(&self.store, bn.gamma, pass.trainable);
        let beta = g.bind(&self.store, bn.beta, pass.trainable);
        let cfg = self.config.batchnorm;
        g.batchnorm2d(x, gamma, beta, &mut self.stats[bn.stats], pass.mode, cfg)
    }

    fn binarize(&self, g: &mut Graph, x: Var) -> Var {
        match self.config.variant.binarize() {
            Binarize::None => x,
            Binarize::Tanh => g.tanh(x),
            Binarize::Sign => g.sign_ste(x),
        }
    }

    fn conv_weight(&self, g: &mut Graph, conv: &ConvLayer, trainable: bool, binary: bool) -> Var {
        let w = g.bind(&self.store, conv.weight, trainable);
        if binary {
            g.sign_ste(w)
        } else {
            w
        }
    }

    /// Convolution of binarized activations; uses the packed kernel when both
    /// operands are signs and nothing needs a gradient.
    fn binary_unit_conv(&self, g: &mut Graph, a: Var, conv: &ConvLayer, trainable: bool, binary_weights: bool) -> Result<Var> {
        let signs = self.config.variant.binarize() == Binarize::Sign;
        if self.packed_inference && signs && binary_weights && !trainable && !g.requires_grad(a) {
            let w = self.store.value(conv.weight).map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
            let out = binary_conv2d(&pack(g.value(a))?, &pack(&w)?, conv.stride, conv.pad)?;
            return Ok(g.constant(out));
        }
        let w = self.conv_weight(g, conv, trainable, binary_weights);
        g.conv2d(a, w, conv.stride, conv.pad)
    }

    fn downsample(&mut self, g: &mut Graph, ds: &Downsample, x: Var, pass: Pass) -> Result<Var> {
        let binary = self.config.variant.is_binary_architecture() && self.config.downsample == DownsampleMode::Binary;
        let y = if binary {
            let a = self.binarize(g, x);
            let bw = self.config.variant.weight_mode() == WeightMode::Binary;
            self.binary_unit_conv(g, a, &ds.conv, pass.trainable, bw)?
        } else {
            let w = g.bind(&self.store, ds.conv.weight, pass.trainable);
            g.conv2d(x, w, ds.conv.stride, ds.conv.pad)?
        };
        self.batchnorm(g, &ds.bn, y, pass)
    }

    /// Runs one conv unit and returns `(output_before_skip, prebin)`.
    fn unit_forward(&mut self, g: &mut Graph, unit: &BinaryUnit, x: Var, pass: Pass) -> Result<(Var, Var)> {
        let u = self.batchnorm(g, &unit.bn, x, pass)?;
        let a = self.binarize(g, u);
        let bw = self.config.variant.weight_mode() == WeightMode::Binary;
        let mut c = self.binary_unit_conv(g, a, &unit.conv, pass.trainable, bw)?;
        match self.config.scaling {
            Scaling::Learned => {
                let id = unit.log_scale.ok_or_else(|| Error::Config("missing learned scale".into()))?;
                let log_s = g.bind(&self.store, id, pass.trainable);
                let s = g.exp(log_s);
                c = g.scale_channels(c, s)?;
            }
            Scaling::Analytic => {
                let alpha = analytic_alpha(self.store.value(unit.conv.weight))?;
                let s = g.constant(Tensor::new(vec![alpha.len()], alpha)?);
                c = g.scale_channels(c, s)?;
            }
            Scaling::None => {}
        }
        if let Some(gate) = &unit.gate {
            let gv = gate.forward(g, &self.store, u, pass.trainable)?;
            c = g.scale_sample_channels(c, gv)?;
        }
        let slope = g.bind(&self.store, unit.slope, pass.trainable);
        let y = g.prelu(c, slope)?;
        Ok((y, u))
    }

    /// Forward pass of block `index`.
    pub fn block_forward(&mut self, g: &mut Graph, index: usize, x: Var, pass: Pass) -> Result<BlockOutput> {
        let block = self
            .blocks
            .get(index)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("block {index} out of range")))?;
        let (_, c, _, _) = g.value(x).dims4()?;
        if c != block.in_channels {
            return Err(Error::shape(format!(
                "block {index} expects {} channels, got {c}",
                block.in_channels
            )));
        }
        let skip = match &block.downsample {
            Some(ds) => self.downsample(g, ds, x, pass)?,
            None => x,
        };
        match &block.kind {
            BlockKind::Real { conv1, bn1, conv2, bn2 } => {
                let w1 = g.bind(&self.store, conv1.weight, pass.trainable);
                let h = g.conv2d(x, w1, conv1.stride, conv1.pad)?;
                let h = self.batchnorm(g, bn1, h, pass)?;
                let h = g.relu(h);
                let w2 = g.bind(&self.store, conv2.weight, pass.trainable);
                let h = g.conv2d(h, w2, conv2.stride, conv2.pad)?;
                let h = self.batchnorm(g, bn2, h, pass)?;
                let sum = g.add(h, skip)?;
                let out = g.relu(sum);
                Ok(BlockOutput {
                    output: out,
                    transfer: out,
                    prebin: Vec::new(),
                })
            }
            BlockKind::Binary { units } => {
                let (y0, p0) = self.unit_forward(g, &units[0], x, pass)?;
                let out = if self.config.double_skip {
                    let h = g.add(y0, skip)?;
                    let (y1, p1) = self.unit_forward(g, &units[1], h, pass)?;
                    let out = g.add(y1, h)?;
                    return Ok(BlockOutput {
                        output: out,
                        transfer: out,
                        prebin: vec![p0, p1],
                    });
                } else {
                    let (y1, p1) = self.unit_forward(g, &units[1], y0, pass)?;
                    (g.add(y1, skip)?, p1)
                };
                Ok(BlockOutput {
                    output: out.0,
                    transfer: out.0,
                    prebin: vec![p0, out.1],
                })
            }
        }
    }

    /// Logits plus the output of every block.
    pub fn forward(&mut self, g: &mut Graph, x: Var, pass: Pass) -> Result<ForwardOutput> {
        let (_, c, _, _) = g.value(x).dims4()?;
        if c != self.config.in_channels {
            return Err(Error::shape(format!(
                "network expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let stem = self.stem.clone();
        let w = g.bind(&self.store, stem.conv.weight, pass.trainable);
        let h = g.conv2d(x, w, stem.conv.stride, stem.conv.pad)?;
        let h = self.batchnorm(g, &stem.bn, h, pass)?;
        let mut h = match stem.slope {
            Some(id) => {
                let s = g.bind(&self.store, id, pass.trainable);
                g.prelu(h, s)?
            }
            None => g.relu(h),
        };
        if stem.max_pool {
            h = g.max_pool2d(h, 3, 2, 1)?;
        }
        let mut transfer = Vec::with_capacity(self.blocks.len());
        for i in 0..self.blocks.len() {
            let out = self.block_forward(g, i, h, pass)?;
            transfer.push(out.transfer);
            h = out.output;
        }
        let pooled = g.global_avg_pool(h)?;
        let fw = g.bind(&self.store, self.head.weight, pass.trainable);
        let fb = g.bind(&self.store, self.head.bias, pass.trainable);
        let logits = g.linear(pooled, fw, fb)?;
        Ok(ForwardOutput { logits, transfer })
    }

    /// Eval-mode logits for a batch, without recording gradients.
    pub fn predict(&mut self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let out = self.forward(&mut g, x, Pass::EVAL)?;
        Ok(g.value(out.logits).clone())
    }

    /// Clamps sign-constrained latent weights to `[-1, 1]`.
    pub fn clamp_latent_weights(&mut self) {
        for p in self.store.iter_mut() {
            if p.sign_constrained {
                p.value.data_mut().iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
            }
        }
    }

    pub(crate) fn bn_layers(&self) -> Vec<&BnLayer> {
        let mut out = vec![&self.stem.bn];
        for b in &self.blocks {
            if let Some(ds) = &b.downsample {
                out.push(&ds.bn);
            }
            match &b.kind {
                BlockKind::Real { bn1, bn2, .. } => {
                    out.push(bn1);
                    out.push(bn2);
                }
                BlockKind::Binary { units } => out.extend(units.iter().map(|u| &u.bn)),
            }
        }
        out
    }
}
