//! Staged teacher-student training.
//!
//! A [`Schedule`] is a list of stages. Each stage trains one student variant,
//! optionally against a frozen teacher taken from an earlier stage or from a
//! checkpoint, and hands its result to the next stage. The full progression
//! is
//!
//! ```text
//! REAL_TEACHER --att+kd--> REAL_SOFT --att+kd--> BIN_ACT --kd--> FULL_BIN
//! ```
//!
//! with every binary-architecture student starting from its predecessor.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::{AugmentPolicy, Dataset};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::network::{load_checkpoint, save_checkpoint, NetConfig, NetVariant, Network, Pass};
use crate::tensor::Tensor;
use crate::trainer::{evaluate, train_stage, EvalResult, MetricsLog, OptimizerPolicy, RunOptions, StageReport};

/// A network that only runs eval-mode forward passes.
#[derive(Clone, Debug)]
pub struct FrozenTeacher {
    net: Network,
}

/// Teacher logits and transfer-point activations for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherOutputs {
    pub logits: Tensor,
    pub transfer: Vec<Tensor>,
}

pub fn freeze_teacher(net: Network) -> FrozenTeacher {
    FrozenTeacher { net }
}

impl FrozenTeacher {
    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn variant(&self) -> NetVariant {
        self.net.variant()
    }

    /// Batch norm reads running statistics and no parameter enters the
    /// graph as trainable, so outputs depend on each sample alone.
    pub fn outputs(&mut self, x: &Tensor) -> Result<TeacherOutputs> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.net.forward(&mut g, xv, Pass::EVAL)?;
        Ok(TeacherOutputs {
            logits: g.value(out.logits).clone(),
            transfer: out.transfer.iter().map(|&v| g.value(v).clone()).collect(),
        })
    }

    pub fn into_network(self) -> Network {
        self.net
    }
}

/// Where a stage's student starts.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Init {
    /// Previous student when the layouts match, otherwise fresh.
    #[default]
    Auto,
    Fresh,
    /// Previous student; an error when there is none or layouts differ.
    Previous,
    Checkpoint(PathBuf),
}

impl TryFrom<String> for Init {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        Ok(match s.as_str() {
            "auto" => Init::Auto,
            "fresh" => Init::Fresh,
            "previous" => Init::Previous,
            "" => return Err("empty init".into()),
            path => Init::Checkpoint(PathBuf::from(path)),
        })
    }
}

impl From<Init> for String {
    fn from(i: Init) -> String {
        match i {
            Init::Auto => "auto".into(),
            Init::Fresh => "fresh".into(),
            Init::Previous => "previous".into(),
            Init::Checkpoint(p) => p.display().to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    pub student: NetVariant,
    /// Teacher variant; resolved to the latest earlier stage that trained
    /// it unless `teacher_checkpoint` is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<NetVariant>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub init: Init,
    #[serde(default)]
    pub losses: LossConfig,
    #[serde(default)]
    pub optimizer: OptimizerPolicy,
    /// Overrides `optimizer.epochs`, compressing the step schedule to match.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
}

impl StageSpec {
    pub fn new(name: &str, student: NetVariant, teacher: Option<NetVariant>, losses: LossConfig) -> Self {
        let optimizer = if student.weight_mode() == crate::network::WeightMode::Binary {
            OptimizerPolicy::second_stage()
        } else {
            OptimizerPolicy::first_stage()
        };
        StageSpec {
            name: name.into(),
            student,
            teacher,
            teacher_checkpoint: None,
            init: Init::Auto,
            losses,
            optimizer,
            epochs: None,
        }
    }

    pub fn policy(&self) -> OptimizerPolicy {
        match self.epochs {
            Some(e) if e != self.optimizer.epochs => self.optimizer.rescaled(e),
            _ => self.optimizer.clone(),
        }
    }
}

/// Network layout shared by every stage plus the ordered stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub network: NetConfig,
    #[serde(rename = "stage")]
    pub stages: Vec<StageSpec>,
}

impl Schedule {
    /// The three teacher-student steps, starting from a trained real
    /// teacher supplied as a checkpoint or by an earlier stage.
    pub fn progressive_steps(losses: &LossConfig) -> Vec<StageSpec> {
        vec![
            StageSpec::new("step1", NetVariant::RealSoft, Some(NetVariant::RealTeacher), losses.clone()),
            StageSpec::new("step2", NetVariant::BinAct, Some(NetVariant::RealSoft), losses.clone()),
            StageSpec::new(
                "step3",
                NetVariant::FullBin,
                Some(NetVariant::BinAct),
                LossConfig {
                    temperature: losses.temperature,
                    ..LossConfig::kd_only()
                },
            ),
        ]
    }

    /// Teacher pre-training followed by the three progressive steps.
    pub fn real_to_binary(network: NetConfig) -> Self {
        let mut stages = vec![StageSpec::new("teacher", NetVariant::RealTeacher, None, LossConfig::ce_only())];
        stages.extend(Self::progressive_steps(&LossConfig::default()));
        Schedule { network, stages }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Schedule = toml::from_str(text).map_err(|e| Error::Config(format!("schedule: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("schedule: {e}")))
    }

    /// Sets every stage to `epochs` epochs.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        for s in &mut self.stages {
            s.epochs = Some(epochs);
        }
        self
    }

    /// Applies `f` to every stage's optimizer policy.
    pub fn map_policies(mut self, mut f: impl FnMut(&mut OptimizerPolicy)) -> Self {
        for s in &mut self.stages {
            f(&mut s.optimizer);
        }
        self
    }

    /// Seeds each stage's data order with `seed + stage index`, and the
    /// network initialization with `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.network.seed = seed;
        for (k, s) in self.stages.iter_mut().enumerate() {
            s.optimizer.seed = seed.wrapping_add(k as u64);
        }
        self
    }

    /// Settings for small images: no crop/rotation augmentation, no mixup.
    pub fn without_augmentation(self) -> Self {
        self.map_policies(|p| {
            p.augment = AugmentPolicy::Eval;
            p.mixup_alpha = 0.0;
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if self.stages.is_empty() {
            return Err(Error::Config("schedule has no stages".into()));
        }
        for (k, s) in self.stages.iter().enumerate() {
            let err = |message: String| Error::Stage { stage: k, message };
            s.losses.validate().map_err(|e| err(e.to_string()))?;
            s.policy().validate().map_err(|e| err(e.to_string()))?;
            if s.losses.needs_teacher() && s.teacher.is_none() {
                return Err(err("attention or logit matching needs a teacher".into()));
            }
            if let (Some(t), None) = (s.teacher, &s.teacher_checkpoint) {
                if !self.stages[..k].iter().any(|p| p.student == t) {
                    return Err(err(format!("missing teacher checkpoint: no earlier stage trains {t}")));
                }
            }
        }
        Ok(())
    }
}

/// Named reduced-scale ablation rows, from the strong baseline to the full
/// real-to-binary recipe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Two-stage training (binary activations, then binary weights), CE only.
    Sb,
    /// `Sb` plus attention matching to a real teacher.
    SbAtt,
    /// `SbAtt` plus logit matching.
    SbAttHkd,
    /// `Sb` with gating.
    SbG,
    /// Progressive teacher-student steps without gating.
    SbProgTs,
    /// Progressive teacher-student steps with gating.
    RealToBin,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::Sb,
        Preset::SbAtt,
        Preset::SbAttHkd,
        Preset::SbG,
        Preset::SbProgTs,
        Preset::RealToBin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Sb => "sb",
            Preset::SbAtt => "sb-att",
            Preset::SbAttHkd => "sb-att-hkd",
            Preset::SbG => "sb-g",
            Preset::SbProgTs => "sb-prog-ts",
            Preset::RealToBin => "real-to-bin",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    pub fn gating(self) -> bool {
        matches!(self, Preset::SbG | Preset::RealToBin)
    }

    /// Stages of this preset over `network` (the variant field is ignored).
    pub fn schedule(self, network: &NetConfig) -> Schedule {
        let network = NetConfig {
            gating: self.gating(),
            ..network.clone()
        };
        let teacher = || StageSpec::new("teacher", NetVariant::RealTeacher, None, LossConfig::ce_only());
        let two_stage = |losses: LossConfig, with_teacher: bool| {
            let t = with_teacher.then_some(NetVariant::RealTeacher);
            let mut stages = Vec::new();
            if with_teacher {
                stages.push(teacher());
            }
            stages.push(StageSpec::new("stage1", NetVariant::BinAct, t, losses.clone()));
            stages.push(StageSpec::new("stage2", NetVariant::FullBin, t, losses));
            stages
        };
        let stages = match self {
            Preset::Sb | Preset::SbG => two_stage(LossConfig::ce_only(), false),
            Preset::SbAtt => two_stage(
                LossConfig {
                    kd_weight: 0.0,
                    ..LossConfig::default()
                },
                true,
            ),
            Preset::SbAttHkd => two_stage(LossConfig::default(), true),
            Preset::SbProgTs | Preset::RealToBin => {
                let mut s = vec![teacher()];
                s.extend(Schedule::progressive_steps(&LossConfig::default()));
                s
            }
        };
        Schedule { network, stages }
    }
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub name: String,
    pub variant: NetVariant,
    pub report: StageReport,
    pub test: Option<EvalResult>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct ProgressiveResult {
    pub stages: Vec<StageOutcome>,
    pub network: Network,
}

impl ProgressiveResult {
    pub fn final_test(&self) -> Option<EvalResult> {
        self.stages.last().and_then(|s| s.test)
    }
}

/// Runs every stage in order. With `out_dir`, each stage's checkpoint is
/// written to `<out_dir>/stage<k>-<name>.r2b`.
pub fn run_progressive(
    schedule: &Schedule,
    train: &Dataset,
    test: Option<&Dataset>,
    out_dir: Option<&Path>,
    opts: &RunOptions,
    log: &mut MetricsLog,
) -> Result<ProgressiveResult> {
    schedule.validate()?;
    let mut trained: Vec<Network> = Vec::new();
    let mut outcomes = Vec::new();
    for (k, spec) in schedule.stages.iter().enumerate() {
        let err = |message: String| Error::Stage { stage: k, message };
        let mut teacher = match (spec.teacher, &spec.teacher_checkpoint) {
            (None, _) => None,
            (Some(variant), Some(path)) => {
                if !path.exists() {
                    return Err(err(format!("missing teacher checkpoint {}", path.display())));
                }
                let (net, _) = load_checkpoint(path).map_err(|e| err(format!("teacher checkpoint: {e}")))?;
                if net.variant() != variant {
                    return Err(err(format!("teacher checkpoint holds {}, expected {variant}", net.variant())));
                }
                Some(freeze_teacher(net))
            }
            (Some(variant), None) => {
                let net = trained
                    .iter()
                    .rev()
                    .find(|n| n.variant() == variant)
                    .ok_or_else(|| err(format!("missing teacher checkpoint: no earlier stage trains {variant}")))?;
                Some(freeze_teacher(net.clone()))
            }
        };

        let config = schedule.network.with_variant(spec.student).with_seed(schedule.network.seed.wrapping_add(k as u64));
        let mut student = Network::build(config)?;
        let previous = trained.last();
        let compatible = |p: &Network| p.variant().is_binary_architecture() == spec.student.is_binary_architecture();
        match &spec.init {
            Init::Fresh => {}
            Init::Auto => {
                if let Some(p) = previous.filter(|p| compatible(p)) {
                    student.load_from(p).map_err(|e| err(format!("shape-chain break: {e}")))?;
                }
            }
            Init::Previous => {
                let p = previous.ok_or_else(|| err("shape-chain break: no previous stage".into()))?;
                if !compatible(p) {
                    return Err(err(format!("shape-chain break: cannot start {} from {}", spec.student, p.variant())));
                }
                student.load_from(p).map_err(|e| err(format!("shape-chain break: {e}")))?;
            }
            Init::Checkpoint(path) => {
                let (p, _) = load_checkpoint(path).map_err(|e| err(format!("init checkpoint: {e}")))?;
                student.load_from(&p).map_err(|e| err(format!("shape-chain break: {e}")))?;
            }
        }

        let stage_opts = RunOptions { stage: k, ..opts.clone() };
        let report = train_stage(&mut student, train, test, &spec.policy(), &spec.losses, teacher.as_mut(), &stage_opts, log)
            .map_err(|e| match e {
                e @ (Error::Stage { .. } | Error::NonFiniteLoss { .. }) => e,
                other => err(other.to_string()),
            })?;
        let test_eval = match report.epochs.last().and_then(|e| e.test) {
            Some(t) => Some(t),
            None => test.map(|d| evaluate(&student, d, opts.eval_batch, opts.threads)).transpose()?,
        };
        let checkpoint = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let path = dir.join(format!("stage{k}-{}.r2b", spec.name));
                save_checkpoint(&path, &student, &train.normalization_entries())?;
                Some(path)
            }
            None => None,
        };
        outcomes.push(StageOutcome {
            name: spec.name.clone(),
            variant: spec.student,
            report,
            test: test_eval,
            checkpoint,
        });
        trained.push(student);
    }
    Ok(ProgressiveResult {
        stages: outcomes,
        network: trained.pop().expect("schedule has at least one stage"),
    })
}
