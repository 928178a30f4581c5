//! `r2b` command-line entry point.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use config::{DatasetKind, RunConfig};
use r2b::binconv::{binary_conv2d, pack};
use r2b::cost::count_ops;
use r2b::distill::{run_progressive, Init, Preset, Schedule};
use r2b::network::{load_checkpoint, save_checkpoint, Arch, StemKind};
use r2b::tensor::{conv2d, conv2d_ref, Tensor};
use r2b::trainer::{evaluate, MetricsLog, RunOptions};

#[derive(Parser)]
#[command(name = "r2b", version, about = "Binary ResNets trained from a real-valued teacher")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one stage of a preset.
    Train(RunArgs),
    /// Run every stage of a preset or schedule.
    Distill(RunArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Count BOPs and FLOPs of a reference architecture.
    CountOps(CountArgs),
    /// Time the packed binary convolution against the float kernels.
    BenchKernel(BenchArgs),
    /// Run the built-in oracle suites.
    Selftest(SelftestArgs),
}

/// Flags shared by `train` and `distill`; each overrides the config file.
#[derive(Args, Clone, Debug, Default)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    dataset: Option<DatasetKind>,
    #[arg(long, env = "R2B_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// sb, sb-att, sb-att-hkd, sb-g, sb-prog-ts or real-to-bin.
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
    /// Stage name or index within the preset (train only).
    #[arg(long)]
    stage: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Threads used for evaluation.
    #[arg(long)]
    threads: Option<usize>,
    /// Drop wall-clock fields and evaluate on one thread so reruns match byte for byte.
    #[arg(long)]
    deterministic: bool,
    /// Teacher checkpoint (train only).
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Student initialization checkpoint (train only).
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    dataset: Option<DatasetKind>,
    #[arg(long, env = "R2B_DATA_DIR")]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct CountArgs {
    /// resnet18-bnn, -xnor, -doubleskip, -bireal, -fullbin or -real.
    #[arg(long, default_value = "resnet18-fullbin")]
    arch: String,
    /// Square input side.
    #[arg(long, default_value_t = 224)]
    input: usize,
    #[arg(long, default_value_t = 1000)]
    classes: usize,
    /// Use the 3x3 small-image stem instead of the 7x7 one.
    #[arg(long)]
    cifar_stem: bool,
    /// Print per-layer rows.
    #[arg(long)]
    layers: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    Preset::from_name(s).ok_or_else(|| {
        let names: Vec<_> = Preset::ALL.iter().map(|p| p.name()).collect();
        format!("unknown preset {s:?}; expected one of {}", names.join(", "))
    })
}

/// defaults < file < flags
fn resolve(args: &RunArgs) -> Result<RunConfig> {
    let mut c = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = &args.$field {
                c.$field = v.clone().into();
            }
        )*};
    }
    set!(seed, dataset, preset, threads);
    set!(data_dir, stage, epochs, batch_size, lr, teacher, init);
    if args.deterministic {
        c.deterministic = true;
    }
    if c.deterministic {
        c.threads = 1;
    }
    Ok(c)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Creates the run directory and writes the resolved config and its hash,
/// together with the hash of the running binary.
fn prepare_run_dir(out: &Path, config: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let text = config.to_toml()?;
    std::fs::write(out.join("config.toml"), &text)?;
    let binary = std::env::current_exe()
        .and_then(std::fs::read)
        .map(|b| sha256_hex(&b))
        .unwrap_or_else(|_| "unknown".into());
    std::fs::write(out.join("hash.txt"), format!("config {}\nbinary {binary}\n", sha256_hex(text.as_bytes())))?;
    Ok(())
}

fn run_schedule(config: &RunConfig, schedule: &Schedule, out: &Path) -> Result<()> {
    let (train, test) = config.load_data()?;
    let mut log = MetricsLog::create(out.join("metrics.jsonl"), out.join("metrics.csv"))?;
    let opts = RunOptions {
        deterministic: config.deterministic,
        threads: config.threads.max(1),
        ..RunOptions::default()
    };
    let result = run_progressive(schedule, &train, Some(&test), Some(out), &opts, &mut log)?;
    save_checkpoint(out.join("model.r2b"), &result.network, &train.normalization_entries())?;
    for s in &result.stages {
        let t = s.test.map(|t| format!("test top1 {:.2} top5 {:.2}", t.top1, t.top5)).unwrap_or_default();
        println!("{} ({}): {t}", s.name, s.variant);
    }
    println!("run directory: {}", out.display());
    Ok(())
}

fn train(args: RunArgs) -> Result<()> {
    let config = resolve(&args)?;
    let full = config.schedule();
    let k = match &config.stage {
        None => 0,
        Some(s) => match s.parse::<usize>() {
            Ok(i) if i < full.stages.len() => i,
            _ => full
                .stages
                .iter()
                .position(|st| &st.name == s)
                .ok_or_else(|| {
                    let names: Vec<_> = full.stages.iter().map(|s| s.name.as_str()).collect();
                    anyhow!("preset {} has no stage {s:?} (stages: {})", config.preset.name(), names.join(", "))
                })?,
        },
    };
    let mut stage = full.stages[k].clone();
    if let Some(variant) = stage.teacher {
        let Some(t) = &config.teacher else {
            bail!("stage {} matches a {variant} teacher; pass --teacher <checkpoint>", stage.name);
        };
        stage.teacher_checkpoint = Some(t.clone());
    }
    if let Some(p) = &config.init {
        stage.init = Init::Checkpoint(p.clone());
    }
    let schedule = Schedule {
        network: full.network,
        stages: vec![stage],
    };
    prepare_run_dir(&args.out, &config)?;
    run_schedule(&config, &schedule, &args.out)
}

fn distill(args: RunArgs) -> Result<()> {
    let config = resolve(&args)?;
    let schedule = config.schedule();
    prepare_run_dir(&args.out, &config)?;
    std::fs::write(args.out.join("schedule.toml"), schedule.to_toml()?)?;
    run_schedule(&config, &schedule, &args.out)
}

fn eval(args: EvalArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = args.dataset {
        config.dataset = d;
    }
    if let Some(d) = args.data_dir {
        config.data_dir = Some(d);
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    let (net, _) = load_checkpoint(&args.checkpoint)?;
    let (_, test) = config.load_data()?;
    let r = evaluate(&net, &test, 256, args.threads)?;
    println!("{}: top1 {:.2} top5 {:.2} loss {:.4}", net.variant(), r.top1, r.top5, r.loss);
    if let Some(out) = args.out {
        std::fs::create_dir_all(&out)?;
        std::fs::write(out.join("eval.json"), serde_json::to_string_pretty(&r)?)?;
    }
    Ok(())
}

fn count(args: CountArgs) -> Result<()> {
    let arch = Arch::from_name(&args.arch).ok_or_else(|| anyhow!("unknown architecture {:?}", args.arch))?;
    let stem = if args.cifar_stem { StemKind::Cifar } else { StemKind::Imagenet };
    let net = r2b::network::Network::build(arch.config(args.classes, stem))?;
    let ops = count_ops(&net, [3, args.input, args.input])?;
    if args.layers {
        print!("{}", ops.table());
    }
    println!(
        "{} @ {}x{}: {:.3e} BOPs, {:.3e} FLOPs",
        arch.name(),
        args.input,
        args.input,
        ops.bops as f64,
        ops.flops as f64
    );
    if let Some(out) = args.out {
        std::fs::create_dir_all(&out)?;
        std::fs::write(out.join(format!("{}.json", arch.name())), serde_json::to_string_pretty(&ops)?)?;
    }
    Ok(())
}

fn bench(args: BenchArgs) -> Result<()> {
    // (batch, channels, side, kernel, stride)
    let shapes = [(1, 64, 32, 3, 1), (1, 128, 16, 3, 1), (1, 256, 8, 3, 1), (1, 512, 4, 3, 1), (8, 64, 16, 3, 2)];
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let time = |f: &mut dyn FnMut() -> Result<Tensor>| -> Result<(f64, Tensor)> {
        let mut best = f64::INFINITY;
        let mut out = None;
        for _ in 0..args.repeats.max(1) {
            let t = Instant::now();
            out = Some(f()?);
            best = best.min(t.elapsed().as_secs_f64() * 1e3);
        }
        Ok((best, out.expect("at least one repeat")))
    };
    let mut rows = Vec::new();
    println!("{:>24} {:>12} {:>12} {:>12} {:>8}", "shape", "packed ms", "im2col ms", "direct ms", "speedup");
    for (n, c, side, k, stride) in shapes {
        let x = Tensor::random_signs(&[n, c, side, side], &mut rng);
        let w = Tensor::random_signs(&[c, c, k, k], &mut rng);
        // weights are packed once ahead of inference; activations every call
        let wp = pack(&w)?;
        let (packed, a) = time(&mut || Ok(binary_conv2d(&pack(&x)?, &wp, stride, 1)?))?;
        let (gemm, b) = time(&mut || Ok(conv2d(&x, &w, stride, 1)?))?;
        let (direct, _) = time(&mut || Ok(conv2d_ref(&x, &w, stride, 1)?))?;
        if a != b {
            bail!("packed and float convolutions disagree at {n}x{c}x{side}x{side}");
        }
        let shape = format!("{n}x{c}x{side}x{side} k{k} s{stride}");
        println!("{shape:>24} {packed:>12.3} {gemm:>12.3} {direct:>12.3} {:>7.2}x", gemm / packed);
        rows.push(serde_json::json!({"shape": shape, "packed_ms": packed, "im2col_ms": gemm, "direct_ms": direct}));
    }
    if let Some(out) = args.out {
        std::fs::create_dir_all(&out)?;
        std::fs::write(out.join("bench-kernel.json"), serde_json::to_string_pretty(&rows)?)?;
    }
    Ok(())
}

fn selftest(args: SelftestArgs) -> Result<bool> {
    let results = r2b::selftest::run_all(args.seed);
    for r in &results {
        println!("{} {:<12} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    if let Some(out) = args.out {
        std::fs::create_dir_all(&out)?;
        std::fs::write(out.join("selftest.json"), serde_json::to_string_pretty(&results)?)?;
    }
    Ok(results.iter().all(|r| r.passed))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a).map(|_| true),
        Command::Distill(a) => distill(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::CountOps(a) => count(a).map(|_| true),
        Command::BenchKernel(a) => bench(a).map(|_| true),
        Command::Selftest(a) => selftest(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
