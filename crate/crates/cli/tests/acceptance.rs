//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so the lines reach the terminal. The
//! CIFAR-10 ablation only runs with `-- --ignored` (or `--include-ignored`)
//! and `R2B_DATA_DIR` pointing at the CIFAR-10 binary batches.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use r2b::binconv::{binary_conv2d, pack};
use r2b::cost::count_ops;
use r2b::data::{load_cifar, synthetic_dataset, CifarVariant, SyntheticSpec};
use r2b::distill::{run_progressive, Preset, Schedule, StageSpec};
use r2b::losses::{attention_map, attention_transfer_loss, kd_loss, LossConfig};
use r2b::network::{load_checkpoint, save_checkpoint, Arch, NetConfig, NetVariant, Network, StemKind};
use r2b::selftest::gradient_cases;
use r2b::tensor::Tensor;
use r2b::trainer::{evaluate, train_stage, MetricsLog, OptimizerPolicy, RunOptions};

/// Published 224x224 totals: (arch, BOPs, FLOPs).
const PUBLISHED: [(Arch, f64, f64); 6] = [
    (Arch::RealToBinary, 1.676e9, 1.564e8),
    (Arch::BiReal, 1.676e9, 1.544e8),
    (Arch::DoubleSkip, 1.695e9, 1.351e8),
    (Arch::Xnor, 1.695e9, 1.333e8),
    (Arch::Bnn, 1.695e9, 1.314e8),
    (Arch::FullPrecision, 0.0, 1.826e9),
];
const COST_TOL: f64 = 0.02;
const GATING_MAX_SHARE: f64 = 0.02;
const KERNEL_CASES: usize = 1000;
const KERNEL_BUDGET: Duration = Duration::from_secs(60);
const GRAD_POINTS: usize = 5;
const GRAD_TOL: f64 = 1e-3;
const IDENTITY_TOL: f64 = 1e-6;
const SMOKE_SEEDS: u64 = 5;
const SMOKE_MIN_TOP1: f64 = 90.0;
const SMOKE_EPOCHS_PER_STAGE: usize = 5;
const SMOKE_BUDGET: Duration = Duration::from_secs(600);
const ABLATION_SLACK: f64 = 0.3;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

/// Direct seven-loop convolution with zero padding.
fn direct_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let s = x.shape();
    let (n, c, h, wd) = (s[0], s[1], s[2], s[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.at4(b, ic, iy as usize, ix as usize) * w.at4(oc, ic, ky, kx);
                                }
                            }
                        }
                    }
                    out[((b * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

fn kernel_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let start = Instant::now();
    for case in 0..KERNEL_CASES {
        let n = rng.random_range(1..=4);
        let c = rng.random_range(1..=96);
        let o = rng.random_range(1..=6);
        let k = [1, 3][rng.random_range(0..2)];
        let stride = rng.random_range(1..=2);
        let pad = rng.random_range(0..=1);
        let h = rng.random_range(k.max(2)..=9);
        let w = rng.random_range(k.max(2)..=9);
        let x = Tensor::random_signs(&[n, c, h, w], &mut rng);
        let wt = Tensor::random_signs(&[o, c, k, k], &mut rng);
        let got = binary_conv2d(&pack(&x).unwrap(), &pack(&wt).unwrap(), stride, pad).unwrap();
        if got.data() != direct_conv(&x, &wt, stride, pad).as_slice() {
            return outcome(false, format!("case {case} (N={n} C={c} k={k} s={stride} p={pad}) differs"));
        }
    }
    let took = start.elapsed();
    outcome(took < KERNEL_BUDGET, format!("{KERNEL_CASES} cases exact in {:.1}s", took.as_secs_f64()))
}

fn gradient_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    for _ in 0..GRAD_POINTS {
        for (name, err) in gradient_cases(&mut rng).unwrap() {
            match worst.iter_mut().find(|(n, _)| *n == name) {
                Some(w) => w.1 = w.1.max(err),
                None => worst.push((name, err)),
            }
        }
    }
    // sign STE: forward sign with sign(0) = +1, gradient passed on |x| <= 1
    let mut g = r2b::autograd::Graph::new();
    let xs = vec![-1.5, -1.0, -0.3, 0.0, 0.3, 1.0, 1.5];
    let up = vec![0.5, -2.0, 1.0, 3.0, -1.0, 0.25, 4.0];
    let x = g.leaf(Tensor::new(vec![7], xs.clone()).unwrap());
    let y = g.sign_ste(x);
    let loss = g.project(y, &Tensor::new(vec![7], up.clone()).unwrap()).unwrap();
    let grads = g.gradients(loss).unwrap();
    let ste_ok = xs.iter().enumerate().all(|(i, &v)| {
        let fwd = if v < 0.0 { -1.0 } else { 1.0 };
        let bwd = if v.abs() <= 1.0 { up[i] } else { 0.0 };
        g.value(y).data()[i] == fwd && grads.get(x).unwrap().data()[i] == bwd
    });
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let names: Vec<_> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    outcome(
        max < GRAD_TOL && ste_ok && worst.len() == 8,
        format!("max rel error {max:.2e} [{}]; STE exact: {ste_ok}", names.join(", ")),
    )
}

fn cost_table() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut cells = Vec::new();
    for (arch, bops, flops) in PUBLISHED {
        let net = Network::build(arch.config(1000, StemKind::Imagenet)).unwrap();
        let c = count_ops(&net, [3, 224, 224]).unwrap();
        let db = if bops == 0.0 { c.bops as f64 } else { (c.bops as f64 / bops) - 1.0 };
        let df = c.flops as f64 / flops - 1.0;
        worst = worst.max(db.abs()).max(df.abs());
        cells.push(format!("{} {:+.2}%/{:+.2}%", arch.name(), 100.0 * db, 100.0 * df));
    }
    let gated = Network::build(Arch::RealToBinary.config(1000, StemKind::Imagenet)).unwrap();
    let mut cfg = gated.config().clone();
    cfg.gating = false;
    let with = count_ops(&gated, [3, 224, 224]).unwrap().flops as f64;
    let without = count_ops(&Network::build(cfg).unwrap(), [3, 224, 224]).unwrap().flops as f64;
    let share = (with - without) / with;
    outcome(
        worst <= COST_TOL && share <= GATING_MAX_SHARE,
        format!("worst cell {:.2}% [{}]; gating {:.2}% of FLOPs", 100.0 * worst, cells.join(", "), 100.0 * share),
    )
}

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = Tensor::randn(&[3, 4, 6, 6], 1.0, &mut rng);
    let b = Tensor::randn(&[3, 4, 6, 6], 1.0, &mut rng);
    let qa = attention_map(&a).unwrap();
    let same = attention_transfer_loss(std::slice::from_ref(&qa), std::slice::from_ref(&qa)).unwrap();
    // disjoint spatial support: flattened maps are orthogonal, unit after normalization
    let even = Tensor::from_fn(&[3, 4, 6, 6], |i| if i % 2 == 0 { a.data()[i] } else { 0.0 });
    let odd = Tensor::from_fn(&[3, 4, 6, 6], |i| if i % 2 == 1 { b.data()[i] } else { 0.0 });
    let ortho = attention_transfer_loss(&[attention_map(&even).unwrap()], &[attention_map(&odd).unwrap()]).unwrap();
    let qb = attention_map(&b).unwrap();
    let base = attention_transfer_loss(std::slice::from_ref(&qa), std::slice::from_ref(&qb)).unwrap();
    let scaled = attention_transfer_loss(&[attention_map(&a.scale(4.2)).unwrap()], &[qb]).unwrap();
    let logits = Tensor::randn(&[5, 10], 2.0, &mut rng);
    let kd = kd_loss(&logits, &logits, 3.0).unwrap();
    let ok = same.abs() < IDENTITY_TOL
        && (ortho - 2f64.sqrt()).abs() < IDENTITY_TOL
        && (scaled - base).abs() < IDENTITY_TOL
        && kd.abs() < IDENTITY_TOL;
    outcome(
        ok,
        format!("att(same) {same:.1e}, att(orthonormal) {ortho:.7}, rescale diff {:.1e}, kd(same) {kd:.1e}", (scaled - base).abs()),
    )
}

fn smoke_schedule(seed: u64) -> Schedule {
    let network = NetConfig::reduced(NetVariant::FullBin, 4, vec![16, 32], vec![2, 2]);
    let mut s = Schedule {
        network,
        stages: vec![
            StageSpec::new("stage1", NetVariant::BinAct, None, LossConfig::ce_only()),
            StageSpec::new("stage2", NetVariant::FullBin, None, LossConfig::ce_only()),
        ],
    }
    .with_epochs(SMOKE_EPOCHS_PER_STAGE)
    .with_seed(seed)
    .without_augmentation();
    for st in &mut s.stages {
        st.optimizer.batch_size = 64;
        st.optimizer.warmup_epochs = 0;
    }
    s
}

fn training_smoke() -> Outcome {
    let start = Instant::now();
    let mut accs = Vec::new();
    for seed in 0..SMOKE_SEEDS {
        let train = synthetic_dataset(&SyntheticSpec::new(seed, 4, 2000, [3, 8, 8])).unwrap();
        let r = run_progressive(&smoke_schedule(seed), &train, None, None, &RunOptions::default(), &mut MetricsLog::memory()).unwrap();
        assert_eq!(r.network.variant(), NetVariant::FullBin);
        accs.push(evaluate(&r.network, &train, 256, 1).unwrap().top1);
    }
    let took = start.elapsed();
    let mut sorted = accs.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    outcome(
        median >= SMOKE_MIN_TOP1 && took < SMOKE_BUDGET,
        format!(
            "median train top-1 {median:.1}% over seeds {accs:?} ({} epochs total) in {:.0}s",
            2 * SMOKE_EPOCHS_PER_STAGE,
            took.as_secs_f64()
        ),
    )
}

fn ablation(run: bool) -> Outcome {
    let Some(dir) = std::env::var_os("R2B_DATA_DIR").filter(|_| run) else {
        return outcome(
            false,
            "not run: needs --ignored and R2B_DATA_DIR with CIFAR-10 (15 multi-stage schedules of 60 epochs per stage, far beyond a desk CPU)",
        );
    };
    let (train, test) = load_cifar(Path::new(&dir), CifarVariant::Cifar10).unwrap();
    let network = NetConfig::reduced(NetVariant::FullBin, 10, vec![32, 64, 128, 256], vec![2, 2, 2, 2]);
    let rows = [Preset::Sb, Preset::SbAtt, Preset::SbAttHkd, Preset::RealToBin, Preset::SbG];
    let mut medians = Vec::new();
    for preset in rows {
        let mut tops = Vec::new();
        for seed in 0..3 {
            let s = preset.schedule(&network).with_epochs(60).with_seed(seed);
            let r = run_progressive(&s, &train, Some(&test), None, &RunOptions::default(), &mut MetricsLog::memory()).unwrap();
            tops.push(r.final_test().unwrap().top1);
        }
        tops.sort_by(f64::total_cmp);
        medians.push(tops[1]);
    }
    let [sb, att, hkd, r2b, sbg] = [medians[0], medians[1], medians[2], medians[3], medians[4]];
    let ordered = sb < att + ABLATION_SLACK && att < hkd + ABLATION_SLACK && hkd <= r2b + ABLATION_SLACK;
    let gating_alone = sbg <= sb + ABLATION_SLACK;
    outcome(
        ordered && gating_alone,
        format!("medians sb {sb:.2} att {att:.2} att+hkd {hkd:.2} r2b {r2b:.2} sb+g {sbg:.2}"),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_r2b"))
            .args(["train", "--deterministic", "--seed", "7", "--dataset", "synthetic", "--preset", "sb", "--epochs", "2"])
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        out
    };
    let (a, b) = (run("a"), run("b"));
    let files = ["metrics.jsonl", "metrics.csv", "model.r2b", "stage0-stage1.r2b", "config.toml"];
    let differing: Vec<_> = files
        .iter()
        .filter(|f| std::fs::read(a.join(f)).unwrap() != std::fs::read(b.join(f)).unwrap())
        .collect();
    outcome(differing.is_empty(), format!("compared {files:?}; differing: {differing:?}"))
}

fn checkpoint_roundtrip() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let train = synthetic_dataset(&SyntheticSpec::new(3, 4, 128, [3, 8, 8])).unwrap();
    let mut student = Network::build(NetConfig::reduced(NetVariant::BinAct, 4, vec![8, 16], vec![1, 1]).with_seed(3)).unwrap();
    let policy = OptimizerPolicy {
        epochs: 1,
        step_epochs: vec![],
        warmup_epochs: 0,
        batch_size: 32,
        mixup_alpha: 0.0,
        augment: r2b::data::AugmentPolicy::Eval,
        ..OptimizerPolicy::first_stage()
    };
    train_stage(&mut student, &train, None, &policy, &LossConfig::ce_only(), None, &RunOptions::default(), &mut MetricsLog::memory())
        .unwrap();

    let (p1, p2) = (dir.path().join("one.r2b"), dir.path().join("two.r2b"));
    save_checkpoint(&p1, &student, &train.normalization_entries()).unwrap();
    let (loaded, extra) = load_checkpoint(&p1).unwrap();
    save_checkpoint(&p2, &loaded, &extra).unwrap();
    let bytes_equal = std::fs::read(&p1).unwrap() == std::fs::read(&p2).unwrap();

    // in memory, and through the file (values pass through f32 on disk)
    let mut mismatched = 0;
    let mut stats_equal = true;
    for (source, round) in [(&student, false), (&loaded, true)] {
        let mut full = Network::build(student.config().with_variant(NetVariant::FullBin)).unwrap();
        full.load_from(source).unwrap();
        for (_, p) in student.params().iter() {
            let id = full.params().find(&p.name).unwrap();
            let expect = if round { p.value.map(|v| v as f32 as f64) } else { p.value.clone() };
            if full.params().value(id) != &expect {
                mismatched += 1;
            }
        }
        stats_equal &= full.running_stats() == source.running_stats();
    }
    outcome(
        bytes_equal && mismatched == 0 && stats_equal,
        format!(
            "save->load->save identical: {bytes_equal}; {} params handed BIN_ACT->FULL_BIN in memory and via file, {mismatched} changed; BN stats equal: {stats_equal}",
            student.params().len()
        ),
    )
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let ignored = args.iter().any(|a| a == "--ignored" || a == "--include-ignored");
    let filter = args.iter().skip(1).find(|a| !a.starts_with("--"));
    let criteria: [(&str, &dyn Fn() -> Outcome); 8] = [
        ("1 kernel equivalence", &kernel_equivalence),
        ("2 gradient suite", &gradient_suite),
        ("3 operation counts", &cost_table),
        ("4 loss identities", &loss_identities),
        ("5 training smoke", &training_smoke),
        ("6 ablation ordering", &|| ablation(ignored)),
        ("7 determinism", &determinism),
        ("8 checkpoint round trip", &checkpoint_roundtrip),
    ];
    let mut failed = Vec::new();
    for (name, check) in criteria {
        if filter.is_some_and(|f| !name.contains(f.as_str())) {
            continue;
        }
        let o = check();
        println!("{} criterion {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        // the ablation only gates when it was asked for
        if !o.passed && (ignored || !name.starts_with('6')) {
            failed.push(name);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed: {failed:?}");
        std::process::exit(1);
    }
}
