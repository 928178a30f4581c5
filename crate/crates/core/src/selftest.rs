//! Quick oracle and invariant suites, runnable from an installed binary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{finite_diff_check, Graph};
use crate::binconv::{binary_conv2d, pack};
use crate::cost::count_ops;
use crate::error::Result;
use crate::losses::{attention_map, attention_point_distance, kd_loss};
use crate::network::{read_checkpoint, write_checkpoint, Arch, NetConfig, NetVariant, Network, StemKind};
use crate::tensor::{conv2d_ref, BatchNormConfig, Labels, Mode, RunningStats, Tensor};

/// Published per-image totals at 224x224 as `(arch, BOPs, FLOPs)`.
pub const PUBLISHED_COUNTS: [(Arch, f64, f64); 6] = [
    (Arch::RealToBinary, 1.676e9, 1.564e8),
    (Arch::BiReal, 1.676e9, 1.544e8),
    (Arch::DoubleSkip, 1.695e9, 1.351e8),
    (Arch::Xnor, 1.695e9, 1.333e8),
    (Arch::Bnn, 1.695e9, 1.314e8),
    (Arch::FullPrecision, 0.0, 1.826e9),
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn suite(name: &'static str, body: impl FnOnce() -> Result<(bool, String)>) -> SuiteResult {
    match body() {
        Ok((passed, detail)) => SuiteResult { name, passed, detail },
        Err(e) => SuiteResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// `cases` random sign convolutions, packed kernel against the float one.
pub fn kernel_suite(cases: usize, seed: u64) -> SuiteResult {
    suite("kernel", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for case in 0..cases {
            let n = rng.random_range(1..=4);
            let c = rng.random_range(1..=96);
            let o = rng.random_range(1..=8);
            let k = if rng.random_bool(0.5) { 1 } else { 3 };
            let stride = rng.random_range(1..=2);
            let pad = rng.random_range(0..=1);
            let h = rng.random_range(k..=k + 6);
            let w = rng.random_range(k..=k + 6);
            let x = Tensor::random_signs(&[n, c, h, w], &mut rng);
            let wt = Tensor::random_signs(&[o, c, k, k], &mut rng);
            let fast = binary_conv2d(&pack(&x)?, &pack(&wt)?, stride, pad)?;
            let slow = conv2d_ref(&x, &wt, stride, pad)?;
            if fast != slow {
                return Ok((false, format!("case {case}: n={n} c={c} k={k} stride={stride} pad={pad} differs")));
            }
        }
        Ok((true, format!("{cases} cases exact")))
    })
}

/// Central differences against the tape for every differentiable op used
/// in training, at `points` random points each.
pub fn gradient_suite(points: usize, seed: u64) -> SuiteResult {
    suite("gradients", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: (f64, &str) = (0.0, "");
        let mut record = |name: &'static str, err: f64| {
            if err > worst.0 {
                worst = (err, name);
            }
        };
        for _ in 0..points {
            for (name, err) in gradient_cases(&mut rng)? {
                record(name, err);
            }
        }
        Ok((worst.0 < 1e-3, format!("max rel error {:.2e} ({})", worst.0, worst.1)))
    })
}

/// One random point for each op; returns `(op, max relative error)`.
pub fn gradient_cases<R: Rng>(rng: &mut R) -> Result<Vec<(&'static str, f64)>> {
    let h = 1e-5;
    let mut out = Vec::new();
    let x = Tensor::randn(&[3, 2, 3, 3], 1.0, rng);
    let gamma = Tensor::uniform(&[2], 1.0, rng).map(|v| v + 1.5);
    let beta = Tensor::randn(&[2], 1.0, rng);
    let proj = Tensor::randn(&[3, 2, 3, 3], 1.0, rng);
    let r = finite_diff_check(
        |g, v| {
            let mut stats = RunningStats::new(2);
            let y = g.batchnorm2d(v[0], v[1], v[2], &mut stats, Mode::Train, BatchNormConfig::default())?;
            g.project(y, &proj)
        },
        &[x.clone(), gamma, beta],
        h,
    )?;
    out.push(("batchnorm", r.max_rel_error));

    let slope = Tensor::uniform(&[2], 0.5, rng);
    let r = finite_diff_check(
        |g, v| {
            let y = g.prelu(v[0], v[1])?;
            g.project(y, &proj)
        },
        &[x.clone(), slope],
        h,
    )?;
    out.push(("prelu", r.max_rel_error));

    let a = Tensor::randn(&[4, 5], 1.0, rng);
    let w = Tensor::randn(&[3, 5], 1.0, rng);
    let b = Tensor::randn(&[3], 1.0, rng);
    let proj3 = Tensor::randn(&[4, 3], 1.0, rng);
    let r = finite_diff_check(
        |g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            g.project(y, &proj3)
        },
        &[a.clone(), w, b],
        h,
    )?;
    out.push(("linear", r.max_rel_error));

    let labels = [0usize, 2, 1, 2];
    let logits = Tensor::randn(&[4, 3], 2.0, rng);
    let r = finite_diff_check(|g, v| g.softmax_cross_entropy(v[0], &Labels::Hard(&labels)), std::slice::from_ref(&logits), h)?;
    out.push(("softmax_ce", r.max_rel_error));

    let r = finite_diff_check(
        |g, v| {
            let y = g.tanh(v[0]);
            g.project(y, &proj)
        },
        std::slice::from_ref(&x),
        h,
    )?;
    out.push(("tanh", r.max_rel_error));

    // gate: GAP -> linear -> PReLU -> linear -> sigmoid, then rescales a map
    let conv_out = Tensor::randn(&[3, 2, 3, 3], 1.0, rng);
    let w1 = Tensor::randn(&[1, 2], 1.0, rng);
    let b1 = Tensor::randn(&[1], 0.5, rng);
    let gs = Tensor::uniform(&[1], 0.5, rng);
    let w2 = Tensor::randn(&[2, 1], 1.0, rng);
    let b2 = Tensor::randn(&[2], 0.5, rng);
    let r = finite_diff_check(
        |g, v| {
            let pooled = g.global_avg_pool(v[0])?;
            let z = g.linear(pooled, v[2], v[3])?;
            let z = g.prelu(z, v[4])?;
            let z = g.linear(z, v[5], v[6])?;
            let gate = g.sigmoid(z);
            let y = g.scale_sample_channels(v[1], gate)?;
            g.project(y, &proj)
        },
        &[x.clone(), conv_out, w1, b1, gs, w2, b2],
        h,
    )?;
    out.push(("gate", r.max_rel_error));

    let teacher = Tensor::randn(&[3, 2, 3, 3], 1.0, rng);
    let r = finite_diff_check(|g, v| g.attention_transfer(v[0], &teacher), std::slice::from_ref(&x), h)?;
    out.push(("attention", r.max_rel_error));

    let t_logits = Tensor::randn(&[4, 3], 2.0, rng);
    let r = finite_diff_check(|g, v| g.kd_loss(v[0], &t_logits, 3.0), &[logits], h)?;
    out.push(("kd", r.max_rel_error));
    Ok(out)
}

/// Sign STE: forward `sign` with `sign(0) = +1`, backward passes the
/// incoming gradient where `|x| <= 1` and zero elsewhere.
pub fn ste_suite() -> SuiteResult {
    suite("ste", || {
        let xs = [-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 1.0 + 1e-12, 3.0];
        let upstream = [0.3, -1.2, 2.0, 0.7, -0.4, 1.1, 5.0, -2.5];
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![xs.len()], xs.to_vec())?);
        let y = g.sign_ste(x);
        let proj = Tensor::new(vec![xs.len()], upstream.to_vec())?;
        let loss = g.project(y, &proj)?;
        let grads = g.gradients(loss)?;
        let grad = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(&[xs.len()]));
        for (i, &v) in xs.iter().enumerate() {
            let fwd = if v >= 0.0 { 1.0 } else { -1.0 };
            let bwd = if v.abs() <= 1.0 { upstream[i] } else { 0.0 };
            if g.value(y).data()[i] != fwd || grad.data()[i] != bwd {
                return Ok((false, format!("x={v}: got ({}, {})", g.value(y).data()[i], grad.data()[i])));
            }
        }
        Ok((true, format!("{} points exact", xs.len())))
    })
}

/// Attention and distillation identities.
pub fn loss_suite(seed: u64) -> SuiteResult {
    suite("losses", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let act = Tensor::randn(&[2, 4, 5, 5], 1.0, &mut rng);
        let q = attention_map(&act)?;
        let same = attention_point_distance(&q, &q)?;
        let scaled = attention_point_distance(&attention_map(&act.scale(3.7))?, &q)?;
        // single-channel maps with disjoint support are orthonormal once normalized
        let a = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 0.0])?;
        let b = Tensor::new(vec![1, 1, 1, 2], vec![0.0, 1.0])?;
        let ortho = attention_point_distance(&attention_map(&a)?, &attention_map(&b)?)?;
        let logits = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let kd = kd_loss(&logits, &logits, 3.0)?;
        let ok = same < 1e-12 && scaled < 1e-6 && (ortho - 2f64.sqrt()).abs() < 1e-6 && kd.abs() < 1e-12;
        Ok((ok, format!("same={same:.1e} scaled={scaled:.1e} ortho={ortho:.6} kd={kd:.1e}")))
    })
}

/// 224x224 operation totals of the six reference architectures against
/// the published figures, plus gating overhead.
pub fn cost_suite(tolerance: f64) -> SuiteResult {
    suite("cost", || {
        let mut worst: f64 = 0.0;
        let mut lines = Vec::new();
        for (arch, bops, flops) in PUBLISHED_COUNTS {
            let net = Network::build(arch.config(1000, StemKind::Imagenet))?;
            let c = count_ops(&net, [3, 224, 224])?;
            let rel = |got: u64, want: f64| if want == 0.0 { got as f64 } else { (got as f64 - want).abs() / want };
            worst = worst.max(rel(c.bops, bops)).max(rel(c.flops, flops));
            lines.push(format!("{} {:.3e}/{:.3e}", arch.name(), c.bops as f64, c.flops as f64));
        }
        let gated = Network::build(Arch::RealToBinary.config(1000, StemKind::Imagenet))?;
        let mut plain_cfg = gated.config().clone();
        plain_cfg.gating = false;
        let with = count_ops(&gated, [3, 224, 224])?.flops as f64;
        let without = count_ops(&Network::build(plain_cfg)?, [3, 224, 224])?.flops as f64;
        let overhead = (with - without) / with;
        Ok((
            worst <= tolerance && overhead <= 0.02,
            format!("worst deviation {:.2}%, gating {:.2}%; {}", 100.0 * worst, 100.0 * overhead, lines.join(", ")),
        ))
    })
}

/// Save, load, save again; the two byte streams must agree.
pub fn checkpoint_suite(seed: u64) -> SuiteResult {
    suite("checkpoint", || {
        let cfg = NetConfig::reduced(NetVariant::FullBin, 5, vec![4, 8], vec![1, 1]).with_seed(seed);
        let net = Network::build(cfg)?;
        let mut first = Vec::new();
        write_checkpoint(&mut first, &net.to_checkpoint(&[])?)?;
        let (back, _) = Network::from_checkpoint(&read_checkpoint(&first)?)?;
        let mut second = Vec::new();
        write_checkpoint(&mut second, &back.to_checkpoint(&[])?)?;
        Ok((first == second, format!("{} bytes", first.len())))
    })
}

/// Every suite at its default size.
pub fn run_all(seed: u64) -> Vec<SuiteResult> {
    vec![
        kernel_suite(200, seed),
        gradient_suite(5, seed),
        ste_suite(),
        loss_suite(seed),
        cost_suite(0.02),
        checkpoint_suite(seed),
    ]
}
