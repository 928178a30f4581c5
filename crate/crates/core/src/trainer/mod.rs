//! The optimization loop: Adam with step decay and warm-up, mixup,
//! attention and logit matching against an optional frozen teacher.

mod metrics;
mod optim;

pub use metrics::{MetricsLog, MetricsRecord};
pub use optim::{effective_gradient, Adam, OptimizerPolicy};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::Serialize;

use crate::autograd::Graph;
use crate::data::{augment_batch, Dataset};
use crate::distill::FrozenTeacher;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::network::{Network, Pass};
use crate::tensor::{label_matrix, softmax_cross_entropy, Labels, Tensor};

/// Draws `lambda ~ Beta(alpha, alpha)` and a random pairing, then mixes.
/// `alpha = 0` leaves the batch untouched.
pub fn mixup_batch<R: Rng + ?Sized>(x: &Tensor, y: &Tensor, alpha: f64, rng: &mut R) -> Result<(Tensor, Tensor, f64)> {
    if !(alpha >= 0.0) {
        return Err(Error::invalid(format!("mixup alpha {alpha} must be >= 0")));
    }
    if alpha == 0.0 {
        return Ok((x.clone(), y.clone(), 1.0));
    }
    let lambda = Beta::new(alpha, alpha)
        .map_err(|e| Error::invalid(format!("mixup alpha {alpha}: {e}")))?
        .sample(rng);
    let mut perm: Vec<usize> = (0..x.shape()[0]).collect();
    perm.shuffle(rng);
    let (xm, ym) = mixup_with(x, y, lambda, &perm)?;
    Ok((xm, ym, lambda))
}

/// `lambda * row_i + (1 - lambda) * row_perm[i]` for inputs and labels.
pub fn mixup_with(x: &Tensor, y: &Tensor, lambda: f64, perm: &[usize]) -> Result<(Tensor, Tensor)> {
    let n = x.shape()[0];
    if y.shape().first() != Some(&n) || perm.len() != n || perm.iter().any(|&p| p >= n) {
        return Err(Error::shape(format!("mixup of {n} inputs with labels {:?} and {} pairs", y.shape(), perm.len())));
    }
    let mix = |t: &Tensor| -> Result<Tensor> {
        let other = t.select_outer(perm);
        if lambda == 1.0 {
            return Ok(t.clone());
        }
        t.zip_map(&other, |a, b| lambda * a + (1.0 - lambda) * b)
    };
    Ok((mix(x)?, mix(y)?))
}

/// Percentage of rows whose label is among the `k` largest logits. Ties
/// count against the label: its rank is the number of strictly larger logits.
pub fn topk_accuracy(logits: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    let (n, classes) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} rows", labels.len())));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let mut hits = 0;
    for (row, &label) in logits.data().chunks(classes).zip(labels) {
        let target = row[label];
        let rank = row.iter().filter(|&&v| v > target).count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub top1: f64,
    pub top5: f64,
    /// Mean cross-entropy.
    pub loss: f64,
}

fn eval_chunk(net: &mut Network, data: &Dataset, range: std::ops::Range<usize>, batch: usize) -> Result<(Tensor, f64)> {
    let mut logits = Vec::new();
    let mut loss = 0.0;
    let mut start = range.start;
    while start < range.end {
        let end = (start + batch).min(range.end);
        let idx: Vec<usize> = (start..end).collect();
        let (x, y) = data.batch(&idx);
        let out = net.predict(&x)?;
        loss += softmax_cross_entropy(&out, &Labels::Hard(&y))?.0 * (end - start) as f64;
        logits.push(out);
        start = end;
    }
    Ok((Tensor::concat_outer(&logits)?, loss))
}

/// Eval-mode top-1/top-5 over the whole split, split across `threads`
/// workers that each own a copy of the network.
pub fn evaluate(net: &Network, data: &Dataset, batch_size: usize, threads: usize) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let n = data.len();
    let threads = threads.clamp(1, n);
    let per = n.div_ceil(threads);
    let batch = batch_size.max(1);
    let parts: Vec<Result<(Tensor, f64)>> = if threads == 1 {
        vec![eval_chunk(&mut net.clone(), data, 0..n, batch)]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let mut local = net.clone();
                    let range = (t * per).min(n)..((t + 1) * per).min(n);
                    s.spawn(move || eval_chunk(&mut local, data, range, batch))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
        })
    };
    let mut logits = Vec::new();
    let mut loss = 0.0;
    for p in parts {
        let (l, s) = p?;
        if l.numel() > 0 {
            logits.push(l);
        }
        loss += s;
    }
    let logits = Tensor::concat_outer(&logits)?;
    let k5 = 5.min(data.num_classes);
    Ok(EvalResult {
        top1: topk_accuracy(&logits, &data.labels, 1)?,
        top5: topk_accuracy(&logits, &data.labels, k5)?,
        loss: loss / n as f64,
    })
}

/// Run-level switches shared by every stage.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    /// Stage index written into metrics and errors.
    pub stage: usize,
    /// Omit wall-clock times from metrics.
    pub deterministic: bool,
    pub threads: usize,
    pub eval_batch: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            stage: 0,
            deterministic: true,
            threads: 1,
            eval_batch: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub loss: f64,
    pub ce: f64,
    pub att: f64,
    pub kd: f64,
    pub lr: f64,
    /// Accuracy of the training forward passes (against the unmixed labels).
    pub train_top1: f64,
    pub train_top5: f64,
    pub test: Option<EvalResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageReport {
    pub epochs: Vec<EpochSummary>,
    /// Total loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

/// Trains `net` in place for `policy.epochs` epochs.
///
/// Each step forwards the (augmented, mixed) batch through the student and,
/// when the loss needs one, the frozen teacher; builds
/// `ce_weight * CE + (att_weight / J) * sum_j att_j + kd_weight * KD`;
/// backpropagates; takes an Adam step; and clamps sign-constrained latent
/// weights to `[-1, 1]`.
pub fn train_stage(
    net: &mut Network,
    train: &Dataset,
    test: Option<&Dataset>,
    policy: &OptimizerPolicy,
    losses: &LossConfig,
    mut teacher: Option<&mut FrozenTeacher>,
    opts: &RunOptions,
    log: &mut MetricsLog,
) -> Result<StageReport> {
    policy.validate()?;
    losses.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if train.num_classes != net.config().num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, network {}",
            train.num_classes,
            net.config().num_classes
        )));
    }
    let stage_err = |message: String| Error::Stage {
        stage: opts.stage,
        message,
    };
    if losses.needs_teacher() && teacher.is_none() {
        return Err(stage_err("attention or logit matching requested without a teacher".into()));
    }
    let points = losses.active_points(net.num_blocks())?;
    if let Some(t) = &teacher {
        if t.network().num_blocks() != net.num_blocks() && losses.att_weight > 0.0 {
            return Err(stage_err(format!(
                "teacher has {} transfer points, student {}",
                t.network().num_blocks(),
                net.num_blocks()
            )));
        }
    }
    let att_each = if points.is_empty() { 0.0 } else { losses.att_weight / points.len() as f64 };

    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let mut adam = Adam::new();
    let n = train.len();
    let nb = n.div_ceil(policy.batch_size);
    let mut order: Vec<usize> = (0..n).collect();
    let mut report = StageReport {
        epochs: Vec::new(),
        step_losses: Vec::new(),
    };

    for epoch in 0..policy.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let (mut sum_loss, mut sum_ce, mut sum_att, mut sum_kd) = (0.0, 0.0, 0.0, 0.0);
        let (mut correct, mut correct5) = (0.0, 0.0);
        let mut lr = 0.0;
        for b in 0..nb {
            let idx = &order[b * policy.batch_size..((b + 1) * policy.batch_size).min(n)];
            let m = idx.len();
            let (x, y) = train.batch(idx);
            let x = augment_batch(&x, &mut rng, policy.augment)?;
            let onehot = label_matrix(&Labels::Hard(&y), m, train.num_classes)?;
            let (x, soft, _) = mixup_batch(&x, &onehot, policy.mixup_alpha, &mut rng)?;

            let teacher_out = match teacher.as_deref_mut() {
                Some(t) if losses.needs_teacher() => Some(t.outputs(&x)?),
                _ => None,
            };

            let mut g = Graph::new();
            let xv = g.constant(x);
            let out = net.forward(&mut g, xv, Pass::TRAIN)?;
            let mut terms = Vec::new();
            let ce = if losses.ce_weight > 0.0 {
                let v = g.softmax_cross_entropy(out.logits, &Labels::Soft(&soft))?;
                terms.push((v, losses.ce_weight));
                g.value(v).item()
            } else {
                0.0
            };
            let mut att = 0.0;
            let mut kd = 0.0;
            if let Some(t) = &teacher_out {
                if losses.att_weight > 0.0 {
                    for &j in &points {
                        let v = g.attention_transfer(out.transfer[j], &t.transfer[j])?;
                        att += g.value(v).item();
                        terms.push((v, att_each));
                    }
                }
                if losses.kd_weight > 0.0 {
                    let v = g.kd_loss(out.logits, &t.logits, losses.temperature)?;
                    kd = g.value(v).item();
                    terms.push((v, losses.kd_weight));
                }
            }
            let total = g.weighted_sum(&terms)?;
            let loss = g.value(total).item();
            if !loss.is_finite() || !ce.is_finite() || !att.is_finite() || !kd.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    terms: format!("stage={} total={loss} ce={ce} att={att} kd={kd}", opts.stage),
                });
            }
            net.params_mut().zero_grad();
            g.backward(total, net.params_mut())?;
            lr = policy.lr_at(epoch, (b + 1) as f64 / nb as f64);
            adam.step(net.params_mut(), lr, policy);
            net.clamp_latent_weights();

            let w = m as f64;
            sum_loss += loss * w;
            sum_ce += ce * w;
            sum_att += att * w;
            sum_kd += kd * w;
            correct += topk_accuracy(g.value(out.logits), &y, 1)? * w / 100.0;
            correct5 += topk_accuracy(g.value(out.logits), &y, 5.min(train.num_classes))? * w / 100.0;
            report.step_losses.push(loss);
        }
        let nf = n as f64;
        let summary = EpochSummary {
            epoch,
            loss: sum_loss / nf,
            ce: sum_ce / nf,
            att: sum_att / nf,
            kd: sum_kd / nf,
            lr,
            train_top1: 100.0 * correct / nf,
            train_top5: 100.0 * correct5 / nf,
            test: test.map(|d| evaluate(net, d, opts.eval_batch, opts.threads)).transpose()?,
        };
        let wall = (!opts.deterministic).then(|| started.elapsed().as_millis() as u64);
        log.push(MetricsRecord {
            stage: opts.stage,
            epoch,
            split: "train".into(),
            loss: summary.loss,
            ce: Some(summary.ce),
            att: Some(summary.att),
            kd: Some(summary.kd),
            lr: Some(lr),
            top1: summary.train_top1,
            top5: summary.train_top5,
            wall_ms: wall,
        })?;
        if let Some(t) = &summary.test {
            log.push(MetricsRecord {
                stage: opts.stage,
                epoch,
                split: "test".into(),
                loss: t.loss,
                ce: Some(t.loss),
                att: None,
                kd: None,
                lr: None,
                top1: t.top1,
                top5: t.top5,
                wall_ms: wall,
            })?;
        }
        report.epochs.push(summary);
    }
    Ok(report)
}
