//! Attention matching, logit matching and the combined objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{log_softmax_rows, softmax_rows, Tensor};

/// Added to map norms so all-zero attention maps normalize to zero.
pub const ATTENTION_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub ce_weight: f64,
    /// Total attention weight; each active transfer point receives
    /// `att_weight / J`.
    pub att_weight: f64,
    pub kd_weight: f64,
    pub temperature: f64,
    /// Indices of the transfer points to match; `None` means all of them.
    pub transfer_points: Option<Vec<usize>>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            ce_weight: 1.0,
            att_weight: 10.0,
            kd_weight: 1.0,
            temperature: 3.0,
            transfer_points: None,
        }
    }
}

impl LossConfig {
    /// Plain classification training.
    pub fn ce_only() -> Self {
        LossConfig {
            att_weight: 0.0,
            kd_weight: 0.0,
            ..Self::default()
        }
    }

    /// Logit matching alone.
    pub fn kd_only() -> Self {
        LossConfig {
            ce_weight: 0.0,
            att_weight: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("ce", self.ce_weight), ("att", self.att_weight), ("kd", self.kd_weight)] {
            if !(w >= 0.0) {
                return Err(Error::Config(format!("{name} weight {w} must be >= 0")));
            }
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature {} must be > 0", self.temperature)));
        }
        Ok(())
    }

    pub fn needs_teacher(&self) -> bool {
        self.att_weight > 0.0 || self.kd_weight > 0.0
    }

    /// Transfer-point indices to match out of `available`.
    pub fn active_points(&self, available: usize) -> Result<Vec<usize>> {
        match &self.transfer_points {
            None => Ok((0..available).collect()),
            Some(points) => {
                if let Some(p) = points.iter().find(|&&p| p >= available) {
                    return Err(Error::Config(format!(
                        "transfer point {p} out of range for {available} points"
                    )));
                }
                Ok(points.clone())
            }
        }
    }
}

/// Channel-summed squared activations: `[N, C, H, W] -> [N, H, W]`.
pub fn attention_map(act: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = act.dims4()?;
    let hw = h * w;
    let mut out = Tensor::zeros(&[n, h, w]);
    let src = act.data();
    let dst = out.data_mut();
    for s in 0..n {
        for ch in 0..c {
            let plane = &src[(s * c + ch) * hw..][..hw];
            for (d, &v) in dst[s * hw..(s + 1) * hw].iter_mut().zip(plane) {
                *d += v * v;
            }
        }
    }
    Ok(out)
}

fn normalized_rows(map: &Tensor) -> (Tensor, Vec<f64>) {
    let n = map.shape()[0];
    let per = map.numel() / n.max(1);
    let mut out = map.clone();
    let mut norms = Vec::with_capacity(n);
    for row in out.data_mut().chunks_exact_mut(per) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm + ATTENTION_EPS);
        norms.push(norm);
    }
    (out, norms)
}

fn check_map_pair(student: &Tensor, teacher: &Tensor) -> Result<()> {
    if student.shape() != teacher.shape() {
        return Err(Error::shape(format!(
            "attention maps misaligned: student {:?}, teacher {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    if student.rank() < 2 {
        return Err(Error::shape("attention maps need a batch axis"));
    }
    Ok(())
}

/// Batch mean of `|| q_s / |q_s| - q_t / |q_t| ||_2` for one point.
pub fn attention_point_distance(student_map: &Tensor, teacher_map: &Tensor) -> Result<f64> {
    check_map_pair(student_map, teacher_map)?;
    let n = student_map.shape()[0];
    let (s, _) = normalized_rows(student_map);
    let (t, _) = normalized_rows(teacher_map);
    let per = s.numel() / n;
    let total: f64 = s
        .data()
        .chunks_exact(per)
        .zip(t.data().chunks_exact(per))
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
        .sum();
    Ok(total / n as f64)
}

/// Sum over transfer points of [`attention_point_distance`].
pub fn attention_transfer_loss(student_maps: &[Tensor], teacher_maps: &[Tensor]) -> Result<f64> {
    if student_maps.len() != teacher_maps.len() {
        return Err(Error::shape(format!(
            "{} student maps vs {} teacher maps",
            student_maps.len(),
            teacher_maps.len()
        )));
    }
    student_maps
        .iter()
        .zip(teacher_maps)
        .map(|(s, t)| attention_point_distance(s, t))
        .sum()
}

/// One transfer point's loss and its gradient with respect to the student
/// activation `[N, C, H, W]`. The teacher side is a constant.
pub fn attention_point_loss_with_grad(student_act: &Tensor, teacher_act: &Tensor) -> Result<(f64, Tensor)> {
    let qs = attention_map(student_act)?;
    let qt = attention_map(teacher_act)?;
    check_map_pair(&qs, &qt)?;
    let (n, c, h, w) = student_act.dims4()?;
    let hw = h * w;
    let (us, norms) = normalized_rows(&qs);
    let (ut, _) = normalized_rows(&qt);
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(student_act.shape());
    for s in 0..n {
        let u = &us.data()[s * hw..(s + 1) * hw];
        let v = &ut.data()[s * hw..(s + 1) * hw];
        let q = &qs.data()[s * hw..(s + 1) * hw];
        let dist = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        loss += dist;
        if dist == 0.0 {
            continue;
        }
        // d/du of |u - v| / N
        let gu: Vec<f64> = u.iter().zip(v).map(|(a, b)| (a - b) / (dist * n as f64)).collect();
        // u = q / (|q| + eps)
        let norm = norms[s];
        let denom = norm + ATTENTION_EPS;
        let gq: Vec<f64> = if norm > 0.0 {
            let qg: f64 = q.iter().zip(&gu).map(|(a, b)| a * b).sum();
            q.iter()
                .zip(&gu)
                .map(|(&qi, &gi)| gi / denom - qi * qg / (norm * denom * denom))
                .collect()
        } else {
            gu.iter().map(|gi| gi / denom).collect()
        };
        // q = sum_c a_c^2
        for ch in 0..c {
            let base = (s * c + ch) * hw;
            let a = &student_act.data()[base..base + hw];
            let dst = &mut grad.data_mut()[base..base + hw];
            for i in 0..hw {
                dst[i] = 2.0 * a[i] * gq[i];
            }
        }
    }
    Ok((loss / n as f64, grad))
}

/// `tau^2 * KL(softmax(t / tau) || softmax(s / tau))`, averaged over the batch.
pub fn kd_loss(student_logits: &Tensor, teacher_logits: &Tensor, temperature: f64) -> Result<f64> {
    Ok(kd_loss_with_grad(student_logits, teacher_logits, temperature)?.0)
}

pub fn kd_loss_with_grad(student_logits: &Tensor, teacher_logits: &Tensor, temperature: f64) -> Result<(f64, Tensor)> {
    student_logits.expect_same_shape(teacher_logits)?;
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("temperature {temperature} must be > 0")));
    }
    let (n, _) = student_logits.dims2()?;
    let pt = softmax_rows(teacher_logits, temperature)?;
    let log_pt = log_softmax_rows(teacher_logits, temperature)?;
    let log_ps = log_softmax_rows(student_logits, temperature)?;
    let kl: f64 = pt
        .data()
        .iter()
        .zip(log_pt.data())
        .zip(log_ps.data())
        .map(|((p, lp), lq)| if *p == 0.0 { 0.0 } else { p * (lp - lq) })
        .sum();
    let scale = temperature * temperature / n as f64;
    let grad = log_ps.zip_map(&pt, |lq, p| (lq.exp() - p) * temperature / n as f64)?;
    Ok((kl.max(0.0) * scale, grad))
}

/// Weighted sum of the three loss terms. A zero weight drops its term.
pub fn combined_loss(ce: f64, att: f64, kd: f64, config: &LossConfig) -> f64 {
    let mut total = 0.0;
    for (w, v) in [(config.ce_weight, ce), (config.att_weight, att), (config.kd_weight, kd)] {
        if w != 0.0 {
            total += w * v;
        }
    }
    total
}
