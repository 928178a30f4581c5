//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the tape is topologically sorted by construction and
//! the backward sweep simply walks it from the loss node down to index 0.
//!
//! The only non-differentiable primitive, `sign`, uses the clipped identity
//! straight-through estimator: the incoming gradient passes where `|x| <= 1`
//! and is zeroed elsewhere. Latent binary weights go through the same rule.

mod check;

pub use check::{check_gradients, finite_diff_check, GradCheck};

use crate::binconv::scale_channels;
use crate::error::{Error, Result};
use crate::losses;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, BatchNormConfig, Labels, Mode, RunningStats, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Leaf,
    Param(ParamId),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, normalized: Tensor, inv_std: Vec<f64>, mode: Mode },
    Prelu { x: Var, slope: Var },
    Relu { x: Var },
    SignSte { x: Var },
    Tanh { x: Var },
    Sigmoid { x: Var },
    Exp { x: Var },
    ScaleChannels { x: Var, s: Var },
    ScaleSampleChannels { x: Var, s: Var },
    Add { a: Var, b: Var },
    GlobalAvgPool { x: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    Linear { x: Var, w: Var, b: Var },
    /// Scalar loss whose gradient w.r.t. `x` was computed during forward.
    Loss { x: Var, grad: Tensor },
    WeightedSum { terms: Vec<(Var, f64)> },
    Reshape { x: Var },
    Project { x: Var, weights: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients for every node reachable from the loss.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// A free input that receives a gradient but is not a stored parameter.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A trainable parameter; its gradient is accumulated into the store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    /// A parameter read as a constant (frozen networks).
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.constant(store.value(id).clone())
    }

    /// [`Graph::param`] when `trainable`, otherwise [`Graph::frozen_param`].
    pub fn bind(&mut self, store: &ParamStore, id: ParamId, trainable: bool) -> Var {
        if trainable {
            self.param(store, id)
        } else {
            self.frozen_param(store, id)
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = tensor::conv2d(self.value(x), self.value(w), stride, pad)?;
        let rg = self.any_grad(&[x, w]);
        Ok(self.push(out, Op::Conv2d { x, w, stride, pad }, rg))
    }

    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: Mode,
        config: BatchNormConfig,
    ) -> Result<Var> {
        let bn = tensor::batchnorm2d(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            stats,
            mode,
            config,
        )?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            bn.output,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                normalized: bn.normalized,
                inv_std: bn.inv_std,
                mode,
            },
            rg,
        ))
    }

    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let out = tensor::prelu(self.value(x), self.value(slope).data())?;
        let rg = self.any_grad(&[x, slope]);
        Ok(self.push(out, Op::Prelu { x, slope }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Relu { x }, rg)
    }

    /// Forward `sign` with `sign(0) = +1`; backward is the clipped identity.
    pub fn sign_ste(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
        let rg = self.any_grad(&[x]);
        self.push(out, Op::SignSte { x }, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Tanh { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Sigmoid { x }, rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Exp { x }, rg)
    }

    /// Multiplies channel `c` of `[N, C, H, W]` by `s[c]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let out = scale_channels(self.value(x), self.value(s).data())?;
        let rg = self.any_grad(&[x, s]);
        Ok(self.push(out, Op::ScaleChannels { x, s }, rg))
    }

    /// Multiplies `x[n, c, :, :]` by `s[n, c]`.
    pub fn scale_sample_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let out = scale_sample_channels(self.value(x), self.value(s))?;
        let rg = self.any_grad(&[x, s]);
        Ok(self.push(out, Op::ScaleSampleChannels { x, s }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = tensor::global_avg_pool(self.value(x))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::GlobalAvgPool { x }, rg))
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let (out, argmax) = tensor::max_pool2d(self.value(x), kernel, stride, pad)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::MaxPool { x, argmax }, rg))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = tensor::linear(self.value(x), self.value(w), self.value(b))?;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &Labels<'_>) -> Result<Var> {
        let (loss, grad) = tensor::softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.push_loss(loss, logits, grad))
    }

    pub fn kd_loss(&mut self, student_logits: Var, teacher_logits: &Tensor, temperature: f64) -> Result<Var> {
        let (loss, grad) = losses::kd_loss_with_grad(self.value(student_logits), teacher_logits, temperature)?;
        Ok(self.push_loss(loss, student_logits, grad))
    }

    /// Attention-transfer term for one transfer point.
    pub fn attention_transfer(&mut self, student_act: Var, teacher_act: &Tensor) -> Result<Var> {
        let (loss, grad) = losses::attention_point_loss_with_grad(self.value(student_act), teacher_act)?;
        Ok(self.push_loss(loss, student_act, grad))
    }

    fn push_loss(&mut self, loss: f64, x: Var, grad: Tensor) -> Var {
        let rg = self.any_grad(&[x]);
        let grad = if rg { grad } else { Tensor::zeros(&[0]) };
        self.push(Tensor::scalar(loss), Op::Loss { x, grad }, rg)
    }

    /// `sum_i w_i * x_i` over scalar nodes. Terms with weight 0 are dropped
    /// from the tape entirely.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut kept = Vec::new();
        let mut total = 0.0;
        for &(v, w) in terms {
            if !self.value(v).is_scalar() {
                return Err(Error::shape("weighted_sum expects scalar terms"));
            }
            if w != 0.0 {
                total += w * self.value(v).item();
                kept.push((v, w));
            }
        }
        let vars: Vec<Var> = kept.iter().map(|t| t.0).collect();
        let rg = self.any_grad(&vars);
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum { terms: kept }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Reshape { x }, rg))
    }

    /// Scalar `sum_i x_i * weights_i` against a constant tensor of the same shape.
    pub fn project(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        let value = self.value(x).mul(weights)?.sum();
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::Project {
                x,
                weights: weights.clone(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Accumulates `d loss / d param` into every parameter's grad buffer.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = &grads.grads[i] {
                    store.get_mut(id).accumulate_grad(g)?;
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut send = |v: Var, t: Tensor| -> Result<()> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_scaled_in_place(&t, 1.0),
                slot @ None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Constant | Op::Leaf | Op::Param(_) => {}
            Op::Conv2d { x, w, stride, pad } => {
                let need_x = self.requires_grad(*x);
                let (dx, dw) = tensor::conv2d_backward(self.value(*x), self.value(*w), g, *stride, *pad, need_x)?;
                if let Some(dx) = dx {
                    send(*x, dx)?;
                }
                send(*w, dw)?;
            }
            Op::BatchNorm { x, gamma, beta, normalized, inv_std, mode } => {
                let (dx, dgamma, dbeta) =
                    tensor::batchnorm2d_backward(g, normalized, inv_std, self.value(*gamma).data(), *mode)?;
                send(*x, dx)?;
                let c = dgamma.len();
                send(*gamma, Tensor::new(vec![c], dgamma)?)?;
                send(*beta, Tensor::new(vec![c], dbeta)?)?;
            }
            Op::Prelu { x, slope } => {
                let s = self.value(*slope);
                let (dx, ds) = tensor::prelu_backward(self.value(*x), s.data(), g)?;
                send(*x, dx)?;
                send(*slope, Tensor::new(s.shape().to_vec(), ds)?)?;
            }
            Op::Relu { x } => {
                send(*x, self.value(*x).zip_map(g, |v, d| if v > 0.0 { d } else { 0.0 })?)?;
            }
            Op::SignSte { x } => {
                send(*x, self.value(*x).zip_map(g, ste_pass)?)?;
            }
            Op::Tanh { x } => {
                send(*x, node.value.zip_map(g, |y, d| d * (1.0 - y * y))?)?;
            }
            Op::Sigmoid { x } => {
                send(*x, node.value.zip_map(g, |y, d| d * y * (1.0 - y))?)?;
            }
            Op::Exp { x } => {
                send(*x, node.value.zip_map(g, |y, d| d * y)?)?;
            }
            Op::ScaleChannels { x, s } => {
                let sv = self.value(*s);
                send(*x, scale_channels(g, sv.data())?)?;
                let (_, c, h, w) = g.dims4()?;
                let hw = h * w;
                let mut ds = vec![0.0; c];
                for (i, (gp, xp)) in g.data().chunks_exact(hw).zip(self.value(*x).data().chunks_exact(hw)).enumerate() {
                    ds[i % c] += gp.iter().zip(xp).map(|(a, b)| a * b).sum::<f64>();
                }
                send(*s, Tensor::new(sv.shape().to_vec(), ds)?)?;
            }
            Op::ScaleSampleChannels { x, s } => {
                let sv = self.value(*s);
                send(*x, scale_sample_channels(g, sv)?)?;
                let (_, _, h, w) = g.dims4()?;
                let hw = h * w;
                let ds: Vec<f64> = g
                    .data()
                    .chunks_exact(hw)
                    .zip(self.value(*x).data().chunks_exact(hw))
                    .map(|(gp, xp)| gp.iter().zip(xp).map(|(a, b)| a * b).sum())
                    .collect();
                send(*s, Tensor::new(sv.shape().to_vec(), ds)?)?;
            }
            Op::Add { a, b } => {
                send(*a, g.clone())?;
                send(*b, g.clone())?;
            }
            Op::GlobalAvgPool { x } => {
                send(*x, tensor::global_avg_pool_backward(self.value(*x).shape(), g)?)?;
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                for (&src, &d) in argmax.iter().zip(g.data()) {
                    dx.data_mut()[src] += d;
                }
                send(*x, dx)?;
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = tensor::linear_backward(self.value(*x), self.value(*w), g)?;
                send(*x, dx)?;
                send(*w, dw)?;
                send(*b, db.reshape(self.value(*b).shape())?)?;
            }
            Op::Loss { x, grad } => {
                send(*x, grad.scale(g.item()))?;
            }
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    send(v, Tensor::full(self.value(v).shape(), w * g.item()))?;
                }
            }
            Op::Reshape { x } => {
                send(*x, g.clone().reshape(self.value(*x).shape())?)?;
            }
            Op::Project { x, weights } => {
                send(*x, weights.scale(g.item()))?;
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Clipped-identity straight-through rule for the gradient of `sign`.
#[inline]
pub fn ste_pass(x: f64, upstream: f64) -> f64 {
    if x.abs() <= 1.0 {
        upstream
    } else {
        0.0
    }
}

pub fn scale_sample_channels(x: &Tensor, s: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if s.shape() != [n, c] {
        return Err(Error::shape(format!(
            "per-sample scale {:?} for activations [{n}, {c}, {h}, {w}]",
            s.shape()
        )));
    }
    let hw = h * w;
    let mut out = x.clone();
    for (plane, &f) in out.data_mut().chunks_exact_mut(hw).zip(s.data()) {
        plane.iter_mut().for_each(|v| *v *= f);
    }
    Ok(out)
}
