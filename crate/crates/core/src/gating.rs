//! Data-driven channel re-scaling.
//!
//! The gate reads the real-valued batch-norm output of a unit (before it is
//! binarized) and predicts one multiplier in `(0, 1)` per sample and output
//! channel:
//!
//! ```text
//! G(x) = sigmoid(W2 · prelu(W1 · avgpool(x) + b1) + b2)
//! ```
//!
//! The binary convolution output is then multiplied by `gamma[o] * G[n, o]`.

use rand::Rng;

use crate::autograd::{scale_sample_channels, sigmoid, Graph, Var};
use crate::binconv::{scale_channels, ScaleFactors};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::{global_avg_pool, linear, prelu, Tensor};

pub const DEFAULT_COMPRESSION: usize = 8;

/// Bottleneck width `ceil(C / r)`, at least 1.
pub fn bottleneck_width(channels: usize, ratio: usize) -> usize {
    channels.div_ceil(ratio.max(1)).max(1)
}

/// Plain-tensor gate parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GatingParams {
    /// `[C/r, C]`
    pub w1: Tensor,
    pub b1: Tensor,
    /// Bottleneck PReLU slope, per unit or shared.
    pub slope: Tensor,
    /// `[O, C/r]`
    pub w2: Tensor,
    pub b2: Tensor,
    pub ratio: usize,
}

impl GatingParams {
    pub fn zeros(in_channels: usize, out_channels: usize, ratio: usize) -> Self {
        let m = bottleneck_width(in_channels, ratio);
        GatingParams {
            w1: Tensor::zeros(&[m, in_channels]),
            b1: Tensor::zeros(&[m]),
            slope: Tensor::full(&[m], 0.25),
            w2: Tensor::zeros(&[out_channels, m]),
            b2: Tensor::zeros(&[out_channels]),
            ratio,
        }
    }

    /// Uniform fan-in initialization with `b2 = 0`.
    pub fn init<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, ratio: usize, rng: &mut R) -> Self {
        let m = bottleneck_width(in_channels, ratio);
        GatingParams {
            w1: Tensor::uniform(&[m, in_channels], 1.0 / (in_channels as f64).sqrt(), rng),
            b1: Tensor::zeros(&[m]),
            slope: Tensor::full(&[m], 0.25),
            w2: Tensor::uniform(&[out_channels, m], 1.0 / (m as f64).sqrt(), rng),
            b2: Tensor::zeros(&[out_channels]),
            ratio,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.w2.shape()[0]
    }
}

/// Gate values `[N, O]` for pre-binarization activations `[N, C, H, W]`.
pub fn gate(pre_bin: &Tensor, params: &GatingParams) -> Result<Tensor> {
    let (_, c, _, _) = pre_bin.dims4()?;
    if c != params.in_channels() {
        return Err(Error::shape(format!(
            "gate expects {} channels, activations have {c}",
            params.in_channels()
        )));
    }
    let pooled = global_avg_pool(pre_bin)?;
    let hidden = linear(&pooled, &params.w1, &params.b1)?;
    let hidden = prelu(&hidden, params.slope.data())?;
    let logits = linear(&hidden, &params.w2, &params.b2)?;
    Ok(logits.map(sigmoid))
}

/// `conv_out[n, o] * gamma[o] * g[n, o]`.
pub fn rescale(conv_out: &Tensor, scale: &ScaleFactors, g: &Tensor) -> Result<Tensor> {
    let (n, o, _, _) = conv_out.dims4()?;
    if scale.gamma.len() != o || g.shape() != [n, o] {
        return Err(Error::shape(format!(
            "rescale of {o} channels with {} factors and gate {:?}",
            scale.gamma.len(),
            g.shape()
        )));
    }
    let scaled = scale_channels(conv_out, &scale.gamma)?;
    scale_sample_channels(&scaled, g)
}

/// Parameter handles of a gate living in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct GateLayer {
    pub w1: ParamId,
    pub b1: ParamId,
    pub slope: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ratio: usize,
}

impl GateLayer {
    pub fn register(store: &mut ParamStore, prefix: &str, params: GatingParams) -> Self {
        GateLayer {
            w1: store.add(format!("{prefix}.w1"), ParamKind::LinearWeight, params.w1),
            b1: store.add(format!("{prefix}.b1"), ParamKind::Bias, params.b1),
            slope: store.add(format!("{prefix}.slope"), ParamKind::PreluSlope, params.slope),
            w2: store.add(format!("{prefix}.w2"), ParamKind::LinearWeight, params.w2),
            b2: store.add(format!("{prefix}.b2"), ParamKind::Bias, params.b2),
            ratio: params.ratio,
        }
    }

    pub fn params(&self, store: &ParamStore) -> GatingParams {
        GatingParams {
            w1: store.value(self.w1).clone(),
            b1: store.value(self.b1).clone(),
            slope: store.value(self.slope).clone(),
            w2: store.value(self.w2).clone(),
            b2: store.value(self.b2).clone(),
            ratio: self.ratio,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, pre_bin: Var, trainable: bool) -> Result<Var> {
        let pooled = g.global_avg_pool(pre_bin)?;
        let w1 = g.bind(store, self.w1, trainable);
        let b1 = g.bind(store, self.b1, trainable);
        let slope = g.bind(store, self.slope, trainable);
        let w2 = g.bind(store, self.w2, trainable);
        let b2 = g.bind(store, self.b2, trainable);
        let h = g.linear(pooled, w1, b1)?;
        let h = g.prelu(h, slope)?;
        let z = g.linear(h, w2, b2)?;
        Ok(g.sigmoid(z))
    }
}
