//! Named trainable parameters with gradient buffers.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    LinearWeight,
    Bias,
    BatchNormScale,
    BatchNormShift,
    PreluSlope,
    /// Logarithm of a positive per-channel scale factor.
    LogScale,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    /// Set when the forward pass binarizes this weight with `sign`.
    pub sign_constrained: bool,
}

impl Param {
    /// Real-valued parameters subject to L2 weight decay: everything except
    /// batch-norm affine terms and weights the forward pass binarizes.
    pub fn decays(&self) -> bool {
        !matches!(self.kind, ParamKind::BatchNormScale | ParamKind::BatchNormShift) && !self.sign_constrained
    }

    pub fn accumulate_grad(&mut self, g: &Tensor) -> Result<()> {
        match self.grad.as_mut() {
            Some(buf) => buf.add_scaled_in_place(g, 1.0),
            None => {
                self.value.expect_same_shape(g)?;
                self.grad = Some(g.clone());
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            kind,
            value,
            grad: None,
            sign_constrained: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Copies values from `other`, matching by name. Every parameter here
    /// must exist in `other` with the same shape.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let id = other
                .find(&p.name)
                .ok_or_else(|| Error::shape(format!("parameter {} missing from source", p.name)))?;
            let src = &other.params[id.0].value;
            if src.shape() != p.value.shape() {
                return Err(Error::shape(format!(
                    "parameter {} has shape {:?} in source but {:?} here",
                    p.name,
                    src.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.clone();
        }
        Ok(())
    }
}
