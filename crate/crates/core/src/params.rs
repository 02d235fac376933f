//! Named parameter collections shared by encoders, predictor, optimizer,
//! EMA and checkpointing.

use diffcore::{Real, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{CloveError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Conv/linear weights: weight decay and trust-ratio scaling apply.
    Weight,
    Bias,
    /// Batch-norm affine parameters.
    Norm,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        self != ParamKind::Buffer
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

/// Tape handles for the trainable entries of a [`ParamSet`], by position.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    pub fn var(&self, index: usize) -> Var {
        self.vars[index].expect("buffers are never bound")
    }

    pub fn get(&self, index: usize) -> Option<Var> {
        self.vars[index]
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor) -> usize {
        self.params.push(Param {
            name: name.into(),
            kind,
            tensor,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, index: usize) -> &Param {
        &self.params[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Param {
        &mut self.params[index]
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.params[index].tensor
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.params[index].tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind.trainable())
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Same names, kinds and shapes in the same order.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name && a.kind == b.kind && a.tensor.shape() == b.tensor.shape()
            })
    }

    /// Binds every trainable entry onto `tape`.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, requires_grad: bool) -> Result<Bound> {
        self.bind_with(tape, requires_grad, None)
    }

    /// Like [`ParamSet::bind`], but entry `replace.0` takes its values from
    /// `replace.1` at tape precision. Used by gradient checks to perturb one
    /// parameter in f64.
    pub fn bind_with<T: Real>(
        &self,
        tape: &mut Tape<T>,
        requires_grad: bool,
        replace: Option<(usize, &[T])>,
    ) -> Result<Bound> {
        let mut vars = Vec::with_capacity(self.params.len());
        for (i, p) in self.params.iter().enumerate() {
            if !p.kind.trainable() {
                vars.push(None);
                continue;
            }
            let values = match replace {
                Some((idx, vals)) if idx == i => vals.to_vec(),
                _ => p.tensor.data().iter().map(|&x| T::from_f32(x)).collect(),
            };
            vars.push(Some(tape.leaf(p.tensor.shape(), values, requires_grad)?));
        }
        Ok(Bound { vars })
    }

    /// Adds the tape's leaf gradients into each bound tensor's grad buffer.
    pub fn collect_grads<T: Real>(&mut self, tape: &Tape<T>, bound: &Bound) -> Result<()> {
        for (p, v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = v.and_then(|v| tape.grad_f32(v)) {
                p.tensor.accumulate_grad(&g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Overwrites values from `other`, which must share the layout.
    pub fn copy_from(&mut self, other: &ParamSet) -> Result<()> {
        if !self.same_layout(other) {
            return Err(CloveError::Contract("parameter layouts differ".into()));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            dst.tensor.data_mut().copy_from_slice(src.tensor.data());
        }
        Ok(())
    }
}

/// `U(-bound, bound)` initialization.
pub(crate) fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound))
}
