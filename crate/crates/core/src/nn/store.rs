use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct BufferId(pub(crate) usize);

/// A trainable tensor.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    /// Cleared when the parameter is frozen.
    pub requires_grad: bool,
    /// Whether the L2 penalty applies (weights yes, norm affine terms no).
    pub decay: bool,
}

/// Non-trainable state such as batch-norm running statistics.
#[derive(Clone, Debug)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub frozen: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    buffers: Vec<Buffer<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find_param(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            requires_grad: true,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> BufferId {
        let name = name.into();
        debug_assert!(self.find_buffer(&name).is_none(), "duplicate buffer {name}");
        self.buffers.push(Buffer {
            name,
            value,
            frozen: false,
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Buffer<T> {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Buffer<T> {
        &mut self.buffers[id.0]
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<T>] {
        &mut self.buffers
    }

    pub fn find_param(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn find_buffer(&self, name: &str) -> Option<BufferId> {
        self.buffers.iter().position(|b| b.name == name).map(BufferId)
    }

    /// Total number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Scalar count of parameters whose name passes `pred`.
    pub fn count_params(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.params
            .iter()
            .filter(|p| pred(&p.name))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Sets trainability of every parameter and buffer by name.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            p.requires_grad = pred(&p.name);
        }
        for b in &mut self.buffers {
            b.frozen = !pred(&b.name);
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Hash over names and exact bit patterns of matching params and buffers.
    pub fn checksum(&self, pred: impl Fn(&str) -> bool) -> u64 {
        let mut h = DefaultHasher::new();
        let tensors = self
            .params
            .iter()
            .map(|p| (&p.name, &p.value))
            .chain(self.buffers.iter().map(|b| (&b.name, &b.value)));
        for (name, value) in tensors.filter(|(n, _)| pred(n)) {
            name.hash(&mut h);
            for v in value.data() {
                v.as_f64().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: None,
                    requires_grad: p.requires_grad,
                    decay: p.decay,
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer {
                    name: b.name.clone(),
                    value: b.value.cast(),
                    frozen: b.frozen,
                })
                .collect(),
        }
    }

    /// Copies values of every entry named in `rename(other_name)` from `other`.
    pub fn copy_from(&mut self, other: &ParamStore<T>, rename: impl Fn(&str) -> Option<String>) -> Result<usize> {
        let mut copied = 0;
        for p in &other.params {
            let Some(target) = rename(&p.name) else { continue };
            let id = self
                .find_param(&target)
                .ok_or_else(|| Error::config(format!("no parameter named {target}")))?;
            let dst = &mut self.params[id.0];
            if dst.value.shape() != p.value.shape() {
                return Err(Error::shape("copy_from", format!("{target}: {:?} vs {:?}", dst.value.shape(), p.value.shape())));
            }
            dst.value = p.value.clone();
            copied += 1;
        }
        for b in &other.buffers {
            let Some(target) = rename(&b.name) else { continue };
            let id = self
                .find_buffer(&target)
                .ok_or_else(|| Error::config(format!("no buffer named {target}")))?;
            self.buffers[id.0].value = b.value.clone();
            copied += 1;
        }
        Ok(copied)
    }
}
