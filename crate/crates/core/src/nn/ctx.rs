use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::Result;
use crate::nn::store::{BufferId, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// Deferred running-statistics update produced by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub tracked: BufferId,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
    pub momentum: T,
}

/// One forward pass: a fresh graph bound to read-only parameters.
///
/// Running-statistics updates are collected, not applied, so that any
/// number of passes can share a store; call
/// [`ParamStore::apply_bn_updates`] to commit them.
pub struct Ctx<'a, T: Scalar> {
    pub graph: Graph<T>,
    store: &'a ParamStore<T>,
    vars: Vec<Option<Var>>,
    mode: Mode,
    bn_updates: Vec<BnUpdate<T>>,
    /// `(sample, unit)` evaluations performed by routed modules.
    pub unit_evals: usize,
}

/// Result of a reverse pass through a [`Ctx`].
pub struct Backward<T> {
    pub grads: Gradients<T>,
    pub param_vars: Vec<(ParamId, Var)>,
    pub bn_updates: Vec<BnUpdate<T>>,
}

impl<T: Scalar> Backward<T> {
    /// Gradients of every parameter reached by the pass.
    pub fn param_grads(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        let mut out = Vec::new();
        for &(id, v) in &self.param_vars {
            if let Some(g) = self.grads.take(v) {
                out.push((id, g));
            }
        }
        out
    }
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>, mode: Mode) -> Self {
        Ctx {
            graph: Graph::new(),
            store,
            vars: vec![None; store.params().len()],
            mode,
            bn_updates: Vec::new(),
            unit_evals: 0,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Graph leaf for a parameter, created once per pass.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let p = self.store.param(id);
        let v = self.graph.leaf(p.value.clone(), p.requires_grad);
        self.vars[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.graph.constant(value)
    }

    pub(crate) fn push_bn_update(&mut self, u: BnUpdate<T>) {
        self.bn_updates.push(u);
    }

    pub fn into_bn_updates(self) -> Vec<BnUpdate<T>> {
        self.bn_updates
    }

    pub fn backward(self, loss: Var) -> Result<Backward<T>> {
        let param_vars = self
            .vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect();
        let grads = self.graph.backward(loss)?;
        Ok(Backward {
            grads,
            param_vars,
            bn_updates: self.bn_updates,
        })
    }
}

impl<T: Scalar> ParamStore<T> {
    /// Commits running-statistics updates in recording order.
    pub fn apply_bn_updates(&mut self, updates: Vec<BnUpdate<T>>) {
        for u in updates {
            if self.buffer(u.running_mean).frozen {
                continue;
            }
            let m = u.momentum;
            let keep = T::one() - m;
            for (r, b) in self.buffer_mut(u.running_mean).value.data_mut().iter_mut().zip(&u.batch_mean) {
                *r = keep * *r + m * *b;
            }
            for (r, b) in self.buffer_mut(u.running_var).value.data_mut().iter_mut().zip(&u.batch_var) {
                *r = keep * *r + m * *b;
            }
            self.buffer_mut(u.tracked).value.data_mut()[0] += T::one();
        }
    }
}
