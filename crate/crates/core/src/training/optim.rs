use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        #[serde(default = "sgd_lr")]
        lr: f64,
        #[serde(default = "sgd_momentum")]
        momentum: f64,
        #[serde(default = "sgd_decay")]
        weight_decay: f64,
    },
    Adam {
        #[serde(default = "adam_lr")]
        lr: f64,
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "adam_eps")]
        eps: f64,
        #[serde(default = "sgd_decay")]
        weight_decay: f64,
    },
}

fn sgd_lr() -> f64 {
    0.1
}
fn sgd_momentum() -> f64 {
    0.9
}
fn sgd_decay() -> f64 {
    1e-4
}
fn adam_lr() -> f64 {
    1e-3
}
fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Sgd {
            lr: sgd_lr(),
            momentum: sgd_momentum(),
            weight_decay: sgd_decay(),
        }
    }
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: beta1(),
            beta2: beta2(),
            eps: adam_eps(),
            weight_decay: sgd_decay(),
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => *lr,
        }
    }

    pub fn weight_decay(&self) -> f64 {
        match self {
            OptimizerConfig::Sgd { weight_decay, .. } | OptimizerConfig::Adam { weight_decay, .. } => *weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Sgd {
                lr,
                momentum,
                weight_decay,
            } => lr > 0.0 && (0.0..1.0).contains(&momentum) && weight_decay >= 0.0,
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => lr > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0 && weight_decay >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("optimizer hyperparameters out of range: {self:?}")))
        }
    }

    pub fn step<T: Scalar>(&self, store: &mut ParamStore<T>, state: &mut OptimState<T>, lr: f64) {
        match *self {
            OptimizerConfig::Sgd {
                momentum,
                weight_decay,
                ..
            } => sgd_momentum_step(store, state, lr, momentum, weight_decay),
            OptimizerConfig::Adam {
                beta1,
                beta2,
                eps,
                weight_decay,
                ..
            } => adam_step(store, state, lr, beta1, beta2, eps, weight_decay),
        }
    }
}

/// Learning-rate schedule relative to a phase's step budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// `lr * factor^(step / every)`.
    StepDecay { factor: f64, every: u64 },
    /// `lr * factor^(fractions passed)`.
    Milestones { fractions: Vec<f64>, factor: f64 },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Milestones {
            fractions: vec![0.5, 0.75],
            factor: 0.1,
        }
    }
}

impl LrSchedule {
    pub fn adam_default() -> Self {
        LrSchedule::StepDecay {
            factor: 0.95,
            every: 1000,
        }
    }

    pub fn lr_at(&self, base: f64, step: u64, budget: u64) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::StepDecay { factor, every } => base * factor.powi((step / (*every).max(1)) as i32),
            LrSchedule::Milestones { fractions, factor } => {
                let passed = fractions
                    .iter()
                    .filter(|f| step as f64 >= **f * budget as f64)
                    .count();
                base * factor.powi(passed as i32)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LrSchedule::StepDecay { factor, every } if !(*factor > 0.0) || *every == 0 => {
                Err(Error::config("step_decay needs factor > 0 and every >= 1"))
            }
            LrSchedule::Milestones { fractions, factor }
                if !(*factor > 0.0) || fractions.iter().any(|f| !(0.0..=1.0).contains(f)) =>
            {
                Err(Error::config("milestones need factor > 0 and fractions in [0, 1]"))
            }
            _ => Ok(()),
        }
    }
}

/// Per-parameter moment buffers, indexed like the store's parameters.
#[derive(Clone, Debug, Default)]
pub struct OptimState<T> {
    pub m: Vec<Option<Tensor<T>>>,
    pub v: Vec<Option<Tensor<T>>>,
    /// Steps taken, for bias correction.
    pub t: u64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new() -> Self {
        OptimState {
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    fn ensure(&mut self, n: usize) {
        if self.m.len() < n {
            self.m.resize(n, None);
            self.v.resize(n, None);
        }
    }
}

/// `v <- momentum * v + (g + wd * p)`, `p <- p - lr * v`. Frozen
/// parameters and parameters without gradient are untouched.
pub fn sgd_momentum_step<T: Scalar>(
    store: &mut ParamStore<T>,
    state: &mut OptimState<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    state.ensure(store.params().len());
    state.t += 1;
    let (lr, mu) = (T::of(lr), T::of(momentum));
    for (i, p) in store.params_mut().iter_mut().enumerate() {
        let Some(g) = p.grad.as_ref().filter(|_| p.requires_grad) else {
            continue;
        };
        let wd = T::of(if p.decay { weight_decay } else { 0.0 });
        let v = state.m[i].get_or_insert_with(|| Tensor::zeros(p.value.shape().to_vec()));
        for ((v, &g), w) in v.data_mut().iter_mut().zip(g.data()).zip(p.value.data_mut()) {
            *v = mu * *v + g + wd * *w;
            *w -= lr * *v;
        }
    }
}

/// Bias-corrected Adam with L2 added to the gradient.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    state: &mut OptimState<T>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
) {
    state.ensure(store.params().len());
    state.t += 1;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    let (b1, b2, eps) = (T::of(beta1), T::of(beta2), T::of(eps));
    let step = T::of(lr / c1);
    let c2 = T::of(c2);
    for (i, p) in store.params_mut().iter_mut().enumerate() {
        let Some(g) = p.grad.as_ref().filter(|_| p.requires_grad) else {
            continue;
        };
        let wd = T::of(if p.decay { weight_decay } else { 0.0 });
        let shape = p.value.shape().to_vec();
        let m = state.m[i].get_or_insert_with(|| Tensor::zeros(shape.clone()));
        let v = state.v[i].get_or_insert_with(|| Tensor::zeros(shape));
        for (((m, v), &g), w) in m
            .data_mut()
            .iter_mut()
            .zip(v.data_mut())
            .zip(g.data())
            .zip(p.value.data_mut())
        {
            let g = g + wd * *w;
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            *w -= step * *m / ((*v / c2).sqrt() + eps);
        }
    }
}

/// Global L2 norm of a set of gradients.
pub fn global_norm<T: Scalar>(grads: &[&Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v.as_f64().powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` to global norm `max_norm` when larger; returns the norm before clipping.
pub fn clip_gradients<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(&grads.iter().collect::<Vec<_>>());
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// [`clip_gradients`] over the gradients held by a store's trainable parameters.
pub fn clip_store_gradients<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = global_norm(
        &store
            .params()
            .iter()
            .filter(|p| p.requires_grad)
            .filter_map(|p| p.grad.as_ref())
            .collect::<Vec<_>>(),
    );
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        for p in store.params_mut() {
            if let Some(g) = p.grad.as_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(value: f64, grad: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add_param("w", Tensor::full(vec![1], value), true);
        s.param_mut(id).grad = Some(Tensor::full(vec![1], grad));
        s
    }

    fn value(s: &ParamStore<f64>) -> f64 {
        s.params()[0].value.data()[0]
    }

    #[test]
    fn plain_sgd_and_momentum_accumulation() {
        let mut s = store(1.0, 0.5);
        let mut st = OptimState::new();
        sgd_momentum_step(&mut s, &mut st, 0.1, 0.0, 0.0);
        assert!((value(&s) - 0.95).abs() < 1e-15);

        let mut s = store(0.0, 1.0);
        let mut st = OptimState::new();
        sgd_momentum_step(&mut s, &mut st, 0.1, 0.9, 0.0);
        sgd_momentum_step(&mut s, &mut st, 0.1, 0.9, 0.0);
        assert!((value(&s) + 0.1 * 2.9).abs() < 1e-12);

        let mut s = store(0.7, 0.0);
        sgd_momentum_step(&mut s, &mut OptimState::new(), 0.1, 0.9, 0.0);
        assert_eq!(value(&s), 0.7);
    }

    #[test]
    fn weight_decay_adds_to_gradient_and_respects_frozen() {
        let mut s = store(2.0, 0.0);
        sgd_momentum_step(&mut s, &mut OptimState::new(), 0.1, 0.0, 0.5);
        assert!((value(&s) - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
        let mut s = store(2.0, 1.0);
        s.params_mut()[0].requires_grad = false;
        sgd_momentum_step(&mut s, &mut OptimState::new(), 0.1, 0.9, 0.5);
        adam_step(&mut s, &mut OptimState::new(), 0.1, 0.9, 0.999, 1e-8, 0.5);
        assert_eq!(value(&s), 2.0);
    }

    #[test]
    fn adam_first_step_closed_form() {
        for g in [0.3, -2.0, 1e-3] {
            let mut s = store(1.0, g);
            let eps = 1e-8;
            adam_step(&mut s, &mut OptimState::new(), 0.01, 0.9, 0.999, eps, 0.0);
            let want = 1.0 - 0.01 * g / (g.abs() + eps);
            assert!((value(&s) - want).abs() < 1e-12, "{g}");
        }
        let mut s = store(1.0, 0.0);
        adam_step(&mut s, &mut OptimState::new(), 0.01, 0.9, 0.999, 1e-8, 0.0);
        assert_eq!(value(&s), 1.0);
    }

    #[test]
    fn one_step_decreases_a_quadratic() {
        for opt in [OptimizerConfig::default(), OptimizerConfig::adam(0.01)] {
            let w0 = 3.0;
            let mut s = store(w0, 2.0 * w0);
            s.params_mut()[0].decay = false;
            opt.step(&mut s, &mut OptimState::new(), 0.01);
            assert!(value(&s).powi(2) < w0 * w0);
        }
    }

    #[test]
    fn schedules() {
        let s = LrSchedule::adam_default();
        assert!((s.lr_at(1.0, 2999, 0) - 0.95f64.powi(2)).abs() < 1e-15);
        assert!((s.lr_at(1.0, 3000, 0) - 0.95f64.powi(3)).abs() < 1e-15);
        let m = LrSchedule::default();
        assert_eq!(m.lr_at(0.1, 49, 100), 0.1);
        assert!((m.lr_at(0.1, 50, 100) - 0.01).abs() < 1e-15);
        assert!((m.lr_at(0.1, 80, 100) - 0.001).abs() < 1e-15);
        assert_eq!(LrSchedule::Constant.lr_at(0.3, 10_000, 1), 0.3);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::<f64>::new(vec![2], vec![1.2, 1.6]).unwrap()];
        assert!((clip_gradients(&mut g, 1.0) - 2.0).abs() < 1e-12);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-12 && (g[0].data()[1] - 0.8).abs() < 1e-12);
        let mut h = vec![Tensor::<f64>::new(vec![2], vec![0.3, 0.4]).unwrap()];
        clip_gradients(&mut h, 1.0);
        assert_eq!(h[0].data(), &[0.3, 0.4]);
    }
}
