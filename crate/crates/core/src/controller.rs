//! Controllers mapping the current representation (and state) to unit logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Ctx, Linear, LstmCell, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const RNN_HIDDEN: usize = 64;
pub const MIN_CNN_CHANNELS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    #[default]
    Cnn,
    Rnn,
}

/// Recurrent state carried across the iterations of one module.
#[derive(Clone, Debug, Default)]
pub struct ControllerState {
    pub h: Option<Var>,
    pub c: Option<Var>,
    pub iteration: usize,
}

impl ControllerState {
    /// Zero hidden and cell state at iteration 0. The zeros are
    /// materialised lazily once the batch size is known.
    pub fn reset() -> Self {
        ControllerState::default()
    }
}

/// Batch-norm slots indexed by iteration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerIterationBn {
    pub slots: Vec<BatchNorm>,
}

impl PerIterationBn {
    pub fn slot(&self, iteration: usize) -> Result<&BatchNorm> {
        self.slots.get(iteration).ok_or_else(|| {
            Error::config(format!(
                "iteration {iteration} has no batch-norm slot (module runs {} iterations)",
                self.slots.len()
            ))
        })
    }
}

/// Bias-free shallow CNN: conv -> per-iteration BN -> ReLU -> GAP
/// (+ iteration embedding) -> fully connected.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CnnController {
    pub conv: Conv2d,
    pub bn: PerIterationBn,
    pub embed: Vec<ParamId>,
    pub fc: Linear,
}

/// Global-average-pooled features through an LSTM cell and a linear head.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RnnController {
    pub cell: LstmCell,
    pub head: Linear,
    pub max_iterations: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Controller {
    Cnn(CnnController),
    Rnn(RnnController),
}

impl Controller {
    /// `options` counts the units plus the zero unit, if any.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        kind: ControllerKind,
        in_channels: usize,
        options: usize,
        iterations: usize,
        rng: &mut impl Rng,
    ) -> Self {
        match kind {
            ControllerKind::Cnn => {
                let ch = (in_channels / 2).max(MIN_CNN_CHANNELS);
                let conv = Conv2d::new(store, &format!("{prefix}.conv"), in_channels, ch, 3, 1, 1, rng);
                let slots = (0..iterations)
                    .map(|k| BatchNorm::new(store, &format!("{prefix}.iter{k}.bn"), ch))
                    .collect();
                let embed = (0..iterations)
                    .map(|k| store.add_param(format!("{prefix}.iter{k}.embed"), Tensor::zeros(vec![ch]), false))
                    .collect();
                let fc = Linear::new(store, &format!("{prefix}.fc"), ch, options, false, rng);
                Controller::Cnn(CnnController {
                    conv,
                    bn: PerIterationBn { slots },
                    embed,
                    fc,
                })
            }
            ControllerKind::Rnn => {
                let cell = LstmCell::new(store, &format!("{prefix}.lstm"), in_channels, RNN_HIDDEN, rng);
                let head = Linear::new(store, &format!("{prefix}.head"), RNN_HIDDEN, options, true, rng);
                Controller::Rnn(RnnController {
                    cell,
                    head,
                    max_iterations: iterations,
                })
            }
        }
    }

    pub fn kind(&self) -> ControllerKind {
        match self {
            Controller::Cnn(_) => ControllerKind::Cnn,
            Controller::Rnn(_) => ControllerKind::Rnn,
        }
    }

    pub fn reset_state(&self) -> ControllerState {
        ControllerState::reset()
    }

    pub fn max_iterations(&self) -> usize {
        match self {
            Controller::Cnn(c) => c.bn.slots.len(),
            Controller::Rnn(r) => r.max_iterations,
        }
    }

    /// Logits `[N, options]` for the current iteration; advances `state`.
    pub fn score<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var, state: &mut ControllerState) -> Result<Var> {
        let iteration = state.iteration;
        if iteration >= self.max_iterations() {
            return Err(Error::config(format!(
                "controller asked for iteration {iteration}, configured for {}",
                self.max_iterations()
            )));
        }
        let logits = match self {
            Controller::Cnn(c) => {
                let bn = c.bn.slot(iteration)?;
                let h = c.conv.forward(ctx, x)?;
                let h = bn.forward(ctx, h)?;
                let h = ctx.graph.relu(h);
                let pooled = ctx.graph.global_avg_pool(h)?;
                let e = ctx.param(c.embed[iteration]);
                let feat = ctx.graph.add_row_vec(pooled, e)?;
                c.fc.forward(ctx, feat)?
            }
            Controller::Rnn(r) => {
                let pooled = ctx.graph.global_avg_pool(x)?;
                let n = ctx.graph.shape(pooled)[0];
                let zeros = || Tensor::zeros(vec![n, r.cell.hidden]);
                let h = match state.h {
                    Some(h) => h,
                    None => ctx.input(zeros()),
                };
                let c = match state.c {
                    Some(c) => c,
                    None => ctx.input(zeros()),
                };
                let (h2, c2) = r.cell.forward(ctx, pooled, h, c)?;
                state.h = Some(h2);
                state.c = Some(c2);
                r.head.forward(ctx, h2)?
            }
        };
        state.iteration += 1;
        Ok(logits)
    }

    /// Multiply-accumulates of one scoring call on an `h x w` input.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        match self {
            Controller::Cnn(c) => c.conv.macs(h, w) + c.fc.macs(),
            Controller::Rnn(r) => r.cell.macs() + r.head.macs(),
        }
    }

    /// Per-iteration batch norms (empty for the RNN controller).
    pub fn batch_norms(&self) -> &[BatchNorm] {
        match self {
            Controller::Cnn(c) => &c.bn.slots,
            Controller::Rnn(_) => &[],
        }
    }
}
