use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::ctx::{BnUpdate, Ctx, Mode};
use crate::nn::store::{BufferId, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// He normal initialisation for a weight with the given fan-in.
pub fn he_normal<T: Scalar>(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// Bias-free 2-D convolution.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conv2d {
    pub weight: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let w = he_normal(vec![out_ch, in_ch, kernel, kernel], fan_in, rng);
        let weight = store.add_param(format!("{name}.weight"), w, true);
        Conv2d {
            weight,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        ctx.graph.conv2d(x, w, self.stride, self.pad)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    /// Multiply-accumulates per sample for an `h x w` input.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.out_hw(h, w);
        (self.out_ch * oh * ow * self.in_ch * self.kernel * self.kernel) as u64
    }
}

/// Per-channel batch normalisation with running statistics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    /// Number of committed running-statistics updates.
    pub tracked: BufferId,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm {
            name: name.to_string(),
            channels,
            gamma: store.add_param(format!("{name}.gamma"), Tensor::ones(vec![channels]), false),
            beta: store.add_param(format!("{name}.beta"), Tensor::zeros(vec![channels]), false),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(vec![channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(vec![channels])),
            tracked: store.add_buffer(format!("{name}.tracked"), Tensor::zeros(vec![1])),
        }
    }

    /// Train mode normalises by batch statistics and records a running
    /// update; eval mode, or frozen statistics, use the running values.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let c = ctx.graph.shape(x).get(1).copied().unwrap_or(0);
        if c != self.channels {
            return Err(Error::shape(
                "batch_norm",
                format!("{} holds {} channels, input channel axis has {c}", self.name, self.channels),
            ));
        }
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        let eps = T::of(BN_EPS);
        let frozen = ctx.store().buffer(self.running_mean).frozen;
        if ctx.mode() == Mode::Train && !frozen {
            let (y, mean, var) = ctx.graph.batch_norm_train(x, gamma, beta, eps)?;
            let count = ctx.graph.value(x).numel() / c;
            let unbias = if count > 1 {
                T::of(count as f64 / (count - 1) as f64)
            } else {
                T::one()
            };
            ctx.push_bn_update(BnUpdate {
                running_mean: self.running_mean,
                running_var: self.running_var,
                tracked: self.tracked,
                batch_mean: mean,
                batch_var: var.into_iter().map(|v| v * unbias).collect(),
                momentum: T::of(BN_MOMENTUM),
            });
            return Ok(y);
        }
        if ctx.store().buffer(self.tracked).value.item() == T::zero() {
            return Err(Error::UninitializedStats(self.name.clone()));
        }
        let mean = ctx.store().buffer(self.running_mean).value.data().to_vec();
        let var = ctx.store().buffer(self.running_var).value.data().to_vec();
        ctx.graph.batch_norm_eval(x, gamma, beta, &mean, &var, eps)
    }

    /// Marks the running statistics as populated without changing them.
    pub fn mark_initialized<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let t = &mut store.buffer_mut(self.tracked).value.data_mut()[0];
        if *t == T::zero() {
            *t = T::one();
        }
    }
}

/// Fully connected layer `y = x W^T + b`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = he_normal(vec![out_features, in_features], in_features, rng);
        let weight = store.add_param(format!("{name}.weight"), w, true);
        let bias = bias.then(|| store.add_param(format!("{name}.bias"), Tensor::zeros(vec![out_features]), false));
        Linear {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.graph.linear(x, w, b)
    }

    pub fn macs(&self) -> u64 {
        (self.in_features * self.out_features) as u64
    }
}

/// LSTM cell with gate order input, forget, candidate, output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        LstmCell {
            w_ih: store.add_param(
                format!("{name}.w_ih"),
                Tensor::uniform(vec![4 * hidden, input], -bound, bound, rng),
                true,
            ),
            w_hh: store.add_param(
                format!("{name}.w_hh"),
                Tensor::uniform(vec![4 * hidden, hidden], -bound, bound, rng),
                true,
            ),
            bias: store.add_param(format!("{name}.bias"), Tensor::zeros(vec![4 * hidden]), false),
            input,
            hidden,
        }
    }

    /// Returns `(h', c')`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let (n, d) = ctx.graph.value(x).dims2()?;
        if d != self.input {
            return Err(Error::shape("lstm_cell", format!("input width {d}, cell expects {}", self.input)));
        }
        for (what, v) in [("h", h), ("c", c)] {
            if ctx.graph.shape(v) != [n, self.hidden] {
                return Err(Error::shape(
                    "lstm_cell",
                    format!("state {what} has shape {:?}, expected [{n}, {}]", ctx.graph.shape(v), self.hidden),
                ));
            }
        }
        let w_ih = ctx.param(self.w_ih);
        let w_hh = ctx.param(self.w_hh);
        let b = ctx.param(self.bias);
        let gx = ctx.graph.linear(x, w_ih, Some(b))?;
        let gh = ctx.graph.linear(h, w_hh, None)?;
        let gates = ctx.graph.add(gx, gh)?;
        let hd = self.hidden;
        let i_pre = ctx.graph.slice_cols(gates, 0, hd)?;
        let f_pre = ctx.graph.slice_cols(gates, hd, hd)?;
        let g_pre = ctx.graph.slice_cols(gates, 2 * hd, hd)?;
        let o_pre = ctx.graph.slice_cols(gates, 3 * hd, hd)?;
        let i = ctx.graph.sigmoid(i_pre);
        let f = ctx.graph.sigmoid(f_pre);
        let g = ctx.graph.tanh(g_pre);
        let o = ctx.graph.sigmoid(o_pre);
        let keep = ctx.graph.mul(f, c)?;
        let write = ctx.graph.mul(i, g)?;
        let c_next = ctx.graph.add(keep, write)?;
        let c_act = ctx.graph.tanh(c_next);
        let h_next = ctx.graph.mul(o, c_act)?;
        Ok((h_next, c_next))
    }

    pub fn macs(&self) -> u64 {
        (4 * self.hidden * (self.input + self.hidden)) as u64
    }
}
