//! Dynamically recorded computation graph with reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the nodes in exact reverse order of recording and consumes the
//! graph. Nodes whose inputs never require a gradient are skipped, so frozen
//! weights cost nothing on the way back.

use crate::autodiff::kernels::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::scalar::{matmul, Scalar};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRowVec(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    MeanOverBatch(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
        per_sample: bool,
    },
    RowEntropy(Var),
    ScaleRows(Var, Var),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    StraightThrough(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Floor applied inside logarithms of probabilities.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of leaves, produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("operand shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A gradient-free copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x + *y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b), self.rg(&[a, b])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x - *y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Sub(a, b), self.rg(&[a, b])))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x * *y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b), self.rg(&[a, b])))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|v| v * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Adds a vector to every row along the leading axis.
    pub fn add_row_vec(&mut self, a: Var, v: Var) -> Result<Var> {
        let va = self.value(a);
        let vv = self.value(v);
        let inner = va.numel() / va.shape()[0].max(1);
        if vv.numel() != inner {
            return Err(Error::shape(
                "add_row_vec",
                format!("rows of {:?} have {inner} entries, vector {:?}", va.shape(), vv.shape()),
            ));
        }
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| *x + vv.data()[i % inner])
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRowVec(a, v), self.rg(&[a, v])))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| T::one() / (T::one() + (-v).exp()));
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.tanh());
        let rg = self.rg(&[a]);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / T::of(v.numel() as f64));
        let rg = self.rg(&[a]);
        self.push(out, Op::Mean(a), rg)
    }

    /// `[N, M] -> [N]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.value(a).dims2()?;
        let data = self.value(a).data().chunks(m).map(|r| r.iter().copied().sum()).collect();
        let out = Tensor::new(vec![n], data)?;
        Ok(self.push(out, Op::SumRows(a), self.rg(&[a])))
    }

    /// `[N, M] -> [M]`, averaging over the batch axis.
    pub fn mean_over_batch(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.value(a).dims2()?;
        let mut data = vec![T::zero(); m];
        for row in self.value(a).data().chunks(m) {
            for (d, v) in data.iter_mut().zip(row) {
                *d += *v;
            }
        }
        let inv = T::one() / T::of(n as f64);
        data.iter_mut().for_each(|d| *d *= inv);
        let out = Tensor::new(vec![m], data)?;
        Ok(self.push(out, Op::MeanOverBatch(a), self.rg(&[a])))
    }

    /// `x[N,D] * w[O,D]^T + b[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        let (o, dw) = self.value(w).dims2()?;
        if d != dw {
            return Err(Error::shape(
                "linear",
                format!("input features {d} vs weight in-features {dw} (weight [O={o}, D={dw}])"),
            ));
        }
        if let Some(b) = b {
            if self.value(b).numel() != o {
                return Err(Error::shape(
                    "linear",
                    format!("bias has {} entries, expected {o}", self.value(b).numel()),
                ));
            }
        }
        let mut y = vec![T::zero(); n * o];
        matmul(n, d, o, self.value(x).data(), false, self.value(w).data(), true, T::zero(), &mut y);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in y.chunks_mut(o) {
                for (yv, bb) in row.iter_mut().zip(bv) {
                    *yv += *bb;
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(Tensor::new(vec![n, o], y)?, Op::Linear { x, w, b }, rg))
    }

    /// 2-D cross-correlation of `x[N,C,H,W]` with `w[O,C,kH,kW]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (o, wc, kh, kw) = self.value(w).dims4()?;
        if c != wc {
            return Err(Error::shape(
                "conv2d",
                format!("input channel axis (dim 1) is {c}, weight channel axis (dim 1) is {wc}"),
            ));
        }
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} exceeds padded spatial axes {}x{}", h + 2 * pad, wd + 2 * pad),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let geom = ConvGeom::new(c, h, wd, kh, kw, stride, pad);
        let y = kernels::conv2d_forward(self.value(x).data(), n, self.value(w).data(), o, &geom);
        let out = Tensor::new(vec![n, o, geom.oh, geom.ow], y)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(out, Op::Conv2d { x, w, geom }, rg))
    }

    fn channel_layout(&self, x: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        match *s {
            [n, c] => Ok((n, c, 1)),
            [n, c, h, w] => Ok((n, c, h * w)),
            _ => Err(Error::shape(op, format!("expected [N,C] or [N,C,H,W], got {s:?}"))),
        }
    }

    /// Batch normalisation with batch statistics. Returns the output and the
    /// per-channel batch mean and biased variance.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (n, c, hw) = self.channel_layout(x, "batch_norm")?;
        self.check_channels(gamma, beta, c)?;
        let xv = self.value(x).data();
        let count = T::of((n * hw) as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                mean[ch] += xv[base..base + hw].iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                var[ch] += xv[base..base + hw].iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut y = vec![T::zero(); xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    xhat[i] = (xv[i] - mean[ch]) * inv_std[ch];
                    y[i] = gv[ch] * xhat[i] + bv[ch];
                }
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), y)?;
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            out,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((v, mean, var))
    }

    /// Batch normalisation with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (n, c, hw) = self.channel_layout(x, "batch_norm")?;
        self.check_channels(gamma, beta, c)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("running statistics hold {} channels, input channel axis has {c}", mean.len()),
            ));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut y = vec![T::zero(); xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    y[i] = gv[ch] * (xv[i] - mean[ch]) * inv_std[ch] + bv[ch];
                }
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), y)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
            rg,
        ))
    }

    fn check_channels(&self, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape(
                "batch_norm",
                format!(
                    "affine parameters hold {}/{} channels, input channel axis has {c}",
                    self.value(gamma).numel(),
                    self.value(beta).numel()
                ),
            ));
        }
        Ok(())
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if kernel > h + 2 * pad || kernel > w + 2 * pad || pad >= kernel {
            return Err(Error::shape(
                "max_pool2d",
                format!("kernel {kernel} with padding {pad} does not fit {h}x{w}"),
            ));
        }
        let geom = ConvGeom::new(c, h, w, kernel, kernel, stride, pad);
        let (y, argmax) = kernels::max_pool2d_forward(self.value(x).data(), n, &geom);
        let out = Tensor::new(vec![n, c, geom.oh, geom.ow], y)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MaxPool2d { x, argmax }, rg))
    }

    /// `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let inv = T::one() / T::of(hw as f64);
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new(vec![n, c], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::GlobalAvgPool(x), rg))
    }

    /// Softmax along the last axis of a `[N, M]` tensor.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.value(a).dims2()?;
        let data = kernels::softmax_rows(self.value(a).data(), m);
        let out = Tensor::new(vec![n, m], data)?;
        Ok(self.push(out, Op::Softmax(a), self.rg(&[a])))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.value(a).dims2()?;
        let data = kernels::log_softmax_rows(self.value(a).data(), m);
        let out = Tensor::new(vec![n, m], data)?;
        Ok(self.push(out, Op::LogSoftmax(a), self.rg(&[a])))
    }

    fn cross_entropy_impl(&mut self, logits: Var, labels: &[usize], per_sample: bool) -> Result<Var> {
        let (n, m) = self.value(logits).dims2()?;
        if labels.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for a batch of {n}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
            return Err(Error::shape("cross_entropy", format!("label {bad} out of {m} classes")));
        }
        let logp = kernels::log_softmax_rows(self.value(logits).data(), m);
        let losses: Vec<T> = labels.iter().enumerate().map(|(i, &l)| -logp[i * m + l]).collect();
        let probs = logp.iter().map(|v| v.exp()).collect();
        let out = if per_sample {
            Tensor::new(vec![n], losses)?
        } else {
            Tensor::scalar(losses.iter().copied().sum::<T>() / T::of(n as f64))
        };
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                per_sample,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `labels` under softmax(`logits`).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.cross_entropy_impl(logits, labels, false)
    }

    /// Per-sample negative log-likelihood, `[N]`.
    pub fn cross_entropy_per_sample(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.cross_entropy_impl(logits, labels, true)
    }

    /// Natural-log entropy of every row of a `[N, M]` probability matrix.
    pub fn row_entropy(&mut self, p: Var) -> Result<Var> {
        let (n, m) = self.value(p).dims2()?;
        let floor = T::of(LOG_FLOOR);
        let data = self
            .value(p)
            .data()
            .chunks(m)
            .map(|r| -r.iter().map(|&v| v * v.max(floor).ln()).sum::<T>())
            .collect();
        let out = Tensor::new(vec![n], data)?;
        Ok(self.push(out, Op::RowEntropy(p), self.rg(&[p])))
    }

    /// Multiplies sample `i` of `a` by `w[i]`.
    pub fn scale_rows(&mut self, a: Var, w: Var) -> Result<Var> {
        let n = self.shape(a)[0];
        if self.value(w).numel() != n {
            return Err(Error::shape(
                "scale_rows",
                format!("{} row weights for leading axis {n}", self.value(w).numel()),
            ));
        }
        let inner = self.value(a).numel() / n.max(1);
        let wv = self.value(w).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| *v * wv[i / inner])
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::ScaleRows(a, w), self.rg(&[a, w])))
    }

    /// Selects rows of the leading axis.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = shape[0];
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather_rows", format!("row {bad} out of {n}")));
        }
        let inner = self.value(a).numel() / n.max(1);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            data.extend_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        let mut out_shape = shape;
        out_shape[0] = idx.len();
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(out, Op::GatherRows(a, idx.to_vec()), self.rg(&[a])))
    }

    /// Places row `r` of `a` at row `idx[r]` of a zero tensor with `n` rows.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], n: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape[0] != idx.len() {
            return Err(Error::shape(
                "scatter_rows",
                format!("{} rows for {} indices", shape[0], idx.len()),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("scatter_rows", format!("row {bad} out of {n}")));
        }
        let inner = self.value(a).numel() / shape[0].max(1);
        let src = self.value(a).data();
        let mut data = vec![T::zero(); n * inner];
        for (r, &i) in idx.iter().enumerate() {
            data[i * inner..(i + 1) * inner].copy_from_slice(&src[r * inner..(r + 1) * inner]);
        }
        let mut out_shape = shape;
        out_shape[0] = n;
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(out, Op::ScatterRows(a, idx.to_vec()), self.rg(&[a])))
    }

    /// Columns `start..start+len` of a `[N, M]` tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.value(x).dims2()?;
        if start + len > m {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{} out of {m}", start + len),
            ));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&src[r * m + start..r * m + start + len]);
        }
        let out = Tensor::new(vec![n, len], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }, self.rg(&[x])))
    }

    /// Column `j` of a `[N, M]` tensor as `[N]`.
    pub fn column(&mut self, x: Var, j: usize) -> Result<Var> {
        let s = self.slice_cols(x, j, 1)?;
        let n = self.shape(s)[0];
        self.reshape(s, vec![n])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), self.rg(&[a])))
    }

    /// Forward value `hard`; gradients pass unchanged to `soft`.
    pub fn straight_through(&mut self, hard: Tensor<T>, soft: Var) -> Result<Var> {
        same_shape("straight_through", hard.shape(), self.shape(soft))?;
        let rg = self.rg(&[soft]);
        Ok(self.push(hard, Op::StraightThrough(soft), rg))
    }

    /// Reverse pass from the scalar `loss`. Consumes the graph.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let nodes = self.nodes;
        let count = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(count);
        grads.resize_with(count, || None);
        let mut leaves: Vec<Option<Tensor<T>>> = Vec::with_capacity(nodes.len());
        leaves.resize_with(nodes.len(), || None);
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..count).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Op::Leaf = node.op {
                leaves[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            propagate(&nodes, i, &g, &mut grads);
        }
        Ok(Gradients { grads: leaves })
    }
}

fn slot<'g, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'g mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'g mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

fn propagate<T: Scalar>(nodes: &[Node<T>], i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[i];
    let val = |v: Var| nodes[v.0].value.data();
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                add_into(gb, g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for (d, s) in gb.iter_mut().zip(g) {
                    *d -= *s;
                }
            }
        }
        Op::Mul(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((d, s), y) in ga.iter_mut().zip(g).zip(val(*b)) {
                    *d += *s * *y;
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for ((d, s), x) in gb.iter_mut().zip(g).zip(val(*a)) {
                    *d += *s * *x;
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for (d, s) in ga.iter_mut().zip(g) {
                    *d += *s * *c;
                }
            }
        }
        Op::AddRowVec(a, v) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                add_into(ga, g);
            }
            if let Some(gv) = slot(nodes, grads, *v) {
                let inner = gv.len();
                for row in g.chunks(inner) {
                    add_into(gv, row);
                }
            }
        }
        Op::Relu(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((d, s), x) in ga.iter_mut().zip(g).zip(val(*a)) {
                    if *x > T::zero() {
                        *d += *s;
                    }
                }
            }
        }
        Op::Sigmoid(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((d, s), y) in ga.iter_mut().zip(g).zip(out) {
                    *d += *s * *y * (T::one() - *y);
                }
            }
        }
        Op::Tanh(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((d, s), y) in ga.iter_mut().zip(g).zip(out) {
                    *d += *s * (T::one() - *y * *y);
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let s = g[0] / T::of(ga.len() as f64);
                ga.iter_mut().for_each(|d| *d += s);
            }
        }
        Op::SumRows(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let m = ga.len() / g.len();
                for (row, s) in ga.chunks_mut(m).zip(g) {
                    row.iter_mut().for_each(|d| *d += *s);
                }
            }
        }
        Op::MeanOverBatch(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let m = g.len();
                let inv = T::one() / T::of((ga.len() / m) as f64);
                for row in ga.chunks_mut(m) {
                    for (d, s) in row.iter_mut().zip(g) {
                        *d += *s * inv;
                    }
                }
            }
        }
        Op::Linear { x, w, b } => {
            let xs = nodes[x.0].value.shape();
            let (n, d) = (xs[0], xs[1]);
            let o = nodes[w.0].value.shape()[0];
            if let Some(gx) = slot(nodes, grads, *x) {
                matmul(n, o, d, g, false, val(*w), false, T::one(), gx);
            }
            if let Some(gw) = slot(nodes, grads, *w) {
                matmul(o, n, d, g, true, val(*x), false, T::one(), gw);
            }
            if let Some(b) = b {
                if let Some(gb) = slot(nodes, grads, *b) {
                    for row in g.chunks(o) {
                        add_into(gb, row);
                    }
                }
            }
        }
        Op::Conv2d { x, w, geom } => {
            let n = nodes[x.0].value.shape()[0];
            let o = nodes[w.0].value.shape()[0];
            let need_x = nodes[x.0].requires_grad;
            let need_w = nodes[w.0].requires_grad;
            let mut gw_buf = need_w.then(|| vec![T::zero(); nodes[w.0].value.numel()]);
            let mut gx_buf = need_x.then(|| vec![T::zero(); nodes[x.0].value.numel()]);
            kernels::conv2d_backward(
                val(*x),
                n,
                val(*w),
                o,
                geom,
                g,
                gx_buf.as_deref_mut(),
                gw_buf.as_deref_mut(),
            );
            if let (Some(buf), Some(gx)) = (gx_buf, slot(nodes, grads, *x)) {
                add_into(gx, &buf);
            }
            if let (Some(buf), Some(gw)) = (gw_buf, slot(nodes, grads, *w)) {
                add_into(gw, &buf);
            }
        }
        Op::BatchNormTrain {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let c = inv_std.len();
            let shape = nodes[x.0].value.shape();
            let n = shape[0];
            let hw = nodes[x.0].value.numel() / (n * c);
            let count = T::of((n * hw) as f64);
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gx = vec![T::zero(); c];
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * hw;
                    for k in base..base + hw {
                        sum_g[ch] += g[k];
                        sum_gx[ch] += g[k] * xhat[k];
                    }
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                let gv = val(*gamma);
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        let k0 = gv[ch] * inv_std[ch] / count;
                        for k in base..base + hw {
                            gx[k] += k0 * (count * g[k] - sum_g[ch] - xhat[k] * sum_gx[ch]);
                        }
                    }
                }
            }
            if let Some(gg) = slot(nodes, grads, *gamma) {
                add_into(gg, &sum_gx);
            }
            if let Some(gb) = slot(nodes, grads, *beta) {
                add_into(gb, &sum_g);
            }
        }
        Op::BatchNormEval {
            x,
            gamma,
            beta,
            mean,
            inv_std,
        } => {
            let c = inv_std.len();
            let n = nodes[x.0].value.shape()[0];
            let hw = nodes[x.0].value.numel() / (n * c);
            let xv = val(*x);
            let gv = val(*gamma);
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gx = vec![T::zero(); c];
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * hw;
                    for k in base..base + hw {
                        sum_g[ch] += g[k];
                        sum_gx[ch] += g[k] * (xv[k] - mean[ch]) * inv_std[ch];
                    }
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        let k0 = gv[ch] * inv_std[ch];
                        for k in base..base + hw {
                            gx[k] += g[k] * k0;
                        }
                    }
                }
            }
            if let Some(gg) = slot(nodes, grads, *gamma) {
                add_into(gg, &sum_gx);
            }
            if let Some(gb) = slot(nodes, grads, *beta) {
                add_into(gb, &sum_g);
            }
        }
        Op::MaxPool2d { x, argmax } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for (s, &idx) in g.iter().zip(argmax) {
                    gx[idx] += *s;
                }
            }
        }
        Op::GlobalAvgPool(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let hw = gx.len() / g.len();
                let inv = T::one() / T::of(hw as f64);
                for (plane, s) in gx.chunks_mut(hw).zip(g) {
                    plane.iter_mut().for_each(|d| *d += *s * inv);
                }
            }
        }
        Op::Softmax(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let m = node.value.shape()[1];
                for ((dst, gr), yr) in ga.chunks_mut(m).zip(g.chunks(m)).zip(out.chunks(m)) {
                    let dot: T = gr.iter().zip(yr).map(|(a, b)| *a * *b).sum();
                    for ((d, s), y) in dst.iter_mut().zip(gr).zip(yr) {
                        *d += *y * (*s - dot);
                    }
                }
            }
        }
        Op::LogSoftmax(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let m = node.value.shape()[1];
                for ((dst, gr), lr) in ga.chunks_mut(m).zip(g.chunks(m)).zip(out.chunks(m)) {
                    let total: T = gr.iter().copied().sum();
                    for ((d, s), l) in dst.iter_mut().zip(gr).zip(lr) {
                        *d += *s - l.exp() * total;
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
            per_sample,
        } => {
            if let Some(gl) = slot(nodes, grads, *logits) {
                let n = labels.len();
                let m = probs.len() / n;
                for (r, &label) in labels.iter().enumerate() {
                    let scale = if *per_sample {
                        g[r]
                    } else {
                        g[0] / T::of(n as f64)
                    };
                    for j in 0..m {
                        let target = if j == label { T::one() } else { T::zero() };
                        gl[r * m + j] += scale * (probs[r * m + j] - target);
                    }
                }
            }
        }
        Op::RowEntropy(p) => {
            if let Some(gp) = slot(nodes, grads, *p) {
                let m = gp.len() / g.len();
                let floor = T::of(LOG_FLOOR);
                for ((dst, s), pr) in gp.chunks_mut(m).zip(g).zip(val(*p).chunks(m)) {
                    for (d, v) in dst.iter_mut().zip(pr) {
                        *d -= *s * (v.max(floor).ln() + T::one());
                    }
                }
            }
        }
        Op::ScaleRows(a, w) => {
            let n = nodes[a.0].value.shape()[0].max(1);
            let inner = g.len() / n;
            if let Some(ga) = slot(nodes, grads, *a) {
                let wv = val(*w);
                for (k, (d, s)) in ga.iter_mut().zip(g).enumerate() {
                    *d += *s * wv[k / inner];
                }
            }
            if let Some(gw) = slot(nodes, grads, *w) {
                let av = val(*a);
                for (r, d) in gw.iter_mut().enumerate() {
                    let range = r * inner..(r + 1) * inner;
                    *d += g[range.clone()].iter().zip(&av[range]).map(|(x, y)| *x * *y).sum::<T>();
                }
            }
        }
        Op::GatherRows(a, idx) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let inner = g.len() / idx.len().max(1);
                for (r, &row) in idx.iter().enumerate() {
                    add_into(&mut ga[row * inner..(row + 1) * inner], &g[r * inner..(r + 1) * inner]);
                }
            }
        }
        Op::ScatterRows(a, idx) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let inner = ga.len() / idx.len().max(1);
                for (r, &row) in idx.iter().enumerate() {
                    add_into(&mut ga[r * inner..(r + 1) * inner], &g[row * inner..(row + 1) * inner]);
                }
            }
        }
        Op::SliceCols { x, start } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let m = nodes[x.0].value.shape()[1];
                let len = node.value.shape()[1];
                for (r, chunk) in g.chunks(len).enumerate() {
                    add_into(&mut gx[r * m + start..r * m + start + len], chunk);
                }
            }
        }
        Op::Reshape(a) | Op::StraightThrough(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                add_into(ga, g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_reaches_only_grad_leaves() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let b = g.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let p = g.mul(a, b).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[3.0, 4.0]);
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn reused_value_accumulates() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::scalar(3.0), true);
        let sq = g.mul(a, a).unwrap();
        let grads = g.backward(sq).unwrap();
        assert_eq!(grads.get(a).unwrap().item(), 6.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(vec![3]), true);
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn conv_shape_errors_name_axes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![1, 3, 4, 4]));
        let w = g.constant(Tensor::zeros(vec![2, 2, 3, 3]));
        let err = g.conv2d(x, w, 1, 0).unwrap_err().to_string();
        assert!(err.contains("channel axis"), "{err}");
    }
}
