//! Turning controller logits into unit-selection weights.
//!
//! Soft scorers produce dense simplex weights that are differentiated
//! directly. Hard scorers emit one-hot weights: straight-through variants
//! route the backward pass through a continuous relaxation, REINFORCE
//! exposes a log-probability for a score-function surrogate instead.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const UNIFORM_LO: f64 = 1e-10;
pub const UNIFORM_HI: f64 = 1.0 - 1e-7;
pub const EMA_DECAY: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    Softmax,
    GumbelSoftmax,
    GumbelSt,
    TopkSt,
    Reinforce,
}

impl ScorerKind {
    /// One-hot forward weights.
    pub fn is_hard(self) -> bool {
        matches!(self, ScorerKind::GumbelSt | ScorerKind::Reinforce)
    }

    pub fn short_name(self) -> &'static str {
        match self {
            ScorerKind::Softmax => "SM",
            ScorerKind::GumbelSoftmax => "GSM",
            ScorerKind::GumbelSt => "GST",
            ScorerKind::TopkSt => "TOPK",
            ScorerKind::Reinforce => "RL",
        }
    }
}

/// Exponential temperature decay down to a floor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperatureSchedule {
    pub floor: f64,
    /// Multiplicative factor applied every `every` steps.
    pub decay: f64,
    pub every: u64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        TemperatureSchedule {
            floor: 0.1,
            decay: 0.95,
            every: 1000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorerConfig {
    pub kind: ScorerKind,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<TemperatureSchedule>,
}

fn default_temperature() -> f64 {
    1.0
}

impl ScorerConfig {
    pub fn new(kind: ScorerKind) -> Self {
        ScorerConfig {
            kind,
            temperature: 1.0,
            k: None,
            schedule: None,
        }
    }

    pub fn topk(k: usize) -> Self {
        ScorerConfig {
            k: Some(k),
            ..Self::new(ScorerKind::TopkSt)
        }
    }

    pub fn validate(&self, options: usize) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if let Some(s) = self.schedule {
            if !(s.floor > 0.0) || !(s.decay > 0.0 && s.decay <= 1.0) || s.every == 0 {
                return Err(Error::config(
                    "temperature schedule needs floor > 0, decay in (0, 1] and every >= 1",
                ));
            }
        }
        if self.kind == ScorerKind::TopkSt {
            match self.k {
                Some(k) if (1..=options).contains(&k) => {}
                other => {
                    return Err(Error::config(format!(
                        "top-k scorer needs 1 <= k <= {options}, got {other:?}"
                    )))
                }
            }
        }
        Ok(())
    }

    /// Temperature in effect at a global training step.
    pub fn temperature_at(&self, step: u64) -> f64 {
        match self.schedule {
            None => self.temperature,
            Some(s) => {
                let decays = (step / s.every).min(i32::MAX as u64) as i32;
                (self.temperature * s.decay.powi(decays)).max(s.floor.min(self.temperature))
            }
        }
    }
}

/// Per-sample controller output over the units (and zero unit).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector<T> {
    pub weights: Vec<T>,
    pub sampled_index: Option<usize>,
    pub logits: Vec<T>,
}

/// Batch-level selection recorded in a graph.
#[derive(Clone, Debug)]
pub struct Selection {
    pub logits: Var,
    /// `[N, M]` weights used to combine unit outputs.
    pub weights: Var,
    pub sampled: Option<Vec<usize>>,
    /// `[N]` log-probability of the sampled index (REINFORCE only).
    pub log_prob: Option<Var>,
}

impl Selection {
    pub fn score_vectors<T: Scalar>(&self, g: &Graph<T>) -> Vec<ScoreVector<T>> {
        let w = g.value(self.weights);
        let l = g.value(self.logits);
        let m = w.shape()[1];
        (0..w.shape()[0])
            .map(|r| ScoreVector {
                weights: w.data()[r * m..(r + 1) * m].to_vec(),
                sampled_index: self.sampled.as_ref().map(|s| s[r]),
                logits: l.data()[r * m..(r + 1) * m].to_vec(),
            })
            .collect()
    }
}

/// `-ln(-ln(u))` with `u` clamped away from 0 and 1.
pub fn gumbel_sample(u: f64) -> f64 {
    let u = u.clamp(UNIFORM_LO, UNIFORM_HI);
    -(-u.ln()).ln()
}

pub fn gumbel_noise<T: Scalar>(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(gumbel_sample(rng.gen::<f64>())))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn one_hot<T: Scalar>(indices: &[usize], m: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(vec![indices.len(), m]);
    for (r, &i) in indices.iter().enumerate() {
        t.data_mut()[r * m + i] = T::one();
    }
    t
}

/// Plain softmax over a slice.
pub fn softmax_values<T: Scalar>(logits: &[T]) -> Vec<T> {
    kernels::softmax_rows(logits, logits.len().max(1))
}

fn check_logits<T: Scalar>(g: &Graph<T>, logits: Var) -> Result<(usize, usize)> {
    let dims = g.value(logits).dims2()?;
    if !g.value(logits).all_finite() {
        return Err(Error::Numeric("controller produced NaN or infinite logits".into()));
    }
    Ok(dims)
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::config(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

pub fn softmax_select<T: Scalar>(g: &mut Graph<T>, logits: Var) -> Result<Selection> {
    check_logits(g, logits)?;
    let weights = g.softmax(logits)?;
    Ok(Selection {
        logits,
        weights,
        sampled: None,
        log_prob: None,
    })
}

fn relaxed<T: Scalar>(g: &mut Graph<T>, logits: Var, tau: f64, noise: &Tensor<T>) -> Result<Var> {
    check_tau(tau)?;
    check_logits(g, logits)?;
    let noise = g.constant(noise.clone());
    let perturbed = g.add(logits, noise)?;
    let scaled = g.scale(perturbed, T::of(1.0 / tau));
    g.softmax(scaled)
}

/// `softmax((logits + noise) / tau)`; noise is a constant of the graph.
pub fn gumbel_softmax_select<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    tau: f64,
    noise: &Tensor<T>,
) -> Result<Selection> {
    let weights = relaxed(g, logits, tau, noise)?;
    Ok(Selection {
        logits,
        weights,
        sampled: None,
        log_prob: None,
    })
}

/// One-hot of the relaxed sample's argmax, differentiated as the relaxed sample.
pub fn gumbel_st_select<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    tau: f64,
    noise: &Tensor<T>,
) -> Result<Selection> {
    let soft = relaxed(g, logits, tau, noise)?;
    let (_, m) = g.value(soft).dims2()?;
    let idx: Vec<usize> = g.value(soft).data().chunks(m).map(argmax).collect();
    let weights = g.straight_through(one_hot(&idx, m), soft)?;
    Ok(Selection {
        logits,
        weights,
        sampled: Some(idx),
        log_prob: None,
    })
}

/// Keeps the `k` largest softmax weights per row, renormalised.
pub fn topk_st_select<T: Scalar>(g: &mut Graph<T>, logits: Var, k: usize) -> Result<Selection> {
    let (_, m) = check_logits(g, logits)?;
    if k == 0 || k > m {
        return Err(Error::config(format!("top-k needs 1 <= k <= {m}, got {k}")));
    }
    let soft = g.softmax(logits)?;
    let mut hard = g.value(soft).clone();
    for row in hard.data_mut().chunks_mut(m) {
        let mut order: Vec<usize> = (0..m).collect();
        // stable sort keeps the lower index first among equal weights
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
        for &i in &order[k..] {
            row[i] = T::zero();
        }
        let total: T = row.iter().copied().sum();
        row.iter_mut().for_each(|v| *v /= total);
    }
    let weights = g.straight_through(hard, soft)?;
    Ok(Selection {
        logits,
        weights,
        sampled: None,
        log_prob: None,
    })
}

/// Samples `i ~ softmax(logits)`; weights are constant one-hots.
pub fn reinforce_select<T: Scalar>(g: &mut Graph<T>, logits: Var, rng: &mut impl Rng) -> Result<Selection> {
    let (_, m) = check_logits(g, logits)?;
    let probs = kernels::softmax_rows(g.value(logits).data(), m);
    let idx: Vec<usize> = probs
        .chunks(m)
        .map(|p| {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (i, v) in p.iter().enumerate() {
                acc += v.as_f64();
                if u < acc {
                    return i;
                }
            }
            m - 1
        })
        .collect();
    Ok(reinforce_with(g, logits, idx)?)
}

fn reinforce_with<T: Scalar>(g: &mut Graph<T>, logits: Var, idx: Vec<usize>) -> Result<Selection> {
    let m = g.shape(logits)[1];
    let mask = g.constant(one_hot(&idx, m));
    let logp = g.log_softmax(logits)?;
    let picked = g.mul(logp, mask)?;
    let log_prob = g.sum_rows(picked)?;
    let weights = g.constant(one_hot(&idx, m));
    Ok(Selection {
        logits,
        weights,
        sampled: Some(idx),
        log_prob: Some(log_prob),
    })
}

/// Surrogate whose gradient is the batch-averaged score-function estimate
/// `mean_i (loss_i - baseline) * grad log p(i)`.
pub fn reinforce_surrogate<T: Scalar>(
    g: &mut Graph<T>,
    log_prob: Var,
    losses: &[T],
    baseline: T,
) -> Result<Var> {
    let n = g.value(log_prob).numel();
    if losses.len() != n {
        return Err(Error::shape("reinforce", format!("{} losses for {n} samples", losses.len())));
    }
    let adv = Tensor::new(vec![n], losses.iter().map(|l| *l - baseline).collect())?;
    let adv = g.constant(adv);
    let weighted = g.mul(log_prob, adv)?;
    Ok(g.mean(weighted))
}

/// Closed-form per-sample REINFORCE gradient w.r.t. logits:
/// `(loss - baseline) * (onehot(sampled) - softmax(logits))`.
pub fn reinforce_grad(logits: &[f64], sampled: usize, loss: f64, baseline: f64) -> Vec<f64> {
    let p = softmax_values(logits);
    p.iter()
        .enumerate()
        .map(|(i, pi)| (loss - baseline) * (if i == sampled { 1.0 } else { 0.0 } - pi))
        .collect()
}

/// Exponential moving average of the loss used as REINFORCE baseline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EmaBaseline {
    pub value: Option<f64>,
}

impl EmaBaseline {
    pub fn get(&self) -> f64 {
        self.value.unwrap_or(0.0)
    }

    pub fn update(&mut self, loss: f64) {
        self.value = Some(match self.value {
            None => loss,
            Some(v) => EMA_DECAY * v + (1.0 - EMA_DECAY) * loss,
        });
    }
}

/// Applies a scorer. In eval mode hard scorers realise the noiseless
/// argmax route and the Gumbel relaxation drops its noise.
pub fn select<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    cfg: &ScorerConfig,
    step: u64,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Selection> {
    let tau = cfg.temperature_at(step);
    let shape = g.shape(logits).to_vec();
    match (cfg.kind, mode) {
        (ScorerKind::Softmax, _) => softmax_select(g, logits),
        (ScorerKind::TopkSt, _) => topk_st_select(g, logits, cfg.k.unwrap_or(1)),
        (ScorerKind::GumbelSoftmax, Mode::Train) => {
            let noise = gumbel_noise(shape, rng);
            gumbel_softmax_select(g, logits, tau, &noise)
        }
        (ScorerKind::GumbelSoftmax, Mode::Eval) => gumbel_softmax_select(g, logits, tau, &Tensor::zeros(shape)),
        (ScorerKind::GumbelSt, Mode::Train) => {
            let noise = gumbel_noise(shape, rng);
            gumbel_st_select(g, logits, tau, &noise)
        }
        (ScorerKind::GumbelSt, Mode::Eval) => gumbel_st_select(g, logits, tau, &Tensor::zeros(shape)),
        (ScorerKind::Reinforce, Mode::Train) => reinforce_select(g, logits, rng),
        (ScorerKind::Reinforce, Mode::Eval) => {
            check_logits(g, logits)?;
            let m = shape[1];
            let idx = g.value(logits).data().chunks(m).map(argmax).collect();
            reinforce_with(g, logits, idx)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn logits(g: &mut Graph<f64>, v: &[f64]) -> Var {
        g.leaf(Tensor::new(vec![1, v.len()], v.to_vec()).unwrap(), true)
    }

    fn weights(g: &Graph<f64>, s: &Selection) -> Vec<f64> {
        g.value(s.weights).data().to_vec()
    }

    #[test]
    fn softmax_select_examples() {
        let mut g = Graph::new();
        let l = logits(&mut g, &[0.0, 0.0, 0.0]);
        let s = softmax_select(&mut g, l).unwrap();
        for w in weights(&g, &s) {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
        let l = logits(&mut g, &[1.0, 2.0, 3.0]);
        let s = softmax_select(&mut g, l).unwrap();
        let w = weights(&g, &s);
        for (a, b) in w.iter().zip([0.09003057317038046, 0.24472847105479767, 0.6652409557748219]) {
            assert!((a - b).abs() < 1e-12);
        }
        for c in [-40.0, 3.0, 1e3] {
            let a = logits(&mut g, &[c, c + 5.0]);
            let b = logits(&mut g, &[0.0, 5.0]);
            let sa = softmax_select(&mut g, a).unwrap();
            let sb = softmax_select(&mut g, b).unwrap();
            let (wa, wb) = (weights(&g, &sa), weights(&g, &sb));
            assert!(wa.iter().zip(&wb).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }

    #[test]
    fn non_finite_logits_rejected() {
        let mut g = Graph::new();
        let l = logits(&mut g, &[0.0, f64::NAN]);
        assert!(matches!(softmax_select(&mut g, l), Err(Error::Numeric(_))));
        let l = logits(&mut g, &[f64::INFINITY, 0.0]);
        assert!(matches!(softmax_select(&mut g, l), Err(Error::Numeric(_))));
    }

    #[test]
    fn gumbel_sample_examples() {
        assert!(gumbel_sample((-1.0f64).exp()).abs() < 1e-12);
        assert!((gumbel_sample((-std::f64::consts::E).exp()) + 1.0).abs() < 1e-12);
        assert!(gumbel_sample(0.0).is_finite());
        assert!(gumbel_sample(1.0).is_finite());
    }

    #[test]
    fn gumbel_softmax_limits() {
        let v = [0.3, -1.2, 2.0, 0.0];
        let mut g = Graph::new();
        let l = logits(&mut g, &v);
        let zero = Tensor::zeros(vec![1, 4]);
        let gs = gumbel_softmax_select(&mut g, l, 1.0, &zero).unwrap();
        let sm = softmax_select(&mut g, l).unwrap();
        assert_eq!(weights(&g, &gs), weights(&g, &sm));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = gumbel_noise(vec![1, 4], &mut rng);
        let hot = gumbel_softmax_select(&mut g, l, 1e6, &noise).unwrap();
        for w in weights(&g, &hot) {
            assert!((w - 0.25).abs() < 1e-4);
        }
        assert!(matches!(gumbel_softmax_select(&mut g, l, 0.0, &zero), Err(Error::Config(_))));
        assert!(matches!(gumbel_st_select(&mut g, l, -1.0, &zero), Err(Error::Config(_))));
    }

    #[test]
    fn gumbel_st_is_one_hot_with_relaxed_gradient() {
        let v = [0.5, 1.5, -0.3];
        let dir = Tensor::new(vec![1, 3], vec![0.7, -1.1, 2.3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = gumbel_noise::<f64>(vec![1, 3], &mut rng);
        let grad_of = |hard: bool| {
            let mut g = Graph::new();
            let l = logits(&mut g, &v);
            let s = if hard {
                gumbel_st_select(&mut g, l, 0.5, &noise).unwrap()
            } else {
                gumbel_softmax_select(&mut g, l, 0.5, &noise).unwrap()
            };
            if hard {
                let w = weights(&g, &s);
                assert_eq!(w.iter().filter(|x| **x == 1.0).count(), 1);
                assert_eq!(w.iter().filter(|x| **x == 0.0).count(), 2);
                assert_eq!(w[s.sampled.as_ref().unwrap()[0]], 1.0);
            }
            let d = g.constant(dir.clone());
            let p = g.mul(s.weights, d).unwrap();
            let loss = g.sum(p);
            g.backward(loss).unwrap().get(l).unwrap().clone()
        };
        let st = grad_of(true);
        let relaxed = grad_of(false);
        assert!(st.max_abs_diff(&relaxed) < 1e-12);
    }

    #[test]
    fn noiseless_st_is_argmax_lowest_tie() {
        let mut g = Graph::new();
        let l = logits(&mut g, &[2.0, 5.0, 5.0, 1.0]);
        let s = gumbel_st_select(&mut g, l, 1.0, &Tensor::zeros(vec![1, 4])).unwrap();
        assert_eq!(weights(&g, &s), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn topk_examples() {
        let mut g = Graph::new();
        let l = logits(&mut g, &[1.0, 2.0, 3.0]);
        let full = topk_st_select(&mut g, l, 3).unwrap();
        let sm = softmax_select(&mut g, l).unwrap();
        assert!(weights(&g, &full).iter().zip(weights(&g, &sm)).all(|(a, b)| (a - b).abs() < 1e-12));
        let one = topk_st_select(&mut g, l, 1).unwrap();
        assert_eq!(weights(&g, &one), vec![0.0, 0.0, 1.0]);
        let two = topk_st_select(&mut g, l, 2).unwrap();
        let w = weights(&g, &two);
        // e^2 / (e^2 + e^3) and e^3 / (e^2 + e^3)
        assert_eq!(w[0], 0.0);
        assert!((w[1] - 0.2689414213699951).abs() < 1e-12);
        assert!((w[2] - 0.7310585786300049).abs() < 1e-12);
        assert!(matches!(topk_st_select(&mut g, l, 0), Err(Error::Config(_))));
        assert!(matches!(topk_st_select(&mut g, l, 4), Err(Error::Config(_))));
    }

    #[test]
    fn reinforce_deterministic_policy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let mut g = Graph::new();
            let l = logits(&mut g, &[0.0, 50.0, 0.0]);
            let s = reinforce_select(&mut g, l, &mut rng).unwrap();
            assert_eq!(s.sampled.unwrap(), vec![1]);
        }
    }

    #[test]
    fn temperature_schedule_monotone_to_floor() {
        let cfg = ScorerConfig {
            temperature: 1.0,
            schedule: Some(TemperatureSchedule {
                floor: 0.1,
                decay: 0.5,
                every: 10,
            }),
            ..ScorerConfig::new(ScorerKind::GumbelSt)
        };
        let taus: Vec<f64> = (0..200).map(|s| cfg.temperature_at(s)).collect();
        assert!(taus.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(*taus.last().unwrap(), 0.1);
        assert_eq!(taus[0], 1.0);
        assert_eq!(taus[10], 0.5);
    }

    #[test]
    fn config_validation() {
        assert!(ScorerConfig::topk(2).validate(3).is_ok());
        assert!(ScorerConfig::topk(4).validate(3).is_err());
        let bad = ScorerConfig {
            temperature: 0.0,
            ..ScorerConfig::new(ScorerKind::GumbelSoftmax)
        };
        assert!(bad.validate(3).is_err());
    }

    #[test]
    fn ema_baseline() {
        let mut b = EmaBaseline::default();
        assert_eq!(b.get(), 0.0);
        b.update(2.0);
        assert_eq!(b.get(), 2.0);
        b.update(1.0);
        assert!((b.get() - (0.99 * 2.0 + 0.01)).abs() < 1e-12);
    }
}
