//! The routed residual module: a controller picks, at every iteration, a
//! weighting over a pool of residual units (plus an optional zero unit) and
//! the weighted unit outputs are added back onto the representation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::controller::{Controller, ControllerKind};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Ctx, ParamStore};
use crate::scalar::Scalar;
use crate::selection::{self, argmax, ScorerConfig, ScorerKind, Selection};
use crate::tensor::Tensor;

/// Weights below this are treated as exact zeros and their units skipped.
pub const SPARSITY_THRESHOLD: f64 = 1e-12;

/// Residual branch `BN(conv(ReLU(BN(conv(x)))))`; shape preserving.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComputationalUnit {
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
}

impl ComputationalUnit {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        ComputationalUnit {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), channels, channels, 3, 1, 1, rng),
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), channels),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), channels, channels, 3, 1, 1, rng),
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.conv1.in_ch
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(ctx, x)?;
        let h = self.bn1.forward(ctx, h)?;
        let h = ctx.graph.relu(h);
        let h = self.conv2.forward(ctx, h)?;
        self.bn2.forward(ctx, h)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.conv1.macs(h, w) + self.conv2.macs(h, w)
    }

    pub fn batch_norms(&self) -> [&BatchNorm; 2] {
        [&self.bn1, &self.bn2]
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UnitPool {
    pub units: Vec<ComputationalUnit>,
    pub zero_unit: bool,
}

impl UnitPool {
    /// Number of selectable options, zero unit included.
    pub fn options(&self) -> usize {
        self.units.len() + usize::from(self.zero_unit)
    }

    /// The zero unit sits after the real units.
    pub fn zero_index(&self) -> Option<usize> {
        self.zero_unit.then_some(self.units.len())
    }
}

/// Reward for selecting the zero unit: constant or per iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SkipReward {
    Constant(f64),
    PerIteration(Vec<f64>),
}

impl Default for SkipReward {
    fn default() -> Self {
        SkipReward::Constant(0.0)
    }
}

impl SkipReward {
    pub fn at(&self, iteration: usize) -> f64 {
        match self {
            SkipReward::Constant(r) => *r,
            SkipReward::PerIteration(v) => v.get(iteration).copied().unwrap_or(0.0),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            SkipReward::Constant(r) => *r == 0.0,
            SkipReward::PerIteration(v) => v.iter().all(|r| *r == 0.0),
        }
    }
}

fn is_default<T: Default + PartialEq>(v: &T) -> bool {
    *v == T::default()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReSetConfig {
    pub n_units: usize,
    pub n_iterations: usize,
    pub scorer: ScorerConfig,
    #[serde(default)]
    pub lambda1: f64,
    #[serde(default)]
    pub lambda2: f64,
    #[serde(default, skip_serializing_if = "is_default")]
    pub r_skip: SkipReward,
    #[serde(default)]
    pub controller: ControllerKind,
    #[serde(default)]
    pub zero_unit: bool,
    /// Stop controller gradients from reaching the representation.
    #[serde(default, skip_serializing_if = "is_default")]
    pub detach_controller_input: bool,
}

impl ReSetConfig {
    pub fn new(n_units: usize, n_iterations: usize, scorer: ScorerConfig) -> Self {
        ReSetConfig {
            n_units,
            n_iterations,
            scorer,
            lambda1: 0.0,
            lambda2: 0.0,
            r_skip: SkipReward::default(),
            controller: ControllerKind::Cnn,
            zero_unit: false,
            detach_controller_input: false,
        }
    }

    pub fn options(&self) -> usize {
        self.n_units + usize::from(self.zero_unit)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_units == 0 {
            return Err(Error::config("n_units must be at least 1"));
        }
        if self.n_iterations == 0 {
            return Err(Error::config("n_iterations must be at least 1"));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::config("entropy weights must be non-negative"));
        }
        if !self.zero_unit && !self.r_skip.is_zero() {
            return Err(Error::config("r_skip requires zero_unit = true"));
        }
        self.scorer.validate(self.options())
    }
}

/// Fixed weights per iteration, applied to every sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ForcedRoute {
    pub weights: Vec<Vec<f64>>,
    /// Report the route as a hard (sampled) selection.
    pub hard: bool,
}

impl ForcedRoute {
    pub fn one_hot(indices: &[usize], options: usize, hard: bool) -> Self {
        ForcedRoute {
            weights: indices
                .iter()
                .map(|&i| (0..options).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
            hard,
        }
    }
}

/// Who decides the route of a module.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum Routing {
    #[default]
    Learned,
    Forced(ForcedRoute),
}

/// Per-pass routing inputs.
pub struct RouteOptions<'r> {
    /// Global training step, for temperature schedules.
    pub step: u64,
    pub rng: &'r mut ChaCha8Rng,
    /// Indexed by stage; missing entries mean [`Routing::Learned`].
    pub routing: &'r [Routing],
}

/// Graph-level record of one module's routing decisions for a batch.
#[derive(Clone, Debug)]
pub struct StageTrace {
    pub stage: usize,
    pub zero_index: Option<usize>,
    pub r_skip: SkipReward,
    pub lambda1: f64,
    pub lambda2: f64,
    pub hard: bool,
    pub forced: bool,
    pub iterations: Vec<Selection>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReSetStage {
    pub stage: usize,
    pub cfg: ReSetConfig,
    pub pool: UnitPool,
    pub controller: Controller,
}

impl ReSetStage {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        stage: usize,
        channels: usize,
        cfg: ReSetConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let units = (0..cfg.n_units)
            .map(|i| ComputationalUnit::new(store, &format!("stage{stage}.unit{i}"), channels, rng))
            .collect();
        let controller = Controller::new(
            store,
            &format!("controller.stage{stage}"),
            cfg.controller,
            channels,
            cfg.options(),
            cfg.n_iterations,
            rng,
        );
        Ok(ReSetStage {
            stage,
            pool: UnitPool {
                units,
                zero_unit: cfg.zero_unit,
            },
            controller,
            cfg,
        })
    }

    pub fn channels(&self) -> usize {
        self.pool.units[0].channels()
    }

    fn forced_selection<T: Scalar>(&self, g: &mut Graph<T>, route: &ForcedRoute, j: usize, n: usize) -> Result<Selection> {
        let m = self.pool.options();
        let w = route.weights.get(j).ok_or_else(|| {
            Error::config(format!("forced route has no weights for iteration {j}"))
        })?;
        if w.len() != m {
            return Err(Error::config(format!(
                "forced route iteration {j} has {} weights, module has {m} options",
                w.len()
            )));
        }
        let row: Vec<T> = w.iter().map(|v| T::of(*v)).collect();
        let data: Vec<T> = (0..n).flat_map(|_| row.iter().copied()).collect();
        let weights = g.constant(Tensor::new(vec![n, m], data)?);
        let logits = g.constant(Tensor::zeros(vec![n, m]));
        let sampled = route.hard.then(|| vec![argmax(&row); n]);
        Ok(Selection {
            logits,
            weights,
            sampled,
            log_prob: None,
        })
    }

    /// `x + sum_i w_i * F_i(x)`, evaluating each unit only on samples whose
    /// weight for it is non-zero.
    fn apply_units<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var, sel: &Selection) -> Result<Var> {
        let n = ctx.graph.shape(x)[0];
        let m = self.pool.options();
        let weights = ctx.graph.value(sel.weights).data().to_vec();
        let thresh = T::of(SPARSITY_THRESHOLD);
        let mut acc = x;
        for (i, unit) in self.pool.units.iter().enumerate() {
            let rows: Vec<usize> = (0..n).filter(|&r| weights[r * m + i] >= thresh).collect();
            if rows.is_empty() {
                continue;
            }
            ctx.unit_evals += rows.len();
            let col = ctx.graph.column(sel.weights, i)?;
            let contrib = if rows.len() == n {
                let out = unit.forward(ctx, x)?;
                ctx.graph.scale_rows(out, col)?
            } else {
                let sub = ctx.graph.gather_rows(x, &rows)?;
                let out = unit.forward(ctx, sub)?;
                let w = ctx.graph.gather_rows(col, &rows)?;
                let scaled = ctx.graph.scale_rows(out, w)?;
                ctx.graph.scatter_rows(scaled, &rows, n)?
            };
            acc = ctx.graph.add(acc, contrib)?;
        }
        Ok(acc)
    }

    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<T>,
        x: Var,
        opts: &mut RouteOptions,
    ) -> Result<(Var, StageTrace)> {
        let shape = ctx.graph.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.channels() {
            return Err(Error::shape(
                "reset_forward",
                format!("input {shape:?} does not match units with {} channels (axis 1)", self.channels()),
            ));
        }
        let n = shape[0];
        let routing = opts.routing.get(self.stage).cloned().unwrap_or_default();
        let mut state = self.controller.reset_state();
        let mut x = x;
        let mut iterations = Vec::with_capacity(self.cfg.n_iterations);
        for j in 0..self.cfg.n_iterations {
            let sel = match &routing {
                Routing::Learned => {
                    let input = if self.cfg.detach_controller_input {
                        ctx.graph.detach(x)
                    } else {
                        x
                    };
                    let logits = self.controller.score(ctx, input, &mut state)?;
                    let mode = ctx.mode();
                    selection::select(&mut ctx.graph, logits, &self.cfg.scorer, opts.step, mode, opts.rng)?
                }
                Routing::Forced(route) => self.forced_selection(&mut ctx.graph, route, j, n)?,
            };
            x = self.apply_units(ctx, x, &sel)?;
            iterations.push(sel);
        }
        let hard = match &routing {
            Routing::Learned => self.cfg.scorer.kind.is_hard(),
            Routing::Forced(r) => r.hard,
        };
        Ok((
            x,
            StageTrace {
                stage: self.stage,
                zero_index: self.pool.zero_index(),
                r_skip: self.cfg.r_skip.clone(),
                lambda1: self.cfg.lambda1,
                lambda2: self.cfg.lambda2,
                hard,
                forced: matches!(routing, Routing::Forced(_)),
                iterations,
            },
        ))
    }

    /// Number of distinct hard routes through the real units.
    pub fn route_count(&self) -> u128 {
        (self.cfg.n_units as u128).pow(self.cfg.n_iterations as u32)
    }

    pub fn set_scorer(&mut self, kind: ScorerKind) {
        self.cfg.scorer.kind = kind;
    }
}

/// One routing decision of one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteStep {
    pub stage: usize,
    pub iteration: usize,
    pub weights: Vec<f64>,
    pub selected: Option<usize>,
    pub skipped: bool,
    /// Set when the route was imposed rather than produced by a controller.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub forced: bool,
}

/// Every routing decision an input produced across all modules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteRecord {
    pub sample_id: u64,
    pub label: usize,
    pub route: Vec<RouteStep>,
}

/// Per-sample records from a batch's traces.
pub fn route_records<T: Scalar>(
    g: &Graph<T>,
    traces: &[StageTrace],
    sample_ids: &[u64],
    labels: &[usize],
) -> Vec<RouteRecord> {
    let mut records: Vec<RouteRecord> = sample_ids
        .iter()
        .zip(labels)
        .map(|(&sample_id, &label)| RouteRecord {
            sample_id,
            label,
            route: Vec::new(),
        })
        .collect();
    for trace in traces {
        for (j, sel) in trace.iterations.iter().enumerate() {
            let w = g.value(sel.weights);
            let m = w.shape()[1];
            for (r, rec) in records.iter_mut().enumerate() {
                let row: Vec<f64> = w.data()[r * m..(r + 1) * m].iter().map(|v| v.as_f64()).collect();
                let selected = match &sel.sampled {
                    Some(s) => Some(s[r]),
                    None => one_hot_index(&row),
                };
                rec.route.push(RouteStep {
                    stage: trace.stage,
                    iteration: j,
                    skipped: selected.is_some() && selected == trace.zero_index,
                    selected,
                    weights: row,
                    forced: trace.forced,
                });
            }
        }
    }
    records
}

fn one_hot_index(row: &[f64]) -> Option<usize> {
    let ones: Vec<usize> = (0..row.len()).filter(|&i| row[i] == 1.0).collect();
    (ones.len() == 1 && row.iter().filter(|v| **v != 0.0).count() == 1).then(|| ones[0])
}

/// `-l1 * sum_j H(mean_batch y_j) + l2 * sum_j mean_batch H(y_j)` over every
/// module iteration, each module using its own weights. `None` when all
/// weights are zero.
pub fn entropy_regularizer<T: Scalar>(g: &mut Graph<T>, traces: &[StageTrace]) -> Result<Option<Var>> {
    let mut total: Option<Var> = None;
    for trace in traces {
        for sel in &trace.iterations {
            let term = entropy_term(g, sel.weights, trace.lambda1, trace.lambda2)?;
            if let Some(term) = term {
                total = Some(match total {
                    Some(t) => g.add(t, term)?,
                    None => term,
                });
            }
        }
    }
    Ok(total)
}

fn entropy_term<T: Scalar>(g: &mut Graph<T>, weights: Var, l1: f64, l2: f64) -> Result<Option<Var>> {
    let mut out = None;
    if l1 != 0.0 {
        let mean = g.mean_over_batch(weights)?;
        let m = g.shape(mean)[0];
        let mean = g.reshape(mean, vec![1, m])?;
        let h = g.row_entropy(mean)?;
        let h = g.sum(h);
        out = Some(g.scale(h, T::of(-l1)));
    }
    if l2 != 0.0 {
        let h = g.row_entropy(weights)?;
        let h = g.mean(h);
        let h = g.scale(h, T::of(l2));
        out = Some(match out {
            Some(o) => g.add(o, h)?,
            None => h,
        });
    }
    Ok(out)
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&v| v * v.max(crate::autodiff::LOG_FLOOR).ln()).sum::<f64>()
}

/// Value of the entropy regularizer over a batch of records.
pub fn entropy_regularizer_value(records: &[RouteRecord], lambda1: f64, lambda2: f64) -> Result<f64> {
    let Some(first) = records.first() else {
        return Ok(0.0);
    };
    let t = first.route.len();
    if records.iter().any(|r| r.route.len() != t) {
        return Err(Error::Analysis("records disagree on iteration count".into()));
    }
    let n = records.len() as f64;
    let mut total = 0.0;
    for j in 0..t {
        let m = first.route[j].weights.len();
        let mut mean = vec![0.0; m];
        let mut per_sample = 0.0;
        for r in records {
            for (acc, w) in mean.iter_mut().zip(&r.route[j].weights) {
                *acc += w / n;
            }
            per_sample += entropy(&r.route[j].weights) / n;
        }
        total += -lambda1 * entropy(&mean) + lambda2 * per_sample;
    }
    Ok(total)
}

/// `-sum_k R_k * mean_batch(y_skip_k)`; the skip weight is the zero-unit
/// column of the selection weights, so hard scorers pass gradients
/// through their straight-through path.
pub fn hybrid_rl_term<T: Scalar>(g: &mut Graph<T>, traces: &[StageTrace]) -> Result<Option<Var>> {
    let mut total: Option<Var> = None;
    for trace in traces {
        if trace.r_skip.is_zero() {
            continue;
        }
        let zero = trace
            .zero_index
            .ok_or_else(|| Error::config(format!("stage {} rewards skips but has no zero unit", trace.stage)))?;
        for (k, sel) in trace.iterations.iter().enumerate() {
            let reward = trace.r_skip.at(k);
            if reward == 0.0 {
                continue;
            }
            let skip = g.column(sel.weights, zero)?;
            let mean = g.mean(skip);
            let term = g.scale(mean, T::of(-reward));
            total = Some(match total {
                Some(t) => g.add(t, term)?,
                None => term,
            });
        }
    }
    Ok(total)
}

/// Value of the skip-reward term from records, `reward(stage, iteration)`.
pub fn hybrid_rl_value(
    records: &[RouteRecord],
    zero_unit: bool,
    reward: impl Fn(usize, usize) -> f64,
) -> Result<f64> {
    if !zero_unit {
        return Err(Error::config("skip reward needs a zero unit"));
    }
    if records.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = records
        .iter()
        .flat_map(|r| &r.route)
        .filter(|s| s.skipped)
        .map(|s| reward(s.stage, s.iteration))
        .sum();
    Ok(-total / records.len() as f64)
}

/// Fraction of `(sample, iteration)` decisions that picked the zero unit.
pub fn skip_fraction(records: &[RouteRecord]) -> f64 {
    let total: usize = records.iter().map(|r| r.route.len()).sum();
    if total == 0 {
        return 0.0;
    }
    let skipped = records.iter().flat_map(|r| &r.route).filter(|s| s.skipped).count();
    skipped as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(weights: Vec<Vec<f64>>, selected: Vec<Option<usize>>, zero: Option<usize>) -> RouteRecord {
        RouteRecord {
            sample_id: 0,
            label: 0,
            route: weights
                .into_iter()
                .zip(selected)
                .enumerate()
                .map(|(j, (w, s))| RouteStep {
                    stage: 0,
                    iteration: j,
                    weights: w,
                    skipped: s.is_some() && s == zero,
                    selected: s,
                    forced: false,
                })
                .collect(),
        }
    }

    #[test]
    fn entropy_of_uniform_routes() {
        let m = 4;
        let t = 3;
        let recs: Vec<_> = (0..5)
            .map(|_| record(vec![vec![0.25; m]; t], vec![None; t], None))
            .collect();
        let (l1, l2) = (0.3, 0.7);
        let v = entropy_regularizer_value(&recs, l1, l2).unwrap();
        let want = -l1 * t as f64 * (m as f64).ln() + l2 * t as f64 * (m as f64).ln();
        assert!((v - want).abs() < 1e-12);
        assert_eq!(entropy_regularizer_value(&recs, 0.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn entropy_of_deterministic_but_diverse_routes() {
        let m = 3;
        let t = 2;
        let recs: Vec<_> = (0..m)
            .map(|i| {
                let mut w = vec![0.0; m];
                w[i] = 1.0;
                record(vec![w; t], vec![Some(i); t], None)
            })
            .collect();
        let v = entropy_regularizer_value(&recs, 0.5, 0.9).unwrap();
        assert!((v + 0.5 * t as f64 * (m as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn hybrid_value_examples() {
        let zero = Some(2);
        let w = |i: usize| {
            let mut v = vec![0.0; 3];
            v[i] = 1.0;
            v
        };
        let r = record(vec![w(2), w(0), w(2)], vec![Some(2), Some(0), Some(2)], zero);
        let v = hybrid_rl_value(std::slice::from_ref(&r), true, |_, _| 0.1).unwrap();
        assert!((v + 0.2).abs() < 1e-12);
        assert_eq!(hybrid_rl_value(std::slice::from_ref(&r), true, |_, _| 0.0).unwrap(), 0.0);
        let none = record(vec![w(0), w(1), w(0)], vec![Some(0), Some(1), Some(0)], zero);
        assert_eq!(hybrid_rl_value(&[none], true, |_, _| 0.1).unwrap(), 0.0);
        assert!(matches!(hybrid_rl_value(&[r], false, |_, _| 0.1), Err(Error::Config(_))));
    }

    #[test]
    fn skip_fraction_counts() {
        let zero = Some(1);
        let a = record(vec![vec![0.0, 1.0]; 4], vec![Some(1); 4], zero);
        assert_eq!(skip_fraction(std::slice::from_ref(&a)), 1.0);
        let b = record(vec![vec![1.0]; 4], vec![Some(0); 4], None);
        assert_eq!(skip_fraction(&[b]), 0.0);
        assert_eq!(skip_fraction(&[]), 0.0);
    }

    #[test]
    fn config_validation() {
        let mut cfg = ReSetConfig::new(0, 2, ScorerConfig::new(ScorerKind::Softmax));
        assert!(cfg.validate().is_err());
        cfg.n_units = 2;
        assert!(cfg.validate().is_ok());
        cfg.n_iterations = 0;
        assert!(cfg.validate().is_err());
        cfg.n_iterations = 2;
        cfg.r_skip = SkipReward::Constant(0.1);
        assert!(cfg.validate().is_err());
        cfg.zero_unit = true;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn skip_reward_serde_accepts_number_or_list() {
        let c: SkipReward = serde_json::from_str("0.25").unwrap();
        assert_eq!(c.at(7), 0.25);
        let p: SkipReward = serde_json::from_str("[0.1, 0.2]").unwrap();
        assert_eq!(p.at(1), 0.2);
        assert_eq!(p.at(5), 0.0);
    }
}
