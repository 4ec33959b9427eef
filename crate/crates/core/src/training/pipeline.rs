//! Multi-phase training: scorer swaps, selective freezing, convergence
//! stopping, metrics and evaluation.

use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::assemble_loss;
use super::optim::{clip_store_gradients, LrSchedule, OptimState, OptimizerConfig};
use crate::data::{augment, batch_tensor, Dataset, LabeledImage, Normalization};
use crate::error::{Error, Result};
use crate::network::{CostReport, Model};
use crate::nn::{Ctx, Mode};
use crate::reset::{route_records, skip_fraction, RouteOptions, RouteRecord, SkipReward};
use crate::routes::{policy_means, PolicyRow};
use crate::scalar::Scalar;
use crate::selection::{EmaBaseline, ScorerKind};

/// Which parameters (and batch-norm statistics) a phase may change.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    All,
    ControllerOnly,
    AllButController,
    /// Names starting with any of these prefixes.
    Prefixes(Vec<String>),
}

impl Scope {
    pub fn trainable(&self, name: &str) -> bool {
        let ctrl = name.starts_with("controller.");
        match self {
            Scope::All => true,
            Scope::ControllerOnly => ctrl,
            Scope::AllButController => !ctrl,
            Scope::Prefixes(p) => p.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum StopRule {
    Steps { steps: u64 },
    /// Stop after `window` evaluations without a validation-accuracy
    /// improvement, or at `max_steps`.
    Convergence { window: usize, max_steps: u64 },
}

impl StopRule {
    pub fn budget(&self) -> u64 {
        match self {
            StopRule::Steps { steps } => *steps,
            StopRule::Convergence { max_steps, .. } => *max_steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSpec {
    pub name: String,
    /// Scorer to switch every routed module to; controller weights are kept.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scorer: Option<ScorerKind>,
    /// Trainable scope from this phase on; inherited when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scope: Option<Scope>,
    pub stop: StopRule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_skip: Option<SkipReward>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
}

impl PhaseSpec {
    pub fn steps(name: &str, steps: u64) -> Self {
        PhaseSpec {
            name: name.into(),
            scorer: None,
            scope: None,
            stop: StopRule::Steps { steps },
            lambda1: None,
            lambda2: None,
            r_skip: None,
            lr: None,
        }
    }

    pub fn until_converged(name: &str, window: usize, max_steps: u64) -> Self {
        PhaseSpec {
            stop: StopRule::Convergence { window, max_steps },
            ..Self::steps(name, 0)
        }
    }

    /// A zero-step phase that only changes configuration.
    pub fn switch(name: &str) -> Self {
        Self::steps(name, 0)
    }

    pub fn with_scope(mut self, scope: Scope) -> Self {
        self.scope = Some(scope);
        self
    }

    pub fn with_scorer(mut self, kind: ScorerKind) -> Self {
        self.scorer = Some(kind);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSpec {
    pub phases: Vec<PhaseSpec>,
}

impl PipelineSpec {
    pub fn single(steps: u64) -> Self {
        PipelineSpec {
            phases: vec![PhaseSpec::steps("train", steps)],
        }
    }

    pub fn total_budget(&self) -> u64 {
        self.phases.iter().map(|p| p.stop.budget()).sum()
    }

    pub fn validate<T: Scalar>(&self, model: &Model<T>) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::config("pipeline.phases must not be empty"));
        }
        for (i, p) in self.phases.iter().enumerate() {
            let at = format!("pipeline.phases[{i}] ({})", p.name);
            if let Some(r) = &p.r_skip {
                if !r.is_zero() && !model.has_zero_unit() {
                    return Err(Error::config(format!("{at}: r_skip requires a zero unit")));
                }
            }
            if p.lambda1.is_some_and(|l| l < 0.0) || p.lambda2.is_some_and(|l| l < 0.0) {
                return Err(Error::config(format!("{at}: entropy weights must be non-negative")));
            }
            if p.lr.is_some_and(|l| !(l > 0.0)) {
                return Err(Error::config(format!("{at}: lr must be positive")));
            }
            if let StopRule::Convergence { window: 0, .. } = p.stop {
                return Err(Error::config(format!("{at}: convergence window must be at least 1")));
            }
            if let Some(ScorerKind::TopkSt) = p.scorer {
                for r in model.reset_stages() {
                    let mut cfg = r.cfg.scorer;
                    cfg.kind = ScorerKind::TopkSt;
                    cfg.validate(r.pool.options())
                        .map_err(|e| Error::config(format!("{at}: {e}")))?;
                }
            }
        }
        Ok(())
    }
}

/// Budgets of the staged relaxation from soft to sparse routing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelaxationBudgets {
    pub pretrain: u64,
    pub gumbel_controller: u64,
    pub st_window: usize,
    pub st_max: u64,
    pub final_steps: u64,
    pub r_skip: f64,
}

impl Default for RelaxationBudgets {
    fn default() -> Self {
        RelaxationBudgets {
            pretrain: 64_000,
            gumbel_controller: 5_000,
            st_window: 5,
            st_max: 20_000,
            final_steps: 20_000,
            r_skip: 0.1,
        }
    }
}

/// Softmax pretraining, then controller-only Gumbel-Softmax and
/// straight-through Gumbel training, then joint training with a skip reward.
pub fn relaxation_pipeline(b: RelaxationBudgets) -> PipelineSpec {
    let phases = vec![
        PhaseSpec::steps("pretrain_softmax", b.pretrain)
            .with_scorer(ScorerKind::Softmax)
            .with_scope(Scope::All),
        PhaseSpec::switch("freeze_units").with_scope(Scope::ControllerOnly),
        PhaseSpec::switch("to_gumbel_softmax").with_scorer(ScorerKind::GumbelSoftmax),
        PhaseSpec::steps("train_controller_gumbel", b.gumbel_controller),
        PhaseSpec::switch("to_gumbel_st").with_scorer(ScorerKind::GumbelSt),
        PhaseSpec::until_converged("train_controller_st", b.st_window, b.st_max),
        PhaseSpec {
            r_skip: Some(SkipReward::Constant(b.r_skip)),
            ..PhaseSpec::switch("add_skip_reward")
        },
        PhaseSpec::steps("train_tradeoff", b.final_steps).with_scope(Scope::All),
    ];
    PipelineSpec { phases }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TwoPhaseRule {
    FixedSteps,
    Convergence { window: usize },
    /// The controller phase doubles its budget every round.
    Progressive,
}

/// Alternating controller-only and unit-only phases.
pub fn two_phase_schedule(rule: TwoPhaseRule, rounds: usize, controller_steps: u64, unit_steps: u64) -> PipelineSpec {
    let mut phases = Vec::with_capacity(2 * rounds);
    for r in 0..rounds {
        let (c, u) = match rule {
            TwoPhaseRule::FixedSteps => (
                PhaseSpec::steps(&format!("round{r}_controller"), controller_steps),
                PhaseSpec::steps(&format!("round{r}_units"), unit_steps),
            ),
            TwoPhaseRule::Convergence { window } => (
                PhaseSpec::until_converged(&format!("round{r}_controller"), window, controller_steps),
                PhaseSpec::until_converged(&format!("round{r}_units"), window, unit_steps),
            ),
            TwoPhaseRule::Progressive => (
                PhaseSpec::steps(&format!("round{r}_controller"), controller_steps << r),
                PhaseSpec::steps(&format!("round{r}_units"), unit_steps),
            ),
        };
        phases.push(c.with_scope(Scope::ControllerOnly));
        phases.push(u.with_scope(Scope::AllButController));
    }
    PipelineSpec { phases }
}

/// Cumulative unfreezing from the head back to the stem.
pub fn incremental_schedule<T: Scalar>(model: &Model<T>, steps_per_phase: u64) -> PipelineSpec {
    let stages = model.config().stages.len();
    let mut prefixes = vec!["head.".to_string()];
    let mut phases = vec![PhaseSpec::steps("unfreeze_head", steps_per_phase).with_scope(Scope::Prefixes(prefixes.clone()))];
    for s in (0..stages).rev() {
        prefixes.push(format!("stage{s}."));
        prefixes.push(format!("controller.stage{s}."));
        if s > 0 {
            prefixes.push(format!("down{}.", s - 1));
        } else {
            prefixes.push("stem.".into());
        }
        phases.push(
            PhaseSpec::steps(&format!("unfreeze_stage{s}"), steps_per_phase).with_scope(Scope::Prefixes(prefixes.clone())),
        );
    }
    PipelineSpec { phases }
}

/// Tracks validation accuracy for the convergence rule.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceMonitor {
    pub best: Option<f64>,
    pub since_best: usize,
}

impl ConvergenceMonitor {
    /// Records an evaluation; true once `window` evaluations passed without improvement.
    pub fn observe(&mut self, acc: f64, window: usize) -> bool {
        match self.best {
            Some(b) if acc <= b => self.since_best += 1,
            _ => {
                self.best = Some(acc);
                self.since_best = 0;
            }
        }
        self.since_best >= window
    }
}

fn default_batch() -> usize {
    128
}
fn default_eval_every() -> u64 {
    100
}
fn default_log_every() -> u64 {
    10
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub schedule: LrSchedule,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
    #[serde(default = "default_true")]
    pub augment: bool,
    /// Linearly lower entropy weights to zero over the last third of each phase.
    #[serde(default = "default_true")]
    pub entropy_decay: bool,
    /// Zero disables periodic checkpoints.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerConfig::default(),
            schedule: LrSchedule::default(),
            batch_size: default_batch(),
            eval_every: default_eval_every(),
            log_every: default_log_every(),
            clip_norm: None,
            augment: true,
            entropy_decay: true,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.schedule.validate()?;
        if self.batch_size == 0 || self.eval_every == 0 || self.log_every == 0 {
            return Err(Error::config("train.batch_size, eval_every and log_every must be at least 1"));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("train.clip_norm must be positive"));
        }
        Ok(())
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub step: u64,
    pub phase: usize,
    pub phase_step: u64,
    pub scope: Scope,
    pub optim: OptimState<T>,
    pub baseline: EmaBaseline,
    pub monitor: ConvergenceMonitor,
    pub seed: u64,
}

/// Serializable scalars of a [`TrainState`]; moment buffers travel separately.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub step: u64,
    pub phase: usize,
    pub phase_step: u64,
    pub scope: Scope,
    pub optim_t: u64,
    pub baseline: EmaBaseline,
    pub monitor: ConvergenceMonitor,
    pub seed: u64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(seed: u64) -> Self {
        TrainState {
            step: 0,
            phase: 0,
            phase_step: 0,
            scope: Scope::All,
            optim: OptimState::new(),
            baseline: EmaBaseline::default(),
            monitor: ConvergenceMonitor::default(),
            seed,
        }
    }

    pub fn meta(&self) -> TrainMeta {
        TrainMeta {
            step: self.step,
            phase: self.phase,
            phase_step: self.phase_step,
            scope: self.scope.clone(),
            optim_t: self.optim.t,
            baseline: self.baseline,
            monitor: self.monitor.clone(),
            seed: self.seed,
        }
    }

    pub fn from_meta(meta: TrainMeta, optim: OptimState<T>) -> Self {
        TrainState {
            step: meta.step,
            phase: meta.phase,
            phase_step: meta.phase_step,
            scope: meta.scope,
            optim: OptimState { t: meta.optim_t, ..optim },
            baseline: meta.baseline,
            monitor: meta.monitor,
            seed: meta.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: f64,
    pub ce: f64,
    pub entropy_term: f64,
    pub hybrl_term: f64,
    pub lr: f64,
    pub skip_fraction: f64,
    pub val_acc: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,loss,ce,entropy_term,hybrl_term,lr,skip_fraction,val_acc";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.loss,
            self.ce,
            self.entropy_term,
            self.hybrl_term,
            self.lr,
            self.skip_fraction,
            self.val_acc.map(|v| v.to_string()).unwrap_or_default()
        )
    }
}

pub fn write_metrics_csv(rows: &[MetricsRow], out: &mut impl Write) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv_line())?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub accuracy: f64,
    pub ce: f64,
    pub skip_fraction: f64,
    pub cost: CostReport,
    pub records: Vec<RouteRecord>,
}

fn eval_batch<T: Scalar>(
    model: &Model<T>,
    data: &Dataset,
    norm: &Normalization,
    idx: &[usize],
) -> Result<(usize, f64, Vec<RouteRecord>)> {
    let imgs: Vec<&LabeledImage> = idx.iter().map(|&i| &data.images[i]).collect();
    let (x, labels) = batch_tensor::<T>(&imgs, norm);
    let mut ctx = Ctx::new(&model.store, Mode::Eval);
    let xv = ctx.input(x);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut opts = RouteOptions {
        step: 0,
        rng: &mut rng,
        routing: &[],
    };
    let out = model.forward(&mut ctx, xv, &mut opts)?;
    let ce = ctx.graph.cross_entropy_per_sample(out.logits, &labels)?;
    let ce_sum: f64 = ctx.graph.value(ce).data().iter().map(|v| v.as_f64()).sum();
    let logits = ctx.graph.value(out.logits);
    let m = logits.shape()[1];
    let correct = logits
        .data()
        .chunks(m)
        .zip(&labels)
        .filter(|(row, &l)| crate::selection::argmax(row) == l)
        .count();
    let ids: Vec<u64> = idx.iter().map(|&i| i as u64).collect();
    let records = route_records(&ctx.graph, &out.traces, &ids, &labels);
    Ok((correct, ce_sum, records))
}

/// Eval-mode accuracy, routes and cost over a dataset, optionally split
/// across `threads` workers; results do not depend on the thread count.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    data: &Dataset,
    norm: &Normalization,
    batch: usize,
    threads: usize,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::config("evaluation dataset is empty"));
    }
    let batches: Vec<Vec<usize>> = (0..data.len())
        .collect::<Vec<_>>()
        .chunks(batch.max(1))
        .map(<[usize]>::to_vec)
        .collect();
    let threads = threads.clamp(1, batches.len());
    let per_thread = batches.len().div_ceil(threads);
    let results: Vec<Result<Vec<(usize, f64, Vec<RouteRecord>)>>> = std::thread::scope(|s| {
        let handles: Vec<_> = batches
            .chunks(per_thread)
            .map(|group| s.spawn(move || group.iter().map(|b| eval_batch(model, data, norm, b)).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let (mut correct, mut ce, mut records) = (0, 0.0, Vec::with_capacity(data.len()));
    for r in results {
        for (c, l, recs) in r? {
            correct += c;
            ce += l;
            records.extend(recs);
        }
    }
    let n = data.len() as f64;
    let cost = model.cost_report(&records)?;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        ce: ce / n,
        skip_fraction: skip_fraction(&records),
        cost,
        records,
    })
}

/// Supplies validation measurements to the pipeline.
pub trait Validator<T: Scalar> {
    fn validate(&mut self, model: &Model<T>, step: u64) -> Result<Evaluation>;
}

pub struct DataValidator<'a> {
    pub data: &'a Dataset,
    pub norm: Normalization,
    pub batch: usize,
    pub threads: usize,
}

impl<T: Scalar> Validator<T> for DataValidator<'_> {
    fn validate(&mut self, model: &Model<T>, _step: u64) -> Result<Evaluation> {
        evaluate(model, self.data, &self.norm, self.batch, self.threads)
    }
}

impl<T: Scalar, F: FnMut(&Model<T>, u64) -> Result<Evaluation>> Validator<T> for F {
    fn validate(&mut self, model: &Model<T>, step: u64) -> Result<Evaluation> {
        self(model, step)
    }
}

/// Callbacks for progress reporting and persistence.
pub trait Observer<T: Scalar> {
    fn on_metrics(&mut self, _row: &MetricsRow) -> Result<()> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _model: &Model<T>, _state: &TrainState<T>) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;
impl<T: Scalar> Observer<T> for NoObserver {}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseRecord {
    pub name: String,
    pub start_step: u64,
    pub end_step: u64,
    pub converged: bool,
    pub frozen_checksum_before: u64,
    pub frozen_checksum_after: u64,
    pub final_val_acc: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct History {
    pub phases: Vec<PhaseRecord>,
    pub metrics: Vec<MetricsRow>,
    pub policy: Vec<PolicyRow>,
    /// `(step, accuracy)` of every validation.
    pub evals: Vec<(u64, f64)>,
}

pub struct TrainData<'a> {
    pub train: &'a Dataset,
    pub norm: Normalization,
}

/// Values of one optimizer step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub loss: f64,
    pub ce: f64,
    pub entropy: f64,
    pub hybrl: f64,
    pub skip_fraction: f64,
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Draws a batch, runs forward and backward, and applies the optimizer.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    data: &TrainData,
    lr: f64,
    entropy_scale: f64,
) -> Result<StepOutcome> {
    let n = data.train.len();
    if n == 0 {
        return Err(Error::config("training dataset is empty"));
    }
    let mut rng = step_rng(state.seed, state.step);
    let idx = sample(&mut rng, n, cfg.batch_size.min(n)).into_vec();
    let owned: Vec<LabeledImage>;
    let imgs: Vec<&LabeledImage> = if cfg.augment {
        owned = idx.iter().map(|&i| augment(&data.train.images[i], &mut rng)).collect();
        owned.iter().collect()
    } else {
        idx.iter().map(|&i| &data.train.images[i]).collect()
    };
    let (x, labels) = batch_tensor::<T>(&imgs, &data.norm);
    let wd = cfg.optimizer.weight_decay();
    let (terms, skip, mut bw, reinforce) = {
        let mut ctx = Ctx::new(&model.store, Mode::Train);
        let xv = ctx.input(x);
        let mut opts = RouteOptions {
            step: state.step,
            rng: &mut rng,
            routing: &[],
        };
        let out = model.forward(&mut ctx, xv, &mut opts)?;
        let terms = assemble_loss(
            &mut ctx.graph,
            &model.store,
            out.logits,
            &labels,
            &out.traces,
            wd,
            entropy_scale,
            state.baseline.get(),
        )?;
        if !terms.loss.is_finite() {
            return Err(Error::Numeric(format!("loss became {} at step {}", terms.loss, state.step)));
        }
        let ids: Vec<u64> = idx.iter().map(|&i| i as u64).collect();
        let skip = skip_fraction(&route_records(&ctx.graph, &out.traces, &ids, &labels));
        let reinforce = out.traces.iter().flat_map(|t| &t.iterations).any(|s| s.log_prob.is_some());
        let bw = ctx.backward(terms.objective)?;
        (terms, skip, bw, reinforce)
    };
    model.store.zero_grads();
    for (id, g) in bw.param_grads() {
        model.store.param_mut(id).grad = Some(g);
    }
    if let Some(c) = cfg.clip_norm {
        clip_store_gradients(&mut model.store, c);
    }
    cfg.optimizer.step(&mut model.store, &mut state.optim, lr);
    model.store.apply_bn_updates(std::mem::take(&mut bw.bn_updates));
    model.store.zero_grads();
    if reinforce {
        state.baseline.update(terms.ce);
    }
    Ok(StepOutcome {
        loss: terms.loss,
        ce: terms.ce,
        entropy: terms.entropy,
        hybrl: terms.hybrl,
        skip_fraction: skip,
    })
}

fn apply_phase<T: Scalar>(model: &mut Model<T>, phase: &PhaseSpec, state: &mut TrainState<T>) {
    if let Some(kind) = phase.scorer {
        model.set_scorer(kind);
    }
    for r in model.reset_stages_mut() {
        if let Some(l) = phase.lambda1 {
            r.cfg.lambda1 = l;
        }
        if let Some(l) = phase.lambda2 {
            r.cfg.lambda2 = l;
        }
        if let Some(s) = &phase.r_skip {
            r.cfg.r_skip = s.clone();
        }
    }
    if let Some(scope) = &phase.scope {
        state.scope = scope.clone();
    }
    let scope = state.scope.clone();
    model.store.set_trainable(|n| scope.trainable(n));
}

fn entropy_scale(decay: bool, phase_step: u64, budget: u64) -> f64 {
    if !decay || budget == 0 {
        return 1.0;
    }
    let s = phase_step as f64 / budget as f64;
    if s < 2.0 / 3.0 {
        1.0
    } else {
        (3.0 * (1.0 - s)).max(0.0)
    }
}

/// Runs the phases of `spec` from `state` on; stops early when the global
/// step reaches `until`, leaving `state` resumable.
#[allow(clippy::too_many_arguments)]
pub fn run_pipeline<T: Scalar>(
    model: &mut Model<T>,
    spec: &PipelineSpec,
    cfg: &TrainConfig,
    data: &TrainData,
    validator: &mut dyn Validator<T>,
    observer: &mut dyn Observer<T>,
    state: &mut TrainState<T>,
    until: Option<u64>,
) -> Result<History> {
    cfg.validate()?;
    spec.validate(model)?;
    let mut history = History::default();
    while state.phase < spec.phases.len() {
        let phase = &spec.phases[state.phase];
        apply_phase(model, phase, state);
        if state.phase_step == 0 {
            state.optim = OptimState::new();
            state.monitor = ConvergenceMonitor::default();
        }
        let scope = state.scope.clone();
        let frozen = |n: &str| !scope.trainable(n);
        let before = model.store.checksum(frozen);
        let start_step = state.step - state.phase_step;
        let budget = phase.stop.budget();
        let base_lr = phase.lr.unwrap_or(cfg.optimizer.lr());
        let mut converged = false;
        let mut last_val = None;
        while state.phase_step < budget && !converged {
            if until.is_some_and(|u| state.step >= u) {
                return Ok(history);
            }
            let lr = cfg.schedule.lr_at(base_lr, state.phase_step, budget);
            let scale = entropy_scale(cfg.entropy_decay, state.phase_step, budget);
            let out = train_step(model, state, cfg, data, lr, scale)?;
            state.step += 1;
            state.phase_step += 1;
            let eval_now = state.step % cfg.eval_every == 0 || state.phase_step == budget;
            let mut val_acc = None;
            if eval_now {
                let ev = validator.validate(model, state.step)?;
                history.evals.push((state.step, ev.accuracy));
                history.policy.extend(policy_means(&ev.records, state.step));
                val_acc = Some(ev.accuracy);
                last_val = val_acc;
                if let StopRule::Convergence { window, .. } = phase.stop {
                    converged = state.monitor.observe(ev.accuracy, window);
                }
            }
            if eval_now || state.step % cfg.log_every == 0 {
                let row = MetricsRow {
                    step: state.step,
                    loss: out.loss,
                    ce: out.ce,
                    entropy_term: out.entropy,
                    hybrl_term: out.hybrl,
                    lr,
                    skip_fraction: out.skip_fraction,
                    val_acc,
                };
                observer.on_metrics(&row)?;
                history.metrics.push(row);
            }
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
                observer.on_checkpoint(model, state)?;
            }
        }
        let after = model.store.checksum(frozen);
        if after != before {
            return Err(Error::Numeric(format!(
                "phase {} changed frozen parameters or statistics",
                phase.name
            )));
        }
        history.phases.push(PhaseRecord {
            name: phase.name.clone(),
            start_step,
            end_step: state.step,
            converged,
            frozen_checksum_before: before,
            frozen_checksum_after: after,
            final_val_acc: last_val,
        });
        state.phase += 1;
        state.phase_step = 0;
    }
    Ok(history)
}
