//! Whole-model assembly: stem, three stages (plain residual or routed),
//! strided downsampling between stages and a pooled linear head.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Ctx, Linear, Mode, ParamStore};
use crate::reset::{
    ComputationalUnit, ForcedRoute, ReSetConfig, ReSetStage, RouteOptions, RouteRecord, Routing, StageTrace,
    SPARSITY_THRESHOLD,
};
use crate::scalar::Scalar;
use crate::selection::{ScorerConfig, ScorerKind};
use crate::tensor::Tensor;

pub const STAGES: usize = 3;
pub const RESET38_UNITS: usize = 5;
pub const RESET38_ITERATIONS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum StageSpec {
    Resnet { blocks: usize },
    Reset(ReSetConfig),
}

impl StageSpec {
    /// Depth of the same-width sequential stage used as the cost baseline.
    pub fn baseline_blocks(&self) -> usize {
        match self {
            StageSpec::Resnet { blocks } => *blocks,
            StageSpec::Reset(cfg) => cfg.n_iterations,
        }
    }
}

fn default_width() -> usize {
    16
}
fn default_classes() -> usize {
    10
}
fn default_in_channels() -> usize {
    3
}
fn default_image_size() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Channels of the first stage; doubled at each later stage.
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    pub stages: Vec<StageSpec>,
}

impl NetworkConfig {
    pub fn new(width: usize, stages: Vec<StageSpec>) -> Self {
        NetworkConfig {
            width,
            classes: default_classes(),
            in_channels: default_in_channels(),
            image_size: default_image_size(),
            stages,
        }
    }

    pub fn reset38(scorer: ScorerConfig) -> Self {
        let mut cfg = ReSetConfig::new(RESET38_UNITS, RESET38_ITERATIONS, scorer);
        cfg.zero_unit = true;
        Self::new(16, vec![StageSpec::Reset(cfg); STAGES])
    }

    /// Plain residual network with `blocks` units per stage.
    pub fn resnet(width: usize, blocks: [usize; STAGES]) -> Self {
        Self::new(width, blocks.iter().map(|&b| StageSpec::Resnet { blocks: b }).collect())
    }

    /// Same widths, every stage sequential with its baseline depth.
    pub fn baseline(&self) -> Self {
        NetworkConfig {
            stages: self
                .stages
                .iter()
                .map(|s| StageSpec::Resnet {
                    blocks: s.baseline_blocks(),
                })
                .collect(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != STAGES {
            return Err(Error::config(format!(
                "network.stages must have exactly {STAGES} entries, got {}",
                self.stages.len()
            )));
        }
        if self.width == 0 || self.classes < 2 || self.in_channels == 0 {
            return Err(Error::config("network needs width >= 1, classes >= 2, in_channels >= 1"));
        }
        let min = 1 << (STAGES - 1);
        if self.image_size < min || self.image_size % min != 0 {
            return Err(Error::config(format!("network.image_size must be a positive multiple of {min}")));
        }
        for (s, spec) in self.stages.iter().enumerate() {
            match spec {
                StageSpec::Resnet { blocks } if *blocks == 0 => {
                    return Err(Error::config(format!("network.stages[{s}].blocks must be at least 1")))
                }
                StageSpec::Reset(cfg) => {
                    cfg.validate().map_err(|e| Error::config(format!("network.stages[{s}]: {e}")))?
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn channels(&self, stage: usize) -> usize {
        self.width << stage
    }

    pub fn resolution(&self, stage: usize) -> usize {
        self.image_size >> stage
    }
}

/// Builder for reduced-depth variants described as `"n1-n2-n3"`.
#[derive(Clone, Debug)]
pub struct Shortened {
    pub arch: String,
    pub kind: ShortKind,
    /// Per-stage pool size; a zero keeps that stage sequential. Empty means
    /// route every stage deeper than one block with `n_s` units.
    pub cu_counts: Vec<usize>,
    /// Per-stage iterations; empty or zero entries default to `n_s`.
    pub iter_counts: Vec<usize>,
    pub width: usize,
    pub scorer: ScorerConfig,
    pub zero_unit: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShortKind {
    Resnet,
    Reset,
}

impl Shortened {
    pub fn new(arch: &str, kind: ShortKind) -> Self {
        Shortened {
            arch: arch.to_string(),
            kind,
            cu_counts: Vec::new(),
            iter_counts: Vec::new(),
            width: 16,
            scorer: ScorerConfig::new(ScorerKind::Softmax),
            zero_unit: false,
        }
    }

    pub fn config(&self) -> Result<NetworkConfig> {
        let blocks: Vec<usize> = self
            .arch
            .split('-')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::config(format!("arch {:?} is not of the form n1-n2-n3", self.arch)))?;
        if blocks.len() != STAGES {
            return Err(Error::config(format!("arch {:?} must name {STAGES} stages", self.arch)));
        }
        for (what, v) in [("cu_counts", &self.cu_counts), ("iter_counts", &self.iter_counts)] {
            if !v.is_empty() && v.len() != STAGES {
                return Err(Error::config(format!("{what} must be empty or have {STAGES} entries")));
            }
        }
        let stages = (0..STAGES)
            .map(|s| {
                let n = blocks[s];
                let units = match self.cu_counts.get(s) {
                    Some(&c) => c,
                    None if n > 1 => n,
                    None => 0,
                };
                if self.kind == ShortKind::Resnet || units == 0 {
                    return StageSpec::Resnet { blocks: n };
                }
                let iters = self.iter_counts.get(s).copied().filter(|&k| k > 0).unwrap_or(n);
                let mut cfg = ReSetConfig::new(units, iters, self.scorer);
                cfg.zero_unit = self.zero_unit;
                StageSpec::Reset(cfg)
            })
            .collect();
        let cfg = NetworkConfig::new(self.width, stages);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Stage {
    Resnet(Vec<ComputationalUnit>),
    Reset(ReSetStage),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBn {
    fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let h = self.conv.forward(ctx, x)?;
        let h = self.bn.forward(ctx, h)?;
        Ok(ctx.graph.relu(h))
    }
}

/// Layer layout of a model; parameters live in the paired store.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Network {
    pub cfg: NetworkConfig,
    pub stem: ConvBn,
    pub downs: Vec<ConvBn>,
    pub stages: Vec<Stage>,
    pub head: Linear,
}

pub struct ModelOutput {
    pub logits: Var,
    pub traces: Vec<StageTrace>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CostReport {
    /// Mean multiply-accumulates per sample.
    pub mac_count: f64,
    pub baseline_macs: u64,
    pub relative_time: f64,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub net: Network,
    pub store: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn build(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = cfg.width;
        let stem = ConvBn {
            conv: Conv2d::new(&mut store, "stem.conv", cfg.in_channels, w, 3, 1, 1, &mut rng),
            bn: BatchNorm::new(&mut store, "stem.bn", w),
        };
        let mut stages = Vec::with_capacity(STAGES);
        let mut downs = Vec::with_capacity(STAGES - 1);
        for (s, spec) in cfg.stages.iter().enumerate() {
            let ch = cfg.channels(s);
            if s > 0 {
                downs.push(ConvBn {
                    conv: Conv2d::new(&mut store, &format!("down{}.conv", s - 1), ch / 2, ch, 3, 2, 1, &mut rng),
                    bn: BatchNorm::new(&mut store, &format!("down{}.bn", s - 1), ch),
                });
            }
            stages.push(match spec {
                StageSpec::Resnet { blocks } => Stage::Resnet(
                    (0..*blocks)
                        .map(|i| ComputationalUnit::new(&mut store, &format!("stage{s}.unit{i}"), ch, &mut rng))
                        .collect(),
                ),
                StageSpec::Reset(rc) => Stage::Reset(ReSetStage::new(&mut store, s, ch, rc.clone(), &mut rng)?),
            });
        }
        let head = Linear::new(&mut store, "head.fc", cfg.channels(STAGES - 1), cfg.classes, true, &mut rng);
        Ok(Model {
            net: Network {
                cfg: cfg.clone(),
                stem,
                downs,
                stages,
                head,
            },
            store,
        })
    }

    /// Three routed stages of five units plus the zero unit, five iterations each.
    pub fn build_reset38(scorer: ScorerConfig, seed: u64) -> Result<Self> {
        Self::build(&NetworkConfig::reset38(scorer), seed)
    }

    /// The sequential counterpart of [`Model::build_reset38`].
    pub fn build_resnet38(seed: u64) -> Result<Self> {
        Self::build(&NetworkConfig::resnet(16, [RESET38_ITERATIONS; STAGES]), seed)
    }

    pub fn build_shortened(spec: &Shortened, seed: u64) -> Result<Self> {
        Self::build(&spec.config()?, seed)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.net.cfg
    }

    pub fn forward(&self, ctx: &mut Ctx<T>, x: Var, opts: &mut RouteOptions) -> Result<ModelOutput> {
        let shape = ctx.graph.shape(x).to_vec();
        let cfg = &self.net.cfg;
        if shape.len() != 4 || shape[1] != cfg.in_channels || shape[2] % 4 != 0 || shape[3] % 4 != 0 {
            return Err(Error::shape(
                "model_forward",
                format!("expected [N, {}, H, W] with H, W multiples of 4, got {shape:?}", cfg.in_channels),
            ));
        }
        let mut h = self.net.stem.forward(ctx, x)?;
        h = ctx.graph.max_pool2d(h, 3, 1, 1)?;
        let mut traces = Vec::new();
        for (s, stage) in self.net.stages.iter().enumerate() {
            if s > 0 {
                h = self.net.downs[s - 1].forward(ctx, h)?;
            }
            match stage {
                Stage::Resnet(blocks) => {
                    for b in blocks {
                        let f = b.forward(ctx, h)?;
                        h = ctx.graph.add(h, f)?;
                    }
                }
                Stage::Reset(r) => {
                    let (out, trace) = r.forward(ctx, h, opts)?;
                    h = out;
                    traces.push(trace);
                }
            }
        }
        let pooled = ctx.graph.global_avg_pool(h)?;
        let logits = self.net.head.forward(ctx, pooled)?;
        Ok(ModelOutput { logits, traces })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    /// Parameters of residual units only (controllers, stem, head excluded).
    pub fn unit_params(&self, stage: usize) -> usize {
        let prefix = format!("stage{stage}.unit");
        self.store.count_params(|n| n.starts_with(&prefix))
    }

    pub fn reset_stages(&self) -> impl Iterator<Item = &ReSetStage> {
        self.net.stages.iter().filter_map(|s| match s {
            Stage::Reset(r) => Some(r),
            Stage::Resnet(_) => None,
        })
    }

    pub fn reset_stages_mut(&mut self) -> impl Iterator<Item = &mut ReSetStage> {
        self.net.stages.iter_mut().filter_map(|s| match s {
            Stage::Reset(r) => Some(r),
            Stage::Resnet(_) => None,
        })
    }

    pub fn has_zero_unit(&self) -> bool {
        self.reset_stages().any(|r| r.pool.zero_unit)
    }

    /// Swaps the scorer of every routed stage; controller weights are kept.
    pub fn set_scorer(&mut self, kind: ScorerKind) {
        for r in self.reset_stages_mut() {
            r.set_scorer(kind);
        }
    }

    /// Number of distinct hard routes through the routed stages' units.
    pub fn route_space(&self) -> u128 {
        self.reset_stages().map(ReSetStage::route_count).product()
    }

    /// Routing that applies unit `j` at iteration `j` in every routed stage.
    pub fn sequential_routing(&self) -> Result<Vec<Routing>> {
        self.net
            .stages
            .iter()
            .map(|s| match s {
                Stage::Resnet(_) => Ok(Routing::Learned),
                Stage::Reset(r) => {
                    if r.cfg.n_iterations > r.cfg.n_units {
                        return Err(Error::config(format!(
                            "stage {} has more iterations than units; no sequential route",
                            r.stage
                        )));
                    }
                    let idx: Vec<usize> = (0..r.cfg.n_iterations).collect();
                    Ok(Routing::Forced(ForcedRoute::one_hot(&idx, r.pool.options(), false)))
                }
            })
            .collect()
    }

    /// Routing that selects the zero unit at every iteration.
    pub fn all_skip_routing(&self) -> Result<Vec<Routing>> {
        self.net
            .stages
            .iter()
            .map(|s| match s {
                Stage::Resnet(_) => Ok(Routing::Learned),
                Stage::Reset(r) => {
                    let zero = r
                        .pool
                        .zero_index()
                        .ok_or_else(|| Error::config(format!("stage {} has no zero unit", r.stage)))?;
                    Ok(Routing::Forced(ForcedRoute::one_hot(
                        &vec![zero; r.cfg.n_iterations],
                        r.pool.options(),
                        true,
                    )))
                }
            })
            .collect()
    }

    /// Copies every parameter and buffer whose name also exists here.
    pub fn copy_shared(&mut self, other: &Model<T>) -> Result<usize> {
        let names: HashSet<String> = self
            .store
            .params()
            .iter()
            .map(|p| p.name.clone())
            .chain(self.store.buffers().iter().map(|b| b.name.clone()))
            .collect();
        self.store
            .copy_from(&other.store, |n| names.contains(n).then(|| n.to_string()))
    }

    /// Marks every batch norm as having usable running statistics.
    pub fn mark_bn_initialized(&mut self) {
        for bn in self.batch_norms() {
            bn.mark_initialized(&mut self.store);
        }
    }

    pub fn batch_norms(&self) -> Vec<BatchNorm> {
        let mut out = vec![self.net.stem.bn.clone()];
        out.extend(self.net.downs.iter().map(|d| d.bn.clone()));
        for s in &self.net.stages {
            let units = match s {
                Stage::Resnet(blocks) => blocks.as_slice(),
                Stage::Reset(r) => {
                    out.extend(r.controller.batch_norms().iter().cloned());
                    r.pool.units.as_slice()
                }
            };
            for u in units {
                out.extend(u.batch_norms().into_iter().cloned());
            }
        }
        out
    }

    /// Stem, downsampling and head: paid by every sample regardless of route.
    pub fn fixed_macs(&self) -> u64 {
        let cfg = &self.net.cfg;
        let r = cfg.image_size;
        let mut macs = self.net.stem.conv.macs(r, r);
        for (i, d) in self.net.downs.iter().enumerate() {
            let r = cfg.resolution(i);
            macs += d.conv.macs(r, r);
        }
        macs + self.net.head.macs()
    }

    fn unit_macs(&self, stage: usize) -> u64 {
        let r = self.net.cfg.resolution(stage);
        let ch = self.net.cfg.channels(stage);
        2 * (ch * ch * 9 * r * r) as u64
    }

    /// Cost of the same-width sequential baseline of this configuration.
    pub fn baseline_macs(&self) -> u64 {
        self.fixed_macs()
            + self
                .net
                .cfg
                .stages
                .iter()
                .enumerate()
                .map(|(s, spec)| spec.baseline_blocks() as u64 * self.unit_macs(s))
                .sum::<u64>()
    }

    /// Multiply-accumulates actually executed for one routed sample.
    pub fn sample_macs(&self, record: Option<&RouteRecord>) -> Result<u64> {
        let mut macs = self.fixed_macs();
        for (s, stage) in self.net.stages.iter().enumerate() {
            match stage {
                Stage::Resnet(blocks) => macs += blocks.len() as u64 * self.unit_macs(s),
                Stage::Reset(r) => {
                    let rec = record.ok_or_else(|| Error::Analysis("routed model needs route records".into()))?;
                    let res = self.net.cfg.resolution(s);
                    let mut steps = 0;
                    for step in rec.route.iter().filter(|st| st.stage == s) {
                        steps += 1;
                        if !step.forced {
                            macs += r.controller.macs(res, res);
                        }
                        let evaluated = step.weights[..r.cfg.n_units]
                            .iter()
                            .filter(|w| **w >= SPARSITY_THRESHOLD)
                            .count();
                        macs += evaluated as u64 * self.unit_macs(s);
                    }
                    if steps != r.cfg.n_iterations {
                        return Err(Error::Analysis(format!(
                            "record {} has {steps} decisions for stage {s}, expected {}",
                            rec.sample_id, r.cfg.n_iterations
                        )));
                    }
                }
            }
        }
        Ok(macs)
    }

    pub fn cost_report(&self, records: &[RouteRecord]) -> Result<CostReport> {
        let mac_count = if records.is_empty() {
            self.sample_macs(None)? as f64
        } else {
            let mut total = 0.0;
            for r in records {
                total += self.sample_macs(Some(r))? as f64;
            }
            total / records.len() as f64
        };
        let baseline_macs = self.baseline_macs();
        Ok(CostReport {
            mac_count,
            baseline_macs,
            relative_time: mac_count / baseline_macs as f64,
        })
    }

    /// Human-readable per-stage summary of shapes, parameters and cost.
    pub fn describe(&self) -> String {
        let cfg = &self.net.cfg;
        let mut out = String::new();
        let r = cfg.image_size;
        let _ = writeln!(out, "input       {}x{}x{}", cfg.in_channels, r, r);
        let stem = self.store.count_params(|n| n.starts_with("stem."));
        let _ = writeln!(out, "stem        {}x{}x{}  params {stem}", cfg.width, r, r);
        for (s, stage) in self.net.stages.iter().enumerate() {
            let (ch, res) = (cfg.channels(s), cfg.resolution(s));
            if s > 0 {
                let p = self.store.count_params(|n| n.starts_with(&format!("down{}.", s - 1)));
                let _ = writeln!(out, "down{}       {ch}x{res}x{res}  params {p}", s - 1);
            }
            let units = self.unit_params(s);
            match stage {
                Stage::Resnet(b) => {
                    let _ = writeln!(
                        out,
                        "stage{s}      {ch}x{res}x{res}  resnet blocks {}  params {units}  macs {}",
                        b.len(),
                        b.len() as u64 * self.unit_macs(s)
                    );
                }
                Stage::Reset(rs) => {
                    let ctrl = self.store.count_params(|n| n.starts_with(&format!("controller.stage{s}.")));
                    let _ = writeln!(
                        out,
                        "stage{s}      {ch}x{res}x{res}  reset units {}{} iters {} scorer {}  params {units} + controller {ctrl}  macs/unit {} controller/iter {}",
                        rs.cfg.n_units,
                        if rs.pool.zero_unit { "+zero" } else { "" },
                        rs.cfg.n_iterations,
                        rs.cfg.scorer.kind.short_name(),
                        self.unit_macs(s),
                        rs.controller.macs(res, res)
                    );
                }
            }
        }
        let head = self.store.count_params(|n| n.starts_with("head."));
        let _ = writeln!(out, "head        {}  params {head}", cfg.classes);
        let _ = writeln!(out, "total params {}", self.num_params());
        let _ = writeln!(out, "baseline macs {}", self.baseline_macs());
        if self.reset_stages().next().is_some() {
            let _ = writeln!(out, "hard routes {}", self.route_space());
        }
        out
    }

    /// Eval-mode logits for a batch of images, with learned routing.
    pub fn predict(&self, images: &Tensor<T>, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
        let mut ctx = Ctx::new(&self.store, Mode::Eval);
        let x = ctx.input(images.clone());
        let mut opts = RouteOptions {
            step: 0,
            rng,
            routing: &[],
        };
        let out = self.forward(&mut ctx, x, &mut opts)?;
        Ok(ctx.graph.value(out.logits).clone())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            net: self.net.clone(),
            store: self.store.cast(),
        }
    }
}
