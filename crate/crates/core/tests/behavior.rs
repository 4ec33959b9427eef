//! Behavioral checks of controllers, routed modules and the training loop.

mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use reroute::autodiff::Var;
use reroute::controller::{Controller, ControllerKind};
use reroute::network::{CostReport, Model, ShortKind, Shortened};
use reroute::nn::{Ctx, Mode, ParamStore};
use reroute::reset::{route_records, ForcedRoute, ReSetConfig, ReSetStage, RouteOptions, Routing, SkipReward};
use reroute::routes::{self, RouteMatrix};
use reroute::selection::{argmax, ScorerConfig, ScorerKind};
use reroute::training::{
    assemble_loss, incremental_schedule, l2_penalty, run_pipeline, train_step, two_phase_schedule, Evaluation,
    NoObserver, Scope, TrainData, TrainState, TwoPhaseRule,
};
use reroute::{Result, Tensor};

use common::{store_gradcheck, toy_data, toy_train_config};

fn controller_store(kind: ControllerKind, seed: u64) -> (ParamStore<f64>, Controller) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = Controller::new(&mut store, "controller.stage0", kind, 4, 3, 2, &mut rng);
    let x = Tensor::uniform(vec![3, 4, 5, 5], -1.0, 1.0, &mut rng);
    store.add_param("x", x, false);
    (store, c)
}

#[test]
fn controller_gradients_match_finite_differences() {
    for kind in [ControllerKind::Cnn, ControllerKind::Rnn] {
        let (mut store, c) = controller_store(kind, 1);
        let probe = Tensor::uniform(vec![3, 3], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let loss = |ctx: &mut Ctx<f64>| -> Result<Var> {
            let x = ctx.param(ctx.store().find_param("x").unwrap());
            let mut state = c.reset_state();
            let mut total = None;
            for _ in 0..2 {
                let l = c.score(ctx, x, &mut state)?;
                let p = ctx.graph.constant(probe.clone());
                let prod = ctx.graph.mul(l, p)?;
                let s = ctx.graph.sum(prod);
                total = Some(match total {
                    Some(t) => ctx.graph.add(t, s)?,
                    None => s,
                });
            }
            Ok(total.unwrap())
        };
        let report = store_gradcheck(&mut store, 4, 1e-6, 3, loss).unwrap();
        assert!(report.passes(1e-4, 1e-7), "{kind:?}: {report:?}");
        assert!(report.checked > 10);
    }
}

#[test]
fn reset_state_discards_the_previous_module() {
    for kind in [ControllerKind::Cnn, ControllerKind::Rnn] {
        let (store, c) = controller_store(kind, 4);
        let id = store.find_param("x").unwrap();
        let fresh = {
            let mut ctx = Ctx::new(&store, Mode::Train);
            let x = ctx.param(id);
            let l = c.score(&mut ctx, x, &mut c.reset_state()).unwrap();
            ctx.graph.value(l).clone()
        };
        let mut ctx = Ctx::new(&store, Mode::Train);
        let x = ctx.param(id);
        let mut state = c.reset_state();
        let first = c.score(&mut ctx, x, &mut state).unwrap();
        let y = ctx.graph.scale(x, 0.5);
        let second = c.score(&mut ctx, y, &mut state).unwrap();
        assert_ne!(ctx.graph.value(first).data(), ctx.graph.value(second).data());
        let again = c.score(&mut ctx, x, &mut c.reset_state()).unwrap();
        assert_eq!(ctx.graph.value(again).data(), fresh.data(), "{kind:?}");
    }
}

#[test]
fn each_iteration_updates_only_its_own_bn_slot() {
    let (mut store, c) = controller_store(ControllerKind::Cnn, 5);
    let iter = |k: usize| move |n: &str| n.contains(&format!(".iter{k}.bn"));
    let before = (store.checksum(iter(0)), store.checksum(iter(1)));
    let updates = {
        let mut ctx = Ctx::new(&store, Mode::Train);
        let x = ctx.param(store.find_param("x").unwrap());
        let mut state = c.reset_state();
        c.score(&mut ctx, x, &mut state).unwrap();
        ctx.into_bn_updates()
    };
    store.apply_bn_updates(updates);
    assert_ne!(store.checksum(iter(0)), before.0);
    assert_eq!(store.checksum(iter(1)), before.1);
    let Controller::Cnn(cnn) = &c else { unreachable!() };
    assert!(cnn.bn.slot(1).is_ok());
    assert!(cnn.bn.slot(2).is_err());
}

fn stage(cfg: ReSetConfig) -> (ParamStore<f32>, ReSetStage) {
    let mut store = ParamStore::new();
    let stage = ReSetStage::new(&mut store, 0, 4, cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    (store, stage)
}

/// Unit evaluations and the per-sample weights of one training pass.
fn unit_evals(store: &ParamStore<f32>, stage: &ReSetStage, routing: Routing) -> (usize, Vec<Vec<f64>>) {
    let x = Tensor::<f32>::uniform(vec![5, 4, 6, 6], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(7));
    let mut ctx = Ctx::new(store, Mode::Train);
    let xv = ctx.input(x);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let routing = [routing];
    let mut opts = RouteOptions {
        step: 0,
        rng: &mut rng,
        routing: &routing,
    };
    let (_, trace) = stage.forward(&mut ctx, xv, &mut opts).unwrap();
    let recs = route_records(&ctx.graph, &[trace], &[0, 1, 2, 3, 4], &[0; 5]);
    let weights = recs.iter().flat_map(|r| r.route.iter().map(|s| s.weights.clone())).collect();
    (ctx.unit_evals, weights)
}

fn nonzero_units(weights: &[Vec<f64>], units: usize) -> usize {
    weights.iter().map(|w| w[..units].iter().filter(|v| **v >= 1e-12).count()).sum()
}

#[test]
fn units_run_only_where_weighted() {
    let mut cfg = ReSetConfig::new(3, 3, ScorerConfig::new(ScorerKind::Softmax));
    cfg.zero_unit = true;
    let (store, st) = stage(cfg);
    let forced = ForcedRoute {
        weights: vec![vec![0.5, 0.0, 0.5, 0.0], vec![0.0, 0.0, 0.0, 1.0], vec![0.0, 1.0, 0.0, 0.0]],
        hard: false,
    };
    let (evals, w) = unit_evals(&store, &st, Routing::Forced(forced));
    assert_eq!(evals, 5 * 3);
    assert_eq!(evals, nonzero_units(&w, 3));

    let (store, st) = stage(ReSetConfig::new(4, 2, ScorerConfig::topk(2)));
    let (evals, w) = unit_evals(&store, &st, Routing::Learned);
    assert_eq!(evals, 5 * 2 * 2);
    assert_eq!(evals, nonzero_units(&w, 4));

    let mut cfg = ReSetConfig::new(3, 2, ScorerConfig::new(ScorerKind::GumbelSt));
    cfg.zero_unit = true;
    let (store, st) = stage(cfg);
    let (evals, w) = unit_evals(&store, &st, Routing::Learned);
    assert_eq!(evals, nonzero_units(&w, 3));
    assert!(evals <= 5 * 2);
}

fn tiny(kind: ShortKind, scorer: ScorerKind) -> Shortened {
    let mut s = Shortened::new("1-2-2", kind);
    s.width = 4;
    s.scorer = ScorerConfig::new(scorer);
    s
}

#[test]
fn f64_training_is_bitwise_repeatable() {
    let (train, _, norm) = toy_data(4, 1, 9);
    let data = TrainData { train: &train, norm };
    let cfg = toy_train_config(8, 0.05, 3);
    let run = |spec: &Shortened, steps: usize| {
        let mut model = Model::<f64>::build_shortened(spec, 1).unwrap();
        let mut state = TrainState::new(3);
        let losses: Vec<u64> = (0..steps)
            .map(|_| {
                let out = train_step(&mut model, &mut state, &cfg, &data, 0.05, 1.0).unwrap();
                state.step += 1;
                out.loss.to_bits()
            })
            .collect();
        (losses, model.store.checksum(|_| true))
    };
    let resnet = tiny(ShortKind::Resnet, ScorerKind::Softmax);
    assert_eq!(run(&resnet, 200), run(&resnet, 200));
    let reset = tiny(ShortKind::Reset, ScorerKind::GumbelSt);
    let (a, b) = (run(&reset, 40), run(&reset, 40));
    assert_eq!(a, b);
}

#[test]
fn frozen_parameters_survive_momentum() {
    let (train, _, norm) = toy_data(4, 1, 10);
    let data = TrainData { train: &train, norm };
    let cfg = toy_train_config(8, 0.05, 4);
    let mut model = Model::<f32>::build_shortened(&tiny(ShortKind::Reset, ScorerKind::Softmax), 2).unwrap();
    let mut state = TrainState::new(4);
    for _ in 0..5 {
        train_step(&mut model, &mut state, &cfg, &data, 0.05, 1.0).unwrap();
        state.step += 1;
    }
    let units = |n: &str| !n.starts_with("controller.");
    let ctrl = |n: &str| n.starts_with("controller.");
    let (u, c) = (model.store.checksum(units), model.store.checksum(ctrl));
    // velocity buffers still hold momentum for the units
    model.store.set_trainable(ctrl);
    for _ in 0..5 {
        train_step(&mut model, &mut state, &cfg, &data, 0.05, 1.0).unwrap();
        state.step += 1;
    }
    assert_eq!(model.store.checksum(units), u);
    assert_ne!(model.store.checksum(ctrl), c);
}

#[test]
fn eval_routes_survive_a_scorer_swap() {
    let (train, val, norm) = toy_data(4, 2, 11);
    let data = TrainData { train: &train, norm };
    let cfg = toy_train_config(8, 0.05, 5);
    let mut model = Model::<f32>::build_shortened(&tiny(ShortKind::Reset, ScorerKind::Softmax), 3).unwrap();
    let mut state = TrainState::new(5);
    for _ in 0..3 {
        train_step(&mut model, &mut state, &cfg, &data, 0.05, 1.0).unwrap();
        state.step += 1;
    }
    model.mark_bn_initialized();
    let records = |m: &Model<f32>| reroute::training::evaluate(m, &val, &norm, 64, 1).unwrap().records;
    let soft = records(&model);
    model.set_scorer(ScorerKind::GumbelSoftmax);
    let relaxed = records(&model);
    model.set_scorer(ScorerKind::GumbelSt);
    let hard = records(&model);
    assert!(!soft.is_empty());
    for ((s, r), h) in soft.iter().zip(&relaxed).zip(&hard) {
        for (a, b) in s.route.iter().zip(&r.route) {
            assert_eq!(a.weights, b.weights, "noiseless unit-temperature relaxation equals softmax");
        }
        // hard choices change the representation, so only the first decision is shared
        assert_eq!(h.route[0].selected, Some(argmax(&s.route[0].weights)));
    }
}

#[test]
fn convergence_rule_ends_phases_on_stale_accuracy() {
    let (train, _, norm) = toy_data(2, 1, 12);
    let data = TrainData { train: &train, norm };
    let mut cfg = toy_train_config(4, 0.01, 6);
    cfg.eval_every = 1;
    let mut model = Model::<f32>::build_shortened(&tiny(ShortKind::Reset, ScorerKind::Softmax), 4).unwrap();
    // frozen batch norms normalize with running statistics
    model.mark_bn_initialized();
    let spec = two_phase_schedule(TwoPhaseRule::Convergence { window: 2 }, 1, 50, 50);
    let script = [0.1, 0.2, 0.2, 0.2, 0.5, 0.4, 0.6, 0.6, 0.6];
    let mut calls = 0;
    let mut validator = |_: &Model<f32>, _: u64| -> Result<Evaluation> {
        let accuracy = script.get(calls).copied().unwrap_or(0.0);
        calls += 1;
        Ok(Evaluation {
            accuracy,
            ce: 0.0,
            skip_fraction: 0.0,
            cost: CostReport {
                mac_count: 0.0,
                baseline_macs: 0,
                relative_time: 0.0,
            },
            records: Vec::new(),
        })
    };
    let mut state = TrainState::new(6);
    let h = run_pipeline(&mut model, &spec, &cfg, &data, &mut validator, &mut NoObserver, &mut state, None).unwrap();
    let spans: Vec<(u64, u64, bool)> = h.phases.iter().map(|p| (p.start_step, p.end_step, p.converged)).collect();
    // the monitor restarts with each phase
    assert_eq!(spans, vec![(0, 4, true), (4, 9, true)]);
}

#[test]
fn incremental_scopes_grow_from_the_head() {
    let model = Model::<f32>::build_shortened(&tiny(ShortKind::Reset, ScorerKind::Softmax), 5).unwrap();
    let spec = incremental_schedule(&model, 1);
    assert_eq!(spec.phases.len(), 4);
    let names: Vec<String> = model.store.params().iter().map(|p| p.name.clone()).collect();
    let mut prev = 0;
    for (i, p) in spec.phases.iter().enumerate() {
        let Some(scope @ Scope::Prefixes(_)) = &p.scope else { panic!("prefix scope") };
        let open: Vec<&String> = names.iter().filter(|n| scope.trainable(n)).collect();
        assert!(open.len() > prev, "phase {i} unfreezes more");
        prev = open.len();
        assert!(open.iter().any(|n| n.starts_with("head.")));
    }
    assert_eq!(prev, names.len(), "the last phase trains everything");
}

#[test]
fn loss_terms_add_up() {
    let mut spec = tiny(ShortKind::Reset, ScorerKind::Softmax);
    spec.zero_unit = true;
    let mut model = Model::<f64>::build_shortened(&spec, 6).unwrap();
    for r in model.reset_stages_mut() {
        r.cfg.lambda1 = 0.3;
        r.cfg.lambda2 = 0.2;
        r.cfg.r_skip = SkipReward::Constant(0.5);
    }
    let x = Tensor::<f64>::uniform(vec![4, 3, 32, 32], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(9));
    let labels = [1, 0, 3, 3];
    let mut ctx = Ctx::new(&model.store, Mode::Train);
    let xv = ctx.input(x);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut opts = RouteOptions {
        step: 0,
        rng: &mut rng,
        routing: &[],
    };
    let out = model.forward(&mut ctx, xv, &mut opts).unwrap();
    let t = assemble_loss(&mut ctx.graph, &model.store, out.logits, &labels, &out.traces, 1e-3, 0.5, 0.0).unwrap();

    let logits = ctx.graph.value(out.logits).clone();
    let classes = logits.shape()[1];
    let ce: Vec<f64> = logits
        .data()
        .chunks(classes)
        .zip(&labels)
        .map(|(row, &y)| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .collect();
    let ce_mean = ce.iter().sum::<f64>() / 4.0;
    let ids = [0, 1, 2, 3];
    let recs = route_records(&ctx.graph, &out.traces, &ids, &labels);
    let ent = reroute::reset::entropy_regularizer_value(&recs, 0.3, 0.2).unwrap() * 0.5;
    let sq: f64 = model.store.params().iter().filter(|p| p.decay).flat_map(|p| p.value.data()).map(|v| v * v).sum();

    assert!((t.ce - ce_mean).abs() < 1e-12);
    for (a, b) in t.per_sample_ce.iter().zip(&ce) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((t.entropy - ent).abs() < 1e-12, "{} vs {ent}", t.entropy);
    assert!((t.l2 - 0.5e-3 * sq).abs() < 1e-12);
    assert_eq!(t.l2, l2_penalty(&model.store, 1e-3));
    assert!((t.loss - (t.ce + t.entropy + t.hybrl + t.l2)).abs() < 1e-12);
    // soft weights reward the expected skip mass
    let zero = recs[0].route[0].weights.len() - 1;
    let mass: f64 = recs.iter().flat_map(|r| &r.route).map(|s| s.weights[zero]).sum();
    assert!((t.hybrl + 0.5 * mass / 4.0).abs() < 1e-12, "{} vs {mass}", t.hybrl);
    let objective = ctx.graph.value(t.objective).item();
    assert!((objective - (t.ce + t.entropy + t.hybrl)).abs() < 1e-12);
}

#[test]
fn label_independent_routes_do_not_separate() {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let n = 2000;
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let w: Vec<f64> = (0..6).map(|_| rng.gen::<f64>()).collect();
            let s: f64 = w.iter().sum();
            w.iter().map(|v| v / s).collect()
        })
        .collect();
    let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
    let m = RouteMatrix::from_rows((0..n as u64).collect(), labels, &rows).unwrap();
    let sep = routes::class_route_separation(&m, 20_000, 1).unwrap();
    assert!((sep.ratio - 1.0).abs() < 0.03, "{sep:?}");

    // routes that copy the label separate strongly
    let rows: Vec<Vec<f64>> = (0..n).map(|i| (0..10).map(|j| if j == i % 10 { 1.0 } else { 0.0 }).collect()).collect();
    let m = RouteMatrix::from_rows((0..n as u64).collect(), (0..n).map(|i| i % 10).collect(), &rows).unwrap();
    assert_eq!(routes::class_route_separation(&m, 1000, 1).unwrap().ratio, 0.0);
}
