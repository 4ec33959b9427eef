//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reroute::autodiff::gradcheck::GradCheckReport;
use reroute::autodiff::Var;
use reroute::data::{self, Dataset, Normalization};
use reroute::nn::{Ctx, Mode, ParamStore};
use reroute::training::{LrSchedule, OptimizerConfig, TrainConfig};
use reroute::Result;

/// Finite-difference check of every parameter tensor in `store`.
///
/// Per tensor the entry with the largest analytic gradient and `random`
/// further entries are perturbed by `±h`. `loss` must not depend on
/// anything but the store, so the reference and perturbed passes agree.
pub fn store_gradcheck(
    store: &mut ParamStore<f64>,
    random: usize,
    h: f64,
    seed: u64,
    loss: impl Fn(&mut Ctx<f64>) -> Result<Var>,
) -> Result<GradCheckReport> {
    let grads: HashMap<String, Vec<f64>> = {
        let mut ctx = Ctx::new(store, Mode::Train);
        let out = loss(&mut ctx)?;
        let mut bw = ctx.backward(out)?;
        bw.param_grads()
            .into_iter()
            .map(|(id, g)| (store.param(id).name.clone(), g.data().to_vec()))
            .collect()
    };
    let value = |store: &ParamStore<f64>| -> Result<f64> {
        let mut ctx = Ctx::new(store, Mode::Train);
        let out = loss(&mut ctx)?;
        Ok(ctx.graph.value(out).item())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    let names: Vec<String> = store.params().iter().map(|p| p.name.clone()).collect();
    for (t, name) in names.iter().enumerate() {
        let id = store.find_param(name).expect("listed parameter exists");
        let n = store.param(id).value.numel();
        let analytic = grads.get(name).cloned().unwrap_or_else(|| vec![0.0; n]);
        let top = (0..n)
            .max_by(|&a, &b| analytic[a].abs().total_cmp(&analytic[b].abs()))
            .unwrap_or(0);
        let mut entries = vec![top];
        entries.extend((0..random).map(|_| rng.gen_range(0..n)));
        entries.dedup();
        for e in entries {
            let orig = store.param(id).value.data()[e];
            store.param_mut(id).value.data_mut()[e] = orig + h;
            let up = value(store)?;
            store.param_mut(id).value.data_mut()[e] = orig - h;
            let down = value(store)?;
            store.param_mut(id).value.data_mut()[e] = orig;
            report.record(t, e, analytic[e], (up - down) / (2.0 * h));
        }
    }
    Ok(report)
}

/// Toy train/validation splits and their normalization.
pub fn toy_data(per_class: usize, val_per_class: usize, seed: u64) -> (Dataset, Dataset, Normalization) {
    let train = data::make_toy_dataset(10, per_class, seed).expect("toy train");
    let val = data::make_toy_dataset(10, val_per_class, seed + 1).expect("toy val");
    let norm = Normalization::compute(&train).expect("normalization");
    (train, val, norm)
}

/// Small-batch SGD configuration used by the toy-scale runs.
pub fn toy_train_config(batch: usize, lr: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        optimizer: OptimizerConfig::Sgd {
            lr,
            momentum: 0.9,
            weight_decay: 1e-4,
        },
        schedule: LrSchedule::Constant,
        batch_size: batch,
        eval_every: 1_000_000,
        log_every: 1,
        augment: false,
        seed,
        ..TrainConfig::default()
    }
}
