use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::nn::ParamStore;
use crate::reset::{entropy_regularizer, hybrid_rl_term, StageTrace};
use crate::scalar::Scalar;
use crate::selection::reinforce_surrogate;

/// The assembled training objective and the value of each of its terms.
#[derive(Clone, Debug)]
pub struct LossTerms {
    /// Differentiable objective; excludes the L2 value, which the optimizer
    /// applies as a gradient term.
    pub objective: Var,
    /// `ce + entropy + hybrl + l2`.
    pub loss: f64,
    pub ce: f64,
    pub entropy: f64,
    pub hybrl: f64,
    pub l2: f64,
    pub per_sample_ce: Vec<f64>,
}

/// `0.5 * wd * sum theta^2` over parameters subject to decay.
pub fn l2_penalty<T: Scalar>(store: &ParamStore<T>, weight_decay: f64) -> f64 {
    if weight_decay == 0.0 {
        return 0.0;
    }
    let sq: f64 = store
        .params()
        .iter()
        .filter(|p| p.decay)
        .flat_map(|p| p.value.data())
        .map(|v| v.as_f64().powi(2))
        .sum();
    0.5 * weight_decay * sq
}

/// Cross-entropy plus the routing regularizers of every traced module,
/// with entropy weights multiplied by `entropy_scale`. When a module was
/// routed by REINFORCE, its score-function surrogate against `baseline`
/// joins the objective.
#[allow(clippy::too_many_arguments)]
pub fn assemble_loss<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    logits: Var,
    labels: &[usize],
    traces: &[StageTrace],
    weight_decay: f64,
    entropy_scale: f64,
    baseline: f64,
) -> Result<LossTerms> {
    let per = g.cross_entropy_per_sample(logits, labels)?;
    let per_sample_ce: Vec<f64> = g.value(per).data().iter().map(|v| v.as_f64()).collect();
    let mut objective = g.mean(per);
    let ce = g.value(objective).item().as_f64();

    let mut entropy = 0.0;
    if entropy_scale != 0.0 {
        if let Some(e) = entropy_regularizer(g, traces)? {
            let e = g.scale(e, T::of(entropy_scale));
            entropy = g.value(e).item().as_f64();
            objective = g.add(objective, e)?;
        }
    }
    let mut hybrl = 0.0;
    if let Some(h) = hybrid_rl_term(g, traces)? {
        hybrl = g.value(h).item().as_f64();
        objective = g.add(objective, h)?;
    }
    let losses: Vec<T> = per_sample_ce.iter().map(|v| T::of(*v)).collect();
    for trace in traces {
        for sel in &trace.iterations {
            if let Some(lp) = sel.log_prob {
                let s = reinforce_surrogate(g, lp, &losses, T::of(baseline))?;
                objective = g.add(objective, s)?;
            }
        }
    }
    let l2 = l2_penalty(store, weight_decay);
    Ok(LossTerms {
        objective,
        loss: ce + entropy + hybrl + l2,
        ce,
        entropy,
        hybrl,
        l2,
        per_sample_ce,
    })
}
