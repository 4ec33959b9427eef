//! Central finite-difference gradient checking in 64-bit.

use crate::autodiff::graph::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Gradients with magnitude below this are compared absolutely.
pub const ZERO_GRAD_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Largest `|a-n| / max(|a|,|n|)` over entries with a non-negligible gradient.
    pub max_rel_err: f64,
    /// Largest `|a-n|` over entries whose gradient is (numerically) zero.
    pub max_abs_err_at_zero: f64,
    /// `(input, element, analytic, numeric)` of the worst relative entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn record(&mut self, input: usize, elem: usize, analytic: f64, numeric: f64) {
        self.checked += 1;
        let scale = analytic.abs().max(numeric.abs());
        let diff = (analytic - numeric).abs();
        if scale < ZERO_GRAD_FLOOR {
            self.max_abs_err_at_zero = self.max_abs_err_at_zero.max(diff);
        } else {
            let rel = diff / scale;
            if rel >= self.max_rel_err {
                self.max_rel_err = rel;
                self.worst = Some((input, elem, analytic, numeric));
            }
        }
    }

    pub fn passes(&self, rel_tol: f64, abs_tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < rel_tol && self.max_abs_err_at_zero < abs_tol
    }
}

/// Compares the analytic gradient of the scalar built by `f` against
/// central differences with step `h`, for every element of every input.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
        for e in 0..inputs[i].numel() {
            let orig = work[i].data()[e];
            work[i].data_mut()[e] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[e] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[e] = orig;
            report.record(i, e, analytic.data()[e], (up - down) / (2.0 * h));
        }
    }
    Ok(report)
}
