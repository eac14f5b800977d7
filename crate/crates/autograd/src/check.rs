//! Central finite-difference verification of analytic parameter gradients.

use crate::{Graph, ParamId, ParamStore, Var};

/// Denominator floor for the relative error, so that vanishing gradients are
/// compared on an absolute scale equal to the default step.
pub const REL_FLOOR: f64 = 1e-4;
pub const DEFAULT_STEP: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_leaf: Option<String>,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Optional multiplicative corruption of one leaf's analytic gradient (negative controls).
#[derive(Clone, Copy, Debug)]
pub struct Corruption {
    pub leaf: ParamId,
    pub factor: f64,
}

/// Compares the analytic gradient of `loss` against central differences for
/// every element of every trainable leaf in `store`.
///
/// `loss` builds the forward pass on the given graph and returns a scalar.
/// The graph is in training mode for both the analytic and perturbed passes.
pub fn check_params<F>(
    store: &mut ParamStore<f64>,
    loss: F,
    step: f64,
    tolerance: f64,
    corruption: Option<Corruption>,
) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>) -> Var,
{
    let analytic: Vec<(ParamId, Vec<f64>)> = {
        let mut g = Graph::training(store);
        let out = loss(&mut g);
        let grads = g.backward(out);
        store
            .iter()
            .filter(|(_, l)| l.trainable())
            .map(|(id, l)| {
                let mut v = grads.param(id).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; l.value.numel()]);
                if let Some(c) = corruption.filter(|c| c.leaf == id) {
                    v.iter_mut().for_each(|x| *x *= c.factor);
                }
                (id, v)
            })
            .collect()
    };
    let eval = |store: &ParamStore<f64>| {
        let mut g = Graph::with_mode(store, false, true);
        let out = loss(&mut g);
        g.value(out).item()
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_leaf: None,
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
        tolerance,
    };
    for (id, grad) in analytic {
        for (i, &a) in grad.iter().enumerate() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + step;
            let up = eval(store);
            store.value_mut(id).data_mut()[i] = orig - step;
            let down = eval(store);
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_leaf.is_none() {
                report.max_rel_error = err;
                report.worst_leaf = Some(store.leaf(id).name.clone());
                report.worst_index = i;
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    report
}
