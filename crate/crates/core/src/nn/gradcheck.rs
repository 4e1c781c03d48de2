use super::graph::{Graph, Var};
use super::param::ParamStore;
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so entries whose true
    /// gradient is ~0 are judged on absolute error.
    pub floor: f64,
    /// Check at most this many evenly spaced entries per parameter.
    pub max_entries: Option<usize>,
    /// Evaluate in training mode; dropout masks are fixed by the graph seed.
    pub train: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            tolerance: 1e-5,
            floor: 1e-3,
            max_entries: None,
            train: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the analytic gradient of every unfrozen parameter against
/// central finite differences of `loss_fn`. The closure must be
/// deterministic (evaluation mode, fixed inputs).
pub fn grad_check<F>(store: &mut ParamStore<f64>, loss_fn: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>) -> Result<Var>,
{
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new(store, opts.train, 0);
        let loss = loss_fn(&mut g)?;
        let grads = g.backward(loss);
        let mut out: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        for (pid, t) in grads.param_grads() {
            out[pid.index()] = t.data().to_vec();
        }
        out
    };
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(store, opts.train, 0);
        let loss = loss_fn(&mut g)?;
        Ok(g.value(loss).item())
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        tolerance: opts.tolerance,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.get(id).frozen {
            continue;
        }
        let n = store.get(id).value.numel();
        let count = opts.max_entries.map_or(n, |m| m.min(n));
        for j in 0..count {
            let idx = if count == n { j } else { j * n / count };
            let orig = store.get(id).value.data()[idx];
            store.get_mut(id).value.data_mut()[idx] = orig + opts.eps;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[idx] = orig - opts.eps;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let err = relative_error(analytic[id.index()][idx], numeric, opts.floor);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.get(id).name.clone(), idx));
            }
        }
    }
    Ok(report)
}
