//! Central-difference gradient checking in `f64`.

use crate::grad::params::{Ctx, ParamId, ParamStore};
use crate::grad::tape::{Tape, Var};
use crate::grad::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            tolerance: 1e-5,
            floor: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl CheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Compare the reverse-mode gradient of `f` at `inputs` against central
/// differences. `f` must map its leaves to a scalar.
pub fn check(inputs: &[Tensor<f64>], opts: CheckOptions, f: impl Fn(&[Var<f64>]) -> Var<f64>) -> CheckReport {
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = vals.iter().map(|v| tape.constant(v.clone())).collect();
        f(&vars).scalar()
    };
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = f(&vars);
    let grads = tape.backward(&out);
    let mut report = CheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(var);
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + opts.step;
            let hi = eval(&work);
            work[k].data_mut()[i] = orig - opts.step;
            let lo = eval(&work);
            work[k].data_mut()[i] = orig;
            let numeric = (hi - lo) / (2.0 * opts.step);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            if rel > report.max_rel_error || !rel.is_finite() {
                report = CheckReport {
                    max_rel_error: if rel.is_finite() { rel } else { f64::INFINITY },
                    worst_input: k,
                    worst_index: i,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    report
}

/// Panics with the worst mismatch when the check fails.
pub fn assert_gradients(inputs: &[Tensor<f64>], opts: CheckOptions, f: impl Fn(&[Var<f64>]) -> Var<f64>) {
    let r = check(inputs, opts, f);
    assert!(
        r.passed(opts.tolerance),
        "gradient mismatch: input {} index {}: analytic {} numeric {} (rel {:.3e})",
        r.worst_input,
        r.worst_index,
        r.analytic,
        r.numeric,
        r.max_rel_error
    );
}

/// Indices checked out of `n`: all of them, or `limit` evenly spaced.
fn sample_indices(n: usize, limit: usize) -> Vec<usize> {
    if limit == 0 || n <= limit {
        return (0..n).collect();
    }
    (0..limit).map(|i| i * (n - 1) / (limit - 1).max(1)).collect()
}

/// Like [`check`], for functions that also read parameters from a store.
///
/// Inputs become leaves of the pass; `params` must be trainable. At most
/// `limit` elements per tensor are perturbed (0 means all). In the report,
/// `worst_input` counts the inputs first, then `params`.
pub fn check_with_params(
    store: &mut ParamStore<f64>,
    params: &[ParamId],
    inputs: &[Tensor<f64>],
    opts: CheckOptions,
    limit: usize,
    f: impl Fn(&Ctx<'_, f64>, &[Var<f64>]) -> Var<f64>,
) -> CheckReport {
    let eval = |store: &ParamStore<f64>, vals: &[Tensor<f64>]| -> f64 {
        let cx = Ctx::new(store, true);
        let vars: Vec<_> = vals.iter().map(|v| cx.input(v.clone())).collect();
        f(&cx, &vars).scalar()
    };
    let analytic: Vec<Tensor<f64>> = {
        let cx = Ctx::new(store, true);
        let vars: Vec<_> = inputs.iter().map(|v| cx.leaf(v.clone())).collect();
        let out = f(&cx, &vars);
        let grads = cx.backward(&out);
        let mut all: Vec<Tensor<f64>> = vars.iter().map(|v| grads.get_or_zeros(v)).collect();
        for &id in params {
            let g = match cx.bound(id) {
                Some(v) => grads.get_or_zeros(&v),
                None => Tensor::zeros(store.get(id).shape().to_vec()),
            };
            all.push(g);
        }
        all
    };
    let mut report = CheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut record = |k: usize, i: usize, a: f64, numeric: f64| {
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
        if rel > report.max_rel_error || !rel.is_finite() {
            report = CheckReport {
                max_rel_error: if rel.is_finite() { rel } else { f64::INFINITY },
                worst_input: k,
                worst_index: i,
                analytic: a,
                numeric,
            };
        }
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for k in 0..inputs.len() {
        for i in sample_indices(inputs[k].numel(), limit) {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + opts.step;
            let hi = eval(store, &work);
            work[k].data_mut()[i] = orig - opts.step;
            let lo = eval(store, &work);
            work[k].data_mut()[i] = orig;
            record(k, i, analytic[k].data()[i], (hi - lo) / (2.0 * opts.step));
        }
    }
    for (j, &id) in params.iter().enumerate() {
        let k = inputs.len() + j;
        for i in sample_indices(store.get(id).numel(), limit) {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + opts.step;
            let hi = eval(store, &work);
            store.get_mut(id).data_mut()[i] = orig - opts.step;
            let lo = eval(store, &work);
            store.get_mut(id).data_mut()[i] = orig;
            record(k, i, analytic[k].data()[i], (hi - lo) / (2.0 * opts.step));
        }
    }
    report
}
