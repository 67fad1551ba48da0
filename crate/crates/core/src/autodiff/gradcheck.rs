use rayon::prelude::*;

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn eval_scalar(tape: &Tape, root: Var) -> Result<f64> {
    let v = tape.value(root);
    if v.len() != 1 {
        return Err(Error::NonScalarRoot(tape.shape(root).to_vec()));
    }
    if !v[0].is_finite() {
        return Err(Error::NonFinite { op: "finite_diff_check" });
    }
    Ok(v[0])
}

/// Largest relative error between the tape gradient of `f` at `point` and
/// central finite differences with the given step.
pub fn finite_diff_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::invalid("finite_diff_check", "step must be positive"));
    }
    let mut tape = Tape::new();
    let x = tape.variable(point)?;
    let root = f(&mut tape, x)?;
    eval_scalar(&tape, root)?;
    let grads = tape.backward(root)?;
    let zeros = vec![0.0; point.numel()];
    let analytic = grads.wrt(x).unwrap_or(&zeros);

    let mut worst: f64 = 0.0;
    for i in 0..point.numel() {
        let probe = |delta: f64| -> Result<f64> {
            let mut p = point.clone();
            p.values_mut()[i] += delta;
            let mut t = Tape::new();
            let xv = t.constant(&p)?;
            let r = f(&mut t, xv)?;
            eval_scalar(&t, r)
        };
        let numeric = (probe(step)? - probe(-step)?) / (2.0 * step);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Outcome of a parameter-level gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    /// Scalars compared against finite differences.
    pub checked: usize,
    /// Scalars of parameters the objective never reads. Their analytic and
    /// numeric derivatives are both exactly zero, so they are not probed.
    pub unused: usize,
}

/// Anything that owns a [`ParamStore`]; lets the check perturb a model in
/// place instead of rebuilding it for every probe.
pub trait Parameterized: Clone + Send + Sync {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
}

impl Parameterized for ParamStore {
    fn store(&self) -> &ParamStore {
        self
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        self
    }
}

/// Checks the gradient of a scalar objective with respect to every parameter
/// scalar of `model` (or every `stride`-th one) against central differences.
/// `f` must read parameters only through [`Tape::param`]. Probes run in
/// parallel; the report does not depend on the thread count.
pub fn param_gradcheck<M, F>(model: &M, f: F, step: f64, stride: usize) -> Result<GradcheckReport>
where
    M: Parameterized,
    F: Fn(&M, &mut Tape) -> Result<Var> + Sync,
{
    let store = model.store();
    if !(step > 0.0) {
        return Err(Error::invalid("param_gradcheck", "step must be positive"));
    }
    let stride = stride.max(1);
    let mut tape = Tape::new();
    let root = f(model, &mut tape)?;
    eval_scalar(&tape, root)?;
    let g = tape.backward(root)?;
    let grads = g.to_param_grads(store);

    let mut probes = Vec::new();
    let mut unused = 0;
    let mut counter = 0usize;
    for id in store.ids() {
        let read = g.param(id).is_some();
        for i in 0..store.get(id).numel() {
            counter += 1;
            if (counter - 1) % stride != 0 {
                continue;
            }
            if read {
                probes.push((id, i));
            } else {
                unused += 1;
            }
        }
    }

    let errors = probes
        .par_iter()
        .map_init(
            || model.clone(),
            |probe, &(id, i)| -> Result<f64> {
                let orig = store.get(id).values()[i];
                let mut eval_at = |v: f64| -> Result<f64> {
                    probe.store_mut().get_mut(id).values_mut()[i] = v;
                    let mut t = Tape::new();
                    let r = f(probe, &mut t)?;
                    eval_scalar(&t, r)
                };
                let plus = eval_at(orig + step);
                let minus = eval_at(orig - step);
                probe.store_mut().get_mut(id).values_mut()[i] = orig;
                let numeric = (plus? - minus?) / (2.0 * step);
                Ok(relative_error(grads.get(id)[i], numeric))
            },
        )
        .collect::<Result<Vec<f64>>>()?;

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: probes.len(),
        unused,
    };
    for (&(id, i), &err) in probes.iter().zip(&errors) {
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_param = store.name(id).to_string();
            report.worst_index = i;
        }
    }
    Ok(report)
}
