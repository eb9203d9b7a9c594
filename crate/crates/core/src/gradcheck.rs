//! Central finite-difference verification of analytic gradients.
//!
//! Relative error per entry is `|analytic - numeric| / max(|analytic|,
//! |numeric|, REL_FLOOR)`. The floor keeps entries whose true gradient is
//! essentially zero from dividing roundoff by roundoff.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;

pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_error < self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

fn eval_loss<F>(store: &ParamStore, forward: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<NodeId>,
{
    let mut g = Graph::new(store);
    let loss = forward(&mut g)?;
    let v = g.value(loss);
    if v.len() != 1 {
        return Err(Error::Contract(format!(
            "grad check needs a scalar loss, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

/// Compares backward gradients against central differences for every entry
/// of every parameter in `store`.
pub fn grad_check<F>(store: &ParamStore, forward: F, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<NodeId>,
{
    if step.is_nan() || step <= 0.0 || step.is_infinite() {
        return Err(Error::Contract(format!(
            "finite-difference step must be > 0, got {step}"
        )));
    }
    if tolerance.is_nan() || tolerance < 0.0 {
        return Err(Error::Contract(format!("tolerance must be >= 0, got {tolerance}")));
    }

    let first = eval_loss(store, &forward)?;
    let second = eval_loss(store, &forward)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism(format!(
            "two evaluations gave {first:e} and {second:e}"
        )));
    }

    let grads = {
        let mut g = Graph::new(store);
        let loss = forward(&mut g)?;
        g.backward(loss)?
    };

    let mut work = store.clone();
    let mut tensors = Vec::with_capacity(store.len());
    for id in store.ids() {
        let analytic = grads.dense(id, store);
        let mut check = TensorCheck {
            name: store.name(id).to_string(),
            entries: analytic.len(),
            max_rel_error: 0.0,
            worst_entry: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for e in 0..analytic.len() {
            let orig = work.get(id).data()[e];
            work.get_mut(id).data_mut()[e] = orig + step;
            let plus = eval_loss(&work, &forward)?;
            work.get_mut(id).data_mut()[e] = orig - step;
            let minus = eval_loss(&work, &forward)?;
            work.get_mut(id).data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[e];
            let err = relative_error(a, numeric);
            if err > check.max_rel_error || e == 0 {
                check.max_rel_error = err;
                check.worst_entry = e;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        tensors.push(check);
    }
    Ok(GradCheckReport {
        step,
        tolerance,
        tensors,
    })
}
