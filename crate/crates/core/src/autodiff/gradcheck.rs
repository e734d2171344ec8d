//! Central finite-difference checks of reverse-mode gradients.

use serde::Serialize;

use crate::autodiff::graph::{Bindings, Graph, NodeId};
use crate::autodiff::params::ParamGrads;
use crate::error::{Error, Result};

/// Below this magnitude the comparison switches from relative to absolute error.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_error: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_error: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Error between an analytic and a numeric derivative.
pub fn gradient_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    if scale < ABS_FLOOR {
        diff
    } else {
        diff / scale
    }
}

/// Runs backward from `root` and compares every named parameter against
/// central differences with step `h`.
pub fn check_gradients(
    graph: &Graph,
    bindings: &Bindings,
    root: NodeId,
    params: &[&str],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let eval = graph.evaluate(bindings)?;
    let grads = eval.backward(graph, root)?;
    let mut analytic = ParamGrads::new();
    for &name in params {
        let g = grads
            .input(name)
            .ok_or_else(|| Error::UnboundInput(name.to_string()))?;
        analytic.insert(name.to_string(), g.clone());
    }
    compare_gradients(graph, bindings, root, &analytic, h, tol)
}

/// Compares supplied gradients against central differences.
pub fn compare_gradients(
    graph: &Graph,
    bindings: &Bindings,
    root: NodeId,
    analytic: &ParamGrads,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let mut work = bindings.clone();
    let mut params = Vec::with_capacity(analytic.len());
    for (name, grad) in analytic {
        let base = bindings
            .get(name)
            .ok_or_else(|| Error::UnboundInput(name.clone()))?
            .clone();
        let mut worst = (0.0f64, 0usize);
        for i in 0..base.len() {
            let orig = base.data()[i];
            let mut eval_at = |x: f64| -> Result<f64> {
                work.get_mut(name).expect("bound").data_mut()[i] = x;
                let v = graph.evaluate(&work)?.value(root).clone();
                v.item().ok_or_else(|| Error::NonScalarRoot(v.shape().to_vec()))
            };
            let plus = eval_at(orig + h)?;
            let minus = eval_at(orig - h)?;
            eval_at(orig)?;
            let numeric = (plus - minus) / (2.0 * h);
            let err = gradient_error(grad.data()[i], numeric);
            if err > worst.0 || err.is_nan() {
                worst = (err, i);
            }
        }
        params.push(ParamCheck {
            name: name.clone(),
            max_error: worst.0,
            worst_index: worst.1,
        });
    }
    let max_error = params.iter().map(|p| p.max_error).fold(0.0, f64::max);
    let passed = params.iter().all(|p| p.max_error < tol);
    Ok(GradCheckReport {
        params,
        max_error,
        tol,
        passed,
    })
}
