//! Finite-difference gradient verification.
//!
//! The reverse-mode gradients are checked coordinate by coordinate against
//! central differences (f(w+h) - f(w-h)) / 2h on a freshly rebuilt graph, so
//! the oracle never shares state with the pass under test.

use super::graph::{Bound, Graph, GraphError, NodeId};
use super::params::ParamSet;

/// Worst-case disagreement between reverse-mode and finite-difference
/// gradients over every checked coordinate.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (parameter name, flat coordinate) attaining the maximum.
    pub worst: Option<(String, usize)>,
    pub coordinates_checked: usize,
}

/// Relative disagreement with a small absolute floor so that a pair of
/// near-zero gradients (pure finite-difference noise) cannot dominate.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Checks d(loss)/d(param) for every coordinate of every parameter in
/// `params`. `build` must construct the loss from bound parameters alone
/// (capturing its non-parameter inputs as constants) and is invoked once per
/// probe, so it must be deterministic.
pub fn gradcheck<F>(
    params: &ParamSet,
    step: f64,
    mut build: F,
) -> Result<GradCheckReport, GraphError>
where
    F: FnMut(&mut Graph, &Bound) -> Result<NodeId, GraphError>,
{
    // Reverse-mode gradients once.
    let mut graph = Graph::new();
    let bound = graph.bind(params)?;
    let loss = build(&mut graph, &bound)?;
    graph.backward(loss)?;
    let grads = graph.param_grads();

    let mut eval = |probe: &ParamSet| -> Result<f64, GraphError> {
        let mut g = Graph::new();
        let b = g.bind(probe)?;
        let l = build(&mut g, &b)?;
        g.value(l).item()
    };

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, coordinates_checked: 0 };
    for (name, grad) in &grads {
        for i in 0..grad.len() {
            let mut plus = params.clone();
            let mut t = plus.get(name)?.clone();
            t.data_mut()[i] += step;
            plus.set(name, t)?;
            let f_plus = eval(&plus)?;

            let mut minus = params.clone();
            let mut t = minus.get(name)?.clone();
            t.data_mut()[i] -= step;
            minus.set(name, t)?;
            let f_minus = eval(&minus)?;

            let fd = (f_plus - f_minus) / (2.0 * step);
            let err = rel_err(grad[i], fd);
            report.coordinates_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
