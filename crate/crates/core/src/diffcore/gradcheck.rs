//! Central finite-difference verification of analytic gradients.

use super::graph::{Graph, Var};
use super::params::{Bound, ParamStore};
use crate::error::{Error, Result};

/// Outcome of a gradient check: the worst relative error and where it occurred.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Entries left out because a ±eps step moved some relu, absolute value
    /// or clamp across its kink, where central differences do not apply.
    pub skipped: usize,
}

/// Relative error with the `1e-8` floor on the denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares gradients from [`Graph::backward`] with central differences of
/// step `eps` for every scalar of every parameter in `params`. Entries whose
/// steps cross a kink (see [`Graph::kink_pattern`]) are counted in
/// `skipped` instead of compared.
///
/// `build` must construct the same scalar loss deterministically each time it
/// is called.
pub fn grad_check<F>(params: &ParamStore, eps: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::invalid(format!("grad_check eps {eps} outside (0, 1e-2]")));
    }
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph);
    let loss = build(&mut graph, &bound)?;
    let grads = graph.backward(loss)?;
    let analytic = bound.gradients(&graph, &grads);
    let pattern = graph.kink_pattern();

    let eval = |store: &ParamStore| -> Result<(f64, bool)> {
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let l = build(&mut g, &b)?;
        Ok((g.value(l).data()[0], g.kink_pattern() == pattern))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut probe = params.clone();
    for (k, id) in params.ids().enumerate() {
        for i in 0..params.get(id).numel() {
            let orig = params.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + eps;
            let (plus, same_plus) = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - eps;
            let (minus, same_minus) = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            if !(same_plus && same_minus) {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[k].data()[i];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report = GradCheckReport {
                    max_rel_error: err.max(report.max_rel_error),
                    worst_param: params.name(id).to_string(),
                    worst_index: i,
                    analytic: a,
                    numeric,
                    checked: report.checked,
                    skipped: report.skipped,
                };
            }
        }
    }
    Ok(report)
}
