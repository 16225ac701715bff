//! Central finite-difference gradient checking.
//!
//! The oracle every trainable module in this crate is verified against:
//! analytic gradients from the tape must match (f(x+h) - f(x-h)) / 2h
//! coordinate by coordinate.

use crate::error::{Error, Result};
use crate::graph::{GradGraph, NodeId};
use crate::params::{Binding, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    fn from_pairs(pairs: impl Iterator<Item = (f64, f64)>) -> Self {
        let mut report = GradCheckReport {
            max_rel_err: 0.0,
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
            coords_checked: 0,
        };
        for (i, (analytic, numeric)) in pairs.enumerate() {
            let rel = (analytic - numeric).abs() / analytic.abs().max(1.0);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_index = i;
                report.worst_analytic = analytic;
                report.worst_numeric = numeric;
            }
            report.coords_checked += 1;
        }
        report
    }
}

fn validate_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::contract("grad_check", format!("eps {eps} not in (0, 1e-2]")));
    }
    Ok(())
}

/// Checks d f(x) / dx for a scalar-valued graph function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut GradGraph, NodeId) -> NodeId,
{
    validate_eps(eps)?;

    let mut graph = GradGraph::new();
    let leaf = graph.trainable(x.clone());
    let out = f(&mut graph, leaf);
    if graph.value(out).numel() != 1 {
        return Err(Error::contract("grad_check", "function must return a scalar"));
    }
    let analytic = graph.backward(out)?.get(leaf);

    let eval = |probe: &Tensor| -> f64 {
        let mut g = GradGraph::new();
        let leaf = g.constant(probe.clone());
        let out = f(&mut g, leaf);
        g.value(out).item()
    };

    let mut numeric = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe);
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * eps));
    }

    Ok(GradCheckReport::from_pairs(
        analytic.data().iter().copied().zip(numeric),
    ))
}

/// Checks the gradient of a scalar loss with respect to every parameter in
/// a store. `build_loss` must be a pure function of the bound parameters.
pub fn grad_check_store<F>(store: &ParamStore, build_loss: F, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut GradGraph, &Binding) -> NodeId,
{
    validate_eps(eps)?;

    let mut graph = GradGraph::new();
    let binding = Binding::bind(&mut graph, store);
    let out = build_loss(&mut graph, &binding);
    if graph.value(out).numel() != 1 {
        return Err(Error::contract("grad_check", "loss must be a scalar"));
    }
    let grads = graph.backward(out)?;
    let analytic: Vec<f64> = binding
        .gradients(&grads)
        .iter()
        .flat_map(|t| t.data().to_vec())
        .collect();

    let eval = |flat: &[f64]| -> f64 {
        let mut probe = store.clone();
        probe.set_from_flat(flat);
        let mut g = GradGraph::new();
        let binding = Binding::bind_frozen(&mut g, &probe);
        let out = build_loss(&mut g, &binding);
        g.value(out).item()
    };

    let mut flat = store.to_flat();
    let mut numeric = Vec::with_capacity(flat.len());
    for i in 0..flat.len() {
        let orig = flat[i];
        flat[i] = orig + eps;
        let plus = eval(&flat);
        flat[i] = orig - eps;
        let minus = eval(&flat);
        flat[i] = orig;
        numeric.push((plus - minus) / (2.0 * eps));
    }

    Ok(GradCheckReport::from_pairs(
        analytic.into_iter().zip(numeric),
    ))
}
