//! Central finite-difference gradient checks.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::graph::{BackwardFault, Graph, Var};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Relative error used throughout: `|a - n| / max(1, |a|, |n|)`.
#[inline]
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&eps) {
        bail!(Contract, "finite-difference step {} outside [1e-7, 1e-3]", eps);
    }
    Ok(())
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        bail!(Contract, "checked function must return a scalar, got {:?}", t.shape());
    }
    Ok(t.item())
}

/// Max relative error between the tape gradient of `f` at `x` and central
/// differences with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_with(f, x, eps, usize::MAX, None)
}

/// Up to `max` spread-out indices below `len`. Successive probes advance one
/// extra element beyond the stride so they do not all land on the same
/// kernel tap when the stride is a multiple of the kernel size.
pub fn probe_indices(len: usize, max: usize) -> impl Iterator<Item = usize> {
    let stride = len.div_ceil(max.max(1)).max(1);
    (0..len.min(max.max(1)))
        .map(move |j| j * stride + j % stride)
        .filter(move |&i| i < len)
}

fn analytic_graph(fault: Option<BackwardFault>) -> Graph {
    match fault {
        Some(f) => Graph::with_fault(f),
        None => Graph::new(),
    }
}

/// [`grad_check`] probing at most `max_probes` evenly strided elements, with
/// an optional fault hook on the analytic pass.
pub fn grad_check_with<F>(f: F, x: &Tensor, eps: f64, max_probes: usize, fault: Option<BackwardFault>) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    check_eps(eps)?;
    let mut g = analytic_graph(fault);
    let xv = g.param(x.clone());
    let loss = f(&mut g, xv)?;
    scalar_of(&g, loss)?;
    let grads = g.backward(loss)?;
    let zero = Tensor::zeros(x.shape());
    let analytic = grads.get(xv).unwrap_or(&zero);

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let out = f(&mut g, v)?;
        scalar_of(&g, out)
    };
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in probe_indices(x.len(), max_probes) {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(probe.clone())?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        worst = worst.max(rel_err(analytic.data()[i], (plus - minus) / (2.0 * eps)));
    }
    Ok(worst)
}

/// Outcome for one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Check every tensor of a parameter set.
///
/// `forward` receives the bound vars and must return a scalar. At most
/// `max_per_tensor` evenly strided elements of each tensor are probed.
pub fn check_params<P, F>(params: &P, forward: F, eps: f64, max_per_tensor: usize) -> Result<Vec<ParamReport>>
where
    P: ParamSet + Clone,
    F: Fn(&mut Graph, &P::Vars) -> Result<Var>,
{
    check_params_with(params, forward, eps, max_per_tensor, None)
}

/// [`check_params`] with an optional fault hook on the analytic pass.
pub fn check_params_with<P, F>(
    params: &P,
    forward: F,
    eps: f64,
    max_per_tensor: usize,
    fault: Option<BackwardFault>,
) -> Result<Vec<ParamReport>>
where
    P: ParamSet + Clone,
    F: Fn(&mut Graph, &P::Vars) -> Result<Var>,
{
    check_eps(eps)?;
    let mut g = analytic_graph(fault);
    let vars = params.bind(&mut g, true);
    let loss = forward(&mut g, &vars)?;
    scalar_of(&g, loss)?;
    let grads = g.backward(loss)?;
    let var_list = P::vars(&vars);

    let eval = |p: &P| -> Result<f64> {
        let mut g = Graph::new();
        let v = p.bind(&mut g, false);
        let out = forward(&mut g, &v)?;
        scalar_of(&g, out)
    };

    let mut reports = Vec::new();
    let mut probe = params.clone();
    for (ti, name) in P::names().iter().enumerate() {
        let len = params.tensors()[ti].len();
        let zero = Tensor::zeros(params.tensors()[ti].shape());
        let analytic = grads.get(var_list[ti]).unwrap_or(&zero).clone();
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for i in probe_indices(len, max_per_tensor) {
            let orig = params.tensors()[ti].data()[i];
            probe.tensors_mut()[ti].data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe.tensors_mut()[ti].data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe.tensors_mut()[ti].data_mut()[i] = orig;
            worst = worst.max(rel_err(analytic.data()[i], (plus - minus) / (2.0 * eps)));
            checked += 1;
        }
        reports.push(ParamReport {
            name: name.clone(),
            max_rel_err: worst,
            checked,
        });
    }
    Ok(reports)
}
