//! Central finite-difference reference for reverse-mode gradients.
//!
//! The numerical side only evaluates forward values, so it stays independent
//! of every backward rule it is used to check.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Relative error with a floor on the denominator so that gradients that are
/// zero analytically are not judged against finite-difference round-off.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (input or parameter index, element, analytic, numeric)
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl Report {
    fn record(&mut self, which: usize, elem: usize, a: f64, n: f64) {
        self.checked += 1;
        let e = relative_error(a, n);
        if e > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(e);
            self.worst = Some((which, elem, a, n));
        }
    }
}

fn eval(inputs: &[Tensor], f: &impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Compares gradients of the scalar `f(inputs)` against central differences with step `h`.
pub fn check_inputs(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>, h: f64) -> Result<Report> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let mut report = Report::default();
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for e in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[e];
            probe[i].data_mut()[e] = x0 + h;
            let fp = eval(&probe, &f)?;
            probe[i].data_mut()[e] = x0 - h;
            let fm = eval(&probe, &f)?;
            probe[i].data_mut()[e] = x0;
            report.record(i, e, analytic[e], (fp - fm) / (2.0 * h));
        }
    }
    Ok(report)
}

/// Same check for selected `(parameter, element)` coordinates of a store.
pub fn check_params(
    store: &mut ParamStore,
    coords: &[(ParamId, usize)],
    f: impl Fn(&mut Graph, &ParamStore) -> Result<Var>,
    h: f64,
) -> Result<Report> {
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    g.backward(out)?;
    let grads: Vec<(ParamId, Vec<f64>)> = g.param_grads(store).map(|(id, gr)| (id, gr.to_vec())).collect();
    let mut report = Report::default();
    for &(id, e) in coords {
        let analytic = grads.iter().find(|(p, _)| *p == id).map_or(0.0, |(_, gr)| gr[e]);
        let x0 = store.get(id).data()[e];
        let eval_at = |x: f64, store: &mut ParamStore| -> Result<f64> {
            store.get_mut(id).data_mut()[e] = x;
            let mut g = Graph::inference();
            let out = f(&mut g, store)?;
            Ok(g.value(out).item())
        };
        let fp = eval_at(x0 + h, store)?;
        let fm = eval_at(x0 - h, store)?;
        store.get_mut(id).data_mut()[e] = x0;
        report.record(id.index(), e, analytic, (fp - fm) / (2.0 * h));
    }
    Ok(report)
}
