//! Central finite-difference gradient checking.
//!
//! Numerical derivatives are computed by re-running the forward function on
//! perturbed copies of the inputs; nothing here touches the reverse sweep.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Binding, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    fn record(&mut self, name: &str, idx: usize, analytic: f64, numeric: f64, floor: f64) {
        self.checked += 1;
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        if rel > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(rel);
            self.worst = Some((name.to_string(), idx, analytic, numeric));
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Denominator floor so entries with vanishing gradient compare in
    /// absolute terms.
    pub floor: f64,
    /// Check at most this many coordinates per tensor (all when `None`).
    pub max_per_tensor: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
            max_per_tensor: None,
        }
    }
}

fn pick<R: Rng + ?Sized>(n: usize, opts: &GradCheckOptions, rng: &mut R) -> Vec<usize> {
    match opts.max_per_tensor {
        Some(k) if k < n => {
            let mut v = sample(rng, n, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..n).collect(),
    }
}

/// Check `∂f/∂inputs` for a scalar-valued `f` built on a fresh graph.
pub fn check_inputs<F, R>(inputs: &[Tensor<f64>], f: F, opts: GradCheckOptions, rng: &mut R) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let l = f(&mut g, &vars)?;
        Ok(g.scalar(l))
    };

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for idx in pick(t.len(), &opts, rng) {
            let orig = t.data()[idx];
            work[ti].data_mut()[idx] = orig + opts.step;
            let up = eval(&work)?;
            work[ti].data_mut()[idx] = orig - opts.step;
            let down = eval(&work)?;
            work[ti].data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            report.record(&format!("input{ti}"), idx, analytic[ti][idx], numeric, opts.floor);
        }
    }
    Ok(report)
}

/// Check the gradient of a scalar `f` with respect to every trainable entry
/// of `ps`.
pub fn check_params<F, R>(ps: &mut ParamSet<f64>, f: F, opts: GradCheckOptions, rng: &mut R) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &Binding, &ParamSet<f64>) -> Result<Var>,
    R: Rng + ?Sized,
{
    ps.zero_grad();
    let mut g = Graph::new();
    let b = ps.bind(&mut g);
    let loss = f(&mut g, &b, ps)?;
    g.backward(loss)?;
    ps.accumulate(&g)?;
    let ids: Vec<_> = ps.ids().filter(|&id| ps.is_trainable(id)).collect();
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| ps.grad(id).to_vec()).collect();
    ps.zero_grad();

    let eval = |ps: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let b = ps.bind(&mut g);
        let l = f(&mut g, &b, ps)?;
        Ok(g.scalar(l))
    };

    let mut report = GradCheckReport::default();
    for (k, &id) in ids.iter().enumerate() {
        let name = ps.name(id).to_string();
        for idx in pick(ps.get(id).len(), &opts, rng) {
            let orig = ps.get(id).data()[idx];
            ps.get_mut(id).data_mut()[idx] = orig + opts.step;
            let up = eval(ps)?;
            ps.get_mut(id).data_mut()[idx] = orig - opts.step;
            let down = eval(ps)?;
            ps.get_mut(id).data_mut()[idx] = orig;
            report.record(&name, idx, analytic[k][idx], (up - down) / (2.0 * opts.step), opts.floor);
        }
    }
    Ok(report)
}
