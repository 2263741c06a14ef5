//! Central finite-difference verification of tape gradients.

use super::{Graph, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Coordinates whose gradient magnitude is below this are compared
    /// absolutely (the relative-error denominator never drops below it).
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub coordinates: usize,
    pub passed: bool,
}

/// Checks the gradient of a scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, v| f(g, v[0]), std::slice::from_ref(x), opts)
}

/// Checks the gradient of a scalar function with respect to every input.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_with(&f, inputs, opts, |_, _, g| g)
}

/// As [`grad_check_many`], but lets the caller perturb the analytic gradient
/// before comparison (used to confirm the checker is sensitive).
#[doc(hidden)]
pub fn check_with<F, C>(f: &F, inputs: &[Tensor], opts: GradCheckOptions, corrupt: C) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    C: Fn(usize, usize, f64) -> f64,
{
    let analytic = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = f(&mut g, &vars)?;
        g.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect::<Vec<_>>()
    };

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let loss = f(&mut g, &vars)?;
        g.value(loss).item()
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
        passed: true,
    };
    for t in 0..inputs.len() {
        for i in 0..inputs[t].len() {
            let orig = inputs[t].data()[i];
            work[t].data_mut()[i] = orig + opts.h;
            let fp = eval(&work)?;
            work[t].data_mut()[i] = orig - opts.h;
            let fm = eval(&work)?;
            work[t].data_mut()[i] = orig;

            let numeric = (fp - fm) / (2.0 * opts.h);
            let a = corrupt(t, i, analytic[t].data()[i]);
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let err = (a - numeric).abs() / denom;
            report.coordinates += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = (t, i);
            }
        }
    }
    report.passed = report.max_rel_error < opts.tol;
    Ok(report)
}
