//! Central finite-difference gradient checking.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Step used for every central difference.
pub const FD_STEP: f64 = 1e-5;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)` over all coordinates.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coords: usize,
}

impl GradReport {
    pub fn passes(&self, rtol: f64) -> bool {
        self.max_rel_error <= rtol
    }
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Checks the gradient of a scalar function of one tensor.
///
/// `f` records its computation on the given tape starting from the input
/// variable and returns the scalar loss variable.
pub fn grad_check<F>(f: F, x: &Tensor) -> Result<GradReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x))
}

/// Checks the gradients of a scalar function of several tensors at once.
pub fn grad_check_many<F>(f: F, xs: &[Tensor]) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradReport { max_rel_error: 0.0, max_abs_error: 0.0, coords: 0 };
    let mut probe = xs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v).expect("leaf requires grad");
        for i in 0..xs[k].numel() {
            let orig = xs[k].data()[i];
            probe[k].data_mut()[i] = orig + FD_STEP;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = orig - FD_STEP;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.data()[i];
            report.max_rel_error = report.max_rel_error.max(rel(a, numeric));
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.coords += 1;
        }
    }
    Ok(report)
}
