//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of every backward rule it is checking.

use crate::autodiff::{Graph, Var};
use crate::error::{FedHelpError, Result};
use crate::tensor::Tensor;

/// Step used by the acceptance checks.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Floor on the denominator of the relative error, so entries whose true
/// gradient is exactly zero are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Builds the scalar function on a fresh graph with every input marked
/// differentiable, and compares its analytic gradient to central differences.
pub fn check<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_frozen(inputs, step, &f, |g, live, _| f(g, live))
}

/// Like [`check`], for losses with stop-gradient paths. `numeric` receives
/// the perturbed inputs as `live` and the unperturbed ones as `frozen`;
/// it should read every detached argument from `frozen`, so that the finite
/// differences see the same function the analytic gradient differentiates.
pub fn check_frozen<A, N>(inputs: &[Tensor], step: f64, analytic: A, numeric: N) -> Result<GradCheckReport>
where
    A: Fn(&mut Graph, &[Var]) -> Result<Var>,
    N: Fn(&mut Graph, &[Var], &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let live: Vec<Var> = tensors.iter().map(|t| g.param(t)).collect();
        let frozen = inputs
            .iter()
            .map(|t| g.constant(t.shape(), t.data().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let out = numeric(&mut g, &live, &frozen)?;
        Ok(g.scalar_value(out))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let out = analytic(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(FedHelpError::NonScalarLoss(g.shape(out).to_vec()));
    }
    g.backward(out)?;

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let analytic = g
            .grad(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[ti].numel()]);
        for i in 0..inputs[ti].numel() {
            let orig = inputs[ti].data()[i];
            work[ti].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[ti].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[ti].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let abs = (analytic[i] - numeric).abs();
            let rel = abs / analytic[i].abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_relative_error = report.max_relative_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}
