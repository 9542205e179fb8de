//! Central-difference verification of reverse-mode gradients.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_abs_error: f64,
    /// Largest relative error among elements judged relatively.
    pub max_rel_error: f64,
    pub checked: usize,
    pub failures: usize,
    pub passed: bool,
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` receives one tracked leaf per entry of `inputs` and must return a
/// scalar. An element passes when its relative error is below `tol`; when
/// both gradients are smaller than `step` in magnitude the absolute error
/// must instead stay below the truncation bound `10 * step²` plus the
/// round-off bound `64 * ε * max(|f|, 1) / step` of a central difference.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(TensorError::Invalid(format!("step must be positive, got {step}")));
    }
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out)
            .item()
            .ok_or_else(|| TensorError::NonScalarLoss(g.shape(out).to_vec()))
    };

    let base = eval(inputs)?;
    let again = eval(inputs)?;
    if base.to_bits() != again.to_bits() {
        return Err(TensorError::NonDeterministic(format!(
            "two evaluations gave {base} and {again}"
        )));
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let abs_floor = 10.0 * step * step + 64.0 * f64::EPSILON * base.abs().max(1.0) / step;
    let mut report = GradCheckReport {
        max_abs_error: 0.0,
        max_rel_error: 0.0,
        checked: 0,
        failures: 0,
        passed: true,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (slot, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v)?;
        for i in 0..work[slot].len() {
            let orig = work[slot].data()[i];
            work[slot].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[slot].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[slot].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[i];
            let abs = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            let ok = if scale < step {
                abs < abs_floor
            } else {
                let rel = abs / scale;
                report.max_rel_error = report.max_rel_error.max(rel);
                rel < tol
            };
            report.max_abs_error = report.max_abs_error.max(abs);
            report.checked += 1;
            if !ok {
                report.failures += 1;
                report.passed = false;
            }
        }
    }
    Ok(report)
}
