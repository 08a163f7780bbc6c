//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Result of comparing analytic and numeric gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: Real,
    /// Input and flat element index of the worst element.
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: Real,
    pub numeric: Real,
    pub checked: usize,
    /// Elements whose `+-step` evaluations took a different branch at a
    /// non-smooth op than the unperturbed point; these are not compared.
    pub straddling: usize,
}

/// Relative error with a floor scaled to the largest gradient magnitude, so
/// components that are zero up to rounding do not dominate.
pub fn relative_error(analytic: Real, numeric: Real, scale: Real) -> Real {
    let floor = 1e-5 * scale.max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks every element of every input, except those whose perturbations
/// cross a kink (see [`GradcheckReport::straddling`]). `f` records a scalar
/// function of the inputs on a fresh tape; it must be deterministic.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], step: Real) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    gradcheck_selected(f, inputs, step, |_, _| true)
}

/// Like [`gradcheck`] but only perturbs elements for which
/// `select(input, index)` holds.
pub fn gradcheck_selected<F, S>(
    f: F,
    inputs: &[Tensor],
    step: Real,
    select: S,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    S: Fn(usize, usize) -> bool,
{
    let eval = |values: &[Tensor]| -> Result<(Real, Vec<u64>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape.value(out).item(), tape.branch_pattern()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.variable(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let base = tape.value(out).item();
    if !base.is_finite() {
        return Err(Error::Gradcheck(format!(
            "function value {base} is not finite"
        )));
    }
    let pattern = tape.branch_pattern();
    let (again, _) = eval(inputs)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::Gradcheck(format!(
            "function is not deterministic: {base} then {again}"
        )));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(x.shape()))
        })
        .collect();
    let scale = analytic
        .iter()
        .flat_map(|g| g.data().iter())
        .fold(0.0 as Real, |m, v| m.max(v.abs()));

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        straddling: 0,
    };
    let mut perturbed = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            if !select(i, j) {
                continue;
            }
            let orig = input.data()[j];
            perturbed[i].data_mut()[j] = orig + step;
            let (plus, plus_pattern) = eval(&perturbed)?;
            perturbed[i].data_mut()[j] = orig - step;
            let (minus, minus_pattern) = eval(&perturbed)?;
            perturbed[i].data_mut()[j] = orig;
            if plus_pattern != pattern || minus_pattern != pattern {
                report.straddling += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[i].data()[j];
            let err = relative_error(a, numeric, scale);
            report.checked += 1;
            if err > report.max_rel_error || !err.is_finite() {
                report.max_rel_error = err;
                report.worst_input = i;
                report.worst_index = j;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
