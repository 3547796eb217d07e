//! Central finite-difference gradient checking.
//!
//! The oracle for every analytic gradient in this crate: a graph builder is
//! replayed with each input entry nudged by ±h and the resulting secant
//! slope is compared against the tape's adjoint. Lives in the library (not
//! the test tree) because the `verify grad` command runs the same checks.

use crate::error::Result;
use crate::numerics::{Matrix, Tape, Var};

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct CheckResult {
    /// Worst relative error across all checked inputs.
    pub max_rel_err: f64,
    /// Relative error per checked input, in the order given.
    pub per_input: Vec<f64>,
}

/// Default step for central differences; `f64` gives ~1e-10 truncation +
/// roundoff error for well-scaled problems at this step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Checks the tape gradient of a scalar-valued graph against central finite
/// differences, perturbing every entry of every input.
///
/// `build` must construct the graph from the given leaves alone (same leaf
/// order as `inputs`) and return the scalar output variable.
pub fn check<F>(inputs: &[Matrix], h: f64, build: F) -> Result<CheckResult>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let all: Vec<usize> = (0..inputs.len()).collect();
    check_inputs(inputs, &all, h, build)
}

/// Like [`check`] but perturbs only the inputs named by `which` (useful when
/// a model's frozen weights are large and only trainable leaves matter).
pub fn check_inputs<F>(inputs: &[Matrix], which: &[usize], h: f64, build: F) -> Result<CheckResult>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Matrix> = which
        .iter()
        .map(|&i| {
            grads
                .get(vars[i])
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(inputs[i].rows(), inputs[i].cols()))
        })
        .collect();

    let eval = |perturbed: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|m| tape.leaf(m.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.scalar(loss))
    };

    let mut per_input = Vec::with_capacity(which.len());
    let mut work: Vec<Matrix> = inputs.to_vec();
    for (slot, &i) in which.iter().enumerate() {
        let n = inputs[i].rows() * inputs[i].cols();
        let mut numeric = Matrix::zeros(inputs[i].rows(), inputs[i].cols());
        for e in 0..n {
            let original = work[i].data()[e];
            work[i].data_mut()[e] = original + h;
            let f_plus = eval(&work)?;
            work[i].data_mut()[e] = original - h;
            let f_minus = eval(&work)?;
            work[i].data_mut()[e] = original;
            numeric.data_mut()[e] = (f_plus - f_minus) / (2.0 * h);
        }
        per_input.push(relative_error(&analytic[slot], &numeric));
    }

    let max_rel_err = per_input.iter().cloned().fold(0.0, f64::max);
    Ok(CheckResult {
        max_rel_err,
        per_input,
    })
}

/// `max|a - n| / max(max|n|, max|a|, 1e-8)`: absolute gap normalized by the
/// gradient's own scale, with a floor so all-zero gradients compare cleanly.
fn relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    let gap = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = numeric.max_abs().max(analytic.max_abs()).max(1e-8);
    gap / scale
}
