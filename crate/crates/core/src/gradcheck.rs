//! Central finite-difference verification of tape gradients.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Worst disagreement found by [`check_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(1, |numeric|)` over all checked elements.
    pub max_error: f64,
    /// `(input, flat index)` of the worst element.
    pub worst: (usize, usize),
    pub elements: usize,
    /// Elements excluded as non-differentiable points; see [`check_gradients_subset`].
    pub kinks: usize,
}

impl GradCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_error <= tolerance
    }
}

/// Compares backward-pass gradients of a scalar loss against central
/// differences for every element of every input.
///
/// `build` records the loss on a fresh tape from one `Var` per input.
pub fn check_gradients<F>(inputs: &[Tensor], step: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_gradients_subset(inputs, step, |_, n| (0..n).collect(), build)
}

/// Like [`check_gradients`], but only perturbs the flat indices returned by
/// `select(input, numel)`.
///
/// An element whose central difference disagrees with the analytic value is
/// re-examined with one-sided differences. If those disagree with each other
/// (a relu or max-pool switch inside the stencil) and the analytic value
/// matches one of them, the element counts as a kink instead of an error.
pub fn check_gradients_subset<F, S>(
    inputs: &[Tensor],
    step: f64,
    select: S,
    build: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    S: Fn(usize, usize) -> Vec<usize>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();
    drop(tape);

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheck {
        max_error: 0.0,
        worst: (0, 0),
        elements: 0,
        kinks: 0,
    };
    for k in 0..inputs.len() {
        for i in select(k, inputs[k].numel()) {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[k].data()[i];
            let rel = |n: f64| (a - n).abs() / n.abs().max(1.0);
            let err = rel(numeric);
            report.elements += 1;
            if err > DEFAULT_TOLERANCE {
                let centre = eval(&work)?;
                let right = (plus - centre) / step;
                let left = (centre - minus) / step;
                let split = (right - left).abs() / right.abs().max(left.abs()).max(1.0);
                if split > DEFAULT_TOLERANCE && rel(right).min(rel(left)) <= DEFAULT_TOLERANCE {
                    report.kinks += 1;
                    continue;
                }
            }
            if err > report.max_error {
                report.max_error = err;
                report.worst = (k, i);
            }
        }
    }
    Ok(report)
}
