use rand::seq::index::sample;

use super::{seeded_rng, Tape, Tensor, Var};
use crate::error::Result;

/// Coordinates sampled per tensor (all of them when the tensor is smaller).
pub const GRAD_CHECK_SAMPLES: usize = 32;

const SAMPLE_SEED: u64 = 0x6772_6164;

/// Smallest denominator of the relative error reported by [`grad_check`].
pub const MIN_DENOMINATOR: f64 = 1e-8;

/// Worst-case agreement between tape and finite-difference gradients over
/// the sampled coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(MIN_DENOMINATOR, |analytic| + |numeric|)`.
    pub max_rel_error: f64,
    /// The same ratio with the denominator floored at the caller's `floor`:
    /// coordinates whose gradients are too small for a difference quotient to
    /// resolve are held to an absolute error of `floor * tolerance` instead.
    pub max_rel_error_floored: f64,
    pub max_abs_error: f64,
    pub coordinates: usize,
}

/// Compares tape gradients against central finite differences.
///
/// `f` builds a scalar loss on a fresh tape from the bound `params` (one
/// [`Var`] per tensor, in order). Returns the maximum over sampled coordinates
/// of `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F>(f: F, params: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    Ok(grad_check_report(f, params, epsilon, MIN_DENOMINATOR)?.max_rel_error)
}

/// [`grad_check`] with the full report and a caller-chosen denominator floor.
pub fn grad_check_report<F>(mut f: F, params: &[Tensor], epsilon: f64, floor: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let bound: Vec<Tensor> = params.iter().map(|p| p.clone().with_requires_grad(true)).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = bound.iter().map(|p| tape.leaf(p)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&bound)
        .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
        .collect();
    drop(tape);

    let mut eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|p| tape.leaf(p)).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss)[0])
    };

    let mut rng = seeded_rng(SAMPLE_SEED);
    let mut work: Vec<Tensor> = params.iter().map(|p| p.clone().with_requires_grad(false)).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_rel_error_floored: 0.0,
        max_abs_error: 0.0,
        coordinates: 0,
    };
    for (ti, grads) in analytic.iter().enumerate() {
        let numel = params[ti].numel();
        let coords: Vec<usize> = if numel <= GRAD_CHECK_SAMPLES {
            (0..numel).collect()
        } else {
            let mut c = sample(&mut rng, numel, GRAD_CHECK_SAMPLES).into_vec();
            c.sort_unstable();
            c
        };
        for c in coords {
            let orig = work[ti].data()[c];
            work[ti].data_mut()[c] = orig + epsilon;
            let plus = eval(&work)?;
            work[ti].data_mut()[c] = orig - epsilon;
            let minus = eval(&work)?;
            work[ti].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = grads[c];
            let diff = (a - numeric).abs();
            let scale = a.abs() + numeric.abs();
            report.max_rel_error = report.max_rel_error.max(diff / scale.max(MIN_DENOMINATOR));
            report.max_rel_error_floored = report.max_rel_error_floored.max(diff / scale.max(floor));
            report.max_abs_error = report.max_abs_error.max(diff);
            report.coordinates += 1;
        }
    }
    Ok(report)
}
