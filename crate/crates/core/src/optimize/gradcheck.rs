//! Central finite-difference verification of [`Problem::evaluate`] gradients.

use super::{GateMode, ParameterVector, Problem};
use crate::error::Result;

/// Relative errors are measured against at least `GRADCHECK_FLOOR (1 + |L|)`.
/// Cancellation in the polynomial sums leaves about `1e-14 (1 + |L|)` of
/// noise in a loss evaluation, so a central difference with step `1e-5`
/// carries about `5e-10 (1 + |L|)` of absolute noise; the floor keeps that
/// below the `1e-4` relative tolerance with margin.
pub const GRADCHECK_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates whose perturbations crossed a non-smooth point.
    pub skipped: usize,
    pub max_relative_error: f64,
    pub worst_index: Option<usize>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Step `1e-5 (1 + |θ_i|)` for coordinate `i`.
pub fn fd_step(theta: f64) -> f64 {
    1e-5 * (1.0 + theta.abs())
}

/// Compares the analytic gradient with central differences on `coords`
/// (all coordinates when `None`). A coordinate is skipped when any
/// perturbed evaluation lands in a different [`Regime`](super::Regime) from
/// the base point or diverges.
/// The error is relative to `max(|analytic|, |numeric|, GRADCHECK_FLOOR (1 + |L|))`.
pub fn check_gradient(
    problem: &Problem<'_>,
    params: &ParameterVector,
    mode: GateMode<'_>,
    coords: Option<&[usize]>,
) -> Result<GradCheckReport> {
    let base = problem.evaluate(params, mode, true)?;
    let grad = base.gradient.clone().expect("gradient requested");
    let all: Vec<usize> = (0..params.len()).collect();
    let coords = coords.unwrap_or(&all);
    let mut report = GradCheckReport::default();
    if base.breakdown.diverged_at.is_some() {
        report.skipped = coords.len();
        return Ok(report);
    }
    for &i in coords {
        let h = fd_step(params.0[i]);
        let Some(numeric) = quotient(problem, params, mode, &base.regime, i, h)? else {
            report.skipped += 1;
            continue;
        };
        let analytic = grad.0[i];
        let floor = GRADCHECK_FLOOR * (1.0 + base.breakdown.total.abs());
        let scale = analytic.abs().max(numeric.abs()).max(floor);
        let err = (analytic - numeric).abs() / scale;
        report.checked += 1;
        if report.worst_index.is_none() || err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst_index = Some(i);
            report.worst_analytic = analytic;
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}

/// Central difference along coordinate `i`, or `None` when a perturbed
/// point leaves the base regime or diverges.
fn quotient(
    problem: &Problem<'_>,
    params: &ParameterVector,
    mode: GateMode<'_>,
    regime: &super::Regime,
    i: usize,
    h: f64,
) -> Result<Option<f64>> {
    let mut plus = params.clone();
    plus.0[i] += h;
    let mut minus = params.clone();
    minus.0[i] -= h;
    let ep = problem.evaluate(&plus, mode, false)?;
    let em = problem.evaluate(&minus, mode, false)?;
    let smooth = &ep.regime == regime
        && &em.regime == regime
        && ep.breakdown.diverged_at.is_none()
        && em.breakdown.diverged_at.is_none();
    Ok(smooth.then(|| (ep.breakdown.total - em.breakdown.total) / (2.0 * h)))
}
