//! Task costs for regulation and oscillation discovery and the total
//! training objective `task + λ·matching + γ·sparsity`.
//!
//! Each task cost also has a `_with_grad` form returning the cost's
//! derivative with respect to every grid state and input, which the gradient
//! engine feeds into the backward pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrate::Trajectory;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegulationWeights {
    /// Target airgap.
    pub q_star: f64,
    pub gamma1: f64,
    pub alpha3: f64,
}

impl Default for RegulationWeights {
    fn default() -> Self {
        Self {
            q_star: 0.2,
            gamma1: 1.0,
            alpha3: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OscillationWeights {
    /// Airgap to reach at half period.
    pub q_star: f64,
    /// Period; must equal the trajectory horizon.
    pub period: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub alpha4: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
}

impl Default for OscillationWeights {
    fn default() -> Self {
        Self {
            q_star: 0.2,
            period: 1.0,
            alpha1: 1.0,
            alpha2: 1.0,
            alpha3: 1.0,
            alpha4: 1.0,
            lambda1: 1.0,
            lambda2: 1.0,
            gamma1: 1.0,
            gamma2: 1.0,
            gamma3: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TotalLossWeights {
    /// Matching weight λ.
    pub lambda_mc: f64,
    /// Sparsity weight γ.
    pub gamma_sparse: f64,
}

impl Default for TotalLossWeights {
    fn default() -> Self {
        Self {
            lambda_mc: 10.0,
            gamma_sparse: 1e-3,
        }
    }
}

fn nonnegative(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")))
    }
}

impl RegulationWeights {
    pub fn validate(&self) -> Result<()> {
        if !self.q_star.is_finite() {
            return Err(Error::Config("regulation.q_star must be finite".into()));
        }
        nonnegative("regulation.gamma1", self.gamma1)?;
        nonnegative("regulation.alpha3", self.alpha3)
    }
}

impl OscillationWeights {
    pub fn validate(&self) -> Result<()> {
        if !self.q_star.is_finite() {
            return Err(Error::Config("oscillation.q_star must be finite".into()));
        }
        if !(self.period.is_finite() && self.period > 0.0) {
            return Err(Error::Config(format!(
                "oscillation period must be positive, got {}",
                self.period
            )));
        }
        for (name, v) in [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("alpha3", self.alpha3),
            ("alpha4", self.alpha4),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("gamma3", self.gamma3),
        ] {
            nonnegative(&format!("oscillation.{name}"), v)?;
        }
        Ok(())
    }
}

impl TotalLossWeights {
    pub fn validate(&self) -> Result<()> {
        nonnegative("weights.lambda_mc", self.lambda_mc)?;
        nonnegative("weights.gamma_sparse", self.gamma_sparse)
    }
}

/// Derivatives of a cost with respect to each grid state and input.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryCotangent {
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
}

impl TrajectoryCotangent {
    pub fn zeros_like(traj: &Trajectory) -> Self {
        Self {
            states: traj.states.iter().map(|x| vec![0.0; x.len()]).collect(),
            inputs: traj.inputs.iter().map(|u| vec![0.0; u.len()]).collect(),
        }
    }
}

/// Trapezoid weights `h·(½, 1, ..., 1, ½)` for the grid.
fn trapezoid_weights(traj: &Trajectory) -> Vec<f64> {
    let h = traj.step_size();
    let n = traj.len();
    (0..n)
        .map(|k| if k == 0 || k + 1 == n { 0.5 * h } else { h })
        .collect()
}

fn effort_with_grad(traj: &Trajectory, scale: f64, cot: &mut TrajectoryCotangent) -> f64 {
    let w = trapezoid_weights(traj);
    let mut total = 0.0;
    for ((u, wk), du) in traj.inputs.iter().zip(&w).zip(cot.inputs.iter_mut()) {
        for (ui, dui) in u.iter().zip(du.iter_mut()) {
            total += wk * ui * ui;
            *dui += scale * 2.0 * wk * ui;
        }
    }
    total
}

fn check_nonempty(traj: &Trajectory) -> Result<()> {
    if traj.len() < 2 {
        return Err(Error::InvalidArgument(
            "cost needs a trajectory with at least one step".into(),
        ));
    }
    Ok(())
}

/// Regulation cost breakdown: `J_reg + γ₁ J_eff`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct RegulationBreakdown {
    /// `∫ (q - q*)² dt`.
    pub regulation: f64,
    /// `α₃ ∫ u² dt`.
    pub effort: f64,
    pub total: f64,
}

pub fn regulation_cost_with_grad(
    traj: &Trajectory,
    w: &RegulationWeights,
) -> Result<(RegulationBreakdown, TrajectoryCotangent)> {
    check_nonempty(traj)?;
    let tw = trapezoid_weights(traj);
    let mut cot = TrajectoryCotangent::zeros_like(traj);
    let mut reg = 0.0;
    for ((x, wk), dx) in traj.states.iter().zip(&tw).zip(cot.states.iter_mut()) {
        let e = x[0] - w.q_star;
        reg += wk * e * e;
        dx[0] += 2.0 * wk * e;
    }
    let effort = w.alpha3 * effort_with_grad(traj, w.gamma1 * w.alpha3, &mut cot);
    let total = reg + w.gamma1 * effort;
    Ok((
        RegulationBreakdown {
            regulation: reg,
            effort,
            total,
        },
        cot,
    ))
}

pub fn regulation_cost(traj: &Trajectory, w: &RegulationWeights) -> Result<f64> {
    regulation_cost_with_grad(traj, w).map(|(b, _)| b.total)
}

/// Oscillation cost terms; `total = mid + γ₁ eigen + γ₂ effort + γ₃ period`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct OscillationBreakdown {
    pub mid: f64,
    pub eigen: f64,
    pub effort: f64,
    pub period: f64,
    pub total: f64,
}

/// Index in `0..=N/2` maximizing `|v_k - v_{N-k}|`, earliest on ties.
fn mirrored_argmax(values: &[f64]) -> (usize, f64) {
    let n = values.len() - 1;
    let mut best = (0, f64::NEG_INFINITY);
    for k in 0..=n / 2 {
        let d = (values[k] - values[n - k]).abs();
        if d > best.1 {
            best = (k, d);
        }
    }
    best
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn oscillation_cost_with_grad(
    traj: &Trajectory,
    w: &OscillationWeights,
) -> Result<(OscillationBreakdown, TrajectoryCotangent)> {
    check_nonempty(traj)?;
    let steps = traj.steps();
    if !steps.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "oscillation cost needs an even step count, got {steps}"
        )));
    }
    let horizon = traj.horizon();
    if (horizon - w.period).abs() > 1e-9 * w.period.max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "trajectory horizon {horizon} differs from the period {}",
            w.period
        )));
    }
    let mid_idx = steps / 2;
    let mut cot = TrajectoryCotangent::zeros_like(traj);
    let q = traj.component(0);
    let p = traj.component(1);

    let dq_mid = q[mid_idx] - w.q_star;
    let mid = 0.5 * w.alpha1 * dq_mid * dq_mid;
    cot.states[mid_idx][0] += w.alpha1 * dq_mid;

    let (kq, sym_q) = mirrored_argmax(&q);
    let (kp, sym_p) = mirrored_argmax(&p);
    let p_mid = p[mid_idx];
    let eigen = w.lambda1 * (sym_q + w.alpha2 * sym_p) + 0.5 * w.lambda2 * p_mid * p_mid;
    let ge = w.gamma1;
    let sq = sign(q[kq] - q[steps - kq]) * ge * w.lambda1;
    cot.states[kq][0] += sq;
    cot.states[steps - kq][0] -= sq;
    let sp = sign(p[kp] - p[steps - kp]) * ge * w.lambda1 * w.alpha2;
    cot.states[kp][1] += sp;
    cot.states[steps - kp][1] -= sp;
    cot.states[mid_idx][1] += ge * w.lambda2 * p_mid;

    let effort = w.alpha3 * effort_with_grad(traj, w.gamma2 * w.alpha3, &mut cot);

    let charge_gap = traj.states[0][2] - traj.states[steps][2];
    let period = w.alpha4 * charge_gap.abs();
    let sc = w.gamma3 * w.alpha4 * sign(charge_gap);
    cot.states[0][2] += sc;
    cot.states[steps][2] -= sc;

    let total = mid + w.gamma1 * eigen + w.gamma2 * effort + w.gamma3 * period;
    Ok((
        OscillationBreakdown {
            mid,
            eigen,
            effort,
            period,
            total,
        },
        cot,
    ))
}

pub fn oscillation_cost(traj: &Trajectory, w: &OscillationWeights) -> Result<OscillationBreakdown> {
    oscillation_cost_with_grad(traj, w).map(|(b, _)| b)
}

/// `task + λ·mc + γ·sparse`.
pub fn total_loss(task: f64, matching: f64, sparsity: f64, w: &TotalLossWeights) -> Result<f64> {
    if !(task.is_finite() && matching.is_finite() && sparsity.is_finite()) {
        return Err(Error::NonFinite(format!(
            "loss terms (task {task}, matching {matching}, sparsity {sparsity})"
        )));
    }
    Ok(task + w.lambda_mc * matching + w.gamma_sparse * sparsity)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj_from(f: impl Fn(f64) -> [f64; 3], u: impl Fn(f64) -> f64, horizon: f64, steps: usize) -> Trajectory {
        let h = horizon / steps as f64;
        let times: Vec<f64> = (0..=steps).map(|k| k as f64 * h).collect();
        let states = times.iter().map(|&t| f(t).to_vec()).collect();
        let inputs = times.iter().map(|&t| vec![u(t)]).collect();
        Trajectory::new(times, states, inputs).unwrap()
    }

    #[test]
    fn regulation_examples() {
        let w = RegulationWeights::default();
        let at_target = traj_from(|_| [0.2, 0.0, 1.0], |_| 0.0, 2.0, 10);
        assert_eq!(regulation_cost(&at_target, &w).unwrap(), 0.0);
        let offset = traj_from(|_| [1.2, 0.0, 1.0], |_| 0.0, 2.0, 10);
        assert!((regulation_cost(&offset, &w).unwrap() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn oscillation_ideal_constant() {
        let w = OscillationWeights::default();
        let traj = traj_from(|_| [0.2, 0.0, 0.5], |_| 0.0, 1.0, 20);
        let b = oscillation_cost(&traj, &w).unwrap();
        assert_eq!(b.total, 0.0);
    }

    #[test]
    fn oscillation_symmetric_profile() {
        let w = OscillationWeights::default();
        let pi = std::f64::consts::PI;
        // q(t) = sin(πt/T), mirrored explicitly so q_k = q_{N-k} bit for bit.
        let mut traj = traj_from(|t| [(pi * t).sin(), 0.5 * (pi * t).sin(), 0.3], |_| 0.0, 1.0, 20);
        for k in 0..10 {
            traj.states[20 - k] = traj.states[k].clone();
        }
        let b = oscillation_cost(&traj, &w).unwrap();
        let p_mid = traj.states[10][1];
        assert_eq!(b.eigen, 0.5 * p_mid * p_mid);
    }

    #[test]
    fn oscillation_errors() {
        let w = OscillationWeights::default();
        let wrong_horizon = traj_from(|_| [0.0; 3], |_| 0.0, 2.0, 20);
        assert!(oscillation_cost(&wrong_horizon, &w).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let zero = TotalLossWeights {
            lambda_mc: 0.0,
            gamma_sparse: 0.0,
        };
        assert_eq!(total_loss(1.0, 1.0, 1.0, &zero).unwrap(), 1.0);
        let w = TotalLossWeights {
            lambda_mc: 2.0,
            gamma_sparse: 0.1,
        };
        assert!((total_loss(0.0, 0.5, 2.0, &w).unwrap() - 1.2).abs() < 1e-15);
        assert!(total_loss(f64::NAN, 0.0, 0.0, &w).is_err());
    }

    #[test]
    fn mirrored_argmax_prefers_earliest() {
        assert_eq!(mirrored_argmax(&[1.0, 0.0, 0.0, 0.0, 0.0]).0, 0);
        assert_eq!(mirrored_argmax(&[0.0, 1.0, 5.0, 0.0, 0.0]), (1, 1.0));
        assert_eq!(mirrored_argmax(&[2.0, 1.0, 5.0, 0.0, 0.0]), (0, 2.0));
    }
}
