//! Fixed-step RK4 integration, state transition matrices and monodromy.

use std::io::Write;

use crate::controller::{ClosedLoop, DesiredSystem, Gates};
use crate::error::{Error, Result};
use crate::numerics::{eigenvalues, sort_by_modulus_desc, ComplexScalar, Mat};
use crate::phcore::PlantSystem;

/// Default grid density.
pub const STEPS_PER_UNIT_TIME: f64 = 200.0;

/// States whose largest component exceeds this are treated as divergent.
pub const DIVERGENCE_BOUND: f64 = 1e8;

/// Even step count of roughly [`STEPS_PER_UNIT_TIME`] per unit time.
pub fn default_steps(horizon: f64) -> usize {
    let raw = (horizon * STEPS_PER_UNIT_TIME).round().max(2.0) as usize;
    raw + raw % 2
}

/// A uniform-grid time series of states and the inputs applied along it.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
}

impl Trajectory {
    /// Checks equal lengths, an even number of steps and a uniform grid.
    pub fn new(times: Vec<f64>, states: Vec<Vec<f64>>, inputs: Vec<Vec<f64>>) -> Result<Self> {
        if times.len() != states.len() || times.len() != inputs.len() {
            return Err(Error::DimensionMismatch(format!(
                "trajectory has {} times, {} states, {} inputs",
                times.len(),
                states.len(),
                inputs.len()
            )));
        }
        let traj = Self {
            times,
            states,
            inputs,
        };
        if traj.len() >= 2 {
            if !traj.steps().is_multiple_of(2) {
                return Err(Error::InvalidArgument(format!(
                    "trajectory needs an even number of steps, got {}",
                    traj.steps()
                )));
            }
            let h = traj.step_size();
            let tol = 1e-9 * (1.0 + traj.times[0].abs() + traj.horizon().abs());
            for (k, pair) in traj.times.windows(2).enumerate() {
                if ((pair[1] - pair[0]) - h).abs() > tol {
                    return Err(Error::InvalidArgument(format!(
                        "non-uniform time grid at step {k}"
                    )));
                }
            }
        }
        Ok(traj)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.len().saturating_sub(1)
    }

    pub fn horizon(&self) -> f64 {
        match (self.times.first(), self.times.last()) {
            (Some(a), Some(b)) => b - a,
            _ => 0.0,
        }
    }

    pub fn step_size(&self) -> f64 {
        if self.steps() == 0 {
            0.0
        } else {
            self.horizon() / self.steps() as f64
        }
    }

    pub fn final_state(&self) -> Option<&[f64]> {
        self.states.last().map(Vec::as_slice)
    }

    /// Component `i` of every state.
    pub fn component(&self, i: usize) -> Vec<f64> {
        self.states.iter().map(|x| x[i]).collect()
    }

    /// CSV with header `t,q,p,Q,u` for the microactuator, or `t,x0..,u0..`
    /// otherwise. Values use Rust's shortest round-trip formatting.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.states.first().map_or(0, Vec::len);
        let m = self.inputs.first().map_or(0, Vec::len);
        if n == 3 && m == 1 {
            writeln!(w, "t,q,p,Q,u")?;
        } else {
            let mut cols = vec!["t".to_string()];
            cols.extend((0..n).map(|i| format!("x{i}")));
            cols.extend((0..m).map(|i| format!("u{i}")));
            writeln!(w, "{}", cols.join(","))?;
        }
        for ((t, x), u) in self.times.iter().zip(&self.states).zip(&self.inputs) {
            let mut row = vec![t.to_string()];
            row.extend(x.iter().map(f64::to_string));
            row.extend(u.iter().map(f64::to_string));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Result of a variational integration.
#[derive(Clone, Debug)]
pub struct StmResult {
    /// `Φ(t_f, t₀)`.
    pub phi: Mat,
    pub trajectory: Trajectory,
}

fn check_grid(horizon: f64, steps: usize) -> Result<()> {
    if steps < 2 || !steps.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "step count must be even and at least 2, got {steps}"
        )));
    }
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "horizon must be positive, got {horizon}"
        )));
    }
    Ok(())
}

pub(crate) fn diverged(x: &[f64]) -> bool {
    x.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_BOUND)
}

fn axpy(x: &[f64], h: f64, k: &[f64]) -> Vec<f64> {
    x.iter().zip(k).map(|(a, b)| a + h * b).collect()
}

/// One classical RK4 step.
pub fn rk4_step<F>(drift: &mut F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let k1 = drift(x)?;
    let k2 = drift(&axpy(x, 0.5 * h, &k1))?;
    let k3 = drift(&axpy(x, 0.5 * h, &k2))?;
    let k4 = drift(&axpy(x, h, &k3))?;
    Ok((0..x.len())
        .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

/// Integrates `ẋ = drift(x)` over `[0, horizon]` and records `input(x)` at
/// every grid state.
pub fn integrate_with_inputs<F, U>(
    mut drift: F,
    mut input: U,
    x0: &[f64],
    horizon: f64,
    steps: usize,
) -> Result<Trajectory>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
    U: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    check_grid(horizon, steps)?;
    if diverged(x0) {
        return Err(Error::Divergence { step: 0, time: 0.0 });
    }
    let h = horizon / steps as f64;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut inputs = Vec::with_capacity(steps + 1);
    let mut x = x0.to_vec();
    for k in 0..=steps {
        times.push(k as f64 * h);
        inputs.push(input(&x)?);
        if k == steps {
            states.push(x);
            break;
        }
        let next = rk4_step(&mut drift, &x, h)?;
        if diverged(&next) {
            return Err(Error::Divergence {
                step: k + 1,
                time: (k + 1) as f64 * h,
            });
        }
        states.push(std::mem::replace(&mut x, next));
    }
    Trajectory::new(times, states, inputs)
}

/// Integrates an autonomous field; recorded inputs are empty vectors.
pub fn integrate<F>(drift: F, x0: &[f64], horizon: f64, steps: usize) -> Result<Trajectory>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    integrate_with_inputs(drift, |_| Ok(Vec::new()), x0, horizon, steps)
}

/// Jointly integrates `ẋ = f(x)` and `Φ̇ = Df(x) Φ`, `Φ(0) = I`, with the
/// same RK4 scheme on the augmented state.
pub fn integrate_variational<F, J>(
    mut drift: F,
    mut jacobian: J,
    x0: &[f64],
    horizon: f64,
    steps: usize,
) -> Result<StmResult>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
    J: FnMut(&[f64]) -> Result<Mat>,
{
    let n = x0.len();
    let mut aug = x0.to_vec();
    aug.extend_from_slice(Mat::identity(n).as_slice());
    let mut field = |z: &[f64]| -> Result<Vec<f64>> {
        let (x, phi) = z.split_at(n);
        let mut out = drift(x)?;
        let jac = jacobian(x)?;
        let phi = Mat::from_rows(&phi.chunks(n).collect::<Vec<_>>());
        out.extend_from_slice(jac.matmul(&phi).as_slice());
        Ok(out)
    };
    check_grid(horizon, steps)?;
    let h = horizon / steps as f64;
    let mut times = vec![0.0];
    let mut states = vec![x0.to_vec()];
    for k in 0..steps {
        aug = rk4_step(&mut field, &aug, h)?;
        if diverged(&aug) {
            return Err(Error::Divergence {
                step: k + 1,
                time: (k + 1) as f64 * h,
            });
        }
        times.push((k + 1) as f64 * h);
        states.push(aug[..n].to_vec());
    }
    let phi = Mat::from_rows(&aug[n..].chunks(n).collect::<Vec<_>>());
    let inputs = vec![Vec::new(); states.len()];
    Ok(StmResult {
        phi,
        trajectory: Trajectory::new(times, states, inputs)?,
    })
}

/// Integrates the closed loop of `plant` under the controller and records the
/// feedback. Logs a warning the first time the airgap `q` drops to zero or below.
pub fn simulate_closed_loop(
    plant: &dyn PlantSystem,
    ds: &DesiredSystem,
    gates: &Gates,
    x0: &[f64],
    horizon: f64,
    steps: usize,
) -> Result<Trajectory> {
    let cl = ClosedLoop::from_system(plant, ds, gates)?;
    let traj = integrate_with_inputs(
        |x| cl.drift(x).map(|d| d.to_vec()),
        |x| cl.evaluate(x).map(|p| p.input),
        x0,
        horizon,
        steps,
    )?;
    if let Some(k) = traj.states.iter().position(|x| x[0] <= 0.0) {
        log::warn!(
            "airgap q crossed zero at t = {} (q = {})",
            traj.times[k],
            traj.states[k][0]
        );
    }
    Ok(traj)
}

/// Central-difference Jacobian of a vector field with steps `1e-6 (1 + |x_i|)`.
pub fn finite_difference_jacobian<F>(mut field: F, x: &[f64]) -> Result<Mat>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let n = x.len();
    let mut jac = Mat::zeros(n, n);
    let mut xp = x.to_vec();
    for i in 0..n {
        let h = 1e-6 * (1.0 + x[i].abs());
        xp[i] = x[i] + h;
        let fp = field(&xp)?;
        xp[i] = x[i] - h;
        let fm = field(&xp)?;
        xp[i] = x[i];
        for r in 0..n {
            jac[(r, i)] = (fp[r] - fm[r]) / (2.0 * h);
        }
    }
    Ok(jac)
}

/// Jacobian of the closed-loop drift by central differences.
pub fn drift_jacobian(plant: &dyn PlantSystem, ds: &DesiredSystem, gates: &Gates, x: &[f64]) -> Result<Mat> {
    let cl = ClosedLoop::from_system(plant, ds, gates)?;
    finite_difference_jacobian(|y| cl.drift(y).map(|d| d.to_vec()), x)
}

/// Monodromy matrix and its multipliers sorted by descending modulus.
#[derive(Clone, Debug)]
pub struct Monodromy {
    pub matrix: Mat,
    pub multipliers: Vec<ComplexScalar>,
    pub trajectory: Trajectory,
}

/// `Φ(T, 0)` of an arbitrary field along the solution from `x0`.
pub fn monodromy_of<F, J>(drift: F, jacobian: J, x0: &[f64], period: f64, steps: usize) -> Result<Monodromy>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
    J: FnMut(&[f64]) -> Result<Mat>,
{
    let stm = integrate_variational(drift, jacobian, x0, period, steps)?;
    let mut multipliers = eigenvalues(&stm.phi)?;
    sort_by_modulus_desc(&mut multipliers);
    Ok(Monodromy {
        matrix: stm.phi,
        multipliers,
        trajectory: stm.trajectory,
    })
}

/// Monodromy of the closed loop over one period, finite-difference Jacobian.
pub fn monodromy(
    plant: &dyn PlantSystem,
    ds: &DesiredSystem,
    gates: &Gates,
    x0: &[f64],
    period: f64,
    steps: usize,
) -> Result<Monodromy> {
    let cl = ClosedLoop::from_system(plant, ds, gates)?;
    let drift = |y: &[f64]| cl.drift(y).map(|d| d.to_vec());
    monodromy_of(
        drift,
        |y: &[f64]| finite_difference_jacobian(drift, y),
        x0,
        period,
        steps,
    )
}

/// Default tolerance of [`StabilityVerdict::classify`].
pub const VERDICT_TOLERANCE: f64 = 0.01;

/// Qualitative reading of a set of Floquet multipliers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StabilityVerdict {
    /// Some multiplier lies within the tolerance of 1.
    pub near_periodic: bool,
    /// Some multiplier has modulus above `1 + tol`.
    pub unstable: bool,
}

impl StabilityVerdict {
    pub fn classify(multipliers: &[ComplexScalar], tol: f64) -> Self {
        let one = ComplexScalar::real(1.0);
        Self {
            near_periodic: multipliers.iter().any(|m| (*m - one).modulus() <= tol),
            unstable: multipliers.iter().any(|m| m.modulus() > 1.0 + tol),
        }
    }
}

impl std::fmt::Display for StabilityVerdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match (self.near_periodic, self.unstable) {
            (true, true) => write!(f, "near-periodic; unstable directions present"),
            (true, false) => write!(f, "near-periodic"),
            (false, true) => write!(f, "unstable directions present"),
            (false, false) => write!(f, "no multiplier near 1; all moduli at most 1 + tol"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::matrix_exponential;

    fn linear(a: Mat) -> impl Fn(&[f64]) -> Result<Vec<f64>> {
        move |x| Ok(a.mul_vec(x))
    }

    #[test]
    fn zero_drift_is_constant() {
        let traj = integrate(|x| Ok(vec![0.0; x.len()]), &[0.3, -1.0], 2.0, 10).unwrap();
        assert!(traj.states.iter().all(|x| x == &vec![0.3, -1.0]));
        assert_eq!(traj.len(), 11);
        assert_eq!(traj.times[10], 2.0);
    }

    #[test]
    fn exponential_decay() {
        let traj = integrate(|x| Ok(vec![-x[0]]), &[1.0], 1.0, 100).unwrap();
        let xf = traj.final_state().unwrap()[0];
        assert!((xf - (-1.0f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn halving_step_gives_fourth_order() {
        let err = |steps| {
            let t = integrate(|x| Ok(vec![-x[0]]), &[1.0], 1.0, steps).unwrap();
            (t.final_state().unwrap()[0] - (-1.0f64).exp()).abs()
        };
        let ratio = err(20) / err(40);
        assert!((ratio - 16.0).abs() < 1.0, "ratio {ratio}");
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(integrate(|x| Ok(x.to_vec()), &[1.0], 1.0, 3).is_err());
        assert!(integrate(|x| Ok(x.to_vec()), &[1.0], 1.0, 0).is_err());
        assert!(integrate(|x| Ok(x.to_vec()), &[1.0], -1.0, 4).is_err());
    }

    #[test]
    fn divergence_reports_step() {
        let err = integrate(|x| Ok(vec![x[0] * x[0]]), &[1.0], 2.0, 200).unwrap_err();
        match err {
            Error::Divergence { step, time } => {
                assert!(step > 90 && step <= 101, "step {step}");
                assert!(time <= 1.01);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn stm_of_rotation_and_zero() {
        let a = Mat::from_rows(&[[0.0, 1.0], [-1.0, 0.0]]);
        let a2 = a.clone();
        let stm = integrate_variational(
            linear(a),
            move |_| Ok(a2.clone()),
            &[1.0, 0.0],
            2.0 * std::f64::consts::PI,
            1256,
        )
        .unwrap();
        assert!((&stm.phi - &Mat::identity(2)).max_abs() < 1e-6);

        let stm = integrate_variational(|x| Ok(vec![0.0; x.len()]), |_| Ok(Mat::zeros(3, 3)), &[1.0, 2.0, 3.0], 1.0, 10)
            .unwrap();
        assert_eq!(stm.phi, Mat::identity(3));
    }

    #[test]
    fn stm_matches_expm() {
        let a = Mat::from_rows(&[[-0.3, 1.2, 0.1], [-0.8, -0.1, 0.4], [0.2, -0.5, -0.6]]);
        let a2 = a.clone();
        let stm = integrate_variational(linear(a.clone()), move |_| Ok(a2.clone()), &[1.0, 0.0, 0.0], 2.0, 400).unwrap();
        let expm = matrix_exponential(&a, 2.0);
        assert!((&stm.phi - &expm).max_abs() < 1e-8);
    }

    #[test]
    fn trajectory_invariants() {
        assert!(Trajectory::new(vec![0.0, 1.0], vec![vec![0.0]; 2], vec![vec![]; 2]).is_err());
        assert!(Trajectory::new(vec![0.0, 1.0, 3.0], vec![vec![0.0]; 3], vec![vec![]; 3]).is_err());
        assert!(Trajectory::new(vec![0.0, 1.0, 2.0], vec![vec![0.0]; 2], vec![vec![]; 3]).is_err());
    }

    #[test]
    fn csv_header_and_rows() {
        let traj = Trajectory::new(
            vec![0.0, 0.5, 1.0],
            vec![vec![0.1, 0.2, 0.3]; 3],
            vec![vec![0.25]; 3],
        )
        .unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,q,p,Q,u");
        assert_eq!(lines[2], "0.5,0.1,0.2,0.3,0.25");
        assert_eq!(lines.len(), 4);
    }

    #[test]
    fn default_steps_are_even() {
        assert_eq!(default_steps(1.0), 200);
        assert_eq!(default_steps(3.0), 600);
        assert_eq!(default_steps(0.0051), 2);
        assert_eq!(default_steps(0.0126), 4);
    }

    #[test]
    fn verdict_flags() {
        let v = |re: &[f64]| {
            let m: Vec<_> = re.iter().map(|&r| ComplexScalar::real(r)).collect();
            StabilityVerdict::classify(&m, VERDICT_TOLERANCE)
        };
        let both = v(&[1.0812, 0.9990, 0.9188]);
        assert!(both.near_periodic && both.unstable);
        assert_eq!(both.to_string(), "near-periodic; unstable directions present");
        assert_eq!(v(&[1.0, 1.0, 1.0]).to_string(), "near-periodic");
        assert_eq!(v(&[0.5, 0.2, 0.1]), StabilityVerdict { near_periodic: false, unstable: false });
    }
}
