//! Port-Hamiltonian plants `ẋ = (J - R) ∂ₓH + g u` and the electrostatic
//! microactuator (capacitor with a spring-mounted moving plate).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrate::Trajectory;
use crate::numerics::Mat;

/// A control-affine port-Hamiltonian plant.
///
/// `drift` is the unforced vector field `f(x)`. When [`structure`] returns the
/// interconnection and dissipation matrices, `f(x) = (J(x) - R(x)) ∂ₓH(x)`.
///
/// [`structure`]: PlantSystem::structure
pub trait PlantSystem: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;

    fn hamiltonian(&self, x: &[f64]) -> f64;
    fn hamiltonian_gradient(&self, x: &[f64]) -> Vec<f64>;

    fn drift(&self, x: &[f64]) -> Vec<f64>;
    fn input_matrix(&self, x: &[f64]) -> Mat;

    /// `(J(x), R(x))`, when the plant exposes its structure.
    fn structure(&self, _x: &[f64]) -> Option<(Mat, Mat)> {
        None
    }

    /// `∂f/∂x`. The default is a central difference; plants used for
    /// training should override it with the analytic Jacobian.
    fn drift_jacobian(&self, x: &[f64]) -> Mat {
        let n = self.state_dim();
        let mut jac = Mat::zeros(n, n);
        let mut xp = x.to_vec();
        for i in 0..n {
            let h = 1e-6 * (1.0 + x[i].abs());
            xp[i] = x[i] + h;
            let fp = self.drift(&xp);
            xp[i] = x[i] - h;
            let fm = self.drift(&xp);
            xp[i] = x[i];
            for r in 0..n {
                jac[(r, i)] = (fp[r] - fm[r]) / (2.0 * h);
            }
        }
        jac
    }

    /// The input matrix when it does not depend on the state.
    fn constant_input_matrix(&self) -> Option<Mat> {
        None
    }

    /// Passive output `y = gᵀ ∂ₓH`.
    fn output(&self, x: &[f64]) -> Vec<f64> {
        self.input_matrix(x).tr_mul_vec(&self.hamiltonian_gradient(x))
    }
}

/// Physical constants of the electrostatic microactuator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ElectromechParams {
    /// Plate mass.
    pub m: f64,
    /// Spring stiffness.
    pub k: f64,
    /// Mechanical damping.
    pub b: f64,
    /// Electrical resistance.
    pub r_res: f64,
    /// Plate area times permittivity.
    pub a_eps: f64,
    /// Spring rest length.
    pub q0: f64,
}

impl Default for ElectromechParams {
    fn default() -> Self {
        Self {
            m: 1.0,
            k: 1.0,
            b: 1.0,
            r_res: 1.0,
            a_eps: 1.0,
            q0: 1.0,
        }
    }
}

impl ElectromechParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("m", self.m),
            ("k", self.k),
            ("b", self.b),
            ("r_res", self.r_res),
            ("a_eps", self.a_eps),
            ("q0", self.q0),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!(
                    "plant.{name} must be a positive finite number, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// `H(q,p,Q) = ½k(q-q₀)² + p²/(2m) + qQ²/(2Aε)`.
pub fn electromech_hamiltonian(x: &[f64], params: &ElectromechParams) -> f64 {
    let (q, p, charge) = (x[0], x[1], x[2]);
    0.5 * params.k * (q - params.q0).powi(2)
        + p * p / (2.0 * params.m)
        + q * charge * charge / (2.0 * params.a_eps)
}

pub fn electromech_gradient(x: &[f64], params: &ElectromechParams) -> [f64; 3] {
    let (q, p, charge) = (x[0], x[1], x[2]);
    [
        params.k * (q - params.q0) + charge * charge / (2.0 * params.a_eps),
        p / params.m,
        q * charge / params.a_eps,
    ]
}

/// The microactuator as a [`PlantSystem`] with `n = 3`, `m = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ElectromechPlant {
    pub params: ElectromechParams,
}

pub fn electromech_plant(params: ElectromechParams) -> Result<ElectromechPlant> {
    params.validate()?;
    Ok(ElectromechPlant { params })
}

impl ElectromechPlant {
    fn interconnection() -> Mat {
        Mat::from_rows(&[[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    }

    fn dissipation(&self) -> Mat {
        Mat::diag(&[0.0, self.params.b, 1.0 / self.params.r_res])
    }

    fn hamiltonian_hessian(&self, x: &[f64]) -> Mat {
        let p = &self.params;
        let (q, charge) = (x[0], x[2]);
        Mat::from_rows(&[
            [p.k, 0.0, charge / p.a_eps],
            [0.0, 1.0 / p.m, 0.0],
            [charge / p.a_eps, 0.0, q / p.a_eps],
        ])
    }
}

impl PlantSystem for ElectromechPlant {
    fn state_dim(&self) -> usize {
        3
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn hamiltonian(&self, x: &[f64]) -> f64 {
        electromech_hamiltonian(x, &self.params)
    }

    fn hamiltonian_gradient(&self, x: &[f64]) -> Vec<f64> {
        electromech_gradient(x, &self.params).to_vec()
    }

    fn drift(&self, x: &[f64]) -> Vec<f64> {
        let [dq, dp, dc] = electromech_gradient(x, &self.params);
        vec![dp, -dq - self.params.b * dp, -dc / self.params.r_res]
    }

    fn input_matrix(&self, _x: &[f64]) -> Mat {
        Mat::column(&[0.0, 0.0, 1.0 / self.params.r_res])
    }

    fn structure(&self, _x: &[f64]) -> Option<(Mat, Mat)> {
        Some((Self::interconnection(), self.dissipation()))
    }

    fn drift_jacobian(&self, x: &[f64]) -> Mat {
        let jr = &Self::interconnection() - &self.dissipation();
        jr.matmul(&self.hamiltonian_hessian(x))
    }

    fn constant_input_matrix(&self) -> Option<Mat> {
        Some(self.input_matrix(&[0.0; 3]))
    }
}

/// Largest value of `Ḣ - yᵀu` over the grid of a recorded trajectory, with
/// `Ḣ = ∂ₓHᵀ(f + g u)` and `y = gᵀ∂ₓH`. Passive plants give values at or
/// below zero up to rounding.
pub fn passivity_residual(plant: &dyn PlantSystem, trajectory: &Trajectory) -> Result<f64> {
    let n = plant.state_dim();
    let m = plant.input_dim();
    if trajectory.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    let mut worst = f64::NEG_INFINITY;
    for (x, u) in trajectory.states.iter().zip(&trajectory.inputs) {
        if x.len() != n || u.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "trajectory point has state/input sizes {}/{}, plant expects {n}/{m}",
                x.len(),
                u.len()
            )));
        }
        let grad = plant.hamiltonian_gradient(x);
        let g = plant.input_matrix(x);
        let mut xdot = plant.drift(x);
        for (xd, gu) in xdot.iter_mut().zip(g.mul_vec(u)) {
            *xd += gu;
        }
        let hdot: f64 = grad.iter().zip(&xdot).map(|(a, b)| a * b).sum();
        let y = g.tr_mul_vec(&grad);
        let supply: f64 = y.iter().zip(u).map(|(a, b)| a * b).sum();
        worst = worst.max(hdot - supply);
    }
    Ok(worst)
}
