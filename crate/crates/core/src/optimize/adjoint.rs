//! Vector-Jacobian products of the closed-loop field.
//!
//! The closed loop is `F(x; w) = (I - P) f(x) + P f_d(x; w)` with
//! `P = g g⁺` constant, feedback `u = g⁺(f_d - f)` and residual
//! `η = (I - P)(f_d - f)`. All three are linear in `(f_d, f)`, so every
//! cotangent is first split into a cotangent on `f_d` and one on `f` and then
//! pulled back through the desired drift `f_d = (J_d - R_d) ∂ₓH_d` and the
//! plant drift.

use crate::controller::{Entry, EntryValues, GatedController, ENTRY_COUNT, STATE_DIM};
use crate::error::{Error, Result};
use crate::numerics::Mat;
use crate::phcore::PlantSystem;

/// Closed-loop field with a state-independent input matrix.
pub(crate) struct LinearizableLoop<'a> {
    pub plant: &'a dyn PlantSystem,
    pub controller: &'a GatedController,
    /// `g g⁺`.
    projector: [[f64; 3]; 3],
    /// `g⁺`, `m x 3`.
    pinv: Mat,
}

/// Everything a forward evaluation at one state produces.
pub(crate) struct PointEval {
    pub drift: [f64; 3],
    pub input: Vec<f64>,
    pub eta: [f64; 3],
}

fn mat3(m: &Mat) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

impl<'a> LinearizableLoop<'a> {
    pub fn new(plant: &'a dyn PlantSystem, controller: &'a GatedController) -> Result<Self> {
        if plant.state_dim() != STATE_DIM {
            return Err(Error::DimensionMismatch(format!(
                "gradient engine needs a {STATE_DIM}-state plant, got {}",
                plant.state_dim()
            )));
        }
        let g = plant.constant_input_matrix().ok_or_else(|| {
            Error::InvalidArgument(
                "gradient engine needs a plant with a state-independent input matrix".into(),
            )
        })?;
        let pinv = crate::numerics::left_pseudo_inverse(&g)?;
        let projector = mat3(&crate::controller::input_projector(&g, &pinv));
        Ok(Self {
            plant,
            controller,
            projector,
            pinv,
        })
    }

    fn entries(&self, x: &[f64; 3]) -> (Vec<f64>, Vec<f64>, EntryValues) {
        let lib = &self.controller.library;
        let theta = lib.features(x).expect("state dimension checked");
        let jac = lib.feature_jacobian(x).expect("state dimension checked");
        let ev = self.controller.entries_from_features(&theta, &jac);
        (theta, jac, ev)
    }

    pub fn eval(&self, x: &[f64; 3]) -> PointEval {
        let (_, _, ev) = self.entries(x);
        let fd = ev.desired_drift();
        let f = self.plant.drift(x);
        let mismatch: [f64; 3] = std::array::from_fn(|i| fd[i] - f[i]);
        let input = self.pinv.mul_vec(&mismatch);
        let p = &self.projector;
        let actuated: [f64; 3] =
            std::array::from_fn(|i| p[i][0] * mismatch[0] + p[i][1] * mismatch[1] + p[i][2] * mismatch[2]);
        let eta = std::array::from_fn(|i| mismatch[i] - actuated[i]);
        let drift = std::array::from_fn(|i| f[i] + actuated[i]);
        PointEval { drift, input, eta }
    }

    /// Pulls back cotangents on the closed-loop drift, the input and the
    /// residual at `x`. Returns the state cotangent and adds the
    /// effective-coefficient cotangents into `w_bar`.
    pub fn vjp(
        &self,
        x: &[f64; 3],
        drift_bar: &[f64; 3],
        input_bar: Option<&[f64]>,
        eta_bar: Option<&[f64; 3]>,
        w_bar: &mut [Vec<f64>; ENTRY_COUNT],
    ) -> [f64; 3] {
        let p = &self.projector;
        // Transposes of P and I - P applied to a 3-vector.
        let pt = |v: &[f64; 3]| -> [f64; 3] {
            std::array::from_fn(|j| p[0][j] * v[0] + p[1][j] * v[1] + p[2][j] * v[2])
        };
        let ipt = |v: &[f64; 3]| -> [f64; 3] {
            let a = pt(v);
            std::array::from_fn(|j| v[j] - a[j])
        };

        let mut c_fd = pt(drift_bar);
        let mut c_f = ipt(drift_bar);
        if let Some(ub) = input_bar {
            let back = self.pinv.tr_mul_vec(ub);
            for i in 0..3 {
                c_fd[i] += back[i];
                c_f[i] -= back[i];
            }
        }
        if let Some(eb) = eta_bar {
            let back = ipt(eb);
            for i in 0..3 {
                c_fd[i] += back[i];
                c_f[i] -= back[i];
            }
        }

        let mut x_bar = [0.0; 3];
        if c_f.iter().any(|&v| v != 0.0) {
            let df = self.plant.drift_jacobian(x);
            let back = df.tr_mul_vec(&c_f);
            for i in 0..3 {
                x_bar[i] += back[i];
            }
        }
        if c_fd.iter().all(|&v| v == 0.0) {
            return x_bar;
        }

        let (theta, jac, ev) = self.entries(x);
        let h = ev.grad_hd;
        let c = c_fd;
        let structure_bar = [
            c[0] * h[1] - c[1] * h[0],
            c[0] * h[2] - c[2] * h[0],
            c[1] * h[2] - c[2] * h[1],
            -c[0] * h[0],
            -c[1] * h[1],
            -c[2] * h[2],
        ];
        let s = ev.interconnection_minus_damping();
        let mu: [f64; 3] = std::array::from_fn(|j| s[0][j] * c[0] + s[1][j] * c[1] + s[2][j] * c[2]);

        let d = theta.len();
        for (k, &sb) in structure_bar.iter().enumerate() {
            if sb == 0.0 {
                continue;
            }
            let wk = &self.controller.weights[k];
            let mut grad_s = [0.0; 3];
            for j in 0..d {
                w_bar[k][j] += sb * theta[j];
                let wj = wk[j];
                if wj != 0.0 {
                    for i in 0..3 {
                        grad_s[i] += wj * jac[j * 3 + i];
                    }
                }
            }
            for i in 0..3 {
                x_bar[i] += sb * grad_s[i];
            }
        }

        let hd = Entry::Hd.index();
        for j in 0..d {
            w_bar[hd][j] += jac[j * 3] * mu[0] + jac[j * 3 + 1] * mu[1] + jac[j * 3 + 2] * mu[2];
        }
        let hess = self
            .controller
            .library
            .weighted_hessian(x, &self.controller.weights[hd])
            .expect("state dimension checked");
        let back = hess.mul_vec(&mu);
        for i in 0..3 {
            x_bar[i] += back[i];
        }
        x_bar
    }

    /// Analytic Jacobian of the closed-loop drift, one VJP per row.
    pub fn drift_jacobian(&self, x: &[f64; 3]) -> Mat {
        let mut jac = Mat::zeros(3, 3);
        let mut scratch: [Vec<f64>; ENTRY_COUNT] =
            std::array::from_fn(|_| vec![0.0; self.controller.library.len()]);
        for r in 0..3 {
            let mut e = [0.0; 3];
            e[r] = 1.0;
            let row = self.vjp(x, &e, None, None, &mut scratch);
            for c in 0..3 {
                jac[(r, c)] = row[c];
            }
        }
        jac
    }
}

/// Analytic Jacobian of the closed-loop drift of `plant` under `controller`.
pub fn analytic_drift_jacobian(
    plant: &dyn PlantSystem,
    controller: &GatedController,
    x: &[f64],
) -> Result<Mat> {
    let lin = LinearizableLoop::new(plant, controller)?;
    let x: [f64; 3] = x
        .try_into()
        .map_err(|_| Error::DimensionMismatch(format!("expected a 3-state, got {}", x.len())))?;
    Ok(lin.drift_jacobian(&x))
}
