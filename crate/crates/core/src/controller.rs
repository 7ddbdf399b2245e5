//! Desired closed-loop system, IDA-PBC feedback and matching residual.
//!
//! The desired system is `ẋ = (J_d(x) - R_d(x)) ∂ₓH_d(x)` with
//!
//! ```text
//!        [  0   a   β ]          [ d 0 0 ]
//!  J_d = [ -a   0   c ]    R_d = [ 0 e 0 ]
//!        [ -β  -c   0 ]          [ 0 0 f ]
//! ```
//!
//! where `a, β, c, d, e, f` and `H_d` are seven independent
//! [`SparseLinearModel`]s over the same polynomial library. The feedback
//! `u = g⁺(f_d - f)` realizes the part of the desired drift that the input
//! can reach; the rest, `η = (I - g g⁺)(f_d - f)`, is the matching residual.

use serde::{Deserialize, Serialize};

use crate::dictionary::{
    active_terms, deterministic_gates, effective_coefficients, export_expression,
    GateConstants, PolynomialLibrary, SparseLinearModel,
};
use crate::error::{Error, Result};
use crate::integrate::Trajectory;
use crate::numerics::{left_pseudo_inverse, Mat};
use crate::phcore::PlantSystem;

pub const STATE_DIM: usize = 3;
pub const ENTRY_COUNT: usize = 7;
pub const STATE_NAMES: [&str; 3] = ["q", "p", "Q"];

/// The seven learnable scalar functions, in parameter order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Entry {
    A,
    Beta,
    C,
    D,
    E,
    F,
    Hd,
}

impl Entry {
    pub const ALL: [Entry; ENTRY_COUNT] = [
        Entry::A,
        Entry::Beta,
        Entry::C,
        Entry::D,
        Entry::E,
        Entry::F,
        Entry::Hd,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Entry::A => "a",
            Entry::Beta => "beta",
            Entry::C => "c",
            Entry::D => "d",
            Entry::E => "e",
            Entry::F => "f",
            Entry::Hd => "H_d",
        }
    }
}

/// One gate vector per entry model.
pub type Gates = [Vec<f64>; ENTRY_COUNT];

/// The learnable controller: structure entries, desired energy and initial charge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesiredSystem {
    pub models: [SparseLinearModel; ENTRY_COUNT],
    /// Learnable initial charge `Q(0)`.
    pub q0_learn: f64,
}

impl DesiredSystem {
    /// Every model zero with gates at `log_alpha`.
    pub fn zeros(library: PolynomialLibrary, log_alpha: f64, constants: GateConstants) -> Self {
        let m = SparseLinearModel::zeros(library, log_alpha, constants);
        Self {
            models: std::array::from_fn(|_| m.clone()),
            q0_learn: 0.0,
        }
    }

    pub fn model(&self, entry: Entry) -> &SparseLinearModel {
        &self.models[entry.index()]
    }

    pub fn model_mut(&mut self, entry: Entry) -> &mut SparseLinearModel {
        &mut self.models[entry.index()]
    }

    pub fn library(&self) -> &PolynomialLibrary {
        &self.models[0].library
    }

    pub fn validate(&self) -> Result<()> {
        let lib = self.library();
        if lib.n_vars() != STATE_DIM {
            return Err(Error::DimensionMismatch(format!(
                "desired system needs a {STATE_DIM}-variable library, got {}",
                lib.n_vars()
            )));
        }
        for m in &self.models {
            m.validate()?;
            if &m.library != lib {
                return Err(Error::InvalidArgument(
                    "all entry models must share one polynomial library".into(),
                ));
            }
        }
        if !self.q0_learn.is_finite() {
            return Err(Error::NonFinite("Q(0)".into()));
        }
        Ok(())
    }

    pub fn deterministic_gates(&self) -> Gates {
        std::array::from_fn(|i| deterministic_gates(&self.models[i]))
    }

    /// Gated controller ready for evaluation.
    pub fn gated(&self, gates: &Gates) -> Result<GatedController> {
        let mut weights: [Vec<f64>; ENTRY_COUNT] = Default::default();
        for (slot, (model, z)) in weights.iter_mut().zip(self.models.iter().zip(gates)) {
            *slot = effective_coefficients(model, z)?;
        }
        Ok(GatedController {
            library: self.library().clone(),
            weights,
        })
    }

    pub fn active_term_count(&self) -> usize {
        self.models.iter().map(active_terms).sum()
    }

    pub fn term_budget(&self) -> usize {
        self.models.iter().map(SparseLinearModel::len).sum()
    }
}

/// Pointwise values of the seven entries and the desired-energy gradient.
#[derive(Clone, Debug)]
pub struct EntryValues {
    /// `a, β, c, d, e, f` at the state.
    pub structure: [f64; 6],
    /// `∂ₓH_d`.
    pub grad_hd: [f64; 3],
}

impl EntryValues {
    /// `J_d - R_d`.
    pub fn interconnection_minus_damping(&self) -> [[f64; 3]; 3] {
        let [a, b, c, d, e, f] = self.structure;
        [[-d, a, b], [-a, -e, c], [-b, -c, -f]]
    }

    pub fn desired_drift(&self) -> [f64; 3] {
        let s = self.interconnection_minus_damping();
        let h = self.grad_hd;
        std::array::from_fn(|i| s[i][0] * h[0] + s[i][1] * h[1] + s[i][2] * h[2])
    }
}

/// Desired system with gates applied: effective coefficients `ξ ⊙ z`.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedController {
    pub library: PolynomialLibrary,
    pub weights: [Vec<f64>; ENTRY_COUNT],
}

impl GatedController {
    pub fn entries(&self, x: &[f64]) -> Result<EntryValues> {
        let theta = self.library.features(x)?;
        let jac = self.library.feature_jacobian(x)?;
        Ok(self.entries_from_features(&theta, &jac))
    }

    pub(crate) fn entries_from_features(&self, theta: &[f64], jac: &[f64]) -> EntryValues {
        let structure =
            std::array::from_fn(|k| theta.iter().zip(&self.weights[k]).map(|(t, w)| t * w).sum());
        let mut grad_hd = [0.0; 3];
        for (j, &w) in self.weights[Entry::Hd.index()].iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (i, g) in grad_hd.iter_mut().enumerate() {
                *g += w * jac[j * STATE_DIM + i];
            }
        }
        EntryValues { structure, grad_hd }
    }

    pub fn jd(&self, x: &[f64]) -> Result<Mat> {
        let [a, b, c, ..] = self.entries(x)?.structure;
        Ok(Mat::from_rows(&[[0.0, a, b], [-a, 0.0, c], [-b, -c, 0.0]]))
    }

    pub fn rd(&self, x: &[f64]) -> Result<Mat> {
        let [_, _, _, d, e, f] = self.entries(x)?.structure;
        Ok(Mat::diag(&[d, e, f]))
    }

    pub fn desired_drift(&self, x: &[f64]) -> Result<[f64; 3]> {
        Ok(self.entries(x)?.desired_drift())
    }
}

/// Everything the feedback law produces at one state.
#[derive(Clone, Debug)]
pub struct ClosedLoopPoint {
    pub plant_drift: Vec<f64>,
    pub desired_drift: [f64; 3],
    pub input: Vec<f64>,
    pub eta: [f64; 3],
    /// `f + g u`, equal to `f_d - η`.
    pub drift: [f64; 3],
}

/// A plant under the IDA-PBC feedback of a gated controller.
pub struct ClosedLoop<'a> {
    pub plant: &'a dyn PlantSystem,
    pub controller: GatedController,
    constant_maps: Option<(Mat, Mat)>,
}

/// `g g⁺` with entries within rounding of an integer snapped to it, so an
/// axis-aligned input matrix gives an exact coordinate projector.
pub fn input_projector(g: &Mat, pinv: &Mat) -> Mat {
    let mut p = g.matmul(pinv);
    for i in 0..p.rows() {
        for j in 0..p.cols() {
            let r = p[(i, j)].round();
            if (p[(i, j)] - r).abs() <= 8.0 * f64::EPSILON {
                p[(i, j)] = r;
            }
        }
    }
    p
}

impl<'a> ClosedLoop<'a> {
    pub fn new(plant: &'a dyn PlantSystem, controller: GatedController) -> Result<Self> {
        if plant.state_dim() != STATE_DIM {
            return Err(Error::DimensionMismatch(format!(
                "controller is {STATE_DIM}-dimensional, plant has state dimension {}",
                plant.state_dim()
            )));
        }
        let constant_maps = match plant.constant_input_matrix() {
            Some(g) => {
                let pinv = left_pseudo_inverse(&g)?;
                let projector = input_projector(&g, &pinv);
                Some((pinv, projector))
            }
            None => None,
        };
        Ok(Self {
            plant,
            controller,
            constant_maps,
        })
    }

    pub fn from_system(plant: &'a dyn PlantSystem, ds: &DesiredSystem, gates: &Gates) -> Result<Self> {
        Self::new(plant, ds.gated(gates)?)
    }

    /// `(g⁺(x), g(x) g⁺(x))`.
    pub fn input_maps(&self, x: &[f64]) -> Result<(Mat, Mat)> {
        match &self.constant_maps {
            Some((pinv, proj)) => Ok((pinv.clone(), proj.clone())),
            None => {
                let g = self.plant.input_matrix(x);
                let pinv = left_pseudo_inverse(&g)?;
                let proj = input_projector(&g, &pinv);
                Ok((pinv, proj))
            }
        }
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<ClosedLoopPoint> {
        let desired = self.controller.desired_drift(x)?;
        self.evaluate_with_desired(x, desired)
    }

    pub(crate) fn evaluate_with_desired(&self, x: &[f64], desired: [f64; 3]) -> Result<ClosedLoopPoint> {
        let f = self.plant.drift(x);
        let (pinv, proj) = self.input_maps(x)?;
        let mismatch: Vec<f64> = desired.iter().zip(&f).map(|(a, b)| a - b).collect();
        let input = pinv.mul_vec(&mismatch);
        let actuated = proj.mul_vec(&mismatch);
        let eta: [f64; 3] = std::array::from_fn(|i| mismatch[i] - actuated[i]);
        let drift = std::array::from_fn(|i| f[i] + actuated[i]);
        Ok(ClosedLoopPoint {
            plant_drift: f,
            desired_drift: desired,
            input,
            eta,
            drift,
        })
    }

    pub fn drift(&self, x: &[f64]) -> Result<[f64; 3]> {
        Ok(self.evaluate(x)?.drift)
    }
}

pub fn assemble_jd(ds: &DesiredSystem, x: &[f64], gates: &Gates) -> Result<Mat> {
    ds.gated(gates)?.jd(x)
}

pub fn assemble_rd(ds: &DesiredSystem, x: &[f64], gates: &Gates) -> Result<Mat> {
    ds.gated(gates)?.rd(x)
}

pub fn desired_drift(ds: &DesiredSystem, x: &[f64], gates: &Gates) -> Result<[f64; 3]> {
    ds.gated(gates)?.desired_drift(x)
}

/// `u = g⁺(x)(f_d(x) - f(x))`.
pub fn feedback(plant: &dyn PlantSystem, ds: &DesiredSystem, x: &[f64], gates: &Gates) -> Result<Vec<f64>> {
    Ok(ClosedLoop::from_system(plant, ds, gates)?.evaluate(x)?.input)
}

/// `η(x) = (I - g g⁺)(f_d(x) - f(x))`.
pub fn residual_eta(plant: &dyn PlantSystem, ds: &DesiredSystem, x: &[f64], gates: &Gates) -> Result<[f64; 3]> {
    Ok(ClosedLoop::from_system(plant, ds, gates)?.evaluate(x)?.eta)
}

/// `f_d(x) - η(x)`, equal to `f(x) + g(x) u(x)`.
pub fn closed_loop_drift(
    plant: &dyn PlantSystem,
    ds: &DesiredSystem,
    x: &[f64],
    gates: &Gates,
) -> Result<[f64; 3]> {
    ClosedLoop::from_system(plant, ds, gates)?.drift(x)
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum()
}

/// Mean of `‖η(x_k)‖²` over the grid states.
pub fn matching_cost(
    plant: &dyn PlantSystem,
    ds: &DesiredSystem,
    trajectory: &Trajectory,
    gates: &Gates,
) -> Result<f64> {
    let cl = ClosedLoop::from_system(plant, ds, gates)?;
    matching_cost_closed_loop(&cl, trajectory)
}

pub fn matching_cost_closed_loop(cl: &ClosedLoop<'_>, trajectory: &Trajectory) -> Result<f64> {
    if trajectory.is_empty() {
        return Err(Error::InvalidArgument("matching cost of an empty trajectory".into()));
    }
    let mut total = 0.0;
    for x in &trajectory.states {
        total += norm_sq(&cl.evaluate(x)?.eta);
    }
    Ok(total / trajectory.len() as f64)
}

/// Mean and max of `‖η‖²` along a trajectory plus per-component RMS.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualSummary {
    pub mean: f64,
    pub max: f64,
    pub component_rms: [f64; 3],
    pub component_max_abs: [f64; 3],
}

pub fn residual_summary(cl: &ClosedLoop<'_>, states: &[Vec<f64>]) -> Result<ResidualSummary> {
    if states.is_empty() {
        return Err(Error::InvalidArgument("residual summary of an empty trajectory".into()));
    }
    let mut mean = 0.0;
    let mut max = 0.0_f64;
    let mut sq = [0.0; 3];
    let mut mx = [0.0_f64; 3];
    for x in states {
        let eta = cl.evaluate(x)?.eta;
        let n = norm_sq(&eta);
        mean += n;
        max = max.max(n);
        for i in 0..3 {
            sq[i] += eta[i] * eta[i];
            mx[i] = mx[i].max(eta[i].abs());
        }
    }
    let count = states.len() as f64;
    Ok(ResidualSummary {
        mean: mean / count,
        max,
        component_rms: sq.map(|s| (s / count).sqrt()),
        component_max_abs: mx,
    })
}

fn negated(model: &SparseLinearModel) -> SparseLinearModel {
    let mut m = model.clone();
    m.xi.iter_mut().for_each(|v| *v = -*v);
    m
}

/// Closed-form report of the learned controller.
pub fn controller_report(ds: &DesiredSystem) -> String {
    let expr = |m: &SparseLinearModel| export_expression(m, &STATE_NAMES);
    let a = ds.model(Entry::A);
    let b = ds.model(Entry::Beta);
    let c = ds.model(Entry::C);
    let mut out = String::new();
    out.push_str(&format!("H_d = {}\n", expr(ds.model(Entry::Hd))));
    for entry in [Entry::A, Entry::Beta, Entry::C, Entry::D, Entry::E, Entry::F] {
        out.push_str(&format!("{} = {}\n", entry.label(), expr(ds.model(entry))));
    }
    out.push_str("J_d =\n");
    let rows = [
        ["0".to_string(), expr(a), expr(b)],
        [expr(&negated(a)), "0".to_string(), expr(c)],
        [expr(&negated(b)), expr(&negated(c)), "0".to_string()],
    ];
    for row in &rows {
        out.push_str(&format!("  [ {} ]\n", row.join(" | ")));
    }
    out.push_str("R_d =\n");
    let diag = [Entry::D, Entry::E, Entry::F].map(|e| expr(ds.model(e)));
    for (i, d) in diag.iter().enumerate() {
        let row: Vec<String> = (0..3)
            .map(|j| if i == j { d.clone() } else { "0".to_string() })
            .collect();
        out.push_str(&format!("  [ {} ]\n", row.join(" | ")));
    }
    out.push_str(&format!("Q(0) = {:.4}\n", ds.q0_learn));
    out.push_str("feedback: u = g+(x) [ (J_d(x) - R_d(x)) dH_d/dx(x) - f(x) ]\n");
    let counts: Vec<String> = Entry::ALL
        .iter()
        .map(|&e| format!("{} {}", e.label(), active_terms(ds.model(e))))
        .collect();
    out.push_str(&format!(
        "active terms: {} of {} ({})\n",
        ds.active_term_count(),
        ds.term_budget(),
        counts.join(", ")
    ));
    out
}

/// Closed-form controllers used as fixtures and smoke tests.
pub mod fixtures {
    use super::*;
    use crate::dictionary::CLOSED_GATE_LOG_ALPHA;

    fn empty(max_degree: u32) -> DesiredSystem {
        let lib = PolynomialLibrary::new(STATE_DIM, max_degree).expect("valid library");
        DesiredSystem::zeros(lib, CLOSED_GATE_LOG_ALPHA, GateConstants::default())
    }

    /// Every gate closed: `f_d ≡ 0`.
    pub fn closed_controller(max_degree: u32) -> DesiredSystem {
        empty(max_degree)
    }

    /// The published oscillation controller over the degree-4 library:
    /// `H_d = 2.0114 + 2.2373q - 1.7219Q²`, `a = -0.3035`, `β = -4.8265p`,
    /// `c = 0.1458Q⁴`, `d = -0.0175`, `e = 0`,
    /// `f = (1.9354 + 1.5700Q + 2.6368Q² + 3.5828Q³)p`, `Q(0) = 0.3835`.
    pub fn reference_oscillation_controller() -> DesiredSystem {
        let mut ds = empty(4);
        let terms: [(Entry, [u32; 3], f64); 11] = [
            (Entry::Hd, [0, 0, 0], 2.0114),
            (Entry::Hd, [1, 0, 0], 2.2373),
            (Entry::Hd, [0, 0, 2], -1.7219),
            (Entry::A, [0, 0, 0], -0.3035),
            (Entry::Beta, [0, 1, 0], -4.8265),
            (Entry::C, [0, 0, 4], 0.1458),
            (Entry::D, [0, 0, 0], -0.0175),
            (Entry::F, [0, 1, 0], 1.9354),
            (Entry::F, [0, 1, 1], 1.5700),
            (Entry::F, [0, 1, 2], 2.6368),
            (Entry::F, [0, 1, 3], 3.5828),
        ];
        for (entry, exps, coef) in terms {
            ds.model_mut(entry).set_term(&exps, coef).expect("monomial in library");
        }
        ds.q0_learn = 0.3835;
        ds
    }

    /// A controller that reproduces the plant's own structure for the unit
    /// microactuator: `H_d = H`, `a = 1`, `e = b = 1`, `f = 1/R = 1`, so
    /// `f_d ≡ f`.
    pub fn plant_matching_controller() -> DesiredSystem {
        let mut ds = empty(3);
        // H = ½(q-1)² + ½p² + ½qQ² = ½ - q + ½q² + ½p² + ½qQ²
        let terms: [(Entry, [u32; 3], f64); 8] = [
            (Entry::Hd, [0, 0, 0], 0.5),
            (Entry::Hd, [1, 0, 0], -1.0),
            (Entry::Hd, [2, 0, 0], 0.5),
            (Entry::Hd, [0, 2, 0], 0.5),
            (Entry::Hd, [1, 0, 2], 0.5),
            (Entry::A, [0, 0, 0], 1.0),
            (Entry::E, [0, 0, 0], 1.0),
            (Entry::F, [0, 0, 0], 1.0),
        ];
        for (entry, exps, coef) in terms {
            ds.model_mut(entry).set_term(&exps, coef).expect("monomial in library");
        }
        ds
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phcore::{electromech_plant, ElectromechParams};

    fn unit_plant() -> crate::phcore::ElectromechPlant {
        electromech_plant(ElectromechParams::default()).unwrap()
    }

    #[test]
    fn zero_controller_matrices() {
        let ds = fixtures::closed_controller(2);
        let gates = ds.deterministic_gates();
        let x = [0.3, -0.2, 0.7];
        assert_eq!(assemble_jd(&ds, &x, &gates).unwrap(), Mat::zeros(3, 3));
        assert_eq!(assemble_rd(&ds, &x, &gates).unwrap(), Mat::zeros(3, 3));
        assert_eq!(desired_drift(&ds, &x, &gates).unwrap(), [0.0; 3]);
    }

    #[test]
    fn reference_controller_entries() {
        let ds = fixtures::reference_oscillation_controller();
        let gates = ds.deterministic_gates();
        let x = [0.2, 0.4, 0.5];
        let jd = assemble_jd(&ds, &x, &gates).unwrap();
        assert!((jd[(0, 1)] + 0.3035).abs() < 1e-15);
        assert!((jd[(0, 2)] + 4.8265 * 0.4).abs() < 1e-14);
        assert!((jd[(1, 2)] - 0.1458 * 0.5f64.powi(4)).abs() < 1e-15);
        assert_eq!(jd[(2, 0)], -jd[(0, 2)]);
        let rd = assemble_rd(&ds, &x, &gates).unwrap();
        assert!((rd[(0, 0)] + 0.0175).abs() < 1e-15);
        assert_eq!(rd[(1, 1)], 0.0);
    }

    #[test]
    fn damping_constant_entry() {
        let mut ds = fixtures::closed_controller(4);
        ds.model_mut(Entry::E).set_term(&[0, 0, 0], 1.6327).unwrap();
        let gates = ds.deterministic_gates();
        for x in [[0.1, 0.2, 0.3], [-2.0, 5.0, 1.0]] {
            assert_eq!(assemble_rd(&ds, &x, &gates).unwrap()[(1, 1)], 1.6327);
        }
    }

    #[test]
    fn gradient_flow() {
        let mut ds = fixtures::closed_controller(2);
        for e in [Entry::D, Entry::E, Entry::F] {
            ds.model_mut(e).set_term(&[0, 0, 0], 1.0).unwrap();
        }
        for exps in [[2, 0, 0], [0, 2, 0], [0, 0, 2]] {
            ds.model_mut(Entry::Hd).set_term(&exps, 0.5).unwrap();
        }
        let gates = ds.deterministic_gates();
        let x = [0.3, -1.2, 2.0];
        let fd = desired_drift(&ds, &x, &gates).unwrap();
        assert_eq!(fd, [-0.3, 1.2, -2.0]);
    }

    #[test]
    fn matched_controller_has_no_input_or_residual() {
        let plant = unit_plant();
        let ds = fixtures::plant_matching_controller();
        let gates = ds.deterministic_gates();
        for x in [[0.4, 0.1, 0.3], [1.2, -0.5, 0.9]] {
            let fd = desired_drift(&ds, &x, &gates).unwrap();
            let f = plant.drift(&x);
            for i in 0..3 {
                assert!((fd[i] - f[i]).abs() < 1e-14);
            }
            assert!(feedback(&plant, &ds, &x, &gates).unwrap()[0].abs() < 1e-14);
            assert!(residual_eta(&plant, &ds, &x, &gates).unwrap().iter().all(|e| e.abs() < 1e-14));
        }
    }

    #[test]
    fn electromech_projector_structure() {
        let plant = unit_plant();
        let ds = fixtures::reference_oscillation_controller();
        let gates = ds.deterministic_gates();
        let x = [0.2, 0.1, 0.3835];
        let fd = desired_drift(&ds, &x, &gates).unwrap();
        let f = plant.drift(&x);
        let u = feedback(&plant, &ds, &x, &gates).unwrap();
        assert_eq!(u[0], fd[2] - f[2]);
        let eta = residual_eta(&plant, &ds, &x, &gates).unwrap();
        assert_eq!(eta[2], 0.0);
        assert_eq!(eta[0], fd[0] - f[0]);
        assert_eq!(eta[1], fd[1] - f[1]);
        let cl = closed_loop_drift(&plant, &ds, &x, &gates).unwrap();
        assert_eq!(cl[0], f[0]);
        assert_eq!(cl[1], f[1]);
    }

    #[test]
    fn report_lists_closed_form() {
        let report = controller_report(&fixtures::reference_oscillation_controller());
        assert!(report.contains("H_d = 2.0114 + 2.2373*q - 1.7219*Q^2"));
        assert!(report.contains("e = 0\n"));
        assert!(report.contains("Q(0) = 0.3835"));
        let closed = controller_report(&fixtures::closed_controller(4));
        assert!(closed.contains("active terms: 0 of 245"));
    }
}
