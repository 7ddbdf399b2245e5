//! Gradient engine and training loop.
//!
//! The loss is differentiated exactly through the unrolled fixed-step RK4
//! integration of the closed loop (discretize-then-optimize). Parameters are
//! flattened into a [`ParameterVector`]:
//!
//! ```text
//! [ xi(a), log_alpha(a), xi(beta), log_alpha(beta), ..., xi(H_d), log_alpha(H_d), Q(0) ]
//! ```
//!
//! each block having one entry per library term, for `14 D + 1` in total.

mod adam;
pub(crate) mod adjoint;
mod gradcheck;

use std::path::Path;

use rand::distributions::{Distribution, Open01, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamSettings, AdamState};
pub use adjoint::analytic_drift_jacobian;
pub use gradcheck::{check_gradient, fd_step, GradCheckReport, GRADCHECK_FLOOR};

use crate::controller::{DesiredSystem, Gates, ENTRY_COUNT};
use crate::dictionary::{
    deterministic_gates_with_derivative, l0_penalty, l0_penalty_gradient,
    sample_gates_with_derivative, GateConstants, PolynomialLibrary, SparseLinearModel,
};
use crate::error::{Error, Result};
use crate::integrate::{default_steps, diverged, Trajectory};
use crate::losses::{
    oscillation_cost_with_grad, regulation_cost_with_grad, OscillationWeights, RegulationWeights,
    TotalLossWeights, TrajectoryCotangent,
};
use crate::phcore::PlantSystem;
use adjoint::LinearizableLoop;

/// Base loss assigned to a rollout that leaves the finite/bounded region.
pub const DIVERGENCE_PENALTY: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regulation,
    Oscillation,
}

/// Library and gate settings shared by the seven entry models.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DictionaryConfig {
    pub max_degree: u32,
    pub beta_temp: f64,
    pub gamma_stretch: f64,
    pub zeta_stretch: f64,
    pub init_log_alpha: f64,
    /// Coefficients start uniform in `[-init_xi_scale, init_xi_scale]`.
    pub init_xi_scale: f64,
}

impl Default for DictionaryConfig {
    fn default() -> Self {
        let c = GateConstants::default();
        Self {
            max_degree: 4,
            beta_temp: c.beta_temp,
            gamma_stretch: c.gamma_stretch,
            zeta_stretch: c.zeta_stretch,
            init_log_alpha: 2.0,
            init_xi_scale: 0.1,
        }
    }
}

impl DictionaryConfig {
    pub fn constants(&self) -> GateConstants {
        GateConstants {
            beta_temp: self.beta_temp,
            gamma_stretch: self.gamma_stretch,
            zeta_stretch: self.zeta_stretch,
        }
    }

    pub fn library(&self) -> Result<PolynomialLibrary> {
        PolynomialLibrary::new(crate::controller::STATE_DIM, self.max_degree)
    }
}

/// Everything needed to train one controller.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub task: Task,
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Horizon `T`; the period for the oscillation task.
    pub horizon: f64,
    /// Even step count; `None` means about 200 steps per unit time.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    /// `(q(0), p(0), Q(0))`; `Q(0)` is the starting guess when it is learned.
    pub x0: [f64; 3],
    /// Learn `Q(0)`; defaults to true for oscillation, false for regulation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learn_q0: Option<bool>,
    pub dictionary: DictionaryConfig,
    pub weights: TotalLossWeights,
    pub regulation: RegulationWeights,
    pub oscillation: OscillationWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::Oscillation,
            epochs: 5000,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            horizon: 1.0,
            steps: None,
            x0: [0.5, 0.0, 1.0],
            learn_q0: None,
            dictionary: DictionaryConfig::default(),
            weights: TotalLossWeights::default(),
            regulation: RegulationWeights::default(),
            oscillation: OscillationWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn steps(&self) -> usize {
        self.steps.unwrap_or_else(|| default_steps(self.horizon))
    }

    pub fn learns_q0(&self) -> bool {
        self.learn_q0.unwrap_or(self.task == Task::Oscillation)
    }

    /// `x0` with the charge taken from the model when `Q(0)` is learned.
    pub fn initial_state(&self, ds: &DesiredSystem) -> [f64; 3] {
        let mut x0 = self.x0;
        if self.learns_q0() {
            x0[2] = ds.q0_learn;
        }
        x0
    }

    pub fn adam(&self) -> AdamSettings {
        AdamSettings {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    /// Oscillation weights with the period tied to the horizon.
    pub fn oscillation_weights(&self) -> OscillationWeights {
        OscillationWeights {
            period: self.horizon,
            ..self.oscillation
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be at least 1".into()));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::Config(format!("train.horizon must be positive, got {}", self.horizon)));
        }
        let steps = self.steps();
        if steps < 2 || !steps.is_multiple_of(2) {
            return Err(Error::Config(format!("train.steps must be even and >= 2, got {steps}")));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("train.learning_rate must be positive".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("train.{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return Err(Error::Config("train.adam_eps must be positive".into()));
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("train.x0 must be finite".into()));
        }
        self.dictionary
            .constants()
            .validate()
            .map_err(|e| Error::Config(format!("train.dictionary: {e}")))?;
        if self.dictionary.max_degree == 0 {
            return Err(Error::Config("train.dictionary.max_degree must be >= 1".into()));
        }
        if !(self.dictionary.init_xi_scale.is_finite() && self.dictionary.init_xi_scale >= 0.0) {
            return Err(Error::Config("train.dictionary.init_xi_scale must be >= 0".into()));
        }
        self.weights.validate()?;
        self.regulation.validate()?;
        self.oscillation_weights().validate()?;
        Ok(())
    }

    /// Short stable hash of the configuration, recorded in checkpoints.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(text.as_bytes())[..8])
    }
}

/// Flat parameter vector; see the module docs for the layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector(pub Vec<f64>);

impl ParameterVector {
    pub fn len_for(terms: usize) -> usize {
        2 * ENTRY_COUNT * terms + 1
    }

    pub fn from_system(ds: &DesiredSystem) -> Self {
        let d = ds.library().len();
        let mut v = Vec::with_capacity(Self::len_for(d));
        for m in &ds.models {
            v.extend_from_slice(&m.xi);
            v.extend_from_slice(&m.log_alpha);
        }
        v.push(ds.q0_learn);
        Self(v)
    }

    /// Rebuilds a system with the library and gate constants of `template`.
    pub fn to_system(&self, template: &DesiredSystem) -> Result<DesiredSystem> {
        let d = template.library().len();
        if self.0.len() != Self::len_for(d) {
            return Err(Error::DimensionMismatch(format!(
                "parameter vector has {} entries, expected {}",
                self.0.len(),
                Self::len_for(d)
            )));
        }
        let mut ds = template.clone();
        for (k, m) in ds.models.iter_mut().enumerate() {
            let base = 2 * k * d;
            m.xi.copy_from_slice(&self.0[base..base + d]);
            m.log_alpha.copy_from_slice(&self.0[base + d..base + 2 * d]);
        }
        ds.q0_learn = self.0[self.0.len() - 1];
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn q0_index(&self) -> usize {
        self.0.len() - 1
    }
}

/// Uniform draws in `(0, 1)` for every gate of the seven models.
pub type GateNoise = [Vec<f64>; ENTRY_COUNT];

/// Which gates the loss uses.
#[derive(Clone, Copy, Debug)]
pub enum GateMode<'a> {
    Deterministic,
    Sampled(&'a GateNoise),
}

/// Reproducible per-epoch gate noise: ChaCha8 keyed by the seed, one
/// stream per epoch.
pub fn epoch_noise(seed: u64, epoch: u64, terms: usize) -> GateNoise {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch + 1);
    std::array::from_fn(|_| (0..terms).map(|_| Open01.sample(&mut rng)).collect())
}

/// Template and initial parameters for a configuration: coefficients uniform
/// in `±init_xi_scale`, gates at `init_log_alpha`, `Q(0)` from `x0`.
pub fn initial_system(cfg: &TrainConfig) -> Result<DesiredSystem> {
    let lib = cfg.dictionary.library()?;
    let mut ds = DesiredSystem::zeros(lib, cfg.dictionary.init_log_alpha, cfg.dictionary.constants());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = cfg.dictionary.init_xi_scale;
    if scale > 0.0 {
        let dist = Uniform::new_inclusive(-scale, scale);
        for m in ds.models.iter_mut() {
            for xi in m.xi.iter_mut() {
                *xi = dist.sample(&mut rng);
            }
        }
    }
    ds.q0_learn = cfg.x0[2];
    Ok(ds)
}

/// Loss terms of one evaluation; the column set of the loss log.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub task: f64,
    pub mc: f64,
    pub sparse: f64,
    pub j_mid: f64,
    pub j_eigen: f64,
    pub j_eff: f64,
    pub j_period: f64,
    /// For regulation: `∫(q - q*)²`.
    pub j_reg: f64,
    /// Step at which the rollout diverged, if it did.
    pub diverged_at: Option<usize>,
}

/// Non-smooth choices made by an evaluation: which grid indices attain the
/// mirrored maxima, the sign of `Q(0) - Q(T)` and which gates are clamped.
/// Gradients are exact wherever this stays constant.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct Regime {
    pub argmax_q: usize,
    pub argmax_p: usize,
    pub charge_gap_sign: i8,
    pub clamped: Vec<bool>,
}

/// A loss evaluation with its gradient.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub breakdown: LossBreakdown,
    pub gradient: Option<ParameterVector>,
    pub regime: Regime,
    /// Deterministic or sampled trajectory used by the task cost.
    pub trajectory: Option<Trajectory>,
}

struct GateSet {
    gates: Gates,
    dgates: Gates,
    clamped: Vec<bool>,
}

fn gates_for(ds: &DesiredSystem, mode: GateMode<'_>) -> Result<GateSet> {
    let mut gates: Gates = Default::default();
    let mut dgates: Gates = Default::default();
    for (k, m) in ds.models.iter().enumerate() {
        let (z, dz) = match mode {
            GateMode::Deterministic => deterministic_gates_with_derivative(m),
            GateMode::Sampled(noise) => sample_gates_with_derivative(m, &noise[k])?,
        };
        gates[k] = z;
        dgates[k] = dz;
    }
    let clamped = gates
        .iter()
        .flat_map(|z| z.iter().map(|&v| v == 0.0 || v == 1.0))
        .collect();
    Ok(GateSet {
        gates,
        dgates,
        clamped,
    })
}

struct Rollout {
    /// Grid states `x_0 .. x_N`.
    states: Vec<[f64; 3]>,
    inputs: Vec<Vec<f64>>,
    etas: Vec<[f64; 3]>,
}

fn rollout(lin: &LinearizableLoop<'_>, x0: [f64; 3], h: f64, steps: usize) -> std::result::Result<Rollout, usize> {
    let mut states = Vec::with_capacity(steps + 1);
    let mut inputs = Vec::with_capacity(steps + 1);
    let mut etas = Vec::with_capacity(steps + 1);
    let mut x = x0;
    for k in 0..=steps {
        let p = lin.eval(&x);
        inputs.push(p.input);
        etas.push(p.eta);
        states.push(x);
        if k == steps {
            break;
        }
        let k1 = p.drift;
        let y2: [f64; 3] = std::array::from_fn(|i| x[i] + 0.5 * h * k1[i]);
        let k2 = lin.eval(&y2).drift;
        let y3: [f64; 3] = std::array::from_fn(|i| x[i] + 0.5 * h * k2[i]);
        let k3 = lin.eval(&y3).drift;
        let y4: [f64; 3] = std::array::from_fn(|i| x[i] + h * k3[i]);
        let k4 = lin.eval(&y4).drift;
        x = std::array::from_fn(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
        if diverged(&x) {
            return Err(k + 1);
        }
    }
    Ok(Rollout {
        states,
        inputs,
        etas,
    })
}

impl Rollout {
    fn trajectory(&self, h: f64) -> Trajectory {
        Trajectory {
            times: (0..self.states.len()).map(|k| k as f64 * h).collect(),
            states: self.states.iter().map(|x| x.to_vec()).collect(),
            inputs: self.inputs.clone(),
        }
    }
}

/// The training problem: a plant and a configuration.
pub struct Problem<'a> {
    pub plant: &'a dyn PlantSystem,
    pub cfg: &'a TrainConfig,
    template: DesiredSystem,
}

impl<'a> Problem<'a> {
    pub fn new(plant: &'a dyn PlantSystem, cfg: &'a TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if plant.constant_input_matrix().is_none() {
            return Err(Error::Config(
                "training needs a plant with a state-independent input matrix".into(),
            ));
        }
        let template = initial_system(cfg)?;
        Ok(Self {
            plant,
            cfg,
            template,
        })
    }

    /// Initial parameters for the configuration's seed.
    pub fn initial_parameters(&self) -> ParameterVector {
        ParameterVector::from_system(&self.template)
    }

    pub fn system(&self, params: &ParameterVector) -> Result<DesiredSystem> {
        params.to_system(&self.template)
    }

    pub fn terms(&self) -> usize {
        self.template.library().len()
    }


    /// Loss and, optionally, its gradient with respect to every parameter.
    pub fn evaluate(&self, params: &ParameterVector, mode: GateMode<'_>, with_gradient: bool) -> Result<Evaluation> {
        let ds = self.system(params)?;
        let gs = gates_for(&ds, mode)?;
        let controller = ds.gated(&gs.gates)?;
        let lin = LinearizableLoop::new(self.plant, &controller)?;
        let steps = self.cfg.steps();
        let h = self.cfg.horizon / steps as f64;
        let x0 = self.cfg.initial_state(&ds);

        let sparse: f64 = ds.models.iter().map(l0_penalty).sum();
        let gamma = self.cfg.weights.gamma_sparse;
        let lambda = self.cfg.weights.lambda_mc;

        let ro = match rollout(&lin, x0, h, steps) {
            Ok(r) => r,
            Err(step) => {
                let survived = step.saturating_sub(1) as f64 / steps as f64;
                let total = DIVERGENCE_PENALTY * (2.0 - survived);
                return Ok(Evaluation {
                    breakdown: LossBreakdown {
                        total,
                        task: total,
                        sparse,
                        diverged_at: Some(step),
                        ..Default::default()
                    },
                    gradient: with_gradient.then(|| ParameterVector(vec![0.0; params.len()])),
                    regime: Regime {
                        clamped: gs.clamped,
                        ..Default::default()
                    },
                    trajectory: None,
                });
            }
        };
        let traj = ro.trajectory(h);

        let mut breakdown = LossBreakdown {
            sparse,
            ..Default::default()
        };
        let mut regime = Regime {
            clamped: gs.clamped.clone(),
            ..Default::default()
        };
        let cot = match self.cfg.task {
            Task::Regulation => {
                let (b, cot) = regulation_cost_with_grad(&traj, &self.cfg.regulation)?;
                breakdown.task = b.total;
                breakdown.j_reg = b.regulation;
                breakdown.j_eff = b.effort;
                cot
            }
            Task::Oscillation => {
                let w = self.cfg.oscillation_weights();
                let (b, cot) = oscillation_cost_with_grad(&traj, &w)?;
                breakdown.task = b.total;
                breakdown.j_mid = b.mid;
                breakdown.j_eigen = b.eigen;
                breakdown.j_eff = b.effort;
                breakdown.j_period = b.period;
                regime.argmax_q = mirrored_argmax_index(&traj.component(0));
                regime.argmax_p = mirrored_argmax_index(&traj.component(1));
                let gap = traj.states[0][2] - traj.states[steps][2];
                regime.charge_gap_sign = if gap > 0.0 { 1 } else if gap < 0.0 { -1 } else { 0 };
                cot
            }
        };
        let points = ro.etas.len() as f64;
        breakdown.mc = ro.etas.iter().map(|e| e.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / points;
        breakdown.total = crate::losses::total_loss(breakdown.task, breakdown.mc, sparse, &self.cfg.weights)?;

        let gradient = if with_gradient {
            Some(self.backward(&ds, &gs, &lin, &ro, &cot, h, lambda, gamma))
        } else {
            None
        };
        Ok(Evaluation {
            breakdown,
            gradient,
            regime,
            trajectory: Some(traj),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        ds: &DesiredSystem,
        gs: &GateSet,
        lin: &LinearizableLoop<'_>,
        ro: &Rollout,
        cot: &TrajectoryCotangent,
        h: f64,
        lambda: f64,
        gamma: f64,
    ) -> ParameterVector {
        let d = self.terms();
        let steps = ro.states.len() - 1;
        let mut w_bar: [Vec<f64>; ENTRY_COUNT] = std::array::from_fn(|_| vec![0.0; d]);
        let eta_scale = 2.0 * lambda / ro.etas.len() as f64;
        let eta_bar = |k: usize| -> [f64; 3] { ro.etas[k].map(|e| eta_scale * e) };
        let grid_cotangent = |k: usize| -> [f64; 3] { std::array::from_fn(|i| cot.states[k][i]) };

        // Final grid point: direct cost terms plus input and residual at x_N.
        let zero = [0.0; 3];
        let mut a = {
            let direct = grid_cotangent(steps);
            let eb = eta_bar(steps);
            let back = lin.vjp(&ro.states[steps], &zero, Some(&cot.inputs[steps]), Some(&eb), &mut w_bar);
            std::array::from_fn(|i| direct[i] + back[i])
        };

        for k in (0..steps).rev() {
            let x = ro.states[k];
            // Recompute the stages of step k.
            let k1 = lin.eval(&x).drift;
            let y2: [f64; 3] = std::array::from_fn(|i| x[i] + 0.5 * h * k1[i]);
            let k2 = lin.eval(&y2).drift;
            let y3: [f64; 3] = std::array::from_fn(|i| x[i] + 0.5 * h * k2[i]);
            let k3 = lin.eval(&y3).drift;
            let y4: [f64; 3] = std::array::from_fn(|i| x[i] + h * k3[i]);

            let mut x_bar = a;
            let k4_bar: [f64; 3] = a.map(|v| h / 6.0 * v);
            let mut k3_bar: [f64; 3] = a.map(|v| h / 3.0 * v);
            let mut k2_bar: [f64; 3] = a.map(|v| h / 3.0 * v);
            let mut k1_bar: [f64; 3] = a.map(|v| h / 6.0 * v);

            let y4_bar = lin.vjp(&y4, &k4_bar, None, None, &mut w_bar);
            for i in 0..3 {
                x_bar[i] += y4_bar[i];
                k3_bar[i] += h * y4_bar[i];
            }
            let y3_bar = lin.vjp(&y3, &k3_bar, None, None, &mut w_bar);
            for i in 0..3 {
                x_bar[i] += y3_bar[i];
                k2_bar[i] += 0.5 * h * y3_bar[i];
            }
            let y2_bar = lin.vjp(&y2, &k2_bar, None, None, &mut w_bar);
            for i in 0..3 {
                x_bar[i] += y2_bar[i];
                k1_bar[i] += 0.5 * h * y2_bar[i];
            }
            // Stage one shares its point with the grid input and residual.
            let eb = eta_bar(k);
            let y1_bar = lin.vjp(&x, &k1_bar, Some(&cot.inputs[k]), Some(&eb), &mut w_bar);
            let direct = grid_cotangent(k);
            for i in 0..3 {
                x_bar[i] += y1_bar[i] + direct[i];
            }
            a = x_bar;
        }

        let mut grad = vec![0.0; ParameterVector::len_for(d)];
        for (k, m) in ds.models.iter().enumerate() {
            let base = 2 * k * d;
            let l0 = l0_penalty_gradient(m);
            for j in 0..d {
                grad[base + j] = w_bar[k][j] * gs.gates[k][j];
                grad[base + d + j] = w_bar[k][j] * m.xi[j] * gs.dgates[k][j] + gamma * l0[j];
            }
        }
        if self.cfg.learns_q0() {
            let last = grad.len() - 1;
            grad[last] = a[2];
        }
        ParameterVector(grad)
    }
}

fn mirrored_argmax_index(values: &[f64]) -> usize {
    let n = values.len() - 1;
    let mut best = (0, f64::NEG_INFINITY);
    for k in 0..=n / 2 {
        let d = (values[k] - values[n - k]).abs();
        if d > best.1 {
            best = (k, d);
        }
    }
    best.0
}

/// Loss of the parameters under the given gates.
pub fn loss_of(problem: &Problem<'_>, params: &ParameterVector, mode: GateMode<'_>) -> Result<LossBreakdown> {
    Ok(problem.evaluate(params, mode, false)?.breakdown)
}

/// Loss breakdown and exact gradient of the discretized loss.
pub fn gradient(
    problem: &Problem<'_>,
    params: &ParameterVector,
    mode: GateMode<'_>,
) -> Result<(LossBreakdown, ParameterVector)> {
    let ev = problem.evaluate(params, mode, true)?;
    Ok((ev.breakdown, ev.gradient.expect("gradient requested")))
}

/// Outcome of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_system: DesiredSystem,
    pub best_system: DesiredSystem,
    pub best_epoch: usize,
    /// Deterministic-gate loss of the best system.
    pub best_loss: LossBreakdown,
    /// Deterministic-gate loss of the initial and final parameters.
    pub initial_loss: LossBreakdown,
    pub final_loss: LossBreakdown,
    /// Training-objective breakdown (sampled gates) of every epoch.
    pub history: Vec<LossBreakdown>,
    pub final_trajectory: Option<Trajectory>,
}

/// Runs `cfg.epochs` epochs of ADAM on sampled-gate gradients. After each
/// evaluation the deterministic-gate loss is tracked to select the best
/// parameters. An epoch whose rollout diverges makes no step: the parameters
/// go back to their value before the previous step and the first moments
/// are cleared.
pub fn train(plant: &dyn PlantSystem, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_observer(plant, cfg, |_, _| {})
}

pub fn train_with_observer<O>(plant: &dyn PlantSystem, cfg: &TrainConfig, mut observe: O) -> Result<TrainOutcome>
where
    O: FnMut(usize, &LossBreakdown),
{
    let problem = Problem::new(plant, cfg)?;
    let mut params = problem.initial_parameters();
    let terms = problem.terms();
    let q0_index = params.q0_index();
    let settings = cfg.adam();
    let mut state = AdamState::new(params.len());
    let mut history = Vec::with_capacity(cfg.epochs);

    let initial_loss = loss_of(&problem, &params, GateMode::Deterministic)?;
    let mut best = (initial_loss, params.clone(), 0usize);

    // Parameters before the most recent update, restored when it diverges.
    let mut last_safe = params.clone();
    for epoch in 0..cfg.epochs {
        let noise = epoch_noise(cfg.seed, epoch as u64, terms);
        let (breakdown, mut grad) = gradient(&problem, &params, GateMode::Sampled(&noise))?;
        if !cfg.learns_q0() {
            grad.0[q0_index] = 0.0;
        }
        observe(epoch, &breakdown);
        history.push(breakdown);
        if breakdown.diverged_at.is_some() {
            log::debug!("epoch {epoch}: rollout diverged, restoring previous parameters");
            params = last_safe.clone();
            state.m.iter_mut().for_each(|m| *m = 0.0);
            continue;
        }
        if epoch > 0 {
            let det = loss_of(&problem, &params, GateMode::Deterministic)?;
            if det.total < best.0.total {
                best = (det, params.clone(), epoch);
            }
        }
        last_safe = params.clone();
        adam_step(&mut state, &mut params.0, &grad.0, &settings);
    }

    let final_eval = problem.evaluate(&params, GateMode::Deterministic, false)?;
    if final_eval.breakdown.total < best.0.total {
        best = (final_eval.breakdown, params.clone(), cfg.epochs);
    }
    Ok(TrainOutcome {
        final_system: problem.system(&params)?,
        best_system: problem.system(&best.1)?,
        best_epoch: best.2,
        best_loss: best.0,
        initial_loss,
        final_loss: final_eval.breakdown,
        history,
        final_trajectory: final_eval.trajectory,
    })
}

/// Writes the per-epoch loss log with header
/// `epoch,total,task,mc,sparse,J_mid,J_eigen,J_eff,J_period`.
pub fn write_loss_history<W: std::io::Write>(history: &[LossBreakdown], mut w: W) -> Result<()> {
    writeln!(w, "epoch,total,task,mc,sparse,J_mid,J_eigen,J_eff,J_period")?;
    for (epoch, b) in history.iter().enumerate() {
        writeln!(
            w,
            "{epoch},{},{},{},{},{},{},{},{}",
            b.total, b.task, b.mc, b.sparse, b.j_mid, b.j_eigen, b.j_eff, b.j_period
        )?;
    }
    Ok(())
}

pub fn save_loss_history(history: &[LossBreakdown], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_loss_history(history, std::io::BufWriter::new(file))
}

/// Entry models of a system as a flat list, for callers that only need the models.
pub fn models(ds: &DesiredSystem) -> &[SparseLinearModel; ENTRY_COUNT] {
    &ds.models
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::fixtures;
    use crate::phcore::{electromech_plant, ElectromechParams};

    fn small_cfg(task: Task) -> TrainConfig {
        TrainConfig {
            task,
            epochs: 3,
            horizon: 0.5,
            steps: Some(20),
            x0: [0.5, 0.0, 1.0],
            dictionary: DictionaryConfig {
                max_degree: 2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn parameter_vector_round_trip() {
        let cfg = small_cfg(Task::Oscillation);
        let ds = initial_system(&cfg).unwrap();
        let pv = ParameterVector::from_system(&ds);
        assert_eq!(pv.len(), 14 * 10 + 1);
        assert_eq!(pv.to_system(&ds).unwrap(), ds);
        assert!(ParameterVector(vec![0.0; 3]).to_system(&ds).is_err());
    }

    #[test]
    fn noise_is_reproducible_and_open() {
        let a = epoch_noise(7, 3, 35);
        let b = epoch_noise(7, 3, 35);
        assert_eq!(a, b);
        assert_ne!(a, epoch_noise(7, 4, 35));
        assert!(a.iter().flatten().all(|&u| u > 0.0 && u < 1.0));
    }

    #[test]
    fn closed_gates_make_log_alpha_irrelevant() {
        let plant = electromech_plant(ElectromechParams::default()).unwrap();
        let mut cfg = small_cfg(Task::Regulation);
        cfg.weights.gamma_sparse = 0.0;
        let problem = Problem::new(&plant, &cfg).unwrap();
        let mut ds = fixtures::closed_controller(2);
        ds.q0_learn = 1.0;
        for m in ds.models.iter_mut() {
            m.xi.iter_mut().for_each(|v| *v = 0.3);
        }
        let params = ParameterVector::from_system(&ds);
        let (b, g) = gradient(&problem, &params, GateMode::Deterministic).unwrap();
        assert!(g.0.iter().all(|&v| v == 0.0));
        let mut shifted = ds.clone();
        for m in shifted.models.iter_mut() {
            m.log_alpha.iter_mut().for_each(|v| *v -= 5.0);
        }
        let b2 = loss_of(&problem, &ParameterVector::from_system(&shifted), GateMode::Deterministic).unwrap();
        assert_eq!(b.total, b2.total);
    }

    #[test]
    fn training_is_deterministic() {
        let plant = electromech_plant(ElectromechParams::default()).unwrap();
        let cfg = small_cfg(Task::Oscillation);
        let a = train(&plant, &cfg).unwrap();
        let b = train(&plant, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.final_system, b.final_system);
        assert_eq!(a.history.len(), 3);
    }

    #[test]
    fn loss_log_header() {
        let mut buf = Vec::new();
        write_loss_history(&[LossBreakdown::default()], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("epoch,total,task,mc,sparse,J_mid,J_eigen,J_eff,J_period\n0,0,"));
    }
}
