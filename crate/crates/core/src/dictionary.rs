//! Polynomial dictionaries and hard-concrete L0 gates.
//!
//! Every learnable scalar function of the controller is a [`SparseLinearModel`]:
//! a coefficient per monomial of a [`PolynomialLibrary`] together with a gate
//! location parameter `log α` per monomial. During training the gates are
//! sampled from a stretched, hard-clamped binary concrete distribution; at
//! test time they are evaluated deterministically and can be exactly 0 or 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Mat;

pub const DEFAULT_BETA: f64 = 2.0 / 3.0;
pub const DEFAULT_GAMMA: f64 = -0.1;
pub const DEFAULT_ZETA: f64 = 1.1;

/// Monomials in `n_vars` variables up to total degree `max_degree`.
///
/// Terms are in graded lexicographic order: the constant first, then by
/// increasing total degree, and within a degree by descending exponent of
/// the first variable, then the second, and so on. For `(q, p, Q)` and
/// degree 2 this is `1, q, p, Q, q², qp, qQ, p², pQ, Q²`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LibraryDescriptor", into = "LibraryDescriptor")]
pub struct PolynomialLibrary {
    n_vars: usize,
    max_degree: u32,
    terms: Vec<Vec<u32>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LibraryDescriptor {
    n_vars: usize,
    max_degree: u32,
}

impl TryFrom<LibraryDescriptor> for PolynomialLibrary {
    type Error = Error;
    fn try_from(d: LibraryDescriptor) -> Result<Self> {
        PolynomialLibrary::new(d.n_vars, d.max_degree)
    }
}

impl From<PolynomialLibrary> for LibraryDescriptor {
    fn from(lib: PolynomialLibrary) -> Self {
        LibraryDescriptor {
            n_vars: lib.n_vars,
            max_degree: lib.max_degree,
        }
    }
}

fn push_exponents(n_vars: usize, degree: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if prefix.len() + 1 == n_vars {
        prefix.push(degree);
        out.push(prefix.clone());
        prefix.pop();
        return;
    }
    for e in (0..=degree).rev() {
        prefix.push(e);
        push_exponents(n_vars, degree - e, prefix, out);
        prefix.pop();
    }
}

impl PolynomialLibrary {
    pub fn new(n_vars: usize, max_degree: u32) -> Result<Self> {
        if n_vars == 0 || max_degree == 0 {
            return Err(Error::InvalidArgument(format!(
                "polynomial library needs n_vars >= 1 and max_degree >= 1, got {n_vars}, {max_degree}"
            )));
        }
        let mut terms = Vec::new();
        for degree in 0..=max_degree {
            push_exponents(n_vars, degree, &mut Vec::with_capacity(n_vars), &mut terms);
        }
        Ok(Self {
            n_vars,
            max_degree,
            terms,
        })
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn max_degree(&self) -> u32 {
        self.max_degree
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[Vec<u32>] {
        &self.terms
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_vars {
            return Err(Error::DimensionMismatch(format!(
                "library over {} variables evaluated at a {}-vector",
                self.n_vars,
                x.len()
            )));
        }
        Ok(())
    }

    /// `powers[i][e] = x_i^e` for `e ≤ max_degree`.
    fn powers(&self, x: &[f64]) -> Vec<Vec<f64>> {
        x.iter()
            .map(|&xi| {
                let mut p = Vec::with_capacity(self.max_degree as usize + 1);
                let mut acc = 1.0;
                for _ in 0..=self.max_degree {
                    p.push(acc);
                    acc *= xi;
                }
                p
            })
            .collect()
    }

    /// Monomial values in library order.
    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let pw = self.powers(x);
        Ok(self
            .terms
            .iter()
            .map(|t| t.iter().enumerate().map(|(i, &e)| pw[i][e as usize]).product())
            .collect())
    }

    /// `D x n` matrix of monomial partial derivatives. Stored as a flat
    /// row-major vector because `D` routinely exceeds the [`Mat`] size cap.
    pub fn feature_jacobian(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let n = self.n_vars;
        let pw = self.powers(x);
        let mut jac = vec![0.0; self.terms.len() * n];
        for (j, t) in self.terms.iter().enumerate() {
            for i in 0..n {
                if t[i] == 0 {
                    continue;
                }
                let mut v = t[i] as f64 * pw[i][t[i] as usize - 1];
                for (k, &e) in t.iter().enumerate() {
                    if k != i {
                        v *= pw[k][e as usize];
                    }
                }
                jac[j * n + i] = v;
            }
        }
        Ok(jac)
    }

    /// Values, Jacobian (flat `D x n`) and the weighted Hessian
    /// `Σ_j w_j ∂²θ_j/∂x∂x` in one pass.
    pub fn features_with_derivatives(
        &self,
        x: &[f64],
        hessian_weights: Option<&[f64]>,
    ) -> Result<(Vec<f64>, Vec<f64>, Option<Mat>)> {
        let theta = self.features(x)?;
        let jac = self.feature_jacobian(x)?;
        let hess = match hessian_weights {
            Some(w) => Some(self.weighted_hessian(x, w)?),
            None => None,
        };
        Ok((theta, jac, hess))
    }

    /// `Σ_j w_j ∇²θ_j(x)`.
    pub fn weighted_hessian(&self, x: &[f64], weights: &[f64]) -> Result<Mat> {
        self.check_dim(x)?;
        if weights.len() != self.terms.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for {} terms",
                weights.len(),
                self.terms.len()
            )));
        }
        let n = self.n_vars;
        let pw = self.powers(x);
        let mut hess = Mat::zeros(n, n);
        for (t, &w) in self.terms.iter().zip(weights) {
            if w == 0.0 {
                continue;
            }
            for a in 0..n {
                for b in a..n {
                    let v = if a == b {
                        if t[a] < 2 {
                            continue;
                        }
                        let mut v = (t[a] * (t[a] - 1)) as f64 * pw[a][t[a] as usize - 2];
                        for (k, &e) in t.iter().enumerate() {
                            if k != a {
                                v *= pw[k][e as usize];
                            }
                        }
                        v
                    } else {
                        if t[a] == 0 || t[b] == 0 {
                            continue;
                        }
                        let mut v = (t[a] * t[b]) as f64
                            * pw[a][t[a] as usize - 1]
                            * pw[b][t[b] as usize - 1];
                        for (k, &e) in t.iter().enumerate() {
                            if k != a && k != b {
                                v *= pw[k][e as usize];
                            }
                        }
                        v
                    };
                    hess[(a, b)] += w * v;
                    if a != b {
                        hess[(b, a)] += w * v;
                    }
                }
            }
        }
        Ok(hess)
    }

    /// Human-readable monomial such as `p*Q^2`; the constant is `1`.
    pub fn monomial_name(&self, term: usize, names: &[&str]) -> String {
        let parts: Vec<String> = self.terms[term]
            .iter()
            .zip(names)
            .filter(|(&e, _)| e > 0)
            .map(|(&e, name)| if e == 1 { name.to_string() } else { format!("{name}^{e}") })
            .collect();
        if parts.is_empty() {
            "1".to_string()
        } else {
            parts.join("*")
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Hard-concrete stretch and temperature constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateConstants {
    /// Concrete temperature β in (0, 1].
    pub beta_temp: f64,
    /// Lower stretch γ < 0.
    pub gamma_stretch: f64,
    /// Upper stretch ζ > 1.
    pub zeta_stretch: f64,
}

impl Default for GateConstants {
    fn default() -> Self {
        Self {
            beta_temp: DEFAULT_BETA,
            gamma_stretch: DEFAULT_GAMMA,
            zeta_stretch: DEFAULT_ZETA,
        }
    }
}

impl GateConstants {
    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma_stretch < 0.0
            && self.zeta_stretch > 1.0
            && self.beta_temp > 0.0
            && self.beta_temp <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "gate constants need gamma < 0 < 1 < zeta and beta in (0, 1], got {self:?}"
            )))
        }
    }

    fn stretch(&self, s: f64) -> f64 {
        s * (self.zeta_stretch - self.gamma_stretch) + self.gamma_stretch
    }

    /// `-β log(-γ/ζ)`, the offset inside the L0 sigmoid.
    fn l0_offset(&self) -> f64 {
        -self.beta_temp * (-self.gamma_stretch / self.zeta_stretch).ln()
    }
}

/// One dictionary-parameterized scalar function `Σ_j z_j ξ_j θ_j(x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseLinearModel {
    pub library: PolynomialLibrary,
    pub xi: Vec<f64>,
    pub log_alpha: Vec<f64>,
    #[serde(flatten)]
    pub constants: GateConstants,
}

impl SparseLinearModel {
    /// All coefficients zero, gates at `log_alpha`.
    pub fn zeros(library: PolynomialLibrary, log_alpha: f64, constants: GateConstants) -> Self {
        let d = library.len();
        Self {
            library,
            xi: vec![0.0; d],
            log_alpha: vec![log_alpha; d],
            constants,
        }
    }

    pub fn len(&self) -> usize {
        self.library.len()
    }

    pub fn is_empty(&self) -> bool {
        self.library.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        self.constants.validate()?;
        let d = self.library.len();
        if self.xi.len() != d || self.log_alpha.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "model has {} coefficients and {} gate parameters for {d} terms",
                self.xi.len(),
                self.log_alpha.len()
            )));
        }
        Ok(())
    }

    /// Sets a single coefficient and opens its gate fully; used to build
    /// fixtures from closed-form expressions.
    pub fn set_term(&mut self, exponents: &[u32], coefficient: f64) -> Result<()> {
        let idx = self
            .library
            .terms()
            .iter()
            .position(|t| t.as_slice() == exponents)
            .ok_or_else(|| Error::InvalidArgument(format!("no monomial with exponents {exponents:?}")))?;
        self.xi[idx] = coefficient;
        self.log_alpha[idx] = OPEN_GATE_LOG_ALPHA;
        Ok(())
    }
}

/// `log α` values far enough out to saturate the hard sigmoid.
pub const CLOSED_GATE_LOG_ALPHA: f64 = -1e6;
pub const OPEN_GATE_LOG_ALPHA: f64 = 1e6;

pub fn features(lib: &PolynomialLibrary, x: &[f64]) -> Result<Vec<f64>> {
    lib.features(x)
}

pub fn feature_jacobian(lib: &PolynomialLibrary, x: &[f64]) -> Result<Vec<f64>> {
    lib.feature_jacobian(x)
}

/// Test-time gates `min(1, max(0, σ(log α)(ζ-γ)+γ))`.
pub fn deterministic_gates(model: &SparseLinearModel) -> Vec<f64> {
    let c = model.constants;
    model
        .log_alpha
        .iter()
        .map(|&la| c.stretch(sigmoid(la)).clamp(0.0, 1.0))
        .collect()
}

/// Test-time gates with `∂z/∂log α` (zero where the clamp is active).
pub fn deterministic_gates_with_derivative(model: &SparseLinearModel) -> (Vec<f64>, Vec<f64>) {
    let c = model.constants;
    let span = c.zeta_stretch - c.gamma_stretch;
    model
        .log_alpha
        .iter()
        .map(|&la| {
            let s = sigmoid(la);
            let stretched = c.stretch(s);
            if stretched <= 0.0 {
                (0.0, 0.0)
            } else if stretched >= 1.0 {
                (1.0, 0.0)
            } else {
                (stretched, span * s * (1.0 - s))
            }
        })
        .unzip()
}

/// Training-time gates from uniform noise in (0,1), with `∂z/∂log α`.
pub fn sample_gates_with_derivative(
    model: &SparseLinearModel,
    noise: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if noise.len() != model.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} noise draws for {} gates",
            noise.len(),
            model.len()
        )));
    }
    let c = model.constants;
    let span = c.zeta_stretch - c.gamma_stretch;
    let mut gates = Vec::with_capacity(noise.len());
    let mut dgates = Vec::with_capacity(noise.len());
    for (&u, &la) in noise.iter().zip(&model.log_alpha) {
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "gate noise must lie strictly in (0, 1), got {u}"
            )));
        }
        let s = sigmoid((u.ln() - (1.0 - u).ln() + la) / c.beta_temp);
        let stretched = c.stretch(s);
        if stretched <= 0.0 {
            gates.push(0.0);
            dgates.push(0.0);
        } else if stretched >= 1.0 {
            gates.push(1.0);
            dgates.push(0.0);
        } else {
            gates.push(stretched);
            dgates.push(span * s * (1.0 - s) / c.beta_temp);
        }
    }
    Ok((gates, dgates))
}

pub fn sample_gates(model: &SparseLinearModel, noise: &[f64]) -> Result<Vec<f64>> {
    sample_gates_with_derivative(model, noise).map(|(g, _)| g)
}

/// Expected number of open gates, `Σ σ(log α_j - β log(-γ/ζ))`.
pub fn l0_penalty(model: &SparseLinearModel) -> f64 {
    let off = model.constants.l0_offset();
    model.log_alpha.iter().map(|&la| sigmoid(la + off)).sum()
}

/// `∂ l0_penalty / ∂ log α`.
pub fn l0_penalty_gradient(model: &SparseLinearModel) -> Vec<f64> {
    let off = model.constants.l0_offset();
    model
        .log_alpha
        .iter()
        .map(|&la| {
            let s = sigmoid(la + off);
            s * (1.0 - s)
        })
        .collect()
}

fn check_gates(model: &SparseLinearModel, gates: &[f64]) -> Result<()> {
    if gates.len() != model.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} gates for {} terms",
            gates.len(),
            model.len()
        )));
    }
    Ok(())
}

/// Gated coefficients `ξ ⊙ z`.
pub fn effective_coefficients(model: &SparseLinearModel, gates: &[f64]) -> Result<Vec<f64>> {
    check_gates(model, gates)?;
    Ok(model.xi.iter().zip(gates).map(|(x, z)| x * z).collect())
}

pub fn evaluate(model: &SparseLinearModel, x: &[f64], gates: &[f64]) -> Result<f64> {
    let w = effective_coefficients(model, gates)?;
    let theta = model.library.features(x)?;
    Ok(theta.iter().zip(&w).map(|(t, w)| t * w).sum())
}

pub fn evaluate_gradient(model: &SparseLinearModel, x: &[f64], gates: &[f64]) -> Result<Vec<f64>> {
    let w = effective_coefficients(model, gates)?;
    let jac = model.library.feature_jacobian(x)?;
    let n = model.library.n_vars();
    let mut grad = vec![0.0; n];
    for (j, &wj) in w.iter().enumerate() {
        for (i, g) in grad.iter_mut().enumerate() {
            *g += wj * jac[j * n + i];
        }
    }
    Ok(grad)
}

/// Signed decimal with four places, e.g. `2.2373`.
fn fmt_coefficient(v: f64) -> String {
    format!("{v:.4}")
}

/// Polynomial string of the test-time model, e.g. `2.0114 + 2.2373*q - 1.7219*Q^2`.
///
/// Only terms whose deterministic gate is at least 0.5 are printed, with the
/// gated coefficient `ξ z` to four decimals. An empty expression prints `0`.
pub fn export_expression(model: &SparseLinearModel, variable_names: &[&str]) -> String {
    let gates = deterministic_gates(model);
    let mut out = String::new();
    for (j, (&z, &xi)) in gates.iter().zip(&model.xi).enumerate() {
        if z < 0.5 {
            continue;
        }
        let coef = xi * z;
        let mono = model.library.monomial_name(j, variable_names);
        let body = if mono == "1" {
            fmt_coefficient(coef.abs())
        } else {
            format!("{}*{mono}", fmt_coefficient(coef.abs()))
        };
        if out.is_empty() {
            if coef < 0.0 {
                out.push('-');
            }
            out.push_str(&body);
        } else {
            out.push_str(if coef < 0.0 { " - " } else { " + " });
            out.push_str(&body);
        }
    }
    if out.is_empty() {
        "0".to_string()
    } else {
        out
    }
}

/// Number of terms with deterministic gate ≥ 0.5.
pub fn active_terms(model: &SparseLinearModel) -> usize {
    deterministic_gates(model).iter().filter(|&&z| z >= 0.5).count()
}
