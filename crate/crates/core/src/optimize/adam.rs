/// Hyperparameters of the ADAM update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamSettings {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected ADAM update of `params` in place.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grad: &[f64], settings: &AdamSettings) {
    assert_eq!(params.len(), grad.len(), "parameter/gradient length mismatch");
    assert_eq!(state.m.len(), params.len(), "optimizer state length mismatch");
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - settings.beta1.powi(t);
    let c2 = 1.0 - settings.beta2.powi(t);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = settings.beta1 * state.m[i] + (1.0 - settings.beta1) * g;
        state.v[i] = settings.beta2 * state.v[i] + (1.0 - settings.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= settings.learning_rate * m_hat / (v_hat.sqrt() + settings.eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = AdamState::new(3);
        let mut p = vec![1.0, -2.0, 0.5];
        adam_step(&mut s, &mut p, &[0.0; 3], &AdamSettings::default());
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_is_signed_learning_rate() {
        let settings = AdamSettings::default();
        let mut s = AdamState::new(2);
        let mut p = vec![0.0, 0.0];
        let g = [0.3, -4.0];
        adam_step(&mut s, &mut p, &g, &settings);
        for (pi, gi) in p.iter().zip(g) {
            let expected = -settings.learning_rate * gi / (gi.abs() + settings.eps);
            assert!((pi - expected).abs() < 1e-18);
        }
    }

    #[test]
    fn minimizes_quadratic() {
        let settings = AdamSettings {
            learning_rate: 0.1,
            ..AdamSettings::default()
        };
        let mut s = AdamState::new(1);
        let mut p = vec![1.0];
        let mut reached = None;
        for k in 0..500 {
            let g = [2.0 * p[0]];
            adam_step(&mut s, &mut p, &g, &settings);
            if p[0].abs() < 1e-3 && reached.is_none() {
                reached = Some(k);
            }
        }
        assert!(reached.is_some(), "final {}", p[0]);
    }
}
