use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Adam hyperparameters (learning rate is passed per step).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
///
/// A non-finite gradient leaves both `params` and `state` untouched.
pub fn adam_step(
    params: &mut [f64],
    grad: &[f64],
    state: &mut OptimState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grad.len() || params.len() != state.m.len() || state.m.len() != state.v.len()
    {
        return Err(Error::DimensionMismatch(format!(
            "adam: {} params, {} grads, {}/{} moments",
            params.len(),
            grad.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(i));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grad)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![0.3, -1.0];
        let mut s = OptimState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, 1e-3, &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![0.3, -1.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = g, v_hat = g^2, so delta = -lr * g / (|g| + eps)
        let mut p = vec![0.0];
        let mut s = OptimState::new(1);
        adam_step(&mut p, &[1.0], &mut s, 1e-3, &AdamConfig::default()).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-18);
    }

    #[test]
    fn constant_gradient_steps_do_not_grow() {
        let cfg = AdamConfig::default();
        let mut p = vec![0.0];
        let mut s = OptimState::new(1);
        adam_step(&mut p, &[1.0], &mut s, 1e-3, &cfg).unwrap();
        let d1 = p[0].abs();
        let before = p[0];
        adam_step(&mut p, &[1.0], &mut s, 1e-3, &cfg).unwrap();
        let d2 = (p[0] - before).abs();
        assert!(d2 <= d1 * (1.0 + 1e-12), "{d2} vs {d1}");
        assert!((d2 - 1e-3).abs() < 1e-10);
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_side_effects() {
        let mut p = vec![1.0, 2.0];
        let mut s = OptimState::new(2);
        let err = adam_step(&mut p, &[0.1, f64::NAN], &mut s, 1e-3, &AdamConfig::default());
        assert!(matches!(err, Err(Error::NonFiniteGradient(1))));
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(s, OptimState::new(2));
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let mut p = vec![1.0];
        let mut s = OptimState::new(2);
        assert!(adam_step(&mut p, &[0.0], &mut s, 1e-3, &AdamConfig::default()).is_err());
    }

    #[test]
    fn minimizes_a_quadratic() {
        let cfg = AdamConfig::default();
        let mut p = vec![3.0, -2.0];
        let mut s = OptimState::new(2);
        for _ in 0..5000 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * (x - 0.5)).collect();
            adam_step(&mut p, &g, &mut s, 1e-2, &cfg).unwrap();
        }
        assert!(p.iter().all(|x| (x - 0.5).abs() < 1e-3), "{p:?}");
    }
}
