//! Adam optimizer with bias correction.

use crate::error::{AffectError, Result};

/// Adam hyperparameters. The defaults are the standard ones; the training
/// configuration supplies the learning rate separately.
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter-block optimizer state.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        AdamState {
            step: 0,
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            config,
        }
    }
}

/// One Adam update: `params -= lr * m_hat / (sqrt(v_hat) + eps)`.
/// Increments `state.step` by exactly one.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len()
        || params.len() != state.first_moment.len()
        || params.len() != state.second_moment.len()
    {
        return Err(AffectError::dim(format!(
            "adam_step: params {}, grads {}, moments {}/{}",
            params.len(),
            grads.len(),
            state.first_moment.len(),
            state.second_moment.len()
        )));
    }
    state.step += 1;
    let AdamConfig {
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        let m = &mut state.first_moment[i];
        *m = beta1 * *m + (1.0 - beta1) * g;
        let v = &mut state.second_moment[i];
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![1.0, -2.0, 3.5];
        let grads = vec![0.0; 3];
        let mut state = AdamState::new(3, AdamConfig::default());
        adam_step(&mut params, &grads, &mut state, 1e-3).unwrap();
        assert_eq!(params, vec![1.0, -2.0, 3.5]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        // Closed form: step 1 gives m_hat = g, v_hat = g^2, so the update is
        // lr * g / (|g| + eps) ~= lr * sign(g).
        let mut params = vec![0.0];
        let grads = vec![3.0];
        let mut state = AdamState::new(1, AdamConfig::default());
        let lr = 1e-4;
        adam_step(&mut params, &grads, &mut state, lr).unwrap();
        let update = -params[0];
        assert!((update - lr).abs() < 1e-10, "update {update}");
    }

    #[test]
    fn length_mismatch_rejected() {
        let mut params = vec![0.0; 2];
        let grads = vec![0.0; 3];
        let mut state = AdamState::new(2, AdamConfig::default());
        assert!(adam_step(&mut params, &grads, &mut state, 1e-4).is_err());
    }
}
