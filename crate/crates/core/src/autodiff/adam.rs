//! Bias-corrected Adam parameter updates.

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment buffers plus the shared step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update over matched parameter and gradient lists.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(invalid(format!(
            "adam_step: {} params, {} grads, state for {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.len() != state.m[i].len() {
            return Err(invalid(format!(
                "adam_step: shape mismatch at parameter {i}: {:?} vs {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let data = p.data_mut();
        for j in 0..data.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = vec![Tensor::scalar(1.0)];
        let grads = vec![Tensor::scalar(1.0)];
        let mut state = AdamState::new(&params);
        adam_step(
            &mut params,
            &grads,
            &mut state,
            &AdamConfig::with_learning_rate(0.001),
        )
        .unwrap();
        let moved = 1.0 - params[0].item().unwrap();
        assert!((moved - 0.001).abs() < 1e-9, "moved {moved}");
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut params = vec![Tensor::new(vec![3], vec![0.4, -0.2, 7.0]).unwrap()];
        let before = params[0].clone();
        let grads = vec![Tensor::zeros(vec![3])];
        let mut state = AdamState::new(&params);
        for _ in 0..10 {
            adam_step(
                &mut params,
                &grads,
                &mut state,
                &AdamConfig::with_learning_rate(0.1),
            )
            .unwrap();
        }
        assert_eq!(params[0], before);
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let mut params = vec![Tensor::new(vec![2], vec![0.5, -0.5]).unwrap()];
            let mut state = AdamState::new(&params);
            for k in 0..100 {
                let g = Tensor::new(vec![2], vec![(k as f64).sin(), (k as f64).cos()]).unwrap();
                adam_step(
                    &mut params,
                    &[g],
                    &mut state,
                    &AdamConfig::with_learning_rate(0.01),
                )
                .unwrap();
            }
            params[0].data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = vec![Tensor::zeros(vec![2])];
        let grads = vec![Tensor::zeros(vec![3])];
        let mut state = AdamState::new(&params);
        assert!(adam_step(
            &mut params,
            &grads,
            &mut state,
            &AdamConfig::with_learning_rate(0.1)
        )
        .is_err());
    }
}
