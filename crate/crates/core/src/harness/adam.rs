//! Bias-corrected Adam.

use crate::config::AdamConfig;
use crate::Vector;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vector,
    pub second_moment: Vector,
    pub step: u32,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            first_moment: Vector::zeros(len),
            second_moment: Vector::zeros(len),
            step: 0,
        }
    }
}

/// Updates `params` in place from `grad` and advances `state`.
pub fn adam_step(state: &mut AdamState, params: &mut Vector, grad: &Vector, lr: f64, cfg: &AdamConfig) {
    assert_eq!(params.len(), grad.len(), "parameter and gradient lengths differ");
    assert_eq!(state.first_moment.len(), grad.len(), "optimizer state length differs");
    state.step += 1;
    let bias1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bias2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for i in 0..grad.len() {
        let g = grad[i];
        let m = cfg.beta1 * state.first_moment[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * state.second_moment[i] + (1.0 - cfg.beta2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        params[i] -= lr * (m / bias1) / ((v / bias2).sqrt() + cfg.epsilon);
    }
}
