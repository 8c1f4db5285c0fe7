//! AdamW: adaptive moments with bias correction and decoupled weight decay.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return crate::error::config(format!("learning rate {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return crate::error::config("moment coefficients must lie in [0, 1)");
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 {
            return crate::error::config("eps must be positive and weight decay non-negative");
        }
        Ok(())
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }
}

/// One descent step along `grad` (the gradient of a loss to minimize).
pub fn adamw_step(
    params: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    cfg: &AdamWConfig,
) -> crate::Result<()> {
    if grad.len() != params.len() {
        return crate::error::input("gradient and parameter lengths differ");
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(crate::Error::Numerical(format!(
            "non-finite gradient at coordinate {i}; update refused"
        )));
    }
    if state.m.len() != params.len() {
        *state = AdamState::new(params.len());
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * params[i]);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut p = vec![0.3, -1.2];
        let mut s = AdamState::new(2);
        adamw_step(&mut p, &[0.0, 0.0], &mut s, &AdamWConfig::default()).unwrap();
        assert_eq!(p, vec![0.3, -1.2]);
    }

    #[test]
    fn descends_on_square() {
        let mut p = vec![1.0];
        let mut s = AdamState::new(1);
        let cfg = AdamWConfig { lr: 0.1, ..Default::default() };
        let g = [2.0 * p[0]];
        adamw_step(&mut p, &g, &mut s, &cfg).unwrap();
        assert!(p[0].abs() < 1.0);
    }

    #[test]
    fn converges_on_quadratic() {
        // f(x, y) = (x - 1)^2 + 10 (y + 2)^2, minimum 0 at (1, -2).
        let f = |p: &[f64]| (p[0] - 1.0).powi(2) + 10.0 * (p[1] + 2.0).powi(2);
        let mut p = vec![0.0, 0.0];
        let mut s = AdamState::new(2);
        let cfg = AdamWConfig { lr: 0.1, ..Default::default() };
        for step in 0..200 {
            let lr = cfg.lr * (1.0 - step as f64 / 200.0);
            let g = [2.0 * (p[0] - 1.0), 20.0 * (p[1] + 2.0)];
            adamw_step(&mut p, &g, &mut s, &AdamWConfig { lr, ..cfg.clone() }).unwrap();
        }
        assert!(f(&p) < 1e-6, "loss {}", f(&p));
    }

    #[test]
    fn non_finite_gradient_refused() {
        let mut p = vec![1.0];
        let mut s = AdamState::new(1);
        let err = adamw_step(&mut p, &[f64::NAN], &mut s, &AdamWConfig::default());
        assert!(matches!(err, Err(crate::Error::Numerical(_))));
        assert_eq!(p, vec![1.0]);
        assert_eq!(s.step, 0);
    }
}
