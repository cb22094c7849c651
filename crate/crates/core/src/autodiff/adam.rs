use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// First/second-moment state for one parameter tensor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam with bias correction. One instance owns the state for an ordered
/// list of parameters; `step` must be called with gradients in the same
/// order every time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    pub slots: Vec<AdamSlot>,
}

impl Adam {
    pub fn new(param_sizes: &[usize]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            slots: param_sizes
                .iter()
                .map(|&n| AdamSlot { m: vec![0.0; n], v: vec![0.0; n] })
                .collect(),
        }
    }

    /// One update over all parameters. `params[i]` and `grads[i]` must match
    /// the size used at construction.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != self.slots.len() || grads.len() != self.slots.len() {
            return Err(Error::Shape(format!(
                "adam state has {} slots, got {} params / {} grads",
                self.slots.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient entry {bad} in parameter {i}; training diverged"
                )));
            }
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for ((param, grad), slot) in params.iter_mut().zip(grads).zip(&mut self.slots) {
            debug_assert_eq!(param.len(), slot.m.len());
            for j in 0..param.len() {
                let g = grad[j];
                slot.m[j] = self.beta1 * slot.m[j] + (1.0 - self.beta1) * g;
                slot.v[j] = self.beta2 * slot.v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = slot.m[j] / bc1;
                let v_hat = slot.v[j] / bc2;
                param[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut adam = Adam::new(&[3]);
        let mut p = vec![1.0, -2.0, 0.5];
        let orig = p.clone();
        let g = vec![0.0; 3];
        adam.step(&mut [&mut p], &[&g], 1e-3).unwrap();
        assert_eq!(p, orig);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // Bias correction makes m_hat = g, v_hat = g^2 on step one, so the
        // update is lr * g / (|g| + eps) ~= lr for g = 1.
        let mut adam = Adam::new(&[1]);
        let mut p = vec![0.0];
        adam.step(&mut [&mut p], &[&[1.0][..]], 1e-3).unwrap();
        let moved = -p[0];
        assert!((moved - 1e-3).abs() < 1e-9, "moved {moved}");
    }

    #[test]
    fn steps_are_bitwise_deterministic() {
        let run = || {
            let mut adam = Adam::new(&[2]);
            let mut p = vec![0.3, -0.7];
            for _ in 0..5 {
                let g = vec![p[0] * 2.0, p[1] * 2.0];
                adam.step(&mut [&mut p], &[&g], 1e-2).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut adam = Adam::new(&[1]);
        let mut p = vec![0.0];
        let err = adam.step(&mut [&mut p], &[&[f64::NAN][..]], 1e-3).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }
}
