use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::{Error, Result};

/// AdamW with decoupled weight decay. Moment buffers are addressed by the
/// position of each parameter in the slice handed to [`OptimizerState::step`],
/// so callers must keep a stable parameter order across steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: u64,
    #[serde(skip)]
    moments: Vec<(Vec<f32>, Vec<f32>)>,
}

impl OptimizerState {
    pub fn new(lr: f32) -> Self {
        OptimizerState {
            lr,
            beta1: 0.95,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter. Gradients are read but left
    /// untouched; resetting them is the caller's job.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor)]) -> Result<()> {
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|(_, p)| (vec![0.0; p.numel()], vec![0.0; p.numel()]))
                .collect();
        }
        assert_eq!(
            self.moments.len(),
            params.len(),
            "parameter set changed between optimizer steps"
        );

        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);

        for ((name, param), (m, v)) in params.iter_mut().zip(self.moments.iter_mut()) {
            let updated = param.with_grad(|grad| -> Result<Vec<f32>> {
                let grad = grad.ok_or_else(|| Error::MissingGrad { name: name.clone() })?;
                let mut next = param.data().to_vec();
                for i in 0..next.len() {
                    let g = grad[i];
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    next[i] -=
                        self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * next[i]);
                }
                Ok(next)
            })?;
            param.replace_data(updated);
        }
        Ok(())
    }

    /// Moment buffers in parameter order, for checkpointing.
    pub fn moments(&self) -> &[(Vec<f32>, Vec<f32>)] {
        &self.moments
    }

    pub fn restore_moments(&mut self, moments: Vec<(Vec<f32>, Vec<f32>)>, step: u64) {
        self.moments = moments;
        self.step = step;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(data: Vec<f32>) -> Tensor {
        Tensor::from_vec(vec![data.len()], data)
            .unwrap()
            .with_requires_grad()
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params_unchanged() {
        let mut w = param(vec![1.0, -2.0, 3.0]);
        w.zero_grad();
        let mut opt = OptimizerState::new(0.1);
        opt.weight_decay = 0.0;
        let before = w.data().to_vec();
        opt.step(&mut [("w".into(), &mut w)]).unwrap();
        assert_eq!(w.data(), &before[..]);
    }

    #[test]
    fn grads_left_untouched_by_step() {
        let mut w = param(vec![1.0]);
        w.zero_grad();
        w.accumulate_grad(&[2.0]);
        let mut opt = OptimizerState::new(0.1);
        opt.step(&mut [("w".into(), &mut w)]).unwrap();
        assert_eq!(w.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn one_step_on_square_descends() {
        // f(w) = w^2, grad = 2w at w=1
        let mut w = param(vec![1.0]);
        w.zero_grad();
        w.accumulate_grad(&[2.0]);
        let mut opt = OptimizerState::new(0.05);
        opt.weight_decay = 0.0;
        opt.step(&mut [("w".into(), &mut w)]).unwrap();
        assert!(w.data()[0].abs() < 1.0);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut w = param(vec![1.0]);
        let mut opt = OptimizerState::new(0.1);
        let err = opt.step(&mut [("w".into(), &mut w)]).unwrap_err();
        assert!(matches!(err, Error::MissingGrad { .. }));
    }
}
