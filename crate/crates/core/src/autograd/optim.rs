//! Optimizers over explicit parameter lists. Each optimizer owns per-slot
//! state buffers matched one-to-one with the parameter tensors it was
//! built for; steps read the tensors' accumulated gradients and update
//! values in place. Gradients are not cleared here — callers zero them
//! explicitly between steps.

use super::Tensor;
use crate::error::{Error, Result};

/// SGD with classic momentum and L2 weight decay folded into the gradient:
/// `v <- momentum*v + (g + wd*p); p <- p - lr*v`.
#[derive(Debug)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    buffers: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(params: &[Tensor], lr: f32, momentum: f32, weight_decay: f32) -> Self {
        assert!(lr > 0.0, "learning rate must be positive");
        assert!((0.0..1.0).contains(&momentum));
        assert!(weight_decay >= 0.0);
        Self {
            lr,
            momentum,
            weight_decay,
            buffers: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.buffers.len() {
            return Err(Error::Config(format!(
                "optimizer built for {} parameters, stepped with {}",
                self.buffers.len(),
                params.len()
            )));
        }
        for (p, buf) in params.iter().zip(&mut self.buffers) {
            if p.numel() != buf.len() {
                return Err(Error::ShapeMismatch {
                    op: "sgd_step",
                    left: p.shape(),
                    right: vec![buf.len()],
                });
            }
            let grad = p.grad_or_zeros();
            let mut values = p.to_vec();
            for ((v, b), g) in values.iter_mut().zip(buf.iter_mut()).zip(&grad) {
                let eff = g + self.weight_decay * *v;
                *b = self.momentum * *b + eff;
                *v -= self.lr * *b;
            }
            p.set_values(&values);
        }
        Ok(())
    }

    /// Momentum buffers, for checkpointing.
    pub fn state(&self) -> &[Vec<f32>] {
        &self.buffers
    }

    pub fn load_state(&mut self, buffers: Vec<Vec<f32>>) -> Result<()> {
        if buffers.len() != self.buffers.len()
            || buffers
                .iter()
                .zip(&self.buffers)
                .any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::Checkpoint(
                "optimizer state does not match parameter set".into(),
            ));
        }
        self.buffers = buffers;
        Ok(())
    }
}

/// Adam with L2 weight decay folded into the gradient; used for the
/// architecture parameters.
#[derive(Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step_count: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &[Tensor], lr: f32, betas: (f32, f32), weight_decay: f32) -> Self {
        Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Config(format!(
                "optimizer built for {} parameters, stepped with {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for ((p, m), v) in params.iter().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad_or_zeros();
            let mut values = p.to_vec();
            for i in 0..values.len() {
                let g = grad[i] + self.weight_decay * values[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                values[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            p.set_values(&values);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(v: Vec<f32>) -> Tensor {
        Tensor::param(&[v.len()], v).unwrap()
    }

    #[test]
    fn vanilla_step() {
        let w = p(vec![1.0]);
        w.accumulate_grad(&[2.0]);
        let mut opt = Sgd::new(std::slice::from_ref(&w), 0.1, 0.0, 0.0);
        opt.step(std::slice::from_ref(&w)).unwrap();
        assert!((w.to_vec()[0] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn weight_decay_without_gradient() {
        // g=0, wd=0.5, w=1, lr=0.1: effective grad 0.5, step to 0.95
        let w = p(vec![1.0]);
        let mut opt = Sgd::new(std::slice::from_ref(&w), 0.1, 0.0, 0.5);
        opt.step(std::slice::from_ref(&w)).unwrap();
        assert!((w.to_vec()[0] - 0.95).abs() < 1e-7);
    }

    #[test]
    fn momentum_matches_hand_unrolled_recurrence() {
        let (lr, mom, g1, g2, w0) = (0.1f32, 0.9f32, 2.0f32, -1.0f32, 1.0f32);
        let w = p(vec![w0]);
        let mut opt = Sgd::new(std::slice::from_ref(&w), lr, mom, 0.0);

        w.accumulate_grad(&[g1]);
        opt.step(std::slice::from_ref(&w)).unwrap();
        w.zero_grad();
        w.accumulate_grad(&[g2]);
        opt.step(std::slice::from_ref(&w)).unwrap();

        let v1 = g1;
        let w1 = w0 - lr * v1;
        let v2 = mom * v1 + g2;
        let w2 = w1 - lr * v2;
        assert!((w.to_vec()[0] - w2).abs() < 1e-6);
    }

    #[test]
    fn step_rejects_mismatched_parameter_set() {
        let w = p(vec![1.0]);
        let mut opt = Sgd::new(std::slice::from_ref(&w), 0.1, 0.0, 0.0);
        let extra = p(vec![1.0, 2.0]);
        assert!(opt.step(&[w, extra]).is_err());
    }
}
