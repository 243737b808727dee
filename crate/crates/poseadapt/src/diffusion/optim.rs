//! Adam optimizer over leaf parameter tensors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub struct Adam {
    params: Vec<Tensor>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: Vec<Tensor>, lr: f64) -> Result<Self> {
        if params.iter().any(|p| !p.requires_grad()) {
            return Err(Error::invalid("adam", "all parameters must track gradients"));
        }
        let m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        Ok(Self {
            params,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Apply one update from the accumulated gradients (missing gradients
    /// count as zero), then clear them.
    pub fn step(&mut self) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in self.params.iter().enumerate() {
            let grad = p.grad().unwrap_or_else(|| vec![0.0; p.len()]);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            p.with_data_mut(|data| {
                for j in 0..data.len() {
                    let g = grad[j];
                    m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                    v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                    let m_hat = m[j] / bc1;
                    let v_hat = v[j] / bc2;
                    data[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                }
            });
            p.zero_grad();
        }
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }
}
