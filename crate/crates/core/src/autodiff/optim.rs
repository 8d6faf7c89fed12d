use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to `params` in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::ShapeMismatch {
                op: "adam",
                left: vec![params.len()],
                right: vec![grads.len()],
            });
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gv;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gv * gv;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *pv -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
