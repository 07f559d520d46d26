//! Adam with bias correction and optional decoupled weight decay.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            weight_decay,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter. Moment buffers are created on the
    /// first call and must keep the same shapes afterwards.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "adam: {} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(Error::Contract("adam: parameter count changed between steps".into()));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::shape("adam", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (k, p) in params.iter_mut().enumerate() {
            let g = grads[k].data();
            let m = self.first[k].data_mut();
            let v = self.second[k].data_mut();
            let w = p.data_mut();
            for i in 0..w.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                if self.weight_decay > 0.0 {
                    w[i] -= self.lr * self.weight_decay * w[i];
                }
                w[i] -= self.lr * m_hat / (v_hat.sqrt() + EPS);
            }
        }
        Ok(())
    }
}
