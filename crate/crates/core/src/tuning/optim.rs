use crate::error::{Result, VillmError};
use crate::tensor::Tensor;

/// Adam without weight decay. Parameters and moments are rounded to f32
/// after every step so that a run saved to disk and resumed continues
/// bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[&[usize]]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: shapes.iter().map(|d| Tensor::zeros(d)).collect(),
            v: shapes.iter().map(|d| Tensor::zeros(d)).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(VillmError::Config(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            for (mj, gj) in m.iter_mut().zip(g) {
                *mj = round(self.beta1 * *mj + (1.0 - self.beta1) * gj);
            }
            let v = self.v[i].data_mut();
            for (vj, gj) in v.iter_mut().zip(g) {
                *vj = round(self.beta2 * *vj + (1.0 - self.beta2) * gj * gj);
            }
            let (m, v) = (self.m[i].data(), self.v[i].data());
            for (j, pj) in p.data_mut().iter_mut().enumerate() {
                let update = self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                *pj = round(*pj - update);
            }
        }
        Ok(())
    }
}

fn round(x: f64) -> f64 {
    x as f32 as f64
}
