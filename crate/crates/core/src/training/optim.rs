use crate::params::ParamStore;
use crate::substrate::Tensor4;
use crate::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Bias-corrected AMSGrad: Adam whose denominator uses the running maximum
/// of the corrected second moment.
#[derive(Clone, Debug, PartialEq)]
pub struct Amsgrad {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor4>,
    pub v: Vec<Tensor4>,
    pub v_max: Vec<Tensor4>,
}

impl Amsgrad {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor4> = store.params().iter().map(|p| Tensor4::zeros(p.value.shape())).collect();
        Amsgrad {
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
            t: 0,
            m: zeros.clone(),
            v: zeros.clone(),
            v_max: zeros,
        }
    }

    /// Applies one update from the gradients held in `store`. Nothing is
    /// changed if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Invalid(format!("learning rate must be positive, got {lr}")));
        }
        if store.len() != self.m.len() {
            return Err(Error::Invalid(format!(
                "optimizer tracks {} tensors but the model has {}",
                self.m.len(),
                store.len()
            )));
        }
        for (p, m) in store.params().iter().zip(&self.m) {
            if p.grad.shape() != m.shape() {
                return Err(Error::shape(
                    "amsgrad",
                    format!("{}: {} vs {}", p.name, p.grad.shape(), m.shape()),
                ));
            }
            if !p.grad.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("gradient of {}", p.name),
                });
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powf(self.t as f64);
        let c2 = 1.0 - self.beta2.powf(self.t as f64);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (k, p) in store.params_mut().iter_mut().enumerate() {
            let g = p.grad.data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let vmax = self.v_max[k].data_mut();
            let theta = p.value.data_mut();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                vmax[i] = vmax[i].max(v[i] / c2);
                theta[i] -= lr * (m[i] / c1) / (vmax[i].sqrt() + eps);
            }
        }
        Ok(())
    }
}
