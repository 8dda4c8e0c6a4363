use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::graph::{Backward, Graph, Var};
use super::tensor::Tensor4;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel running mean and variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

pub enum NormMode<'a> {
    /// Normalise by batch statistics and fold them into the running stats.
    Train(&'a mut RunningStats),
    /// Normalise by the running stats.
    Eval(&'a RunningStats),
}

struct TrainRule {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Backward for TrainRule {
    fn backward(&self, inputs: &[&Tensor4], _: &Tensor4, grad: &Tensor4, wants: &[bool]) -> Vec<Option<Tensor4>> {
        let [n, c, h, w] = grad.shape().0;
        let plane = h * w;
        let m = (n * plane) as f64;
        let gamma = inputs[1].data();
        let gd = grad.data();
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    sum_g[ch] += gd[i];
                    sum_gx[ch] += gd[i] * self.xhat[i];
                }
            }
        }
        let dx = wants[0].then(|| {
            let mut dx = vec![0.0; grad.len()];
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * plane;
                    let k = gamma[ch] * self.inv_std[ch] / m;
                    for i in off..off + plane {
                        dx[i] = k * (m * gd[i] - sum_g[ch] - self.xhat[i] * sum_gx[ch]);
                    }
                }
            }
            Tensor4::from_raw(grad.shape(), dx)
        });
        let dgamma = wants[1].then(|| Tensor4::from_raw(inputs[1].shape(), sum_gx.clone()));
        let dbeta = wants[2].then(|| Tensor4::from_raw(inputs[2].shape(), sum_g.clone()));
        vec![dx, dgamma, dbeta]
    }
}

struct EvalRule {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Backward for EvalRule {
    fn backward(&self, inputs: &[&Tensor4], _: &Tensor4, grad: &Tensor4, wants: &[bool]) -> Vec<Option<Tensor4>> {
        let [n, c, h, w] = grad.shape().0;
        let plane = h * w;
        let gamma = inputs[1].data();
        let gd = grad.data();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        let mut dx = vec![0.0; grad.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    dgamma[ch] += gd[i] * self.xhat[i];
                    dbeta[ch] += gd[i];
                    dx[i] = gd[i] * gamma[ch] * self.inv_std[ch];
                }
            }
        }
        vec![
            wants[0].then(|| Tensor4::from_raw(grad.shape(), dx)),
            wants[1].then(|| Tensor4::from_raw(inputs[1].shape(), dgamma)),
            wants[2].then(|| Tensor4::from_raw(inputs[2].shape(), dbeta)),
        ]
    }
}

/// Per-channel batch normalisation `γ·(x − μ)/√(σ² + ε) + β`.
///
/// Train mode uses the population variance of the batch and updates the
/// running stats with momentum [`BN_MOMENTUM`] (running variance is the
/// unbiased estimate).
pub fn batch_norm(g: &mut Graph, x: Var, gamma: Var, beta: Var, mode: NormMode<'_>) -> Result<Var> {
    let xv = g.value(x);
    let [n, c, h, w] = xv.shape().0;
    let plane = h * w;
    for (name, v) in [("gamma", gamma), ("beta", beta)] {
        if g.value(v).len() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("{name} has {} values for input {}", g.value(v).len(), xv.shape()),
            ));
        }
    }
    let (mean, var, train) = match &mode {
        NormMode::Train(_) => {
            let m = n * plane;
            if m < 2 {
                return Err(Error::Invalid(format!(
                    "batch_norm in train mode needs more than one value per channel, input is {}",
                    xv.shape()
                )));
            }
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * plane;
                    mean[ch] += xv.data()[off..off + plane].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|v| *v /= m as f64);
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * plane;
                    var[ch] += xv.data()[off..off + plane]
                        .iter()
                        .map(|v| (v - mean[ch]).powi(2))
                        .sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= m as f64);
            (mean, var, true)
        }
        NormMode::Eval(stats) => {
            if stats.channels() != c {
                return Err(Error::shape(
                    "batch_norm",
                    format!("running stats for {} channels, input {}", stats.channels(), xv.shape()),
                ));
            }
            (stats.mean.clone(), stats.var.clone(), false)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let gv = g.value(gamma).data();
    let bv = g.value(beta).data();
    let mut xhat = vec![0.0; xv.len()];
    let mut out = vec![0.0; xv.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                xhat[i] = (xv.data()[i] - mean[ch]) * inv_std[ch];
                out[i] = gv[ch] * xhat[i] + bv[ch];
            }
        }
    }
    let shape = xv.shape();
    if let NormMode::Train(stats) = mode {
        if stats.channels() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("running stats for {} channels, input {}", stats.channels(), shape),
            ));
        }
        let m = (n * plane) as f64;
        for ch in 0..c {
            let unbiased = var[ch] * m / (m - 1.0);
            stats.mean[ch] = (1.0 - BN_MOMENTUM) * stats.mean[ch] + BN_MOMENTUM * mean[ch];
            stats.var[ch] = (1.0 - BN_MOMENTUM) * stats.var[ch] + BN_MOMENTUM * unbiased;
        }
    }
    let out = Tensor4::from_raw(shape, out);
    if train {
        g.push("batch_norm", out, &[x, gamma, beta], TrainRule { xhat, inv_std })
    } else {
        g.push("batch_norm", out, &[x, gamma, beta], EvalRule { xhat, inv_std })
    }
}
