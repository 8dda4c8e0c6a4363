//! Cross-entropy, Dice and their weighted sum, as plain functions on
//! tensors and as graph ops.

use serde::{Deserialize, Serialize};

use crate::substrate::{add, scale, Backward, Graph, Shape4, Tensor4, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the cross-entropy term.
    pub alpha: f64,
    /// Dice smoothing.
    pub epsilon: f64,
    /// Probabilities are clamped to `[p_min, 1 - p_min]` inside the log.
    pub p_min: f64,
    /// Average Dice over images instead of pooling the whole batch.
    pub per_image_dice: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            epsilon: 1.0,
            p_min: 1e-7,
            per_image_dice: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.p_min > 0.0 && self.p_min < 0.5) {
            return Err(Error::Config(format!("p_min must lie in (0, 0.5), got {}", self.p_min)));
        }
        Ok(())
    }
}

fn check_pair(op: &'static str, p: &Tensor4, y: &Tensor4) -> Result<()> {
    if p.shape() != y.shape() {
        return Err(Error::shape(
            op,
            format!("prediction {} vs target {}", p.shape(), y.shape()),
        ));
    }
    Ok(())
}

fn check_binary(op: &'static str, y: &Tensor4) -> Result<()> {
    if let Some(v) = y.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Invalid(format!("{op}: target must be binary, found {v}")));
    }
    Ok(())
}

/// Mean per-pixel binary cross-entropy.
pub fn bce_loss(p: &Tensor4, y: &Tensor4, p_min: f64) -> Result<f64> {
    check_pair("bce_loss", p, y)?;
    check_binary("bce_loss", y)?;
    let total: f64 = p
        .data()
        .iter()
        .zip(y.data())
        .map(|(&p, &y)| {
            let p = p.clamp(p_min, 1.0 - p_min);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / p.len() as f64)
}

/// `(Σp·y, Σp + Σy)` over each image, or the whole batch as one group.
fn dice_terms(p: &Tensor4, y: &Tensor4, per_image: bool) -> Vec<(f64, f64)> {
    let groups = if per_image { p.shape().n() } else { 1 };
    let size = p.len() / groups;
    p.data()
        .chunks(size)
        .zip(y.data().chunks(size))
        .map(|(p, y)| {
            p.iter()
                .zip(y)
                .fold((0.0, 0.0), |(i, s), (&p, &y)| (i + p * y, s + p + y))
        })
        .collect()
}

/// `1 − (2Σpy + ε)/(Σp + Σy + ε)`, pooled over the batch or averaged
/// over images.
pub fn dice_loss(p: &Tensor4, y: &Tensor4, epsilon: f64, per_image: bool) -> Result<f64> {
    check_pair("dice_loss", p, y)?;
    let terms = dice_terms(p, y, per_image);
    let sum: f64 = terms
        .iter()
        .map(|&(i, s)| 1.0 - (2.0 * i + epsilon) / (s + epsilon))
        .sum();
    Ok(sum / terms.len() as f64)
}

pub fn combined_loss(p: &Tensor4, y: &Tensor4, cfg: &LossConfig) -> Result<f64> {
    Ok(dice_loss(p, y, cfg.epsilon, cfg.per_image_dice)? + cfg.alpha * bce_loss(p, y, cfg.p_min)?)
}

fn scalar(v: f64) -> Tensor4 {
    Tensor4::full(Shape4::new(1, 1, 1, 1), v)
}

struct BceRule {
    target: Tensor4,
    p_min: f64,
}

impl Backward for BceRule {
    fn backward(&self, inputs: &[&Tensor4], _: &Tensor4, grad: &Tensor4, _: &[bool]) -> Vec<Option<Tensor4>> {
        let p = inputs[0];
        let k = grad.data()[0] / p.len() as f64;
        let lo = self.p_min;
        let hi = 1.0 - self.p_min;
        let data = p
            .data()
            .iter()
            .zip(self.target.data())
            .map(|(&p, &y)| {
                // the clamp is flat outside its range
                if p < lo || p > hi {
                    0.0
                } else {
                    k * ((1.0 - y) / (1.0 - p) - y / p)
                }
            })
            .collect();
        vec![Some(Tensor4::from_raw(p.shape(), data))]
    }
}

pub fn bce(g: &mut Graph, p: Var, y: &Tensor4, p_min: f64) -> Result<Var> {
    let value = bce_loss(g.value(p), y, p_min)?;
    let rule = BceRule {
        target: y.clone(),
        p_min,
    };
    g.push("bce", scalar(value), &[p], rule)
}

struct DiceRule {
    target: Tensor4,
    epsilon: f64,
    per_image: bool,
}

impl Backward for DiceRule {
    fn backward(&self, inputs: &[&Tensor4], _: &Tensor4, grad: &Tensor4, _: &[bool]) -> Vec<Option<Tensor4>> {
        let p = inputs[0];
        let terms = dice_terms(p, &self.target, self.per_image);
        let size = p.len() / terms.len();
        let k = grad.data()[0] / terms.len() as f64;
        let mut out = Vec::with_capacity(p.len());
        for (&(i, s), y) in terms.iter().zip(self.target.data().chunks(size)) {
            let den = s + self.epsilon;
            let num = 2.0 * i + self.epsilon;
            out.extend(y.iter().map(|&y| k * (num - 2.0 * y * den) / (den * den)));
        }
        vec![Some(Tensor4::from_raw(p.shape(), out))]
    }
}

pub fn dice(g: &mut Graph, p: Var, y: &Tensor4, epsilon: f64, per_image: bool) -> Result<Var> {
    let value = dice_loss(g.value(p), y, epsilon, per_image)?;
    let rule = DiceRule {
        target: y.clone(),
        epsilon,
        per_image,
    };
    g.push("dice", scalar(value), &[p], rule)
}

/// `dice + α·bce` as a scalar graph node.
pub fn combined(g: &mut Graph, p: Var, y: &Tensor4, cfg: &LossConfig) -> Result<Var> {
    let d = dice(g, p, y, cfg.epsilon, cfg.per_image_dice)?;
    if cfg.alpha == 0.0 {
        return Ok(d);
    }
    let c = bce(g, p, y, cfg.p_min)?;
    let c = scale(g, c, cfg.alpha)?;
    add(g, d, c)
}
