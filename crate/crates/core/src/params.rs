//! Named parameter storage shared by blocks and models.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::substrate::{Gradients, Graph, RunningStats, Tensor4, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StatsId(pub(crate) usize);

/// A trainable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor4,
    pub grad: Tensor4,
}

#[derive(Clone, Debug)]
pub struct NamedStats {
    pub name: String,
    pub stats: RunningStats,
}

/// Ordered, uniquely named parameters plus batch-norm running stats.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    stats: Vec<NamedStats>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor4) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            grad: Tensor4::zeros(value.shape()),
            name,
            value,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_stats(&mut self, name: impl Into<String>, channels: usize) -> StatsId {
        self.stats.push(NamedStats {
            name: name.into(),
            stats: RunningStats::new(channels),
        });
        StatsId(self.stats.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn stats(&self) -> &[NamedStats] {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut [NamedStats] {
        &mut self.stats
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    /// Overwrites a parameter value; the shape is fixed at creation.
    pub fn set(&mut self, name: &str, value: Tensor4) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))?;
        let p = &mut self.params[i];
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "param",
                format!("{name} is {}, got {}", p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn values(&self) -> Vec<Tensor4> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Records every parameter as a leaf, in store order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p.value.clone())).collect()
    }

    /// Replaces each parameter's gradient with the one in `grads`.
    pub fn load_grads(&mut self, grads: &mut Gradients, vars: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            match grads.take(v) {
                Some(gv) => p.grad = gv,
                None => p.grad = Tensor4::zeros(p.value.shape()),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor4::zeros(p.value.shape());
        }
    }

    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.stats.len() == other.stats.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value.bitwise_eq(&b.value))
            && self.stats.iter().zip(&other.stats).all(|(a, b)| {
                a.name == b.name && bits_eq(&a.stats.mean, &b.stats.mean) && bits_eq(&a.stats.var, &b.stats.var)
            })
    }
}

fn bits_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// He-normal weights (std √(2/fan_in)).
pub fn he_normal<R: Rng + ?Sized>(shape: [usize; 4], rng: &mut R) -> Tensor4 {
    let fan_in = shape[1] * shape[2] * shape[3];
    Tensor4::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}
