use crate::error::{Error, Result};

use super::tensor::Tensor4;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Reverse-mode rule for one recorded operation.
///
/// `wants[i]` is false for inputs that do not need a gradient; the
/// implementation may return `None` for those.
pub trait Backward: Send + Sync {
    fn backward(&self, inputs: &[&Tensor4], output: &Tensor4, grad: &Tensor4, wants: &[bool]) -> Vec<Option<Tensor4>>;
}

struct Node {
    value: Tensor4,
    parents: Vec<usize>,
    rule: Option<Box<dyn Backward>>,
    requires_grad: bool,
}

/// Append-only tape of tensor values and the rules that produced them.
///
/// Values are immutable once recorded. A graph is built by one forward
/// pass and consumed by [`Graph::backward`]; build a fresh graph per step.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    kinks: Option<KinkSignature>,
}

/// Rolling hash over the branch decisions (ReLU masks, pooling argmaxes)
/// taken during a forward pass. Two passes with equal signatures lie on
/// the same smooth piece of the function.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KinkSignature(u64);

impl KinkSignature {
    const SEED: u64 = 0xcbf2_9ce4_8422_2325;

    fn mix(&mut self, word: u64) {
        self.0 ^= word;
        self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        self.0 ^= self.0 >> 29;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Graph that also records a [`KinkSignature`] of its forward pass.
    pub fn with_kink_tracking() -> Self {
        Graph {
            nodes: Vec::new(),
            kinks: Some(KinkSignature(KinkSignature::SEED)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor4) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            rule: None,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor4) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            rule: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor4 {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn kink_signature(&self) -> Option<KinkSignature> {
        self.kinks
    }

    pub(crate) fn tracks_kinks(&self) -> bool {
        self.kinks.is_some()
    }

    pub(crate) fn note_kinks(&mut self, words: impl IntoIterator<Item = u64>) {
        if let Some(sig) = self.kinks.as_mut() {
            for w in words {
                sig.mix(w);
            }
        }
    }

    /// Records an op output. Rejects non-finite values.
    pub(crate) fn push(
        &mut self,
        op: &'static str,
        value: Tensor4,
        parents: &[Var],
        rule: impl Backward + 'static,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: op.to_string(),
            });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            rule: requires_grad.then(|| Box::new(rule) as Box<dyn Backward>),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Back-propagates from `root`. A scalar root is seeded with 1; any
    /// other root needs an explicit seed of matching shape.
    pub fn backward(&self, root: Var, seed: Option<Tensor4>) -> Result<Gradients> {
        let root_value = &self.nodes[root.0].value;
        let seed = match seed {
            Some(s) => {
                if s.shape() != root_value.shape() {
                    return Err(Error::shape(
                        "backward",
                        format!("seed {} vs root {}", s.shape(), root_value.shape()),
                    ));
                }
                s
            }
            None if root_value.len() == 1 => Tensor4::full(root_value.shape(), 1.0),
            None => {
                return Err(Error::shape(
                    "backward",
                    format!("non-scalar root {} needs a seed", root_value.shape()),
                ))
            }
        };
        let mut grads: Vec<Option<Tensor4>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(rule) = node.rule.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let inputs: Vec<&Tensor4> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let wants: Vec<bool> = node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect();
            let parent_grads = rule.backward(&inputs, &node.value, &g, &wants);
            for ((&p, pg), want) in node.parents.iter().zip(parent_grads).zip(wants) {
                let Some(pg) = pg else { continue };
                if !want {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[p].value.shape());
                match grads[p].as_mut() {
                    Some(acc) => acc.add_assign(&pg),
                    None => grads[p] = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of one backward pass, addressable by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor4>>,
}

impl Gradients {
    /// Gradient of a leaf; `None` if the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor4> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor4> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
