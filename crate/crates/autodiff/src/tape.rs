//! Operation tape and reverse-mode traversal.
//!
//! Nodes are appended in execution order, so node indices already form a
//! topological order and the backward pass is a single reverse sweep.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward closure sees for its node.
pub(crate) struct BackwardArgs<'a, T> {
    pub inputs: Vec<&'a Tensor<T>>,
    /// Whether each input wants a gradient; closures may skip the others.
    pub needs: Vec<bool>,
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
}

pub(crate) type BackwardFn<T> = Box<dyn FnOnce(&BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    op: &'static str,
    value: Tensor<T>,
    parents: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Single-use record of a forward computation.
///
/// A tape is confined to the thread that built it. After [`Tape::backward`]
/// the recorded closures are consumed; a second call is a contract violation.
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
    fault: Option<&'static str>,
    profile: Option<Profile>,
}

/// Wall time per op name. Forward time of an op is measured from the
/// previous recorded node, so it includes any caller work in between.
#[derive(Clone, Debug)]
pub struct Profile {
    pub ops: BTreeMap<&'static str, OpTiming>,
    mark: Instant,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct OpTiming {
    pub count: usize,
    pub forward: Duration,
    pub backward: Duration,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), backward_done: false, fault: None, profile: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Negative-control hook: scales every gradient produced by `op`'s backward
    /// by 1.5 so that gradient checks must flag it.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, op: &'static str) {
        self.fault = Some(op);
    }

    pub fn enable_profiling(&mut self) {
        self.profile = Some(Profile { ops: BTreeMap::new(), mark: Instant::now() });
    }

    pub fn profile(&self) -> Option<&Profile> {
        self.profile.as_ref()
    }

    fn record_forward(&mut self, op: &'static str) {
        if let Some(p) = self.profile.as_mut() {
            let now = Instant::now();
            let t = p.ops.entry(op).or_default();
            t.count += 1;
            t.forward += now - p.mark;
            p.mark = now;
        }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        value.ensure_finite("leaf")?;
        self.record_forward("leaf");
        self.nodes.push(Node { op: "leaf", value, parents: Vec::new(), backward: None, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated into a leaf by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub(crate) fn push(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        parents: &[Var],
        backward: BackwardFn<T>,
    ) -> Result<Var> {
        if self.backward_done {
            return Err(Error::Contract("tape already consumed by backward".into()));
        }
        value.ensure_finite(op)?;
        self.record_forward(op);
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            parents: parents.to_vec(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a single-element `root`. Gradients are retained for
    /// leaves only.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract("backward called twice on the same tape".into()));
        }
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward root must hold one element, has shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), T::one()));

        for i in (0..=root.0).rev() {
            let Some(backward) = self.nodes[i].backward.take() else { continue };
            let Some(grad) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let args = BackwardArgs {
                inputs: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                needs: node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect(),
                output: &node.value,
                grad: &grad,
            };
            let started = self.profile.is_some().then(Instant::now);
            let mut parent_grads = backward(&args);
            if let (Some(p), Some(t0)) = (self.profile.as_mut(), started) {
                p.ops.entry(node.op).or_default().backward += t0.elapsed();
            }
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "{} backward arity", node.op);
            if self.fault == Some(node.op) {
                let c = T::from_f64_lossy(1.5);
                parent_grads.iter_mut().flatten().for_each(|g| g.scale_assign(c));
            }
            for (p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                if g.shape() != self.nodes[p.0].value.shape() {
                    return Err(Error::Contract(format!(
                        "{} backward produced grad {:?} for input {:?}",
                        node.op,
                        g.shape(),
                        self.nodes[p.0].value.shape()
                    )));
                }
                g.ensure_finite(node.op)?;
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        self.grads = grads;
        Ok(())
    }
}
