//! Tape-based reverse-mode automatic differentiation.
//!
//! Every differentiable op produces a [`Var`] holding its forward value. When
//! the tape is recording and at least one input is tracked, the op also
//! appends a node with a backward closure. Nodes are appended in execution
//! order, which is a topological order of the graph, so [`Tape::backward`]
//! simply walks the node list in reverse.

mod ops;

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::Arc;

pub use ops::{conv2d, Conv2dSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

type BackwardFn = Box<dyn FnOnce(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

#[derive(Default)]
struct Node {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
struct MacMeter {
    scopes: Vec<String>,
    order: Vec<String>,
    counts: HashMap<String, u64>,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
    consumed: Cell<bool>,
    meter: RefCell<Option<MacMeter>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that records ops for a later backward pass.
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: true,
            consumed: Cell::new(false),
            meter: RefCell::new(None),
        }
    }

    /// A tape that never records; every var it produces is a constant.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clears recorded nodes so the tape can serve another forward/backward.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
        self.consumed.set(false);
    }

    /// A leaf that receives a gradient (when the tape records).
    pub fn leaf(&self, value: impl Into<Arc<Tensor>>) -> Var<'_> {
        let node = self.recording.then(|| self.push(Node::default()));
        Var {
            tape: self,
            value: value.into(),
            node,
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: impl Into<Arc<Tensor>>) -> Var<'_> {
        Var {
            tape: self,
            value: value.into(),
            node: None,
        }
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Propagates `d loss / d node` for every node recorded before `loss`.
    ///
    /// Gradients accumulate additively when a value fans out to several ops.
    /// A tape supports one backward pass; call [`Tape::reset`] before reuse.
    pub fn backward(&self, loss: &Var<'_>) -> Result<Gradients> {
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        if loss.value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss.shape().to_vec()));
        }
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::NotOnTape);
        }
        let root = loss.node.ok_or(Error::NotOnTape)?;
        self.consumed.set(true);

        let mut nodes = self.nodes.borrow_mut();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::full(loss.shape().to_vec(), 1.0));

        for id in (0..=root).rev() {
            let node = std::mem::take(&mut nodes[id]);
            let Some(backward) = node.backward else {
                continue; // leaf: keep its gradient
            };
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let parent_grads = backward(&upstream, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, g) in node.parents.iter().zip(parent_grads) {
                if let (Some(p), Some(g)) = (parent, g) {
                    match &mut grads[*p] {
                        Some(acc) => acc.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Starts counting multiply-accumulates of matmul and convolution ops.
    pub fn enable_mac_meter(&self) {
        *self.meter.borrow_mut() = Some(MacMeter::default());
    }

    /// Attributes MACs recorded until the guard drops to `name`.
    pub fn scope(&self, name: &str) -> ScopeGuard<'_> {
        if let Some(m) = self.meter.borrow_mut().as_mut() {
            m.scopes.push(name.to_string());
        }
        ScopeGuard { tape: self }
    }

    pub(crate) fn add_macs(&self, macs: u64) {
        if let Some(m) = self.meter.borrow_mut().as_mut() {
            let key = m.scopes.last().cloned().unwrap_or_default();
            if !m.counts.contains_key(&key) {
                m.order.push(key.clone());
            }
            *m.counts.entry(key).or_insert(0) += macs;
        }
    }

    /// MAC counts per scope in first-seen order.
    pub fn mac_counts(&self) -> Vec<(String, u64)> {
        match self.meter.borrow().as_ref() {
            Some(m) => m.order.iter().map(|k| (k.clone(), m.counts[k])).collect(),
            None => Vec::new(),
        }
    }

    pub fn total_macs(&self) -> u64 {
        self.mac_counts().iter().map(|(_, n)| n).sum()
    }
}

pub struct ScopeGuard<'t> {
    tape: &'t Tape,
}

impl Drop for ScopeGuard<'_> {
    fn drop(&mut self) {
        if let Some(m) = self.tape.meter.borrow_mut().as_mut() {
            m.scopes.pop();
        }
    }
}

/// Result of a backward pass: gradients of every tracked leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `var`, or `None` if it is untracked or unreachable.
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        var.node.and_then(|id| self.grads.get(id)?.as_ref())
    }

    /// Gradient of `var`, with zeros when it did not influence the loss.
    pub fn get_or_zeros(&self, var: &Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape().to_vec()))
    }
}

/// A value on a tape.
#[derive(Clone)]
pub struct Var<'t> {
    tape: &'t Tape,
    value: Arc<Tensor>,
    node: Option<usize>,
}

impl<'t> Var<'t> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Whether gradients flow through this value.
    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Records a custom op. `backward` receives the upstream gradient and a
    /// flag per parent telling whether that parent needs a gradient, and
    /// returns one optional gradient per parent (same shapes as the parents).
    pub fn from_op<F>(
        op: &'static str,
        value: impl Into<Arc<Tensor>>,
        parents: &[&Var<'t>],
        backward: F,
    ) -> Result<Var<'t>>
    where
        F: FnOnce(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        let tape = parents
            .first()
            .map(|p| p.tape)
            .ok_or_else(|| Error::invalid(op, "op needs at least one input"))?;
        debug_assert!(parents.iter().all(|p| std::ptr::eq(p.tape, tape)));
        let value = value.into();
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let tracked = tape.recording && parents.iter().any(|p| p.node.is_some());
        let node = tracked.then(|| {
            tape.push(Node {
                parents: parents.iter().map(|p| p.node).collect(),
                backward: Some(Box::new(backward)),
            })
        });
        Ok(Var {
            tape,
            value,
            node,
        })
    }
}
