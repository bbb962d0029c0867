use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

/// Backward rule: given the gradient of the node's output and a mask of which
/// parents need a gradient, return one optional gradient per parent.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

const PATTERN_SEED: u64 = 0xcbf2_9ce4_8422_2325;

/// Ordered record of the operations that produced every [`Var`] on it.
///
/// Nodes are appended in evaluation order, so parents always precede their
/// children and a single reverse sweep visits each node once. A tape is bound
/// to the thread that builds it.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
    consumed: Cell<bool>,
    pattern: Cell<u64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("recording", &self.recording)
            .field("consumed", &self.consumed.get())
            .finish()
    }
}

impl Tape {
    /// A tape that records backward rules.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
            consumed: Cell::new(false),
            pattern: Cell::new(PATTERN_SEED),
        }
    }

    /// A tape that only evaluates; nothing on it is differentiable.
    pub fn inference() -> Self {
        Self {
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

    /// Trainable input: gradients are reported for it by [`Var::backward`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_node(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: self.recording,
        })
    }

    /// Non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        })
    }

    /// Drop every recorded node so the tape can be reused. Existing vars are
    /// invalidated, which the borrow on `&mut self` enforces.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
        self.consumed.set(false);
        self.pattern.set(PATTERN_SEED);
    }

    /// Hash of the branch taken by every piecewise-linear activation
    /// evaluated on this tape. Two evaluations of the same graph with equal
    /// patterns lie on the same linear piece.
    pub fn activation_pattern(&self) -> u64 {
        self.pattern.get()
    }

    pub(crate) fn mix_pattern(&self, negative: impl Iterator<Item = bool>) {
        // FNV-1a over the branch bits.
        let mut h = self.pattern.get();
        for bit in negative {
            h = (h ^ bit as u64).wrapping_mul(0x0000_0100_0000_01b3);
        }
        self.pattern.set(h);
    }

    pub(crate) fn record<'t>(
        &'t self,
        value: Tensor,
        parents: &[Var<'t>],
        backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'t> {
        let requires_grad = self.recording && parents.iter().any(|p| p.requires_grad());
        let (parents, backward) = if requires_grad {
            let ids = parents.iter().map(|p| p.id).collect();
            (ids, Some(Box::new(backward) as BackwardFn))
        } else {
            (Vec::new(), None)
        };
        self.push_node(Node {
            value: Rc::new(value),
            parents,
            backward,
            requires_grad,
        })
    }

    fn push_node(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn backward_from(&self, loss: usize) -> Result<Gradients> {
        if self.consumed.get() {
            return Err(Error::Autodiff(
                "backward already ran on this tape; reset it before another pass".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss];
        if !root.value.is_scalar() {
            return Err(Error::Autodiff(format!(
                "loss must be scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(Error::Autodiff(
                "loss is detached: it does not depend on any leaf of a recording tape".into(),
            ));
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Tensor>> = (0..=loss).map(|_| None).collect();
        grads[loss] = Some(Tensor::full(root.value.shape(), 1.0));
        for id in (0..=loss).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value, or a dimension error.
    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    /// Propagate gradients from this scalar to every leaf it depends on.
    pub fn backward(&self) -> Result<Gradients> {
        self.tape.backward_from(self.id)
    }
}

/// Gradients of the leaves reached by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf, or `None` if the loss does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }

    /// Gradient for a leaf, zero-filled when the loss does not depend on it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}
