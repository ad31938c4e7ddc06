use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Backward rule: receives the upstream gradient and a mask of which
/// parents need a gradient, returns one optional gradient per parent.
type BackwardFn = Box<dyn FnOnce(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    parents: Vec<usize>,
    needs: Vec<bool>,
    backward: Option<BackwardFn>,
}

/// Ordered record of the operations of one forward pass.
///
/// Node ids are assigned in creation order, so every operation's inputs
/// precede it and a reverse sweep over ids is a reverse topological order.
/// Only operations with at least one gradient-requiring input are recorded.
#[derive(Clone, Default)]
pub struct Tape {
    nodes: Rc<RefCell<Vec<Node>>>,
}

/// A tensor value tied to a tape.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: Option<usize>,
    value: Rc<Tensor>,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes (leaves that require grad plus operations).
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let id = requires_grad.then(|| {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                parents: vec![],
                needs: vec![],
                backward: None,
            });
            nodes.len() - 1
        });
        Var {
            tape: self.clone(),
            id,
            value: Rc::new(value),
        }
    }

    pub fn param(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Record an operation. The backward rule is dropped when no parent
    /// requires a gradient.
    pub(crate) fn op<F>(&self, value: Tensor, parents: &[&Var], backward: F) -> Var
    where
        F: FnOnce(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        let needs: Vec<bool> = parents.iter().map(|p| p.requires_grad()).collect();
        let id = if needs.iter().any(|&n| n) {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                parents: parents.iter().map(|p| p.id.unwrap_or(usize::MAX)).collect(),
                needs,
                backward: Some(Box::new(backward)),
            });
            Some(nodes.len() - 1)
        } else {
            None
        };
        Var {
            tape: self.clone(),
            id,
            value: Rc::new(value),
        }
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Consumes the backward rules recorded so far: a tape supports one
    /// backward pass per forward pass.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if loss.value.len() != 1 {
            return Err(Error::NonScalarLoss(loss.value.shape().to_vec()));
        }
        let mut nodes = self.nodes.borrow_mut();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let Some(root) = loss.id else {
            return Ok(Gradients { grads });
        };
        grads[root] = Some(Tensor::full(loss.value.shape(), 1.0));
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &mut nodes[id];
            match node.backward.take() {
                Some(rule) => {
                    let parent_grads = rule(&g, &node.needs);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for ((&p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&node.needs) {
                        if !need {
                            continue;
                        }
                        let Some(pg) = pg else { continue };
                        match &mut grads[p] {
                            Some(acc) => acc.add_assign(&pg),
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
                // leaf: keep its gradient
                None => grads[id] = Some(g),
            }
        }
        Ok(Gradients { grads })
    }
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub(crate) fn value_rc(&self) -> Rc<Tensor> {
        Rc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Same value, detached from gradient flow.
    pub fn detach(&self) -> Var {
        Var {
            tape: self.tape.clone(),
            id: None,
            value: Rc::clone(&self.value),
        }
    }

    pub fn item(&self) -> Real {
        self.value.item()
    }
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf, `None` when it was not reached.
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        var.id.and_then(|id| self.grads.get(id)).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf; unreachable leaves get exact zeros.
    pub fn get_or_zero(&self, var: &Var) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}
