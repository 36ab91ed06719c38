use std::cell::RefCell;
use std::rc::Rc;

use crate::{Error, Result, Scalar, Tensor};

type BackwardFn<T> = Box<dyn FnOnce(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// A reverse-mode tape. Values flow through [`Var`]s; only operations touching
/// at least one tracked variable are recorded.
///
/// A graph built with [`Graph::inference`] never records anything, so forward
/// passes run without keeping intermediate activations alive.
pub struct Graph<T> {
    tape: Rc<RefCell<Tape<T>>>,
    recording: bool,
}

impl<T> Clone for Graph<T> {
    fn clone(&self) -> Self {
        Self {
            tape: Rc::clone(&self.tape),
            recording: self.recording,
        }
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            tape: Rc::new(RefCell::new(Tape { nodes: Vec::new() })),
            recording: true,
        }
    }

    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub(crate) fn same_tape(&self, other: &Graph<T>) -> bool {
        Rc::ptr_eq(&self.tape, &other.tape)
    }

    pub fn len(&self) -> usize {
        self.tape.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A tracked leaf (a trainable parameter). Untracked on inference graphs.
    pub fn leaf(&self, value: Tensor<T>) -> Var<T> {
        let node = if self.recording {
            let mut tape = self.tape.borrow_mut();
            tape.nodes.push(Node {
                parents: Vec::new(),
                backward: None,
            });
            Some(tape.nodes.len() - 1)
        } else {
            None
        };
        Var {
            value: Rc::new(value),
            node,
            graph: self.clone(),
        }
    }

    /// An untracked input.
    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var {
            value: Rc::new(value),
            node: None,
            graph: self.clone(),
        }
    }

    pub(crate) fn record(
        &self,
        value: Tensor<T>,
        parents: &[&Var<T>],
        backward: impl FnOnce(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<T> {
        let tracked = self.recording && parents.iter().any(|p| p.node.is_some());
        let node = if tracked {
            let mut tape = self.tape.borrow_mut();
            // Untracked parents get a sentinel that backward skips.
            let ids = parents.iter().map(|p| p.node.unwrap_or(usize::MAX)).collect();
            tape.nodes.push(Node {
                parents: ids,
                backward: Some(Box::new(backward)),
            });
            Some(tape.nodes.len() - 1)
        } else {
            None
        };
        Var {
            value: Rc::new(value),
            node,
            graph: self.clone(),
        }
    }

    /// Back-propagates from a scalar `loss` (seed gradient 1) and returns the
    /// gradient of every tracked node reached.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        let root = loss
            .node
            .ok_or_else(|| Error::Graph("loss is not connected to any tracked leaf".into()))?;
        if loss.value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.value.shape()
            )));
        }
        let mut tape = self.tape.borrow_mut();
        let n = tape.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[root] = Some(Tensor::ones(loss.value.shape()));
        let mut out: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        for id in (0..=root).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &mut tape.nodes[id];
            match node.backward.take() {
                None => out[id] = Some(grad),
                Some(f) => {
                    let needs: Vec<bool> = node.parents.iter().map(|&p| p != usize::MAX).collect();
                    let parents = node.parents.clone();
                    let parent_grads = f(&grad, &needs);
                    for (p, g) in parents.into_iter().zip(parent_grads) {
                        let Some(g) = g else { continue };
                        if p == usize::MAX {
                            continue;
                        }
                        match &mut grads[p] {
                            Some(acc) => acc.add_assign(&g)?,
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads: out })
    }
}

/// Gradients of tracked leaves after [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a leaf; `None` if the leaf did not influence the loss.
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        var.node.and_then(|id| self.grads.get(id)).and_then(|g| g.as_ref())
    }

    /// Like [`get`](Self::get), but zeros for leaves the loss never reached.
    pub fn get_or_zeros(&self, var: &Var<T>) -> Tensor<T> {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

/// A value on a [`Graph`].
pub struct Var<T> {
    pub(crate) value: Rc<Tensor<T>>,
    pub(crate) node: Option<usize>,
    pub(crate) graph: Graph<T>,
}

impl<T> Clone for Var<T> {
    fn clone(&self) -> Self {
        Self {
            value: Rc::clone(&self.value),
            node: self.node,
            graph: self.graph.clone(),
        }
    }
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    /// Same value, cut from the tape ("stop gradient").
    pub fn detach(&self) -> Var<T> {
        Var {
            value: Rc::clone(&self.value),
            node: None,
            graph: self.graph.clone(),
        }
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        (*self.value).clone()
    }
}
