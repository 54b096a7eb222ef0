use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::Tensor;
use crate::error::{contract, Result};

pub type NodeId = usize;

/// Values handed to a backward rule.
pub struct BackwardArgs<'a> {
    pub inputs: &'a [&'a Tensor],
    pub output: &'a Tensor,
    /// Upstream gradient, same shape as `output`.
    pub grad: &'a Tensor,
}

/// A backward rule returns one gradient per input, each shaped like its input.
pub type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Tensor>>;

struct Node {
    value: Rc<Tensor>,
    inputs: Vec<NodeId>,
    backward: Option<BackwardFn>,
}

/// Define-by-run recording of tensor operations.
///
/// Nodes are appended in evaluation order, so every input id is smaller than
/// the id of the node consuming it. A tape created with [`Tape::no_grad`]
/// still stores values but drops backward rules.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    record: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.len())
            .field("record", &self.record)
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            record: true,
        }
    }

    pub fn no_grad() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers an input tensor (parameter or constant).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Vec::new(), None)
    }

    /// Records an operation with a caller-supplied backward rule.
    ///
    /// This is the hook used by layers whose gradient is not the derivative
    /// of their forward map, such as gradient reversal.
    pub fn custom<'t, F>(&'t self, inputs: &[Var<'t>], output: Tensor, backward: F) -> Var<'t>
    where
        F: Fn(&BackwardArgs<'_>) -> Vec<Tensor> + 'static,
    {
        let ids = inputs
            .iter()
            .map(|v| {
                debug_assert!(std::ptr::eq(v.tape, self), "variable from another tape");
                v.id
            })
            .collect();
        let rule: Option<BackwardFn> = if self.record { Some(Box::new(backward)) } else { None };
        self.push(output, ids, rule)
    }

    fn push(&self, value: Tensor, inputs: Vec<NodeId>, backward: Option<BackwardFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            inputs,
            backward,
        });
        Var { tape: self, id }
    }

    pub fn value(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse traversal from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<GradStore> {
        if !self.record {
            return Err(contract("backward called on a no_grad tape"));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::full(root.value.shape().to_vec(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(rule) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &*nodes[i].value).collect();
            let input_grads = rule(&BackwardArgs {
                inputs: &inputs,
                output: &node.value,
                grad: &grad,
            });
            grads[id] = Some(grad);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (&input, g) in node.inputs.iter().zip(input_grads) {
                debug_assert_eq!(g.shape(), nodes[input].value.shape());
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(GradStore { grads })
    }
}

/// A tensor participating in a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }
}

/// Gradients keyed by node id. Nodes that do not feed the loss have no entry.
#[derive(Debug)]
pub struct GradStore {
    grads: Vec<Option<Tensor>>,
}

impl GradStore {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.get_id(var.id())
    }

    pub fn get_id(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of its shape when it did not affect the loss.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}
