//! Double-precision tensors with reverse-mode differentiation.
//!
//! Every differentiable op appends a record to the [`Graph`] its tracked
//! inputs live in. Vector-Jacobian products are themselves expressed with the
//! same ops, so calling [`grad`] with `create_graph = true` yields gradient
//! tensors that can be differentiated again.

mod kernels;
mod ops;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};

pub use kernels::{ConvCfg, InterpMode, ResampleDir, CUBIC_A};
pub use ops::{
    conv2d, cosine_distance, elementwise, linear, resample2x, softmax_cross_entropy,
    ElementwiseKind,
};

use ops::Op;

pub type NodeId = usize;

/// Input or output value captured by a graph record.
#[derive(Clone)]
struct Slot {
    id: Option<NodeId>,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

struct Node {
    op: Op,
    inputs: Vec<Slot>,
    output: Slot,
}

#[derive(Default)]
struct GraphInner {
    nodes: Vec<Node>,
}

/// Append-only record of differentiable operations. Node ids are assigned in
/// creation order, which is a topological order.
#[derive(Clone, Default)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Graph({} nodes)", self.len())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Registers `value` as a differentiable leaf of this graph.
    pub fn leaf(&self, value: &Tensor) -> Tensor {
        let slot = Slot {
            id: None,
            shape: value.shape.clone(),
            data: value.data.clone(),
        };
        self.push(Op::Leaf, Vec::new(), slot)
    }

    /// Registers every tensor in `values` as a leaf, preserving order.
    pub fn leaves(&self, values: &[Tensor]) -> Vec<Tensor> {
        values.iter().map(|v| self.leaf(v)).collect()
    }

    fn push(&self, op: Op, inputs: Vec<Slot>, mut output: Slot) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        output.id = Some(id);
        let tensor = Tensor {
            shape: output.shape.clone(),
            data: output.data.clone(),
            node: Some(NodeRef {
                graph: self.clone(),
                id,
            }),
        };
        inner.nodes.push(Node { op, inputs, output });
        tensor
    }

    /// Op kind names in node order, for inspection and debugging.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.inner.borrow().nodes.iter().map(|n| n.op.name()).collect()
    }
}

#[derive(Clone)]
struct NodeRef {
    graph: Graph,
    id: NodeId,
}

/// An n-dimensional array of `f64`, optionally attached to a [`Graph`].
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeRef>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.shape);
        if self.data.len() <= 16 {
            d.field("data", &self.data);
        }
        if let Some(n) = &self.node {
            d.field("node", &n.id);
        }
        d.finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidShape {
                op: "tensor",
                reason: format!("dimensions must be positive, got {shape:?}"),
            });
        }
        if numel(shape) != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                reason: format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            });
        }
        Ok(Self::raw(shape.to_vec(), data))
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::raw(Vec::new(), vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::raw(shape.to_vec(), vec![v; numel(shape)])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    /// First element; the value of a scalar tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Mutable access to the values of an untracked tensor.
    ///
    /// Panics if the tensor is attached to a graph: recorded values are immutable.
    pub fn data_mut(&mut self) -> &mut [f64] {
        assert!(self.node.is_none(), "cannot mutate a tensor recorded in a graph");
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Same values, detached from any graph.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node.as_ref().map(|n| n.id)
    }

    pub fn graph(&self) -> Option<&Graph> {
        self.node.as_ref().map(|n| &n.graph)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn slot(&self) -> Slot {
        Slot {
            id: self.node_id(),
            shape: self.shape.clone(),
            data: self.data.clone(),
        }
    }
}

/// A tensor together with a flag saying whether it is optimized.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub tensor: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(tensor: Tensor) -> Self {
        Parameter {
            tensor,
            trainable: true,
        }
    }

    pub fn frozen(tensor: Tensor) -> Self {
        Parameter {
            tensor,
            trainable: false,
        }
    }
}

/// Result of [`grad`].
#[derive(Debug, Clone)]
pub struct Grads {
    /// One gradient per requested tensor, in request order.
    pub tensors: Vec<Tensor>,
    /// Indices of requested tensors the output does not depend on; their
    /// entries in `tensors` are zeros.
    pub unreachable: Vec<usize>,
}

/// Reverse-mode gradient of the scalar `output` with respect to each of `wrt`.
///
/// With `create_graph` set, the returned tensors are recorded in the same
/// graph as `output` and can be differentiated again.
pub fn grad(output: &Tensor, wrt: &[Tensor], create_graph: bool) -> Result<Grads> {
    if !output.is_scalar() {
        return Err(Error::NonScalarOutput(output.shape.clone()));
    }
    let zeros = |t: &Tensor| Tensor::zeros(&t.shape);
    let Some(out_ref) = &output.node else {
        return Ok(Grads {
            tensors: wrt.iter().map(zeros).collect(),
            unreachable: (0..wrt.len()).collect(),
        });
    };
    let graph = out_ref.graph.clone();
    let out_id = out_ref.id;

    let mut targets: Vec<Option<NodeId>> = Vec::with_capacity(wrt.len());
    for t in wrt {
        match &t.node {
            Some(n) if n.graph.same(&graph) && n.id <= out_id => targets.push(Some(n.id)),
            Some(n) if !n.graph.same(&graph) => return Err(Error::GraphMismatch),
            _ => targets.push(None),
        }
    }
    let Some(min_id) = targets.iter().flatten().min().copied() else {
        return Ok(Grads {
            tensors: wrt.iter().map(zeros).collect(),
            unreachable: (0..wrt.len()).collect(),
        });
    };

    // Nodes in [min_id, out_id] that depend on some target.
    let n = out_id + 1;
    let mut relevant = vec![false; n];
    let mut keep = vec![false; n];
    for id in targets.iter().flatten() {
        relevant[*id] = true;
        keep[*id] = true;
    }
    {
        let inner = graph.inner.borrow();
        for id in min_id..n {
            if !relevant[id] {
                relevant[id] = inner.nodes[id]
                    .inputs
                    .iter()
                    .any(|s| s.id.is_some_and(|i| i >= min_id && relevant[i]));
            }
        }
    }

    let mut grads: Vec<Option<Tensor>> = vec![None; n];
    if relevant[out_id] {
        grads[out_id] = Some(Tensor::ones(&output.shape));
    }

    for id in (min_id..n).rev() {
        if !relevant[id] {
            continue;
        }
        let g = if keep[id] { grads[id].clone() } else { grads[id].take() };
        let Some(g) = g else { continue };
        let (op, inputs, out_slot) = {
            let inner = graph.inner.borrow();
            let node = &inner.nodes[id];
            if node.inputs.is_empty() {
                continue;
            }
            (node.op.clone(), node.inputs.clone(), node.output.clone())
        };
        let need: Vec<bool> = inputs
            .iter()
            .map(|s| s.id.is_some_and(|i| i >= min_id && relevant[i]))
            .collect();
        if !need.iter().any(|&b| b) {
            continue;
        }
        let attach = |s: &Slot| Tensor {
            shape: s.shape.clone(),
            data: s.data.clone(),
            node: if create_graph {
                s.id.map(|id| NodeRef {
                    graph: graph.clone(),
                    id,
                })
            } else {
                None
            },
        };
        let in_tensors: Vec<Tensor> = inputs.iter().map(attach).collect();
        let out_tensor = attach(&out_slot);
        let g = if create_graph { g } else { g.detach() };
        let input_grads = op.vjp(&in_tensors, &out_tensor, &g, &need)?;
        for ((slot, gi), needed) in inputs.iter().zip(input_grads).zip(&need) {
            if !needed {
                continue;
            }
            let (Some(in_id), Some(gi)) = (slot.id, gi) else { continue };
            grads[in_id] = Some(match grads[in_id].take() {
                Some(acc) => acc.add(&gi)?,
                None => gi,
            });
        }
    }

    let mut tensors = Vec::with_capacity(wrt.len());
    let mut unreachable = Vec::new();
    for (i, (t, target)) in wrt.iter().zip(&targets).enumerate() {
        match target.and_then(|id| grads[id].clone()) {
            Some(g) => tensors.push(if create_graph { g } else { g.detach() }),
            None => {
                unreachable.push(i);
                tensors.push(zeros(t));
            }
        }
    }
    Ok(Grads {
        tensors,
        unreachable,
    })
}
