//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is an append-only arena of [`Node`]s. Every primitive computes
//! its value eagerly and records the parent ids it was built from, so creation
//! order is a valid topological order. [`Graph::backward`] walks that order in
//! reverse and expresses every vector-Jacobian product with the same
//! primitives; with `create_graph` set the resulting gradient nodes stay in the
//! graph and can be differentiated again.
//!
//! ```
//! use gradleak::autodiff::Graph;
//!
//! let mut g = Graph::new();
//! let x = g.leaf(&[3], vec![1.0, 2.0, 3.0], true).unwrap();
//! let sq = g.square(x).unwrap();
//! let y = g.sum(sq).unwrap();
//! let grads = g.backward(y, &[x], false).unwrap();
//! assert_eq!(g.values(grads[0]), &[2.0, 4.0, 6.0]);
//! ```

mod backward;
mod ops;

use std::sync::Arc;

use crate::error::{Error, Result};

/// Handle to a node inside one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index map shared by [`Op::Gather`] and [`Op::ScatterAdd`]: output slot `i`
/// reads (or writes) input slot `map[i]`, `None` meaning a structural zero.
pub type IndexMap = Arc<Vec<Option<usize>>>;

#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// Broadcast a one-element node to a larger shape.
    Expand(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Tanh(NodeId),
    Abs(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Clamp { x: NodeId, lo: f64, hi: f64 },
    /// Concatenation along the leading axis.
    Concat(Vec<NodeId>),
    Reshape(NodeId),
    /// Rows `start..end` of the leading axis.
    Slice { x: NodeId, start: usize, end: usize },
    Transpose(NodeId),
    Gather { x: NodeId, map: IndexMap },
    ScatterAdd { x: NodeId, map: IndexMap },
}

impl Op {
    pub fn parents(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => Vec::new(),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![*a, *b],
            Sum(a) | Mean(a) | Expand(a) | Exp(a) | Log(a) | Tanh(a) | Abs(a) | Sqrt(a)
            | Square(a) | Scale(a, _) | AddScalar(a, _) | Reshape(a) | Transpose(a) => vec![*a],
            Clamp { x, .. } | Slice { x, .. } | Gather { x, .. } | ScatterAdd { x, .. } => {
                vec![*x]
            }
            Concat(parts) => parts.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    shape: Vec<usize>,
    values: Arc<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

impl Node {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn op(&self) -> &Op {
        &self.op
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// Append-only computation graph. Confined to a single thread of work.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].values
    }

    /// Shared handle to a node's buffer, for callers that keep values past the graph.
    pub fn values_arc(&self, id: NodeId) -> Arc<Vec<f64>> {
        Arc::clone(&self.nodes[id.0].values)
    }

    /// Value of a one-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].values[0]
    }

    pub fn leaf(&mut self, shape: &[usize], values: Vec<f64>, requires_grad: bool) -> Result<NodeId> {
        self.leaf_shared(shape, Arc::new(values), requires_grad)
    }

    /// Leaf backed by an existing buffer; model parameters enter every graph this way
    /// without being copied.
    pub fn leaf_shared(
        &mut self,
        shape: &[usize],
        values: Arc<Vec<f64>>,
        requires_grad: bool,
    ) -> Result<NodeId> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::shape(
                "leaf",
                format!("shape {:?} needs {} values, got {}", shape, expected, values.len()),
            ));
        }
        Ok(self.push(shape.to_vec(), values, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<NodeId> {
        self.leaf(shape, values, false)
    }

    pub fn scalar_constant(&mut self, value: f64) -> NodeId {
        self.push(Vec::new(), Arc::new(vec![value]), Op::Leaf, false)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> NodeId {
        let n = shape.iter().product();
        self.push(shape.to_vec(), Arc::new(vec![0.0; n]), Op::Leaf, false)
    }

    pub fn ones(&mut self, shape: &[usize]) -> NodeId {
        let n = shape.iter().product();
        self.push(shape.to_vec(), Arc::new(vec![1.0; n]), Op::Leaf, false)
    }

    fn push(&mut self, shape: Vec<usize>, values: Arc<Vec<f64>>, op: Op, requires_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        debug_assert!(op.parents().iter().all(|p| p.0 < self.nodes.len()));
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            shape,
            values,
            op,
            requires_grad,
        });
        id
    }

    fn derived(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op) -> NodeId {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(shape, Arc::new(values), op, requires_grad)
    }

    /// Drop every node created after `len`. Ids at or past `len` become invalid.
    pub(crate) fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }
}
