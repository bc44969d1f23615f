//! Reverse-mode automatic differentiation over `ndarray` storage.
//!
//! A [`Graph`] is a tape built by eager forward execution: every operation
//! computes its value immediately and records a backward closure. Node ids
//! are monotonically increasing, so insertion order is already a topological
//! order and the backward pass is a single reverse sweep.
//!
//! The tape is generic over [`Scalar`] so the same model code runs at `f32`
//! for training and at `f64` for finite-difference gradient checks.
//!
//! Invariant: every node value is an owned array in standard (row-major)
//! layout, which lets lane-wise ops work on contiguous slices.

use ndarray::ArrayD;
use std::collections::HashMap;
use std::rc::Rc;

pub mod gradcheck;
mod ops;

/// Element type of the tape: `f32` or `f64`.
pub trait Scalar:
    num_traits::Float
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn into_f64(self) -> f64 {
        self
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Backward closure: receives the output gradient, returns one gradient
/// array per parent, in parent order.
type BackwardFn<F> = Box<dyn Fn(&ArrayD<F>) -> Vec<ArrayD<F>>>;

struct Node<F: Scalar> {
    value: Rc<ArrayD<F>>,
    parents: Vec<NodeId>,
    backward: Option<BackwardFn<F>>,
}

/// Computation tape. Create one per forward pass.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    tagged: HashMap<usize, NodeId>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            tagged: HashMap::new(),
        }
    }

    pub(crate) fn push(
        &mut self,
        value: ArrayD<F>,
        parents: Vec<NodeId>,
        backward: Option<BackwardFn<F>>,
    ) -> NodeId {
        debug_assert!(value.is_standard_layout() || value.len() <= 1);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward,
        });
        id
    }

    /// Leaf node holding an externally owned value (inputs, constants).
    pub fn leaf(&mut self, value: ArrayD<F>) -> NodeId {
        let v = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.push(v, vec![], None)
    }

    /// Leaf sharing storage with the caller (used for parameter tensors).
    pub fn leaf_rc(&mut self, value: Rc<ArrayD<F>>) -> NodeId {
        debug_assert!(value.is_standard_layout() || value.len() <= 1);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            parents: vec![],
            backward: None,
        });
        id
    }

    /// Leaf deduplicated by an external tag; repeated calls with the same
    /// tag return the same node so gradients accumulate in one place.
    pub fn leaf_tagged(&mut self, value: Rc<ArrayD<F>>, tag: usize) -> NodeId {
        if let Some(&id) = self.tagged.get(&tag) {
            return id;
        }
        let id = self.leaf_rc(value);
        self.tagged.insert(tag, id);
        id
    }

    /// Node previously registered under `tag`, if any.
    pub fn tagged_node(&self, tag: usize) -> Option<NodeId> {
        self.tagged.get(&tag).copied()
    }

    /// All (tag, node) pairs registered via [`Graph::leaf_tagged`].
    pub fn tagged_nodes(&self) -> impl Iterator<Item = (usize, NodeId)> + '_ {
        self.tagged.iter().map(|(&t, &n)| (t, n))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<F> {
        &self.nodes[id.0].value
    }

    pub(crate) fn value_rc(&self, id: NodeId) -> Rc<ArrayD<F>> {
        Rc::clone(&self.nodes[id.0].value)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, id: NodeId) -> F {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "scalar_value on node of shape {:?}", v.shape());
        *v.iter().next().unwrap()
    }

    /// Reverse sweep from a single-element root node.
    pub fn backward(&self, root: NodeId) -> Gradients<F> {
        let root_val = self.value(root);
        assert_eq!(
            root_val.len(),
            1,
            "backward root must be a scalar, got shape {:?}",
            root_val.shape()
        );
        let mut grads: Vec<Option<ArrayD<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::from_elem(root_val.raw_dim(), F::one()));

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].clone() else { continue };
            let node = &self.nodes[id];
            if let Some(back) = &node.backward {
                let parent_grads = back(&g);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (pid, pg) in node.parents.iter().zip(parent_grads) {
                    debug_assert_eq!(
                        pg.shape(),
                        self.nodes[pid.0].value.shape(),
                        "gradient shape mismatch for parent {}",
                        pid.0
                    );
                    match &mut grads[pid.0] {
                        Some(acc) => *acc = &*acc + &pg,
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
        }
        Gradients { grads }
    }
}

/// Result of a backward pass: per-node gradient arrays.
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the root with respect to `id`, if `id` influenced it.
    pub fn wrt(&self, id: NodeId) -> Option<&ArrayD<F>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<ArrayD<F>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}
