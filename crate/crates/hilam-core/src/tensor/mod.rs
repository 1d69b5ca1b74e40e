//! Reverse-mode differentiation substrate.
//!
//! A [`Tape`] records a fixed set of primitive operations eagerly (values are
//! computed as ops are pushed) and replays them in reverse to accumulate
//! gradients. All arithmetic is 64-bit. The primitive set is closed: matrix
//! multiply (plain and transposed-rhs), add, elementwise multiply, scalar
//! affine, tanh, GELU, softmax over the last axis, RMS normalization, L2
//! normalization over the last axis, gather by index list, concatenate,
//! mean/sum reductions, absolute value, square, detach, and a
//! straight-through pair (forward value of one node, gradient routed to
//! another). Attention is composed from matmul + softmax + a causal additive
//! mask; nothing here is fused.
//!
//! Shape errors are programming errors and panic with the operation name and
//! the offending shapes.

mod adam;
pub mod gradcheck;
mod ops;

pub use adam::AdamState;
pub use ops::MASK_NEG;

use serde::{Deserialize, Serialize};

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor: shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data, requires_grad: false }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n], requires_grad: false }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows/cols view of a 2-D tensor; 1-D tensors are treated as one row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("dims2: tensor of shape {:?} is not 2-D", self.shape),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    /// C = A B, or C = A Bᵀ when `transpose_rhs`.
    Matmul { transpose_rhs: bool },
    /// Elementwise add; rhs may be a row vector `[c]` (broadcast over rows)
    /// or a column `[r,1]` (broadcast over columns).
    Add,
    /// Elementwise multiply; same broadcast rules as Add.
    Mul,
    /// x * scale + shift.
    Affine { scale: f64, shift: f64 },
    Tanh,
    Gelu,
    /// Softmax over the last axis.
    Softmax,
    /// x / sqrt(mean(x^2) + eps) over the last axis.
    RmsNorm,
    /// x / ||x||_2 over the last axis. Panics on zero-norm rows.
    L2Normalize,
    /// Select rows of a 2-D tensor. Adjoint scatter-adds into the source.
    Gather { indices: Vec<usize> },
    /// Concatenate 2-D tensors along `axis` (0 = rows, 1 = cols).
    Concat { axis: usize },
    /// Sum of all elements -> scalar.
    Sum,
    /// Mean of all elements -> scalar.
    Mean,
    /// Row sums: [r,c] -> [r,1].
    SumLast,
    Abs,
    Square,
    /// Identity forward, zero gradient.
    Detach,
    /// Forward value of inputs[0]; gradient routed entirely to inputs[1].
    Ste,
}

pub(crate) struct Node {
    pub op: Op,
    pub inputs: Vec<TensorId>,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
}

/// Ordered record of primitive operations plus named leaf parameters.
///
/// Values are evaluated eagerly while recording, so building the same tape
/// from the same inputs reproduces the same outputs bit for bit.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    params: Vec<(String, TensorId)>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub(crate) fn push(&mut self, op: Op, inputs: Vec<TensorId>, shape: Vec<usize>, data: Vec<f64>) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = match op {
            Op::Detach | Op::Leaf => false,
            Op::Ste => self.nodes[inputs[1].0].requires_grad,
            _ => inputs.iter().any(|id| self.nodes[id.0].requires_grad),
        };
        self.nodes.push(Node { op, inputs, shape, data, requires_grad });
        TensorId(self.nodes.len() - 1)
    }

    /// Bind an unnamed leaf. Gradients are tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        let id = self.push(Op::Leaf, vec![], t.shape.clone(), t.data.clone());
        self.nodes[id.0].requires_grad = t.requires_grad;
        id
    }

    /// Bind a constant leaf (no gradient) without building a Tensor first.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> TensorId {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "constant: shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        self.push(Op::Leaf, vec![], shape, data)
    }

    pub fn scalar_const(&mut self, v: f64) -> TensorId {
        self.constant(vec![1], vec![v])
    }

    /// Bind and register a named parameter leaf. Gradients are always tracked.
    pub fn param(&mut self, name: &str, t: &Tensor) -> TensorId {
        let id = self.push(Op::Leaf, vec![], t.shape.clone(), t.data.clone());
        self.nodes[id.0].requires_grad = true;
        self.params.push((name.to_string(), id));
        id
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn value(&self, id: TensorId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor { shape: n.shape.clone(), data: n.data.clone(), requires_grad: n.requires_grad }
    }

    pub fn scalar_value(&self, id: TensorId) -> f64 {
        let n = &self.nodes[id.0];
        assert_eq!(n.data.len(), 1, "scalar_value: node has shape {:?}", n.shape);
        n.data[0]
    }

    /// Reverse pass from a scalar loss. Returns gradients for every node that
    /// requires them; detached values get zero (absent) gradients.
    pub fn backward(&self, loss: TensorId) -> Gradients {
        let loss_node = &self.nodes[loss.0];
        assert_eq!(
            loss_node.data.len(),
            1,
            "backward: loss must be scalar, got shape {:?}",
            loss_node.shape
        );
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !loss_node.requires_grad {
            return Gradients { grads, params: self.params.clone() };
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            ops::accumulate_adjoints(self, idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads, params: self.params.clone() }
    }
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(String, TensorId)>,
}

impl Gradients {
    /// Gradient for a node, if it participated in the loss.
    pub fn wrt(&self, id: TensorId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Gradient for every registered parameter, zeros for parameters the loss
    /// never touched. Order matches registration order.
    pub fn by_name(&self, tape: &Tape) -> Vec<(String, Vec<f64>)> {
        self.params
            .iter()
            .map(|(name, id)| {
                let g = self.grads[id.0]
                    .clone()
                    .unwrap_or_else(|| vec![0.0; tape.nodes[id.0].data.len()]);
                (name.clone(), g)
            })
            .collect()
    }

    pub fn named(&self, tape: &Tape, name: &str) -> Vec<f64> {
        let (_, id) = self
            .params
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("gradients: no parameter named {name:?}"));
        self.grads[id.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; tape.nodes[id.0].data.len()])
    }
}

/// Ordered collection of named parameter tensors.
///
/// Order is fixed at construction and drives checkpoint layout, so two models
/// built the same way serialize identically.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        assert!(
            self.entries.iter().all(|(n, _)| n != name),
            "paramset: duplicate parameter {name:?}"
        );
        self.entries.push((name.to_string(), tensor));
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .unwrap_or_else(|| panic!("paramset: no parameter named {name:?}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .unwrap_or_else(|| panic!("paramset: no parameter named {name:?}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Bind every parameter onto a tape, returning ids in insertion order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<TensorId> {
        self.entries.iter().map(|(n, t)| tape.param(n, t)).collect()
    }
}
