//! Small shared building blocks: parameter binding and plain MLPs.

use crate::rng::Rng;
use crate::tensor::{ParamSet, Tape, Tensor, TensorId};

/// Name -> tape-id map for one forward pass.
pub struct Bound {
    entries: Vec<(String, TensorId)>,
}

impl Bound {
    /// Bind every parameter as a named, gradient-tracked leaf.
    pub fn trainable(tape: &mut Tape, params: &ParamSet) -> Self {
        let entries = params
            .iter()
            .map(|(name, t)| (name.to_string(), tape.param(name, t)))
            .collect();
        Bound { entries }
    }

    /// Bind every parameter as a frozen constant (no gradients).
    pub fn frozen(tape: &mut Tape, params: &ParamSet) -> Self {
        let entries = params
            .iter()
            .map(|(name, t)| (name.to_string(), tape.constant(t.shape.clone(), t.data.clone())))
            .collect();
        Bound { entries }
    }

    pub fn get(&self, name: &str) -> TensorId {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .unwrap_or_else(|| panic!("bound: no parameter named {name:?}"))
    }
}

/// Multi-layer perceptron over a ParamSet. `dims` lists layer widths
/// including input and output; hidden layers use tanh, the output layer is
/// linear (callers add heads as needed).
#[derive(Clone, Debug)]
pub struct Mlp {
    prefix: String,
    dims: Vec<usize>,
}

impl Mlp {
    pub fn new(prefix: &str, dims: Vec<usize>) -> Self {
        assert!(dims.len() >= 2, "mlp: need at least input and output dims");
        Mlp { prefix: prefix.to_string(), dims }
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.dims.len() - 1)
            .flat_map(|i| [format!("{}.w{i}", self.prefix), format!("{}.b{i}", self.prefix)])
            .collect()
    }

    /// Insert freshly initialized weights (scaled by fan-in) and zero biases.
    pub fn init(&self, params: &mut ParamSet, rng: &mut Rng) {
        for i in 0..self.dims.len() - 1 {
            let (fan_in, fan_out) = (self.dims[i], self.dims[i + 1]);
            let scale = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.normal() * scale).collect();
            params.insert(&format!("{}.w{i}", self.prefix), Tensor::new(vec![fan_in, fan_out], w).with_grad());
            params.insert(&format!("{}.b{i}", self.prefix), Tensor::zeros(vec![fan_out]).with_grad());
        }
    }

    /// Forward a [batch, in] activation through the stack.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: TensorId) -> TensorId {
        let mut h = x;
        for i in 0..self.dims.len() - 1 {
            let w = bound.get(&format!("{}.w{i}", self.prefix));
            let b = bound.get(&format!("{}.b{i}", self.prefix));
            let lin = tape.matmul(h, w);
            h = tape.add(lin, b);
            if i + 1 < self.dims.len() - 1 {
                h = tape.tanh(h);
            }
        }
        h
    }
}

/// Row-major flattening of a batch of fixed-width rows.
pub fn rows_to_tensor<const N: usize>(rows: &[[f64; N]]) -> Tensor {
    let mut data = Vec::with_capacity(rows.len() * N);
    for r in rows {
        data.extend_from_slice(r);
    }
    Tensor::new(vec![rows.len(), N], data)
}
