//! Minimal reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Graph`] is a tape of nodes built during one forward pass. Leaves are
//! either `constant`s (no gradient) or `leaf`s (gradient requested, e.g.
//! network parameters). Every operation records the backward closure it
//! needs; [`Graph::backward`] walks the tape in reverse and accumulates
//! gradients. Graphs are cheap and short-lived: one per training step or
//! per inference frame.
//!
//! All tensors are `f32` and dynamically shaped. The op set is exactly what
//! the model needs: elementwise math, dense/conv linear algebra, and the
//! spatial sampling ops (warping, deformable gather, unfold/fold, bilinear
//! grid resize).

mod elementwise;
mod linalg;
mod spatial;

pub use spatial::{bilinear_resize_array, fold_plain, unfold_plain};

use ndarray::ArrayD;

/// Dynamically-shaped `f32` tensor.
pub type Data = ArrayD<f32>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Backward rule of a recorded operation.
///
/// `wants[k]` tells the op whether the gradient for input `k` will be used;
/// ops may return `None` for unwanted inputs.
pub(crate) trait BackwardOp {
    fn backward(
        &self,
        out_grad: &Data,
        inputs: &[&Data],
        output: &Data,
        wants: &[bool],
    ) -> Vec<Option<Data>>;
}

struct Node {
    value: Data,
    inputs: Vec<usize>,
    op: Option<Box<dyn BackwardOp>>,
    needs_grad: bool,
}

/// Tape of one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Data>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, if any was accumulated.
    pub fn get(&self, v: Var) -> Option<&Data> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of nodes currently on the tape.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a tensor that does not require gradients (inputs, flows, ...).
    pub fn constant(&mut self, value: Data) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Insert a tensor whose gradient will be accumulated (parameters,
    /// probe inputs in gradient checks).
    pub fn leaf(&mut self, value: Data) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &Data {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Scalar value of a 1-element node.
    pub fn scalar(&self, v: Var) -> f32 {
        let d = self.value(v);
        debug_assert_eq!(d.len(), 1);
        *d.iter().next().expect("scalar node is empty")
    }

    pub(crate) fn push(
        &mut self,
        value: Data,
        inputs: &[Var],
        op: Box<dyn BackwardOp>,
    ) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            // No backward work will ever reach a node whose inputs are all
            // constants, so drop the op and its captured buffers.
            op: if needs_grad { Some(op) } else { None },
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar root. Gradients accumulate for every node
    /// on a path from a `leaf` to the root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be a scalar"
        );
        let mut grads: Vec<Option<Data>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ndarray::Array::ones(self.nodes[root.0].value.raw_dim()));
        for id in (0..=root.0).rev() {
            if grads[id].is_none() {
                continue;
            }
            let node = &self.nodes[id];
            let Some(op) = node.op.as_ref() else {
                continue;
            };
            let out_grad = grads[id].clone().expect("gradient present");
            let input_vals: Vec<&Data> =
                node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let wants: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| self.nodes[i].needs_grad)
                .collect();
            let contribs = op.backward(&out_grad, &input_vals, &node.value, &wants);
            debug_assert_eq!(contribs.len(), node.inputs.len());
            for (slot, contrib) in contribs.into_iter().enumerate() {
                let Some(contrib) = contrib else { continue };
                let pid = node.inputs[slot];
                if !self.nodes[pid].needs_grad {
                    continue;
                }
                debug_assert_eq!(contrib.shape(), self.nodes[pid].value.shape());
                match &mut grads[pid] {
                    Some(acc) => *acc += &contrib,
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Gradients { grads }
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::Data;

    /// Central finite differences of a scalar functional — the independent
    /// oracle used by every gradient check.
    pub fn numeric_grad(f: impl Fn(&Data) -> f32, x: &Data, step: f32) -> Data {
        let mut grad = Data::zeros(x.raw_dim());
        let mut probe = x.clone();
        for idx in 0..x.len() {
            let orig = probe.as_slice_mut().unwrap()[idx];
            probe.as_slice_mut().unwrap()[idx] = orig + step;
            let plus = f(&probe);
            probe.as_slice_mut().unwrap()[idx] = orig - step;
            let minus = f(&probe);
            probe.as_slice_mut().unwrap()[idx] = orig;
            grad.as_slice_mut().unwrap()[idx] = (plus - minus) / (2.0 * step);
        }
        grad
    }

    /// Max relative error between an analytic and a numeric gradient,
    /// normalized by the larger magnitude (with a floor to ignore noise on
    /// near-zero entries).
    pub fn max_rel_err(analytic: &Data, numeric: &Data, floor: f32) -> f32 {
        analytic
            .iter()
            .zip(numeric.iter())
            .map(|(&a, &n)| {
                let denom = a.abs().max(n.abs()).max(floor);
                (a - n).abs() / denom
            })
            .fold(0.0f32, f32::max)
    }
}
