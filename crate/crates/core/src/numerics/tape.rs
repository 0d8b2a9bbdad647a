//! Reverse-mode autodiff tape.
//!
//! Ops append nodes in forward order; [`Tape::backward`] walks them in
//! reverse, calling each node's backward closure and accumulating partials
//! into the node's parents. Leaves (tensors created with
//! `requires_grad(true)`) are registered lazily the first time they feed a
//! recorded op, and their accumulated gradients come back keyed by tensor
//! identity — so a weight-tied tensor used at several sites receives one
//! summed gradient.
//!
//! A tape is built for one forward pass and dropped after backward. An
//! inference tape (`Tape::inference`) records nothing and can be reused for
//! arbitrarily many forward passes without growing.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Backward closure: upstream gradient in, one partial per declared input
/// (positions align with the `inputs` slice passed to [`Tape::push_op`]).
pub(crate) type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>> + Send>;

struct Node {
    /// One slot per op input; `None` marks inputs outside the traced graph.
    parents: Vec<Option<usize>>,
    /// `None` for leaves.
    backward: Option<BackwardFn>,
}

pub struct Tape {
    recording: bool,
    nodes: Vec<Node>,
    /// tensor id -> node index
    node_of: HashMap<u64, usize>,
    /// node index -> tensor id, for leaves only
    leaf_of: HashMap<usize, u64>,
}

impl Tape {
    /// A tape that records every differentiable op.
    pub fn recording() -> Tape {
        Tape { recording: true, nodes: Vec::new(), node_of: HashMap::new(), leaf_of: HashMap::new() }
    }

    /// A no-op tape for inference; never grows.
    pub fn inference() -> Tape {
        Tape { recording: false, nodes: Vec::new(), node_of: HashMap::new(), leaf_of: HashMap::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn node_for_input(&mut self, t: &Tensor) -> Option<usize> {
        if let Some(&idx) = self.node_of.get(&t.id()) {
            return Some(idx);
        }
        if t.is_param() {
            let idx = self.nodes.len();
            self.nodes.push(Node { parents: Vec::new(), backward: None });
            self.node_of.insert(t.id(), idx);
            self.leaf_of.insert(idx, t.id());
            return Some(idx);
        }
        None
    }

    /// Record one op. `backward` must return exactly `inputs.len()` partials,
    /// each shaped like the corresponding input. Does nothing when not
    /// recording or when no input is traced.
    pub(crate) fn push_op(&mut self, inputs: &[&Tensor], output: &Tensor, backward: BackwardFn) {
        if !self.recording {
            return;
        }
        let parents: Vec<Option<usize>> = inputs.iter().map(|t| self.node_for_input(t)).collect();
        if parents.iter().all(Option::is_none) {
            return;
        }
        let idx = self.nodes.len();
        self.nodes.push(Node { parents, backward: Some(backward) });
        self.node_of.insert(output.id(), idx);
    }

    /// Reverse pass from a scalar loss. Replaying on the same tape (without
    /// new forward ops) yields identical gradients: the walk only reads
    /// recorded state.
    pub fn backward(&self, loss: &Tensor) -> Result<Grads> {
        if loss.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let mut by_id: HashMap<u64, Vec<f64>> = HashMap::new();
        let Some(&start) = self.node_of.get(&loss.id()) else {
            // Loss does not depend on any traced tensor: all gradients are zero.
            return Ok(Grads { by_id });
        };
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(start + 1);
        grads.resize_with(start + 1, || None);
        grads[start] = Some(vec![1.0]);

        for i in (0..=start).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(backward) = &node.backward {
                let partials = backward(&g);
                debug_assert_eq!(partials.len(), node.parents.len());
                for (slot, partial) in node.parents.iter().zip(partials) {
                    let Some(p) = *slot else { continue };
                    accumulate(&mut grads[p], partial);
                }
            }
            if let Some(&tensor_id) = self.leaf_of.get(&i) {
                by_id.insert(tensor_id, g);
            }
        }
        Ok(Grads { by_id })
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, partial: Vec<f64>) {
    match slot {
        None => *slot = Some(partial),
        Some(acc) => {
            debug_assert_eq!(acc.len(), partial.len());
            for (a, p) in acc.iter_mut().zip(&partial) {
                *a += p;
            }
        }
    }
}

/// Gradients of a backward pass, keyed by leaf tensor identity. Absent
/// entries mean the leaf did not influence the loss (gradient zero).
pub struct Grads {
    by_id: HashMap<u64, Vec<f64>>,
}

impl Grads {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.by_id.get(&t.id()).map(|v| v.as_slice())
    }

    /// Global L2 norm across all leaf gradients. Summation runs in tensor-id
    /// order (= creation order), so the result is bit-reproducible across
    /// runs regardless of hash-map iteration order.
    pub fn global_norm(&self) -> f64 {
        let mut ids: Vec<&u64> = self.by_id.keys().collect();
        ids.sort();
        ids.iter()
            .flat_map(|id| self.by_id[id].iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_all(&mut self, factor: f64) {
        for v in self.by_id.values_mut() {
            for g in v.iter_mut() {
                *g *= factor;
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}
