//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its output value, the indices
//! of its inputs and a closure mapping the output gradient to input
//! gradients. Nodes are appended after their inputs, so walking the tape
//! backwards visits them in reverse topological order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{BufferId, ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use super::DiffError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// What a backward closure sees.
pub struct BackCtx<'a, T> {
    pub grad: &'a Tensor<T>,
    pub out: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
}

pub type BackwardFn<T> = Box<dyn Fn(&BackCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    param: Option<ParamId>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    mode: Mode,
    consumed: bool,
    rng: ChaCha8Rng,
    buffer_updates: Vec<(BufferId, Tensor<T>)>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Real> Tape<T> {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            consumed: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
            buffer_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A non-differentiable input leaf (data, masks, baselines).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, None)
    }

    /// A leaf bound to a trainable parameter; its gradient is accumulated
    /// into the store on [`Tape::backward`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push_leaf(store.param(id).value.clone(), Some(id))
    }

    fn push_leaf(&mut self, value: Tensor<T>, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            backward: None,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// Appends an operation node.
    pub fn push_op(&mut self, value: Tensor<T>, inputs: &[Var], backward: BackwardFn<T>) -> Var {
        self.nodes.push(Node {
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            backward: Some(backward),
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub(crate) fn queue_buffer_update(&mut self, id: BufferId, value: Tensor<T>) {
        self.buffer_updates.push((id, value));
    }

    /// Moves running-statistic updates recorded during a training forward
    /// pass into the store.
    pub fn commit_buffers(&mut self, store: &mut ParamStore<T>) {
        for (id, v) in self.buffer_updates.drain(..) {
            store.buffer_mut(id).value = v;
        }
    }

    /// Propagates `seed` (the gradient of the objective with respect to
    /// `root`) back through the tape. Parameter gradients are added to
    /// `store`; every node's gradient is returned for inspection.
    pub fn backward(
        &mut self,
        root: Var,
        seed: Tensor<T>,
        store: &mut ParamStore<T>,
    ) -> Result<Gradients<T>, DiffError> {
        if self.consumed {
            return Err(DiffError::TapeConsumed);
        }
        self.consumed = true;
        if seed.shape() != self.nodes[root.0].value.shape() {
            return Err(DiffError::ShapeMismatch {
                layer: "backward seed".into(),
                expected: self.nodes[root.0].value.shape().to_vec(),
                got: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(bw) = &node.backward {
                let ctx = BackCtx {
                    grad: &g,
                    out: &node.value,
                    inputs: node.inputs.iter().map(|&j| &self.nodes[j].value).collect(),
                };
                let in_grads = bw(&ctx);
                debug_assert_eq!(in_grads.len(), node.inputs.len());
                for (&j, ig) in node.inputs.iter().zip(in_grads) {
                    if let Some(ig) = ig {
                        match &mut grads[j] {
                            Some(acc) => acc.add_assign(&ig),
                            slot => *slot = Some(ig),
                        }
                    }
                }
            }
            if let Some(pid) = node.param {
                store.param_mut(pid).grad.add_assign(&g);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Convenience for scalar objectives: seeds with 1.
    pub fn backward_scalar(
        &mut self,
        loss: Var,
        store: &mut ParamStore<T>,
    ) -> Result<Gradients<T>, DiffError> {
        let shape = self.shape(loss).to_vec();
        self.backward(loss, Tensor::full(&shape, T::one()), store)
    }
}
