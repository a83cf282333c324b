use super::kernels::{backward_node, Op};
use super::{NumericsError, ParamId, ParamStore, Result, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) enum Value {
    Owned(Tensor),
    Param(ParamId),
}

pub(crate) struct Node {
    pub(crate) value: Value,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Append-only tape. Every kernel call records one node; `backward` replays
/// the tape in reverse. Parameters are read in place from the borrowed store.
pub struct Graph<'p> {
    store: &'p ParamStore,
    pub(crate) nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    grad_enabled: bool,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            grad_enabled: true,
        }
    }

    /// A graph that records values only; `backward` on it yields no gradients.
    pub fn inference(store: &'p ParamStore) -> Self {
        Self { grad_enabled: false, ..Self::new(store) }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => &self.store.get(*id).value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub(crate) fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant leaf. Never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: Value::Owned(t), op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Copies the value of `v` into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Leaf that tracks gradients but is not a registered parameter.
    pub fn input(&mut self, t: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.nodes.push(Node { value: Value::Owned(t), op: Op::Leaf, requires_grad: rg });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let rg = self.grad_enabled;
        self.nodes.push(Node { value: Value::Param(id), op: Op::Param, requires_grad: rg });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub(crate) fn push(&mut self, kernel: &'static str, t: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !t.is_finite() {
            return Err(NumericsError::NonFinite { kernel });
        }
        let requires_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value: Value::Owned(t), op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(NumericsError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match node.op {
                Op::Leaf | Op::Param => {
                    grads[i] = Some(g);
                }
                _ => {
                    for p in node.op.parents() {
                        if p.0 >= i {
                            return Err(NumericsError::Cycle { node: i, parent: p.0 });
                        }
                    }
                    backward_node(self, Var(i), &g, &mut grads);
                }
            }
        }
        let params = self
            .param_vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect();
        Ok(Grads { node: grads, params })
    }

    pub(crate) fn grad_buf<'g>(
        &self,
        grads: &'g mut [Option<Vec<f64>>],
        v: Var,
    ) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }
}

/// Result of one backward sweep.
pub struct Grads {
    node: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Grads {
    /// Gradient with respect to a leaf (input, parameter or constant).
    /// `None` when no gradient reached it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.node.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.iter().find(|(p, _)| *p == id).and_then(|(_, v)| self.wrt(*v))
    }

    /// Adds every parameter gradient into `Param::grad`.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        self.accumulate_scaled_into(store, 1.0);
    }

    pub fn accumulate_scaled_into(&self, store: &mut ParamStore, factor: f64) {
        for &(id, v) in &self.params {
            if let Some(g) = self.wrt(v) {
                let dst = store.get_mut(id).grad.data_mut();
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += factor * s;
                }
            }
        }
    }
}
