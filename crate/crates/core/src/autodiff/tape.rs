use std::collections::HashMap;

use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Backward rule of a recorded primitive.
pub trait Backward<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input given the output gradient.
    ///
    /// Entries where `needs[i]` is false may be `None`; so may inputs the
    /// primitive does not differentiate through.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>>;
}

enum Kind<T> {
    Constant,
    Input,
    Param,
    Op {
        inputs: Vec<Var>,
        rule: Box<dyn Backward<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    kind: Kind<T>,
    requires_grad: bool,
}

/// Record of one forward pass.
///
/// Nodes are appended in execution order, which is a topological order, so
/// backward can visit each node exactly once by walking the record in
/// reverse.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
    }

    /// A value gradients never flow into.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Kind::Constant, false)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Kind::Input, true)
    }

    /// Leaf for a parameter; repeated calls in one pass return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Kind::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Appends the result of a primitive together with its backward rule.
    pub fn record(
        &mut self,
        value: Tensor<T>,
        inputs: &[Var],
        rule: Box<dyn Backward<T>>,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {}", rule.name())));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(
            value,
            Kind::Op {
                inputs: inputs.to_vec(),
                rule,
            },
            requires_grad,
        ))
    }

    fn push(&mut self, value: Tensor<T>, kind: Kind<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            kind,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Propagates d(loss)/d(node) from a scalar `loss` back to every leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Tape("backward called on an empty tape".into()));
        }
        let root = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Tape(format!("{loss:?} is not on this tape")))?;
        if root.value.numel() != 1 {
            return Err(Error::Tape(format!(
                "loss must be a scalar, got shape {:?}",
                root.value.shape()
            )));
        }

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.kind {
                Kind::Constant => {}
                Kind::Input | Kind::Param => leaves[i] = Some(g),
                Kind::Op { inputs, rule } => {
                    let needs: Vec<bool> = inputs
                        .iter()
                        .map(|v| self.nodes[v.0].requires_grad)
                        .collect();
                    if !needs.iter().any(|&n| n) {
                        continue;
                    }
                    let values: Vec<&Tensor<T>> =
                        inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                    let input_grads = rule.backward(&values, &node.value, &g, &needs);
                    debug_assert_eq!(input_grads.len(), inputs.len(), "{}", rule.name());
                    for ((v, gi), need) in inputs.iter().zip(input_grads).zip(&needs) {
                        let (Some(gi), true) = (gi, *need) else { continue };
                        debug_assert_eq!(gi.shape(), self.nodes[v.0].value.shape());
                        match &mut grads[v.0] {
                            Some(acc) => acc.add_assign(&gi),
                            slot => *slot = Some(gi),
                        }
                    }
                }
            }
        }

        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { leaves, params })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    leaves: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of an input or parameter leaf; `None` if the loss does not
    /// depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds the parameter gradients into `store`; unreached parameters are
    /// left untouched.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(id, v) in &self.params {
            if let Some(g) = self.wrt(v) {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }
}
