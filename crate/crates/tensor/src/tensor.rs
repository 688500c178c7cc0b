//! Graph nodes and the reverse-mode sweep.

use std::cmp::Reverse;
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::array::Array;
use crate::error::{Error, Result};
use crate::param::{Param, ParamId};

static NEXT_NODE: AtomicU64 = AtomicU64::new(1);

/// Computes input gradients from `(inputs, output value, output gradient)`.
/// Entries may be `None` when an input does not need a gradient.
pub(crate) type BackwardFn = Box<dyn Fn(&[Tensor], &Array, &Array) -> Result<Vec<Option<Array>>>>;

struct GradFn {
    inputs: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    id: u64,
    op: &'static str,
    value: Array,
    requires_grad: bool,
    param: Option<ParamId>,
    grad_fn: Option<GradFn>,
}

/// An immutable value in a differentiable computation.
///
/// Every operation produces a new `Tensor` that remembers its inputs when any
/// of them requires a gradient. Node ids increase monotonically, so a node's
/// inputs always have smaller ids than the node itself.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("op", &self.0.op)
            .field("value", &self.0.value)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn node(
        op: &'static str,
        value: Array,
        requires_grad: bool,
        param: Option<ParamId>,
        grad_fn: Option<GradFn>,
    ) -> Self {
        Self(Rc::new(Node {
            id: NEXT_NODE.fetch_add(1, Ordering::Relaxed),
            op,
            value,
            requires_grad,
            param,
            grad_fn,
        }))
    }

    /// A leaf that takes part in differentiation.
    pub fn variable(value: Array) -> Self {
        Self::node("variable", value, true, None, None)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(value: Array) -> Self {
        Self::node("constant", value, false, None, None)
    }

    pub(crate) fn param_leaf(value: Array, id: ParamId, requires_grad: bool) -> Self {
        Self::node("param", value, requires_grad, Some(id), None)
    }

    /// Records the result of an operation. Non-finite outputs are rejected.
    pub(crate) fn from_op(
        op: &'static str,
        value: Array,
        inputs: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Result<Self> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(Tensor::requires_grad);
        let grad_fn = requires_grad.then(|| GradFn { inputs, backward });
        Ok(Self::node(op, value, requires_grad, None, grad_fn))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn op(&self) -> &'static str {
        self.0.op
    }

    pub fn value(&self) -> &Array {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn ndim(&self) -> usize {
        self.0.value.ndim()
    }

    pub fn len(&self) -> usize {
        self.0.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.value.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn item(&self) -> Result<f64> {
        self.0.value.item()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.value.data().to_vec()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    /// Reverse-mode sweep from a one-element tensor.
    pub fn backward(&self) -> Result<Gradients> {
        if self.len() != 1 {
            return Err(Error::InvalidInput(format!(
                "backward() needs a scalar, got shape {:?}",
                self.shape()
            )));
        }
        let mut out = Gradients::default();
        if !self.requires_grad() {
            return Ok(out);
        }

        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        let mut order = Vec::new();
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            if let Some(gf) = &t.0.grad_fn {
                stack.extend(gf.inputs.iter().filter(|i| i.requires_grad()).cloned());
            }
            order.push(t);
        }
        order.sort_by_key(|t| Reverse(t.id()));

        let mut pending: BTreeMap<u64, Array> = BTreeMap::new();
        pending.insert(self.id(), Array::full(self.shape().to_vec(), 1.0));
        for t in order {
            let Some(grad) = pending.remove(&t.id()) else {
                continue;
            };
            match &t.0.grad_fn {
                Some(gf) => {
                    let grads = (gf.backward)(&gf.inputs, &t.0.value, &grad)?;
                    for (input, g) in gf.inputs.iter().zip(grads) {
                        let Some(g) = g else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(
                            g.shape(),
                            input.shape(),
                            "gradient shape from {}",
                            t.op()
                        );
                        accumulate(&mut pending, input.id(), g)?;
                    }
                }
                None => match t.0.param {
                    Some(pid) => accumulate(&mut out.params, pid, grad)?,
                    None => accumulate(&mut out.leaves, t.id(), grad)?,
                },
            }
        }
        Ok(out)
    }
}

fn accumulate<K: Ord>(map: &mut BTreeMap<K, Array>, key: K, g: Array) -> Result<()> {
    match map.get_mut(&key) {
        Some(acc) => acc.add_assign(&g),
        None => {
            map.insert(key, g);
            Ok(())
        }
    }
}

/// Gradients produced by [`Tensor::backward`], keyed by leaf.
#[derive(Default, Debug)]
pub struct Gradients {
    leaves: BTreeMap<u64, Array>,
    params: BTreeMap<ParamId, Array>,
}

impl Gradients {
    /// Gradient of a [`Tensor::variable`] leaf.
    pub fn wrt(&self, leaf: &Tensor) -> Option<&Array> {
        self.leaves.get(&leaf.id())
    }

    /// Gradient accumulated over every use of `param` in the graph.
    pub fn param(&self, param: &Param) -> Option<&Array> {
        self.params.get(&param.id())
    }

    pub fn param_by_id(&self, id: ParamId) -> Option<&Array> {
        self.params.get(&id)
    }

    /// Folds another sweep's parameter gradients into this one.
    pub fn merge(&mut self, other: Gradients) -> Result<()> {
        for (k, v) in other.params {
            accumulate(&mut self.params, k, v)?;
        }
        for (k, v) in other.leaves {
            accumulate(&mut self.leaves, k, v)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.params.values_mut().chain(self.leaves.values_mut()) {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    /// Euclidean norm over all parameter gradients.
    pub fn param_norm(&self) -> f64 {
        self.params.values().map(Array::sq_norm).sum::<f64>().sqrt()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }
}
