//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! A [`Tape`] records one node per operation whose inputs require gradients.
//! Values travel as [`Var`] handles; a `Var` produced without any tracked
//! input carries no node and costs nothing beyond its value. Calling
//! [`Tape::backward`] consumes the tape.

mod ops;

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

pub use ops::{
    add, concat_channels, elementwise, mean, mul, mul_spatial, pad2d, relu, sigmoid, sum,
    Elementwise,
};

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Gradient rule of one recorded operation.
pub(crate) trait Backward<T: Real> {
    /// Returns one entry per input; entries whose `needs` flag is false may be `None`.
    fn backward(&self, grad_out: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>>;
}

struct Node<T: Real> {
    op: &'static str,
    shape: Shape,
    inputs: Vec<Option<usize>>,
    rule: Option<Box<dyn Backward<T>>>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
struct NodeRef {
    tape: u64,
    index: usize,
}

/// A value flowing through the tape. Cheap to clone.
#[derive(Clone)]
pub struct Var<T: Real = f32> {
    value: Rc<Tensor<T>>,
    node: Option<NodeRef>,
}

impl<T: Real> Var<T> {
    /// Untracked value, usable with any tape.
    pub fn constant(value: Tensor<T>) -> Self {
        Var {
            value: Rc::new(value),
            node: None,
        }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub(crate) fn value_rc(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.value)
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Drops the tape handle and returns the value.
    pub fn into_value(self) -> Tensor<T> {
        Rc::try_unwrap(self.value).unwrap_or_else(|rc| (*rc).clone())
    }
}

impl<T: Real> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.shape())
            .field("tracked", &self.requires_grad())
            .finish()
    }
}

pub struct Tape<T: Real = f32> {
    id: u64,
    grad_enabled: bool,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            grad_enabled: true,
            nodes: Vec::new(),
        }
    }

    /// A tape that never records; every op evaluates eagerly.
    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf whose gradient will be reported by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var<T> {
        if !self.grad_enabled {
            return Var::constant(value);
        }
        let index = self.nodes.len();
        self.nodes.push(Node {
            op: "leaf",
            shape: value.shape(),
            inputs: Vec::new(),
            rule: None,
        });
        Var {
            value: Rc::new(value),
            node: Some(NodeRef {
                tape: self.id,
                index,
            }),
        }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var::constant(value)
    }

    /// Records `value` as the output of `op` applied to `inputs`. The rule is
    /// only constructed when at least one input is tracked on this tape.
    pub(crate) fn record<R>(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        inputs: &[&Var<T>],
        rule: impl FnOnce() -> R,
    ) -> Result<Var<T>>
    where
        R: Backward<T> + 'static,
    {
        value.ensure_finite(op)?;
        let mut links = Vec::with_capacity(inputs.len());
        for input in inputs {
            match input.node {
                Some(r) if r.tape != self.id => {
                    return Err(Error::Autodiff(format!(
                        "{op}: input belongs to a different tape"
                    )));
                }
                Some(r) => links.push(Some(r.index)),
                None => links.push(None),
            }
        }
        if !self.grad_enabled || links.iter().all(Option::is_none) {
            return Ok(Var::constant(value));
        }
        let index = self.nodes.len();
        self.nodes.push(Node {
            op,
            shape: value.shape(),
            inputs: links,
            rule: Some(Box::new(rule())),
        });
        Ok(Var {
            value: Rc::new(value),
            node: Some(NodeRef {
                tape: self.id,
                index,
            }),
        })
    }

    /// Propagates `d root / d node` back through the tape and returns the
    /// gradients of every tracked leaf. `root` must be a `1x1x1x1` output
    /// recorded on this tape.
    pub fn backward(mut self, root: &Var<T>) -> Result<Gradients<T>> {
        let root_index = match root.node {
            Some(r) if r.tape == self.id => r.index,
            Some(_) => {
                return Err(Error::Autodiff(
                    "backward root was recorded on a different tape".into(),
                ))
            }
            None => return Err(Error::Autodiff("backward root is not on the tape".into())),
        };
        if root.shape() != Shape::SCALAR {
            return Err(Error::Autodiff(format!(
                "backward root must be a scalar, got {}",
                root.shape()
            )));
        }

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root_index] = Some(Tensor::ones(Shape::SCALAR));
        let mut leaves = HashMap::new();

        for index in (0..self.nodes.len()).rev() {
            let node = &mut self.nodes[index];
            let Some(rule) = node.rule.take() else {
                let g = grads[index]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.shape));
                leaves.insert(index, g);
                continue;
            };
            let Some(grad_out) = grads[index].take() else {
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let op = node.op;
            let inputs = std::mem::take(&mut node.inputs);
            let input_grads = rule.backward(&grad_out, &needs)?;
            drop(rule);
            if input_grads.len() != inputs.len() {
                return Err(Error::Autodiff(format!(
                    "{op}: backward returned wrong arity"
                )));
            }
            for (link, g) in inputs.into_iter().zip(input_grads) {
                let (Some(target), Some(g)) = (link, g) else {
                    continue;
                };
                let expected = self.nodes[target].shape;
                if g.shape() != expected {
                    return Err(Error::Autodiff(format!(
                        "{op}: gradient shape {} does not match input shape {expected}",
                        g.shape()
                    )));
                }
                match &mut grads[target] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }

        Ok(Gradients {
            tape: self.id,
            leaves,
        })
    }
}

/// Leaf gradients produced by one backward pass.
pub struct Gradients<T: Real = f32> {
    tape: u64,
    leaves: HashMap<usize, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        let r = var.node?;
        if r.tape != self.tape {
            return None;
        }
        self.leaves.get(&r.index)
    }

    pub fn take(&mut self, var: &Var<T>) -> Option<Tensor<T>> {
        let r = var.node?;
        if r.tape != self.tape {
            return None;
        }
        self.leaves.remove(&r.index)
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(scalar(3.0));
        let y = mul(&mut tape, &x, &x).unwrap();
        let g = tape.backward(&y).unwrap();
        assert_eq!(g.get(&x).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.param(scalar(0.0));
        let y = sigmoid(&mut tape, &x).unwrap();
        assert_eq!(y.value().item().unwrap(), 0.5);
        let g = tape.backward(&y).unwrap();
        assert_eq!(g.get(&x).unwrap().item().unwrap(), 0.25);
    }

    #[test]
    fn rejects_non_scalar_root() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::ones([1, 1, 2, 2]));
        let y = relu(&mut tape, &x).unwrap();
        assert!(matches!(tape.backward(&y), Err(Error::Autodiff(_))));
    }

    #[test]
    fn rejects_root_not_on_tape() {
        let tape = Tape::<f64>::new();
        let c = Var::constant(scalar(1.0));
        assert!(tape.backward(&c).is_err());

        let mut other = Tape::<f64>::new();
        let x = other.param(scalar(2.0));
        let y = mul(&mut other, &x, &x).unwrap();
        assert!(Tape::<f64>::new().backward(&y).is_err());
    }

    #[test]
    fn mixing_tapes_is_an_error() {
        let mut a = Tape::<f64>::new();
        let mut b = Tape::<f64>::new();
        let x = a.param(scalar(1.0));
        assert!(matches!(add(&mut b, &x, &x), Err(Error::Autodiff(_))));
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(scalar(2.0));
        let unused = tape.param(Tensor::<f64>::ones([1, 2, 3, 3]));
        let y = mul(&mut tape, &x, &x).unwrap();
        let g = tape.backward(&y).unwrap();
        let gu = g.get(&unused).unwrap();
        assert_eq!(gu.shape(), Shape::new(1, 2, 3, 3));
        assert_eq!(gu.max_abs(), 0.0);
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x*x + x  =>  dy/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.param(scalar(1.5));
        let sq = mul(&mut tape, &x, &x).unwrap();
        let y = add(&mut tape, &sq, &x).unwrap();
        let g = tape.backward(&y).unwrap();
        assert_eq!(g.get(&x).unwrap().item().unwrap(), 4.0);
    }

    #[test]
    fn no_grad_tape_records_nothing() {
        let mut tape = Tape::<f32>::no_grad();
        let x = tape.param(Tensor::ones([1, 1, 2, 2]));
        let y = add(&mut tape, &x, &x).unwrap();
        assert!(!y.requires_grad());
        assert!(tape.is_empty());
    }
}
