//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every differentiable operation appends one [`TapeNode`] holding its output
//! value, the [`Var`]s it consumed and a backward rule closing over whatever
//! context it saved. Nodes are only ever appended after their inputs, so the
//! tape order is a topological order and [`Graph::backward`] is a single
//! reverse sweep.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward rule sees when it runs.
pub struct BackwardArgs<'a, T> {
    pub inputs: &'a [&'a Tensor<T>],
    pub output: &'a Tensor<T>,
    /// Gradient of the loss with respect to `output`.
    pub grad: &'a Tensor<T>,
    /// `needs[i]` is false when input `i` does not require a gradient; the
    /// rule may return `None` for it.
    pub needs: &'a [bool],
}

pub type BackwardFn<T> = Box<dyn Fn(BackwardArgs<'_, T>) -> Result<Vec<Option<Tensor<T>>>> + Send + Sync>;

pub struct TapeNode<T> {
    op: &'static str,
    inputs: Vec<Var>,
    value: Tensor<T>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

impl<T> TapeNode<T> {
    pub fn op(&self) -> &'static str {
        self.op
    }

    pub fn inputs(&self) -> &[Var] {
        &self.inputs
    }
}

pub struct Graph<T> {
    nodes: Vec<TapeNode<T>>,
    grads: Vec<Option<Tensor<T>>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that records values only; no backward rules or saved context
    /// are kept. Used for inference.
    pub fn no_grad() -> Self {
        Self {
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

    /// Every recorded value, in tape order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    pub fn node(&self, v: Var) -> &TapeNode<T> {
        &self.nodes[v.0]
    }

    /// Records a leaf. Gradients are collected for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(TapeNode {
            op: "leaf",
            inputs: Vec::new(),
            value,
            requires_grad: requires_grad && self.grad_enabled,
            backward: None,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated for a leaf by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Appends an operation node. The backward rule is dropped when no input
    /// needs a gradient.
    pub fn push(
        &mut self,
        op: &'static str,
        inputs: Vec<Var>,
        value: Tensor<T>,
        backward: BackwardFn<T>,
    ) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.to_string(),
                step: None,
            });
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|&i| self.requires_grad(i));
        self.nodes.push(TapeNode {
            op,
            inputs,
            value,
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    /// Populates `grad` for every leaf that requires one with the derivative
    /// of the scalar `loss`. Repeated uses of a value accumulate additively,
    /// and so do repeated calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {shape:?}"
            )));
        }
        if !self.requires_grad(loss) {
            return Err(Error::Contract(
                "loss does not depend on any value that requires a gradient".into(),
            ));
        }
        let mut pending: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        pending[loss.0] = Some(Tensor::ones(shape.to_vec()));

        for idx in (0..=loss.0).rev() {
            let Some(grad) = pending[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let Some(rule) = &node.backward else {
                if node.requires_grad {
                    match &mut self.grads[idx] {
                        Some(acc) => acc.add_assign(&grad)?,
                        slot @ None => *slot = Some(grad),
                    }
                }
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(|&i| self.nodes[i.0].requires_grad).collect();
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &self.nodes[i.0].value).collect();
            let input_grads = rule(BackwardArgs {
                inputs: &inputs,
                output: &node.value,
                grad: &grad,
                needs: &needs,
            })?;
            if input_grads.len() != node.inputs.len() {
                return Err(Error::Contract(format!(
                    "backward rule of {} returned {} gradients for {} inputs",
                    node.op,
                    input_grads.len(),
                    node.inputs.len()
                )));
            }
            for ((&input, g), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let (Some(g), true) = (g, need) else {
                    continue;
                };
                if g.shape() != self.nodes[input.0].value.shape() {
                    return Err(Error::Dimension {
                        op: node.op,
                        lhs: g.shape().to_vec(),
                        rhs: self.nodes[input.0].value.shape().to_vec(),
                    });
                }
                match &mut pending[input.0] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::ones([3]));
        let y = g.scale(x, 2.0).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn([2, 3], |i| i as f64));
        let l = g.sum(x).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &Tensor::ones([2, 3]));
    }

    #[test]
    fn half_square_gives_identity() {
        let mut g = Graph::<f64>::new();
        let data = Tensor::from_fn([4], |i| i as f64 - 1.5);
        let x = g.param(data.clone());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let l = g.scale(s, 0.5).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &data);
    }

    #[test]
    fn reuse_accumulates() {
        let data = Tensor::from_fn([3], |i| i as f64 + 0.5);
        let single = {
            let mut g = Graph::<f64>::new();
            let x = g.param(data.clone());
            let y = g.mul(x, x).unwrap();
            let l = g.sum(y).unwrap();
            g.backward(l).unwrap();
            g.grad(x).unwrap().clone()
        };
        let mut g = Graph::<f64>::new();
        let x = g.param(data);
        let y1 = g.mul(x, x).unwrap();
        let y2 = g.mul(x, x).unwrap();
        let y = g.add(y1, y2).unwrap();
        let l = g.sum(y).unwrap();
        g.backward(l).unwrap();
        let both = g.grad(x).unwrap();
        for (b, s) in both.data().iter().zip(single.data()) {
            assert_eq!(*b, 2.0 * s);
        }
    }

    #[test]
    fn no_grad_graph_keeps_no_rules() {
        let mut g = Graph::<f32>::no_grad();
        let x = g.param(Tensor::ones([2]));
        let y = g.sum(x).unwrap();
        assert!(!g.requires_grad(y));
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::ones([2]));
        let x = g.param(Tensor::ones([2]));
        let y = g.mul(c, x).unwrap();
        let l = g.sum(y).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(c).is_none());
        assert!(g.grad(x).is_some());
    }
}
