//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Nodes are appended in creation order, so ascending node index is already a
//! topological order. `backward` walks the tape once in reverse. Every node is
//! an [`Op`]: built-in primitives use their analytic derivative, while custom
//! nodes may pair any forward rule with an unrelated backward rule (this is how
//! `sign` gets a surrogate gradient).

pub mod kernels;
mod ops;

pub use ops::BatchStats;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A tape operation.
///
/// `forward` runs once when the node is recorded and may stash whatever the
/// backward rule needs in `self`. `backward` maps the upstream gradient to one
/// optional gradient per input; `needs[i]` says whether input `i` wants one.
pub trait Op<T: Scalar> {
    fn name(&self) -> &'static str;

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        upstream: &[T],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

type ForwardFn<T> = Box<dyn Fn(&[&Tensor<T>]) -> Result<Tensor<T>>>;
type BackwardFn<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>>>;

/// Closure-backed custom node: `backward_fn(inputs, upstream)`.
struct FnOp<T> {
    forward_fn: ForwardFn<T>,
    backward_fn: BackwardFn<T>,
}

impl<T: Scalar> Op<T> for FnOp<T> {
    fn name(&self) -> &'static str {
        "custom"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        (self.forward_fn)(inputs)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        upstream: &[T],
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let up = Tensor::from_parts(output.shape().to_vec(), upstream.to_vec());
        (self.backward_fn)(inputs, &up)
    }
}

struct Node<T> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    op: Option<Box<dyn Op<T>>>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    backward_ran: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_ran: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node so the graph can record a fresh step.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_ran = false;
    }

    /// Records an existing tensor; its `requires_grad` flag is kept.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Result<Var> {
        tensor.check_finite("leaf")?;
        self.nodes.push(Node {
            value: tensor,
            inputs: Vec::new(),
            op: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Result<Var> {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Result<Var> {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].value.take_grad()
    }

    /// Runs `op.forward` on the inputs and records the result.
    pub fn apply(&mut self, mut op: impl Op<T> + 'static, inputs: &[Var]) -> Result<Var> {
        let output = {
            let refs: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            op.forward(&refs)?
        };
        output.check_finite(op.name())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad());
        self.nodes.push(Node {
            value: output.with_requires_grad(requires_grad),
            inputs: inputs.to_vec(),
            op: Some(Box::new(op)),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a node whose forward output is `forward_fn(inputs)` and whose
    /// backward rule is `backward_fn(inputs, upstream)`. The backward rule need
    /// not be the derivative of the forward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        forward_fn: impl Fn(&[&Tensor<T>]) -> Result<Tensor<T>> + 'static,
        backward_fn: impl Fn(&[&Tensor<T>], &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    ) -> Result<Var> {
        self.apply(
            FnOp {
                forward_fn: Box::new(forward_fn),
                backward_fn: Box::new(backward_fn),
            },
            inputs,
        )
    }

    /// Back-propagates from a scalar `loss`, accumulating into every
    /// `requires_grad` node reachable from it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_ran {
            return Err(Error::BackwardTwice);
        }
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        self.backward_ran = true;
        if !loss_value.requires_grad() {
            return Ok(());
        }
        self.nodes[loss.0].value.accumulate_grad(&[T::ONE])?;

        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let (Some(op), Some(upstream)) = (&node.op, node.value.grad()) else {
                continue;
            };
            if !node.value.requires_grad() {
                continue;
            }
            let grads = {
                let refs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &before[v.0].value).collect();
                let needs: Vec<bool> = refs.iter().map(|t| t.requires_grad()).collect();
                let grads = op.backward(&refs, &node.value, upstream, &needs)?;
                if grads.len() != refs.len() {
                    return Err(Error::invalid(format!(
                        "{}: backward returned {} gradients for {} inputs",
                        op.name(),
                        grads.len(),
                        refs.len()
                    )));
                }
                for (g, input) in grads.iter().zip(&refs) {
                    if let Some(g) = g {
                        if g.shape() != input.shape() {
                            return Err(Error::shape(op.name(), input.shape(), g.shape()));
                        }
                    }
                }
                grads
            };
            for (v, g) in node.inputs.iter().zip(grads) {
                if let Some(g) = g {
                    let target = &mut before[v.0].value;
                    if target.requires_grad() {
                        target.accumulate_grad(g.data())?;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let w = g.param(t(&[2], &[1.0, 2.0])).unwrap();
        let sq = g.mul(w, w).unwrap();
        let loss = g.reduce_sum(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_twice_is_an_error_until_reset() {
        let mut g = Graph::new();
        let w = g.param(t(&[1], &[3.0])).unwrap();
        let loss = g.reduce_sum(w).unwrap();
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::BackwardTwice)));
        g.reset();
        let w = g.param(t(&[1], &[3.0])).unwrap();
        let loss = g.reduce_sum(w).unwrap();
        g.backward(loss).unwrap();
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let w = g.param(t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(w), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_tensors_keep_no_gradient() {
        let mut g = Graph::new();
        let a = g.param(t(&[2], &[1.0, 2.0])).unwrap();
        let b = g.param(t(&[2], &[5.0, 6.0])).unwrap();
        let _unused = g.mul(b, b).unwrap();
        let loss = g.reduce_sum(a).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(b).is_none());
        assert_eq!(g.grad(a).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut g = Graph::new();
        let w = g.param(t(&[3], &[1.0, -2.0, 0.5])).unwrap();
        let sq = g.mul(w, w).unwrap();
        let zero = g.scale(sq, 0.0).unwrap();
        let loss = g.reduce_sum(zero).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(w).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn custom_node_uses_its_own_backward_rule() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[0.3, -0.2, 0.0])).unwrap();
        let y = g
            .custom(
                &[x],
                |ins| Ok(ins[0].map(|v| if v > 0.0 { 1.0 } else { -1.0 })),
                |_ins, up| Ok(vec![Some(up.clone())]),
            )
            .unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -1.0, -1.0]);
        let w = g.constant(t(&[3], &[2.0, 3.0, 4.0])).unwrap();
        let prod = g.mul(y, w).unwrap();
        let loss = g.reduce_sum(prod).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 3.0, 4.0]);
    }

    #[test]
    fn custom_node_with_analytic_backward_matches_tape() {
        let x0 = t(&[3], &[0.5, -1.5, 2.0]);
        let mut g = Graph::new();
        let x = g.param(x0.clone()).unwrap();
        let sq = g
            .custom(
                &[x],
                |ins| Ok(ins[0].map(|v| v * v)),
                |ins, up| Ok(vec![Some(ins[0].zip_map(up, "sq", |v, u| 2.0 * v * u)?)]),
            )
            .unwrap();
        let loss = g.reduce_sum(sq).unwrap();
        g.backward(loss).unwrap();
        let custom = g.grad(x).unwrap().to_vec();

        let mut h = Graph::new();
        let x = h.param(x0).unwrap();
        let sq = h.mul(x, x).unwrap();
        let loss = h.reduce_sum(sq).unwrap();
        h.backward(loss).unwrap();
        assert_eq!(custom, h.grad(x).unwrap());
    }

    #[test]
    fn custom_backward_shape_mismatch_is_reported() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0])).unwrap();
        let y = g
            .custom(
                &[x],
                |ins| Ok(ins[0].clone()),
                |_, _| Ok(vec![Some(Tensor::zeros(&[3]))]),
            )
            .unwrap();
        let loss = g.reduce_sum(y).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut g = Graph::<f64>::new();
        let bad = Tensor::from_parts(vec![1], vec![f64::INFINITY]);
        assert!(matches!(g.leaf(bad), Err(Error::NonFinite { .. })));
    }
}
