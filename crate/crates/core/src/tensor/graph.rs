//! The [`Graph`] abstraction lets model code run eagerly or on a tape.

use std::rc::Rc;
use std::sync::Arc;

use super::ops;
use super::tape::{CheckpointFn, Tape};
use super::{Result, Tensor};

/// A primitive whose forward pass is computed by the caller and whose
/// backward pass is supplied here.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, `None` where the input takes
    /// no gradient.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
    ) -> Result<Vec<Option<Tensor>>>;
}

pub trait Graph {
    type Node: Clone;

    /// Whether operations are recorded for a backward pass.
    fn records(&self) -> bool;
    /// A value that takes no gradient.
    fn constant(&self, t: Tensor) -> Self::Node;
    /// A shared parameter; differentiable when recording.
    fn param(&self, t: &Arc<Tensor>) -> Self::Node;
    fn value(&self, n: &Self::Node) -> Arc<Tensor>;

    fn add(&self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;
    fn sub(&self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;
    fn mul(&self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;
    fn scale(&self, a: &Self::Node, s: f64) -> Self::Node;
    fn matmul(&self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;
    fn exp(&self, a: &Self::Node) -> Self::Node;
    fn softplus(&self, a: &Self::Node) -> Self::Node;
    fn silu(&self, a: &Self::Node) -> Self::Node;
    fn sigmoid(&self, a: &Self::Node) -> Self::Node;
    fn layernorm(
        &self,
        x: &Self::Node,
        gamma: &Self::Node,
        beta: &Self::Node,
        eps: f64,
    ) -> Result<Self::Node>;
    fn conv1d(
        &self,
        x: &Self::Node,
        w: &Self::Node,
        bias: &Self::Node,
        reverse: bool,
    ) -> Result<Self::Node>;
    fn narrow(&self, x: &Self::Node, axis: usize, start: usize, len: usize) -> Result<Self::Node>;
    fn concat(&self, xs: &[Self::Node], axis: usize) -> Result<Self::Node>;
    fn flip(&self, x: &Self::Node, axis: usize) -> Result<Self::Node>;
    fn reshape(&self, x: &Self::Node, shape: &[usize]) -> Result<Self::Node>;
    fn sum(&self, x: &Self::Node) -> Self::Node;
    fn mean(&self, x: &Self::Node) -> Self::Node;
    /// Mean squared difference over all elements.
    fn mse(&self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;
    fn custom(&self, inputs: &[Self::Node], output: Tensor, op: Box<dyn CustomOp>) -> Self::Node;
    /// Evaluate `f` without keeping its intermediates; recording graphs
    /// recompute them during the backward pass.
    fn checkpoint(&self, inputs: &[Self::Node], f: Rc<CheckpointFn>) -> Result<Self::Node>;
}

/// Immediate evaluation with no recording.
#[derive(Debug, Clone, Copy, Default)]
pub struct Eager;

impl Graph for Eager {
    type Node = Arc<Tensor>;

    fn records(&self) -> bool {
        false
    }

    fn constant(&self, t: Tensor) -> Arc<Tensor> {
        Arc::new(t)
    }

    fn param(&self, t: &Arc<Tensor>) -> Arc<Tensor> {
        Arc::clone(t)
    }

    fn value(&self, n: &Arc<Tensor>) -> Arc<Tensor> {
        Arc::clone(n)
    }

    fn add(&self, a: &Arc<Tensor>, b: &Arc<Tensor>) -> Result<Arc<Tensor>> {
        ops::add(a, b).map(Arc::new)
    }

    fn sub(&self, a: &Arc<Tensor>, b: &Arc<Tensor>) -> Result<Arc<Tensor>> {
        ops::sub(a, b).map(Arc::new)
    }

    fn mul(&self, a: &Arc<Tensor>, b: &Arc<Tensor>) -> Result<Arc<Tensor>> {
        ops::mul(a, b).map(Arc::new)
    }

    fn scale(&self, a: &Arc<Tensor>, s: f64) -> Arc<Tensor> {
        Arc::new(ops::scale(a, s))
    }

    fn matmul(&self, a: &Arc<Tensor>, b: &Arc<Tensor>) -> Result<Arc<Tensor>> {
        ops::matmul(a, b).map(Arc::new)
    }

    fn exp(&self, a: &Arc<Tensor>) -> Arc<Tensor> {
        Arc::new(ops::exp(a))
    }

    fn softplus(&self, a: &Arc<Tensor>) -> Arc<Tensor> {
        Arc::new(ops::softplus(a))
    }

    fn silu(&self, a: &Arc<Tensor>) -> Arc<Tensor> {
        Arc::new(ops::silu(a))
    }

    fn sigmoid(&self, a: &Arc<Tensor>) -> Arc<Tensor> {
        Arc::new(ops::sigmoid(a))
    }

    fn layernorm(
        &self,
        x: &Arc<Tensor>,
        gamma: &Arc<Tensor>,
        beta: &Arc<Tensor>,
        eps: f64,
    ) -> Result<Arc<Tensor>> {
        ops::layernorm(x, gamma, beta, eps).map(|(y, _)| Arc::new(y))
    }

    fn conv1d(
        &self,
        x: &Arc<Tensor>,
        w: &Arc<Tensor>,
        bias: &Arc<Tensor>,
        reverse: bool,
    ) -> Result<Arc<Tensor>> {
        ops::conv1d_causal(x, w, bias, reverse).map(Arc::new)
    }

    fn narrow(
        &self,
        x: &Arc<Tensor>,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Arc<Tensor>> {
        ops::narrow(x, axis, start, len).map(Arc::new)
    }

    fn concat(&self, xs: &[Arc<Tensor>], axis: usize) -> Result<Arc<Tensor>> {
        let refs: Vec<&Tensor> = xs.iter().map(|x| x.as_ref()).collect();
        ops::concat(&refs, axis).map(Arc::new)
    }

    fn flip(&self, x: &Arc<Tensor>, axis: usize) -> Result<Arc<Tensor>> {
        ops::flip(x, axis).map(Arc::new)
    }

    fn reshape(&self, x: &Arc<Tensor>, shape: &[usize]) -> Result<Arc<Tensor>> {
        x.reshape(shape.to_vec()).map(Arc::new)
    }

    fn sum(&self, x: &Arc<Tensor>) -> Arc<Tensor> {
        Arc::new(Tensor::scalar(x.sum()))
    }

    fn mean(&self, x: &Arc<Tensor>) -> Arc<Tensor> {
        Arc::new(Tensor::scalar(x.sum() / x.numel().max(1) as f64))
    }

    fn mse(&self, a: &Arc<Tensor>, b: &Arc<Tensor>) -> Result<Arc<Tensor>> {
        let d = ops::sub(a, b)?;
        let n = d.numel().max(1) as f64;
        Ok(Arc::new(Tensor::scalar(
            d.data().iter().map(|v| v * v).sum::<f64>() / n,
        )))
    }

    fn custom(
        &self,
        _inputs: &[Arc<Tensor>],
        output: Tensor,
        _op: Box<dyn CustomOp>,
    ) -> Arc<Tensor> {
        Arc::new(output)
    }

    fn checkpoint(&self, inputs: &[Arc<Tensor>], f: Rc<CheckpointFn>) -> Result<Arc<Tensor>> {
        let tape = Tape::new();
        let vars: Vec<_> = inputs
            .iter()
            .map(|t| tape.constant_arc(Arc::clone(t)))
            .collect();
        let out = f(&tape, &vars)?;
        Ok(out.value())
    }
}
