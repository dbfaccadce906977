//! Reverse-mode differentiation over a per-pass operation record.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::sync::Arc;

use super::graph::{CustomOp, Graph};
use super::ops::{self, LayerNormStats};
use super::{fastmath, Result, Tensor, TensorError};

/// Body of a recomputed segment; see [`Graph::checkpoint`].
pub type CheckpointFn = dyn for<'a> Fn(&'a Tape, &[Var<'a>]) -> Result<Var<'a>>;

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Exp(usize),
    Softplus(usize),
    Silu(usize),
    Sigmoid(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        stats: LayerNormStats,
    },
    Conv1d {
        x: usize,
        w: usize,
        bias: usize,
        reverse: bool,
    },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Flip {
        x: usize,
        axis: usize,
    },
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    Mse(usize, usize),
    Custom {
        inputs: Vec<usize>,
        op: Box<dyn CustomOp>,
    },
    Checkpoint {
        inputs: Vec<usize>,
        f: Rc<CheckpointFn>,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass. Confined to a single thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor> {
        Arc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }
}

/// Gradients of one backward pass, indexed by leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: &Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: &Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    fn val(&self, v: &Var<'_>) -> Arc<Tensor> {
        debug_assert!(std::ptr::eq(v.tape, self), "var from a different tape");
        Arc::clone(&self.nodes.borrow()[v.id].value)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// A leaf that takes gradient.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        self.push(Arc::new(t), Op::Leaf, true)
    }

    pub fn leaf_arc(&self, t: Arc<Tensor>) -> Var<'_> {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant_arc(&self, t: Arc<Tensor>) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    fn unary(&self, a: &Var<'_>, out: Tensor, op: Op) -> Var<'_> {
        let rg = self.rg(&[a.id]);
        self.push(Arc::new(out), op, rg)
    }

    /// Backpropagate from a scalar output.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let n = self.nodes.borrow()[root.id].value.numel();
        if n != 1 {
            return Err(TensorError::invalid(
                "backward",
                format!("root must be a scalar, got {} elements", n),
            ));
        }
        let shape = root.shape();
        self.backward_with(root, Tensor::ones(shape))
    }

    /// Backpropagate an explicit output gradient.
    pub fn backward_with(&self, root: Var<'_>, seed: Tensor) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.shape() != seed.shape() {
            return Err(TensorError::mismatch(
                "backward",
                nodes[root.id].value.shape(),
                seed.shape(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.id).map(|_| None).collect();
        grads[root.id] = Some(seed);
        for i in (0..=root.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let v = |j: usize| nodes[j].value.as_ref();
            let mut outgoing: Vec<(usize, Tensor)> = Vec::new();
            let mut send = |j: usize, gj: Tensor| {
                if nodes[j].requires_grad {
                    outgoing.push((j, gj));
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Add(a, b) => {
                    send(*a, ops::reduce_grad(&g, v(*a).shape()));
                    send(*b, ops::reduce_grad(&g, v(*b).shape()));
                }
                Op::Sub(a, b) => {
                    send(*a, ops::reduce_grad(&g, v(*a).shape()));
                    send(*b, ops::scale(&ops::reduce_grad(&g, v(*b).shape()), -1.0));
                }
                Op::Mul(a, b) => {
                    if nodes[*a].requires_grad {
                        let ga = ops::mul(&g, v(*b))?;
                        send(*a, ops::reduce_grad(&ga, v(*a).shape()));
                    }
                    if nodes[*b].requires_grad {
                        let gb = ops::mul(&g, v(*a))?;
                        send(*b, ops::reduce_grad(&gb, v(*b).shape()));
                    }
                }
                Op::Scale(a, s) => send(*a, ops::scale(&g, *s)),
                Op::MatMul(a, b) => {
                    let (ga, gb) = ops::matmul_backward(v(*a), v(*b), &g)?;
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::Exp(a) => {
                    let out = node.value.data();
                    send(*a, zip_grad(&g, out, |g, y| g * y));
                }
                Op::Softplus(a) => {
                    send(
                        *a,
                        zip_grad(&g, v(*a).data(), |g, x| g * fastmath::sigmoid(x)),
                    );
                }
                Op::Silu(a) => {
                    send(
                        *a,
                        zip_grad(&g, v(*a).data(), |g, x| g * fastmath::silu_grad(x)),
                    );
                }
                Op::Sigmoid(a) => {
                    let out = node.value.data();
                    send(*a, zip_grad(&g, out, |g, s| g * s * (1.0 - s)));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    stats,
                } => {
                    let (dx, dg, db) = ops::layernorm_backward(v(*x), v(*gamma), stats, &g);
                    send(*x, dx);
                    send(*gamma, dg);
                    send(*beta, db);
                }
                Op::Conv1d {
                    x,
                    w,
                    bias,
                    reverse,
                } => {
                    let (dx, dw, db) = ops::conv1d_causal_backward(v(*x), v(*w), &g, *reverse);
                    send(*x, dx);
                    send(*w, dw);
                    send(*bias, db);
                }
                Op::Narrow { x, axis, start } => {
                    send(*x, ops::narrow_backward(v(*x).shape(), *axis, *start, &g));
                }
                Op::Concat { inputs, axis } => {
                    let mut start = 0;
                    for &j in inputs {
                        let len = v(j).shape()[*axis];
                        if nodes[j].requires_grad {
                            send(j, ops::narrow(&g, *axis, start, len)?);
                        }
                        start += len;
                    }
                }
                Op::Flip { x, axis } => send(*x, ops::flip(&g, *axis)?),
                Op::Reshape(x) => send(*x, g.reshape(v(*x).shape().to_vec())?),
                Op::Sum(x) => send(*x, Tensor::full(v(*x).shape().to_vec(), g.item()?)),
                Op::Mean(x) => {
                    let n = v(*x).numel().max(1) as f64;
                    send(*x, Tensor::full(v(*x).shape().to_vec(), g.item()? / n));
                }
                Op::Mse(a, b) => {
                    let d = ops::sub(v(*a), v(*b))?;
                    let k = 2.0 * g.item()? / d.numel().max(1) as f64;
                    let ga = ops::scale(&d, k);
                    if nodes[*b].requires_grad {
                        send(*b, ops::scale(&ga, -1.0));
                    }
                    send(*a, ga);
                }
                Op::Custom { inputs, op } => {
                    let ins: Vec<&Tensor> = inputs.iter().map(|&j| v(j)).collect();
                    let gs = op.backward(&ins, &node.value, &g)?;
                    if gs.len() != inputs.len() {
                        return Err(TensorError::invalid(
                            "backward",
                            format!("custom op {} returned {} grads", op.name(), gs.len()),
                        ));
                    }
                    for (&j, gj) in inputs.iter().zip(gs) {
                        if let Some(gj) = gj {
                            send(j, gj);
                        }
                    }
                }
                Op::Checkpoint { inputs, f } => {
                    let sub = Tape::new();
                    let vars: Vec<Var<'_>> = inputs
                        .iter()
                        .map(|&j| {
                            let t = Arc::clone(&nodes[j].value);
                            if nodes[j].requires_grad {
                                sub.leaf_arc(t)
                            } else {
                                sub.constant_arc(t)
                            }
                        })
                        .collect();
                    let out = f(&sub, &vars)?;
                    let mut sg = sub.backward_with(out, g)?;
                    for (&j, var) in inputs.iter().zip(&vars) {
                        if let Some(gj) = sg.take(var) {
                            send(j, gj);
                        }
                    }
                }
            }
            for (j, gj) in outgoing {
                accumulate(&mut grads[j], gj);
            }
        }
        Ok(Gradients { grads })
    }
}

fn zip_grad(g: &Tensor, saved: &[f64], f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(saved).map(|(&a, &b)| f(a, b)).collect();
    Tensor::from_parts(g.shape().to_vec(), data)
}

impl<'t> Graph for &'t Tape {
    type Node = Var<'t>;

    fn records(&self) -> bool {
        true
    }

    fn constant(&self, t: Tensor) -> Var<'t> {
        self.push(Arc::new(t), Op::Leaf, false)
    }

    fn param(&self, t: &Arc<Tensor>) -> Var<'t> {
        self.push(Arc::clone(t), Op::Leaf, true)
    }

    fn value(&self, n: &Var<'t>) -> Arc<Tensor> {
        self.val(n)
    }

    fn add(&self, a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
        let out = ops::add(&self.val(a), &self.val(b))?;
        Ok(self.push(Arc::new(out), Op::Add(a.id, b.id), self.rg(&[a.id, b.id])))
    }

    fn sub(&self, a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
        let out = ops::sub(&self.val(a), &self.val(b))?;
        Ok(self.push(Arc::new(out), Op::Sub(a.id, b.id), self.rg(&[a.id, b.id])))
    }

    fn mul(&self, a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
        let out = ops::mul(&self.val(a), &self.val(b))?;
        Ok(self.push(Arc::new(out), Op::Mul(a.id, b.id), self.rg(&[a.id, b.id])))
    }

    fn scale(&self, a: &Var<'t>, s: f64) -> Var<'t> {
        let out = ops::scale(&self.val(a), s);
        self.unary(a, out, Op::Scale(a.id, s))
    }

    fn matmul(&self, a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
        let out = ops::matmul(&self.val(a), &self.val(b))?;
        Ok(self.push(
            Arc::new(out),
            Op::MatMul(a.id, b.id),
            self.rg(&[a.id, b.id]),
        ))
    }

    fn exp(&self, a: &Var<'t>) -> Var<'t> {
        let out = ops::exp(&self.val(a));
        self.unary(a, out, Op::Exp(a.id))
    }

    fn softplus(&self, a: &Var<'t>) -> Var<'t> {
        let out = ops::softplus(&self.val(a));
        self.unary(a, out, Op::Softplus(a.id))
    }

    fn silu(&self, a: &Var<'t>) -> Var<'t> {
        let out = ops::silu(&self.val(a));
        self.unary(a, out, Op::Silu(a.id))
    }

    fn sigmoid(&self, a: &Var<'t>) -> Var<'t> {
        let out = ops::sigmoid(&self.val(a));
        self.unary(a, out, Op::Sigmoid(a.id))
    }

    fn layernorm(&self, x: &Var<'t>, gamma: &Var<'t>, beta: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (out, stats) = ops::layernorm(&self.val(x), &self.val(gamma), &self.val(beta), eps)?;
        let op = Op::LayerNorm {
            x: x.id,
            gamma: gamma.id,
            beta: beta.id,
            stats,
        };
        Ok(self.push(Arc::new(out), op, self.rg(&[x.id, gamma.id, beta.id])))
    }

    fn conv1d(&self, x: &Var<'t>, w: &Var<'t>, bias: &Var<'t>, reverse: bool) -> Result<Var<'t>> {
        let out = ops::conv1d_causal(&self.val(x), &self.val(w), &self.val(bias), reverse)?;
        let op = Op::Conv1d {
            x: x.id,
            w: w.id,
            bias: bias.id,
            reverse,
        };
        Ok(self.push(Arc::new(out), op, self.rg(&[x.id, w.id, bias.id])))
    }

    fn narrow(&self, x: &Var<'t>, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let out = ops::narrow(&self.val(x), axis, start, len)?;
        Ok(self.unary(
            x,
            out,
            Op::Narrow {
                x: x.id,
                axis,
                start,
            },
        ))
    }

    fn concat(&self, xs: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let vals: Vec<Arc<Tensor>> = xs.iter().map(|x| self.val(x)).collect();
        let refs: Vec<&Tensor> = vals.iter().map(|v| v.as_ref()).collect();
        let out = ops::concat(&refs, axis)?;
        let ids: Vec<usize> = xs.iter().map(|x| x.id).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Arc::new(out), Op::Concat { inputs: ids, axis }, rg))
    }

    fn flip(&self, x: &Var<'t>, axis: usize) -> Result<Var<'t>> {
        let out = ops::flip(&self.val(x), axis)?;
        Ok(self.unary(x, out, Op::Flip { x: x.id, axis }))
    }

    fn reshape(&self, x: &Var<'t>, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.val(x).reshape(shape.to_vec())?;
        Ok(self.unary(x, out, Op::Reshape(x.id)))
    }

    fn sum(&self, x: &Var<'t>) -> Var<'t> {
        let out = Tensor::scalar(self.val(x).sum());
        self.unary(x, out, Op::Sum(x.id))
    }

    fn mean(&self, x: &Var<'t>) -> Var<'t> {
        let v = self.val(x);
        let out = Tensor::scalar(v.sum() / v.numel().max(1) as f64);
        self.unary(x, out, Op::Mean(x.id))
    }

    fn mse(&self, a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
        let d = ops::sub(&self.val(a), &self.val(b))?;
        if d.shape() != self.val(a).shape() || d.shape() != self.val(b).shape() {
            return Err(TensorError::mismatch("mse", &a.shape(), &b.shape()));
        }
        let n = d.numel().max(1) as f64;
        let out = Tensor::scalar(d.data().iter().map(|v| v * v).sum::<f64>() / n);
        Ok(self.push(Arc::new(out), Op::Mse(a.id, b.id), self.rg(&[a.id, b.id])))
    }

    fn custom(&self, inputs: &[Var<'t>], output: Tensor, op: Box<dyn CustomOp>) -> Var<'t> {
        let ids: Vec<usize> = inputs.iter().map(|x| x.id).collect();
        let rg = self.rg(&ids);
        self.push(Arc::new(output), Op::Custom { inputs: ids, op }, rg)
    }

    fn checkpoint(&self, inputs: &[Var<'t>], f: Rc<CheckpointFn>) -> Result<Var<'t>> {
        let out = {
            let sub = Tape::new();
            let vars: Vec<Var<'_>> = inputs
                .iter()
                .map(|x| sub.constant_arc(self.val(x)))
                .collect();
            f(&sub, &vars)?.value()
        };
        let ids: Vec<usize> = inputs.iter().map(|x| x.id).collect();
        let rg = self.rg(&ids);
        Ok(self.push(out, Op::Checkpoint { inputs: ids, f }, rg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fan_out_accumulates() {
        // f = x*x + 3x at x=2 -> df/dx = 2x + 3 = 7
        let tape = Tape::new();
        let g = &tape;
        let x = tape.leaf(Tensor::scalar(2.0));
        let sq = g.mul(&x, &x).unwrap();
        let lin = g.scale(&x, 3.0);
        let f = g.add(&sq, &lin).unwrap();
        let grads = tape.backward(f).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn constants_take_no_gradient() {
        let tape = Tape::new();
        let g = &tape;
        let x = tape.leaf(Tensor::from_slice(&[1.0, 2.0]));
        let c = g.constant(Tensor::from_slice(&[5.0, 7.0]));
        let y = g.mul(&x, &c).unwrap();
        let s = g.sum(&y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[5.0, 7.0]);
        assert!(grads.get(&c).is_none());
    }

    #[test]
    fn non_scalar_root_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([3]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn checkpoint_matches_direct_gradient() {
        let body: Rc<CheckpointFn> = Rc::new(|t, v| {
            let g = &t;
            let a = g.matmul(&v[0], &v[1])?;
            Ok(g.silu(&a))
        });
        let x = Tensor::new([2, 3], vec![0.1, -0.4, 0.3, 0.9, 0.2, -0.7]).unwrap();
        let w = Tensor::new([3, 2], vec![0.5, -0.1, 0.2, 0.3, -0.6, 0.8]).unwrap();
        let run = |ckpt: bool| {
            let tape = Tape::new();
            let g = &tape;
            let xv = tape.leaf(x.clone());
            let wv = tape.leaf(w.clone());
            let y = if ckpt {
                g.checkpoint(&[xv, wv], Rc::clone(&body)).unwrap()
            } else {
                body(&tape, &[xv, wv]).unwrap()
            };
            let s = g.sum(&y);
            let grads = tape.backward(s).unwrap();
            (
                grads.get(&xv).unwrap().clone(),
                grads.get(&wv).unwrap().clone(),
            )
        };
        let (a, b) = run(false);
        let (c, d) = run(true);
        assert_eq!(a, c);
        assert_eq!(b, d);
    }
}
