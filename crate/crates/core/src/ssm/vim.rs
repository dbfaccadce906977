//! Bidirectional residual block: shared input/output projections around a
//! forward and a reversed conv + selective-scan path.

use serde::{Deserialize, Serialize};

use super::scan::selective_scan;
use super::{Direction, Result, SsmError};
use crate::tensor::{Graph, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VimDims {
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub dt_rank: usize,
    pub conv_width: usize,
}

impl VimDims {
    /// State size 16, conv width 4, `dt_rank = ceil(d_model / 16)`.
    pub fn new(d_model: usize, d_inner: usize) -> Self {
        VimDims {
            d_model,
            d_inner,
            d_state: 16,
            dt_rank: d_model.div_ceil(16),
            conv_width: 4,
        }
    }
}

/// Parameters of one scan direction.
#[derive(Debug, Clone)]
pub struct DirectionWeights<N> {
    /// `[E, Kw]`
    pub conv_weight: N,
    /// `[E]`
    pub conv_bias: N,
    /// `[E, R]`
    pub x_proj_dt: N,
    /// `[E, Ns]`
    pub x_proj_b: N,
    /// `[E, Ns]`
    pub x_proj_c: N,
    /// `[R, E]`
    pub dt_proj: N,
    /// `[E]`
    pub dt_bias: N,
    /// `[E, Ns]`
    pub a_log: N,
    /// `[E]`
    pub d_skip: N,
}

#[derive(Debug, Clone)]
pub struct VimWeights<N> {
    pub norm_gamma: N,
    pub norm_beta: N,
    /// `[D, E]`
    pub in_proj_x: N,
    /// `[D, E]`
    pub in_proj_z: N,
    /// `[E, D]`
    pub out_proj: N,
    pub fwd: DirectionWeights<N>,
    pub bwd: DirectionWeights<N>,
}

impl<N: Clone> DirectionWeights<N> {
    /// Field names in [`DirectionWeights::to_vec`] order.
    pub const NAMES: [&'static str; 9] = [
        "conv_weight",
        "conv_bias",
        "x_proj_dt",
        "x_proj_b",
        "x_proj_c",
        "dt_proj",
        "dt_bias",
        "a_log",
        "d_skip",
    ];

    pub fn to_vec(&self) -> Vec<N> {
        vec![
            self.conv_weight.clone(),
            self.conv_bias.clone(),
            self.x_proj_dt.clone(),
            self.x_proj_b.clone(),
            self.x_proj_c.clone(),
            self.dt_proj.clone(),
            self.dt_bias.clone(),
            self.a_log.clone(),
            self.d_skip.clone(),
        ]
    }

    /// Inverse of [`DirectionWeights::to_vec`]; `v` must hold 9 entries.
    pub fn from_slice(v: &[N]) -> Self {
        DirectionWeights {
            conv_weight: v[0].clone(),
            conv_bias: v[1].clone(),
            x_proj_dt: v[2].clone(),
            x_proj_b: v[3].clone(),
            x_proj_c: v[4].clone(),
            dt_proj: v[5].clone(),
            dt_bias: v[6].clone(),
            a_log: v[7].clone(),
            d_skip: v[8].clone(),
        }
    }
}

impl<N: Clone> VimWeights<N> {
    pub const SHARED_NAMES: [&'static str; 5] = [
        "norm_gamma",
        "norm_beta",
        "in_proj_x",
        "in_proj_z",
        "out_proj",
    ];
    pub const LEN: usize = 23;

    /// Shared tensors, then the forward and backward direction groups.
    pub fn to_vec(&self) -> Vec<N> {
        let mut v = vec![
            self.norm_gamma.clone(),
            self.norm_beta.clone(),
            self.in_proj_x.clone(),
            self.in_proj_z.clone(),
            self.out_proj.clone(),
        ];
        v.extend(self.fwd.to_vec());
        v.extend(self.bwd.to_vec());
        v
    }

    /// Inverse of [`VimWeights::to_vec`]; `v` must hold [`VimWeights::LEN`] entries.
    pub fn from_slice(v: &[N]) -> Self {
        VimWeights {
            norm_gamma: v[0].clone(),
            norm_beta: v[1].clone(),
            in_proj_x: v[2].clone(),
            in_proj_z: v[3].clone(),
            out_proj: v[4].clone(),
            fwd: DirectionWeights::from_slice(&v[5..14]),
            bwd: DirectionWeights::from_slice(&v[14..23]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanMode {
    Bidirectional,
    /// Forward path only, so every output depends on earlier tokens alone.
    Causal,
}

fn direction_path<G: Graph>(
    g: &G,
    x: &G::Node,
    w: &DirectionWeights<G::Node>,
    direction: Direction,
) -> Result<G::Node> {
    let xc = g.conv1d(x, &w.conv_weight, &w.conv_bias, direction.is_reverse())?;
    let xs = g.silu(&xc);
    let dt_low = g.matmul(&xs, &w.x_proj_dt)?;
    let dt = g.matmul(&dt_low, &w.dt_proj)?;
    let b = g.matmul(&xs, &w.x_proj_b)?;
    let c = g.matmul(&xs, &w.x_proj_c)?;
    let inputs = [
        xs,
        dt,
        w.dt_bias.clone(),
        w.a_log.clone(),
        b,
        c,
        w.d_skip.clone(),
    ];
    let (y, op) = {
        let vals: Vec<_> = inputs.iter().map(|n| g.value(n)).collect();
        let refs: [&Tensor; 7] = std::array::from_fn(|k| vals[k].as_ref());
        selective_scan(&refs, direction)?
    };
    Ok(g.custom(&inputs, y, Box::new(op)))
}

/// `S + out_proj((y_fwd + y_bwd) ⊙ silu(z))` where `x, z` are the two input
/// projections of `LayerNorm(S)`. `s` is `[T, D]` or `[B, T, D]`.
pub fn vim_block_forward<G: Graph>(
    g: &G,
    s: &G::Node,
    w: &VimWeights<G::Node>,
    dims: &VimDims,
    mode: ScanMode,
) -> Result<G::Node> {
    let shape = g.value(s).shape().to_vec();
    if shape.len() < 2 || shape[shape.len() - 1] != dims.d_model {
        return Err(SsmError::Shape(format!(
            "block input {:?} does not end in model width {}",
            shape, dims.d_model
        )));
    }
    let xn = g.layernorm(s, &w.norm_gamma, &w.norm_beta, LN_EPS)?;
    let x = g.matmul(&xn, &w.in_proj_x)?;
    let z = g.matmul(&xn, &w.in_proj_z)?;
    let mut y = direction_path(g, &x, &w.fwd, Direction::Forward)?;
    if mode == ScanMode::Bidirectional {
        let yb = direction_path(g, &x, &w.bwd, Direction::Backward)?;
        y = g.add(&y, &yb)?;
    }
    let gate = g.silu(&z);
    let gated = g.mul(&y, &gate)?;
    let out = g.matmul(&gated, &w.out_proj)?;
    Ok(g.add(s, &out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gradcheck, ops, Eager, TensorError, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn rand_t(r: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| r.gen_range(-scale..scale)).collect(),
        )
        .unwrap()
    }

    fn dir(r: &mut ChaCha8Rng, d: &VimDims) -> DirectionWeights<Tensor> {
        let (e, n, k, q) = (d.d_inner, d.d_state, d.conv_width, d.dt_rank);
        DirectionWeights {
            conv_weight: rand_t(r, &[e, k], 0.7),
            conv_bias: rand_t(r, &[e], 0.3),
            x_proj_dt: rand_t(r, &[e, q], 0.6),
            x_proj_b: rand_t(r, &[e, n], 0.6),
            x_proj_c: rand_t(r, &[e, n], 0.6),
            dt_proj: rand_t(r, &[q, e], 0.6),
            dt_bias: rand_t(r, &[e], 1.0),
            a_log: rand_t(r, &[e, n], 1.0),
            d_skip: rand_t(r, &[e], 1.0),
        }
    }

    fn weights(d: &VimDims, seed: u64) -> VimWeights<Tensor> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        VimWeights {
            norm_gamma: rand_t(&mut r, &[d.d_model], 1.0),
            norm_beta: rand_t(&mut r, &[d.d_model], 0.5),
            in_proj_x: rand_t(&mut r, &[d.d_model, d.d_inner], 0.5),
            in_proj_z: rand_t(&mut r, &[d.d_model, d.d_inner], 0.5),
            out_proj: rand_t(&mut r, &[d.d_inner, d.d_model], 0.5),
            fwd: dir(&mut r, d),
            bwd: dir(&mut r, d),
        }
    }

    fn flatten(w: &VimWeights<Tensor>) -> Vec<Tensor> {
        w.to_vec()
    }

    fn rebuild<N: Clone>(v: &[N]) -> VimWeights<N> {
        VimWeights::from_slice(v)
    }

    fn eager(w: &VimWeights<Tensor>) -> VimWeights<Arc<Tensor>> {
        let v: Vec<Arc<Tensor>> = flatten(w).into_iter().map(Arc::new).collect();
        rebuild(&v)
    }

    fn dims() -> VimDims {
        VimDims {
            d_model: 8,
            d_inner: 16,
            d_state: 4,
            dt_rank: 1,
            conv_width: 4,
        }
    }

    #[test]
    fn zero_weights_are_pure_residual() {
        let d = dims();
        let mut w = weights(&d, 1);
        w.in_proj_x = Tensor::zeros([8, 16]);
        w.in_proj_z = Tensor::zeros([8, 16]);
        for p in [&mut w.fwd, &mut w.bwd] {
            p.conv_bias = Tensor::zeros([16]);
        }
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let s = Arc::new(rand_t(&mut r, &[9, 8], 1.0));
        let out = vim_block_forward(&Eager, &s, &eager(&w), &d, ScanMode::Bidirectional).unwrap();
        assert_eq!(out.as_ref(), s.as_ref());
    }

    #[test]
    fn reversal_swaps_directions() {
        let d = dims();
        let w = weights(&d, 3);
        let mut swapped = w.clone();
        std::mem::swap(&mut swapped.fwd, &mut swapped.bwd);
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let s = rand_t(&mut r, &[2, 9, 8], 1.0);
        let y = vim_block_forward(
            &Eager,
            &Arc::new(s.clone()),
            &eager(&w),
            &d,
            ScanMode::Bidirectional,
        )
        .unwrap();
        let sr = Arc::new(ops::flip(&s, 1).unwrap());
        let yr =
            vim_block_forward(&Eager, &sr, &eager(&swapped), &d, ScanMode::Bidirectional).unwrap();
        let back = ops::flip(&yr, 1).unwrap();
        assert!(back.max_abs_diff(&y).unwrap() < 1e-10);
    }

    #[test]
    fn causal_mode_ignores_future() {
        let d = dims();
        let w = eager(&weights(&d, 5));
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let s = rand_t(&mut r, &[9, 8], 1.0);
        let mut s2 = s.clone();
        s2.data_mut()[6 * 8 + 3] += 1.0;
        for (mode, future_blind) in [(ScanMode::Causal, true), (ScanMode::Bidirectional, false)] {
            let a = vim_block_forward(&Eager, &Arc::new(s.clone()), &w, &d, mode).unwrap();
            let b = vim_block_forward(&Eager, &Arc::new(s2.clone()), &w, &d, mode).unwrap();
            assert_eq!(a.data()[..48] == b.data()[..48], future_blind);
        }
    }

    #[test]
    fn block_gradcheck() {
        let d = dims();
        let w = weights(&d, 7);
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let mut inputs = vec![rand_t(&mut r, &[9, 8], 1.0)];
        inputs.extend(flatten(&w));
        let target = rand_t(&mut r, &[9, 8], 1.0);
        let report = gradcheck::check(
            &inputs,
            move |tape, v: &[Var<'_>]| {
                let g = &tape;
                let w = rebuild(&v[1..]);
                let y = vim_block_forward(g, &v[0], &w, &d, ScanMode::Bidirectional)
                    .map_err(|e| TensorError::invalid("block", e.to_string()))?;
                let t = g.constant(target.clone());
                g.mse(&y, &t)
            },
            1e-5,
            12,
            0,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
