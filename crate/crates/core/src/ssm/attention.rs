//! Pre-norm multi-head self-attention block, forward only. Scores are fully
//! materialized one head at a time.

use super::vim::LN_EPS;
use super::{Result, SsmError};
use crate::tensor::ops::{self, gemm};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub heads: usize,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    /// `[D, D]` each
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    /// `[D, H]`, `[H]`, `[H, D]`, `[D]`
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Softmax attention over a `[T, D]` input. Also returns head 0's `[T, T]`
/// attention matrix when `keep_probs` is set.
pub fn multi_head_attention(
    x: &Tensor,
    w: &AttentionWeights,
    keep_probs: bool,
) -> Result<(Tensor, Option<Tensor>)> {
    if x.ndim() != 2 {
        return Err(SsmError::Shape(format!(
            "attention expects [T, D], got {:?}",
            x.shape()
        )));
    }
    let (t, d) = (x.shape()[0], x.shape()[1]);
    if w.heads == 0 || d % w.heads != 0 {
        return Err(SsmError::HeadsDontDivide(w.heads, d));
    }
    let dh = d / w.heads;
    let q = ops::matmul(x, &w.wq)?;
    let k = ops::matmul(x, &w.wk)?;
    let v = ops::matmul(x, &w.wv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = vec![0.0; t * d];
    let mut probs = None;
    for h in 0..w.heads {
        let off = h * dh;
        let mut scores = vec![0.0; t * t];
        // Q_h K_h^T
        gemm(
            t,
            dh,
            t,
            &q.data()[off..],
            (d, 1),
            &k.data()[off..],
            (1, d),
            0.0,
            &mut scores,
            (t, 1),
        );
        for s in scores.iter_mut() {
            *s *= scale;
        }
        ops::softmax_rows_in_place(&mut scores, t);
        gemm(
            t,
            t,
            dh,
            &scores,
            (t, 1),
            &v.data()[off..],
            (d, 1),
            0.0,
            &mut ctx[off..],
            (d, 1),
        );
        if keep_probs && h == 0 {
            probs = Some(Tensor::new([t, t], scores)?);
        }
    }
    let ctx = Tensor::new([t, d], ctx)?;
    Ok((ops::matmul(&ctx, &w.wo)?, probs))
}

/// `x1 = S + Wo·attn(LN(S))`, then `x1 + MLP(LN(x1))` with a GELU MLP.
pub fn attention_block_forward(s: &Tensor, w: &AttentionWeights) -> Result<Tensor> {
    let (xn, _) = ops::layernorm(s, &w.ln1_gamma, &w.ln1_beta, LN_EPS)?;
    let (a, _) = multi_head_attention(&xn, w, false)?;
    let x1 = ops::add(s, &a)?;
    let (xn2, _) = ops::layernorm(&x1, &w.ln2_gamma, &w.ln2_beta, LN_EPS)?;
    let hdn = ops::gelu(&ops::add(&ops::matmul(&xn2, &w.w1)?, &w.b1)?);
    let m = ops::add(&ops::matmul(&hdn, &w.w2)?, &w.b2)?;
    Ok(ops::add(&x1, &m)?)
}

impl AttentionWeights {
    /// Deterministic pseudo-random weights for benchmarking.
    pub fn seeded(d: usize, heads: usize, mlp_ratio: usize, seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut m = |rows: usize, cols: usize| {
            let s = 1.0 / (rows as f64).sqrt();
            let data = (0..rows * cols).map(|_| r.gen_range(-s..s)).collect();
            Tensor::new([rows, cols], data).expect("sized")
        };
        let hdim = d * mlp_ratio;
        AttentionWeights {
            heads,
            ln1_gamma: Tensor::ones([d]),
            ln1_beta: Tensor::zeros([d]),
            wq: m(d, d),
            wk: m(d, d),
            wv: m(d, d),
            wo: m(d, d),
            ln2_gamma: Tensor::ones([d]),
            ln2_beta: Tensor::zeros([d]),
            w1: m(d, hdim),
            b1: Tensor::zeros([hdim]),
            w2: m(hdim, d),
            b2: Tensor::zeros([d]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_token_passes_value_path() {
        let w = AttentionWeights::seeded(6, 2, 4, 1);
        let x = Tensor::new([1, 6], vec![0.3, -1.0, 0.2, 0.8, -0.4, 0.1]).unwrap();
        let (out, p) = multi_head_attention(&x, &w, true).unwrap();
        assert_eq!(p.unwrap().data(), &[1.0]);
        let want = ops::matmul(&ops::matmul(&x, &w.wv).unwrap(), &w.wo).unwrap();
        assert!(out.max_abs_diff(&want).unwrap() < 1e-15);
    }

    #[test]
    fn uniform_queries_give_uniform_rows() {
        let mut w = AttentionWeights::seeded(4, 1, 2, 2);
        w.wq = Tensor::zeros([4, 4]);
        let x = Tensor::new([5, 4], (0..20).map(|i| i as f64 * 0.1).collect()).unwrap();
        let (_, p) = multi_head_attention(&x, &w, true).unwrap();
        assert!(p.unwrap().data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn heads_must_divide_width() {
        let w = AttentionWeights::seeded(6, 4, 2, 3);
        let x = Tensor::zeros([3, 6]);
        assert!(matches!(
            attention_block_forward(&x, &w),
            Err(SsmError::HeadsDontDivide(4, 6))
        ));
    }

    #[test]
    fn block_output_shape() {
        let w = AttentionWeights::seeded(8, 2, 4, 4);
        let x = Tensor::new([7, 8], (0..56).map(|i| (i as f64).sin()).collect()).unwrap();
        assert_eq!(attention_block_forward(&x, &w).unwrap().shape(), &[7, 8]);
    }
}
