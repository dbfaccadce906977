//! Time-invariant special case: the recurrence unrolls into a causal
//! convolution with kernel `K[k] = Σ_n C_n Ā_n^k B̄_n`.

use super::{Result, SsmError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LtiKernel {
    pub k: Vec<f64>,
}

/// Kernel of length `len` for a diagonal system with discretized `abar`,
/// `bbar` and output weights `c`.
pub fn lti_kernel(abar: &[f64], bbar: &[f64], c: &[f64], len: usize) -> Result<LtiKernel> {
    if abar.len() != bbar.len() || abar.len() != c.len() || abar.is_empty() {
        return Err(SsmError::Shape(
            "Ā, B̄ and C must have equal non-zero length".into(),
        ));
    }
    let mut pow: Vec<f64> = vec![1.0; abar.len()];
    let mut k = Vec::with_capacity(len);
    for _ in 0..len {
        k.push((0..abar.len()).map(|n| c[n] * pow[n] * bbar[n]).sum());
        for (p, a) in pow.iter_mut().zip(abar) {
            *p *= a;
        }
    }
    Ok(LtiKernel { k })
}

/// `y_t = Σ_{k ≤ t} K[k] u_{t-k}` over the last axis of `u: [B, L]`.
pub fn lti_kernel_apply(u: &Tensor, kernel: &LtiKernel) -> Result<Tensor> {
    let l = u.last_dim();
    if kernel.k.len() < l {
        return Err(SsmError::Shape(format!(
            "kernel length {} shorter than sequence {}",
            kernel.k.len(),
            l
        )));
    }
    let mut y = vec![0.0; u.numel()];
    for (row, out) in u
        .data()
        .chunks_exact(l.max(1))
        .zip(y.chunks_exact_mut(l.max(1)))
    {
        for t in 0..l {
            out[t] = (0..=t).map(|k| kernel.k[k] * row[t - k]).sum();
        }
    }
    Ok(Tensor::new(u.shape().to_vec(), y)?)
}

/// The same system evaluated by its recurrence `h_t = Ā h_{t-1} + B̄ u_t`,
/// `y_t = C h_t`.
pub fn lti_recurrence(u: &Tensor, abar: &[f64], bbar: &[f64], c: &[f64]) -> Result<Tensor> {
    let l = u.last_dim();
    let mut y = vec![0.0; u.numel()];
    for (row, out) in u
        .data()
        .chunks_exact(l.max(1))
        .zip(y.chunks_exact_mut(l.max(1)))
    {
        let mut h = vec![0.0; abar.len()];
        for t in 0..l {
            let mut acc = 0.0;
            for n in 0..abar.len() {
                h[n] = abar[n] * h[n] + bbar[n] * row[t];
                acc += c[n] * h[n];
            }
            out[t] = acc;
        }
    }
    Ok(Tensor::new(u.shape().to_vec(), y)?)
}
