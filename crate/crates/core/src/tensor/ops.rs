//! Eager forward kernels and the backward helpers used by the tape.

use super::broadcast::{broadcast_shape, index_map, sum_to_shape, zip_with};
use super::fastmath;
use super::{Result, Tensor, TensorError};

/// `c = alpha * a(m x k) * b(k x n) + beta * c` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(
            (m - 1) * rsa + (k - 1) * csa < a.len(),
            "gemm: lhs out of bounds"
        );
        assert!(
            (k - 1) * rsb + (n - 1) * csb < b.len(),
            "gemm: rhs out of bounds"
        );
    }
    assert!(
        (m - 1) * rsc + (n - 1) * csc < c.len(),
        "gemm: output out of bounds"
    );
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn split_matrix(op: &'static str, t: &Tensor) -> Result<(Vec<usize>, usize, usize)> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(TensorError::invalid(
            op,
            format!("expected at least 2 dims, got {:?}", s),
        ));
    }
    Ok((s[..s.len() - 2].to_vec(), s[s.len() - 2], s[s.len() - 1]))
}

/// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]` with
/// broadcast batch dimensions.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ba, m, k) = split_matrix("matmul", a)?;
    let (bb, k2, n) = split_matrix("matmul", b)?;
    if k != k2 {
        return Err(TensorError::mismatch("matmul", a.shape(), b.shape()));
    }
    let batch = broadcast_shape("matmul", &ba, &bb)
        .map_err(|_| TensorError::mismatch("matmul", a.shape(), b.shape()))?;
    let mut shape = batch.clone();
    shape.extend([m, n]);
    let nb: usize = batch.iter().product();
    let mut out = vec![0.0; nb * m * n];
    if bb.iter().product::<usize>() == 1 && ba == batch {
        // Fold the batch of `a` into its rows.
        gemm(
            nb * m,
            k,
            n,
            a.data(),
            (k, 1),
            b.data(),
            (n, 1),
            0.0,
            &mut out,
            (n, 1),
        );
    } else {
        let ma = index_map(&ba, &batch);
        let mb = index_map(&bb, &batch);
        for o in 0..nb {
            gemm(
                m,
                k,
                n,
                &a.data()[ma[o] * m * k..][..m * k],
                (k, 1),
                &b.data()[mb[o] * k * n..][..k * n],
                (n, 1),
                0.0,
                &mut out[o * m * n..][..m * n],
                (n, 1),
            );
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

/// Gradients of [`matmul`] with respect to both operands.
pub fn matmul_backward(a: &Tensor, b: &Tensor, grad: &Tensor) -> Result<(Tensor, Tensor)> {
    let (ba, m, k) = split_matrix("matmul_backward", a)?;
    let (bb, _, n) = split_matrix("matmul_backward", b)?;
    let batch = broadcast_shape("matmul_backward", &ba, &bb)?;
    let nb: usize = batch.iter().product();
    let mut ga = vec![0.0; a.numel()];
    let mut gb = vec![0.0; b.numel()];
    let g = grad.data();
    if bb.iter().product::<usize>() == 1 && ba == batch {
        let rows = nb * m;
        // ga = G * B^T, gb = A^T * G
        gemm(
            rows,
            n,
            k,
            g,
            (n, 1),
            b.data(),
            (1, n),
            0.0,
            &mut ga,
            (k, 1),
        );
        gemm(
            k,
            rows,
            n,
            a.data(),
            (1, k),
            g,
            (n, 1),
            0.0,
            &mut gb,
            (n, 1),
        );
    } else {
        let ma = index_map(&ba, &batch);
        let mb = index_map(&bb, &batch);
        for o in 0..nb {
            let go = &g[o * m * n..][..m * n];
            let ao = &a.data()[ma[o] * m * k..][..m * k];
            let bo = &b.data()[mb[o] * k * n..][..k * n];
            gemm(
                m,
                n,
                k,
                go,
                (n, 1),
                bo,
                (1, n),
                1.0,
                &mut ga[ma[o] * m * k..][..m * k],
                (k, 1),
            );
            gemm(
                k,
                m,
                n,
                ao,
                (1, k),
                go,
                (n, 1),
                1.0,
                &mut gb[mb[o] * k * n..][..k * n],
                (n, 1),
            );
        }
    }
    Ok((
        Tensor::from_parts(a.shape().to_vec(), ga),
        Tensor::from_parts(b.shape().to_vec(), gb),
    ))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("mul", a, b, |x, y| x * y)
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    a.map(|v| v * s)
}

/// Reduce a broadcast gradient back to an operand's shape.
pub fn reduce_grad(grad: &Tensor, shape: &[usize]) -> Tensor {
    sum_to_shape(grad, shape)
}

pub fn exp(a: &Tensor) -> Tensor {
    a.map(fastmath::exp)
}

pub fn softplus(a: &Tensor) -> Tensor {
    a.map(fastmath::softplus)
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    a.map(fastmath::sigmoid)
}

pub fn silu(a: &Tensor) -> Tensor {
    a.map(fastmath::silu)
}

pub fn gelu(a: &Tensor) -> Tensor {
    a.map(fastmath::gelu)
}

/// Per-row statistics saved by [`layernorm`] for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

fn check_affine(op: &'static str, x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<usize> {
    let d = x.last_dim();
    if x.ndim() == 0 || d == 0 {
        return Err(TensorError::invalid(
            op,
            "input needs a non-empty last axis",
        ));
    }
    if gamma.shape() != [d] {
        return Err(TensorError::mismatch(op, x.shape(), gamma.shape()));
    }
    if beta.shape() != [d] {
        return Err(TensorError::mismatch(op, x.shape(), beta.shape()));
    }
    Ok(d)
}

/// Standardize over the last axis (population variance) then apply
/// `gamma * xhat + beta`.
pub fn layernorm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormStats)> {
    let d = check_affine("layernorm", x, gamma, beta)?;
    if eps <= 0.0 {
        return Err(TensorError::invalid("layernorm", "eps must be positive"));
    }
    let rows = x.numel() / d;
    let mut out = vec![0.0; x.numel()];
    let mut mean = Vec::with_capacity(rows);
    let mut rstd = Vec::with_capacity(rows);
    let (g, b) = (gamma.data(), beta.data());
    for (row, o) in x.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            o[j] = (row[j] - mu) * rs * g[j] + b[j];
        }
        mean.push(mu);
        rstd.push(rs);
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out),
        LayerNormStats { mean, rstd },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layernorm_backward(
    x: &Tensor,
    gamma: &Tensor,
    stats: &LayerNormStats,
    grad: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let d = x.last_dim();
    let mut dx = vec![0.0; x.numel()];
    let mut dg = vec![0.0; d];
    let mut db = vec![0.0; d];
    let g = gamma.data();
    let mut xhat = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for (r, ((row, gr), dxr)) in x
        .data()
        .chunks_exact(d)
        .zip(grad.data().chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .enumerate()
    {
        let (mu, rs) = (stats.mean[r], stats.rstd[r]);
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            xhat[j] = (row[j] - mu) * rs;
            dxhat[j] = gr[j] * g[j];
            dg[j] += gr[j] * xhat[j];
            db[j] += gr[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xhat[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for j in 0..d {
            dxr[j] = rs * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(vec![d], dg),
        Tensor::from_parts(vec![d], db),
    )
}

fn conv_dims(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if x.ndim() < 2 {
        return Err(TensorError::invalid("conv1d", "input must be [.., L, E]"));
    }
    let s = x.shape();
    let (l, e) = (s[s.len() - 2], s[s.len() - 1]);
    let batch = x.numel() / (l * e).max(1);
    if w.ndim() != 2 || w.shape()[0] != e || w.shape()[1] == 0 {
        return Err(TensorError::mismatch("conv1d", x.shape(), w.shape()));
    }
    if bias.shape() != [e] {
        return Err(TensorError::mismatch("conv1d", x.shape(), bias.shape()));
    }
    Ok((batch, l, e, w.shape()[1]))
}

/// Depthwise causal convolution over the second-to-last axis.
///
/// `out[t, e] = bias[e] + sum_j w[e, j] * x[t - (K - 1) + j, e]`, with
/// out-of-range inputs read as zero. With `reverse` the kernel runs over the
/// time-reversed sequence and the output is reversed back, which makes it
/// anti-causal.
pub fn conv1d_causal(x: &Tensor, w: &Tensor, bias: &Tensor, reverse: bool) -> Result<Tensor> {
    let (batch, l, e, kw) = conv_dims(x, w, bias)?;
    let mut out = vec![0.0; x.numel()];
    let (xd, wd, bd) = (x.data(), w.data(), bias.data());
    for bi in 0..batch {
        let xb = &xd[bi * l * e..][..l * e];
        let ob = &mut out[bi * l * e..][..l * e];
        for t in 0..l {
            let orow = &mut ob[t * e..][..e];
            orow.copy_from_slice(bd);
            for j in 0..kw {
                let lag = kw - 1 - j;
                let src = if reverse {
                    t + lag
                } else {
                    t.wrapping_sub(lag)
                };
                if src >= l {
                    continue;
                }
                let xrow = &xb[src * e..][..e];
                for c in 0..e {
                    orow[c] += wd[c * kw + j] * xrow[c];
                }
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Returns `(dx, dw, dbias)` for [`conv1d_causal`].
pub fn conv1d_causal_backward(
    x: &Tensor,
    w: &Tensor,
    grad: &Tensor,
    reverse: bool,
) -> (Tensor, Tensor, Tensor) {
    let s = x.shape();
    let (l, e) = (s[s.len() - 2], s[s.len() - 1]);
    let kw = w.shape()[1];
    let batch = x.numel() / (l * e).max(1);
    let mut dx = vec![0.0; x.numel()];
    let mut dw = vec![0.0; w.numel()];
    let mut db = vec![0.0; e];
    let (xd, wd, gd) = (x.data(), w.data(), grad.data());
    for bi in 0..batch {
        let xb = &xd[bi * l * e..][..l * e];
        let gb = &gd[bi * l * e..][..l * e];
        let dxb = &mut dx[bi * l * e..][..l * e];
        for t in 0..l {
            let grow = &gb[t * e..][..e];
            for c in 0..e {
                db[c] += grow[c];
            }
            for j in 0..kw {
                let lag = kw - 1 - j;
                let src = if reverse {
                    t + lag
                } else {
                    t.wrapping_sub(lag)
                };
                if src >= l {
                    continue;
                }
                for c in 0..e {
                    dw[c * kw + j] += grow[c] * xb[src * e + c];
                    dxb[src * e + c] += grow[c] * wd[c * kw + j];
                }
            }
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(w.shape().to_vec(), dw),
        Tensor::from_parts(vec![e], db),
    )
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Slice `len` entries starting at `start` along `axis`.
pub fn narrow(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= x.ndim() || start + len > x.shape()[axis] {
        return Err(TensorError::invalid(
            "narrow",
            format!(
                "range {}..{} on axis {} of {:?}",
                start,
                start + len,
                axis,
                x.shape()
            ),
        ));
    }
    let (outer, size, inner) = axis_layout(x.shape(), axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * size + start) * inner;
        data.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, data))
}

/// Scatter a gradient of a [`narrow`] slice back into the full shape.
pub fn narrow_backward(shape: &[usize], axis: usize, start: usize, grad: &Tensor) -> Tensor {
    let (outer, size, inner) = axis_layout(shape, axis);
    let len = grad.shape()[axis];
    let mut data = vec![0.0; shape.iter().product()];
    for o in 0..outer {
        let dst = (o * size + start) * inner;
        let src = o * len * inner;
        data[dst..dst + len * inner].copy_from_slice(&grad.data()[src..src + len * inner]);
    }
    Tensor::from_parts(shape.to_vec(), data)
}

pub fn concat(xs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
    if axis >= first.ndim() {
        return Err(TensorError::invalid("concat", "axis out of range"));
    }
    for x in xs {
        let ok = x.ndim() == first.ndim()
            && x.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(TensorError::mismatch("concat", first.shape(), x.shape()));
        }
    }
    let (outer, _, inner) = axis_layout(first.shape(), axis);
    let total: usize = xs.iter().map(|x| x.shape()[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for x in xs {
            let len = x.shape()[axis] * inner;
            data.extend_from_slice(&x.data()[o * len..(o + 1) * len]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, data))
}

/// Reverse the order of entries along `axis`.
pub fn flip(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.ndim() {
        return Err(TensorError::invalid("flip", "axis out of range"));
    }
    let (outer, size, inner) = axis_layout(x.shape(), axis);
    let mut data = Vec::with_capacity(x.numel());
    for o in 0..outer {
        for i in (0..size).rev() {
            let base = (o * size + i) * inner;
            data.extend_from_slice(&x.data()[base..base + inner]);
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

/// Softmax over the last axis, in place.
pub fn softmax_rows_in_place(data: &mut [f64], width: usize) {
    for row in data.chunks_exact_mut(width) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = fastmath::exp(*v - max);
            total += *v;
        }
        let inv = 1.0 / total;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

pub fn softmax(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let w = x.last_dim();
    if w > 0 {
        softmax_rows_in_place(out.data_mut(), w);
    }
    out
}

pub fn transpose2d(x: &Tensor) -> Result<Tensor> {
    if x.ndim() != 2 {
        return Err(TensorError::invalid("transpose2d", "expected a matrix"));
    }
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = x.data()[i * c + j];
        }
    }
    Ok(Tensor::from_parts(vec![c, r], data))
}
