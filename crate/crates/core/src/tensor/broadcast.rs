//! Numpy-style broadcasting helpers.

use super::{Result, Tensor, TensorError};

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i < n - a.len() {
            1
        } else {
            a[i - (n - a.len())]
        };
        let db = if i < n - b.len() {
            1
        } else {
            b[i - (n - b.len())]
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(TensorError::mismatch(op, a, b)),
        };
    }
    Ok(out)
}

/// For every linear index of `out`, the linear index into a tensor of shape
/// `src` broadcast to `out`.
pub(crate) fn index_map(src: &[usize], out: &[usize]) -> Vec<usize> {
    let n = out.len();
    let offset = n - src.len();
    let mut strides = vec![0usize; n];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        strides[i + offset] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    let numel: usize = out.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; n];
    let mut lin = 0usize;
    for _ in 0..numel {
        map.push(lin);
        for d in (0..n).rev() {
            idx[d] += 1;
            lin += strides[d];
            if idx[d] < out[d] {
                break;
            }
            lin -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

/// True when `b` equals a suffix of `a`, so `b` repeats over contiguous blocks.
pub(crate) fn is_suffix(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

/// Sum a gradient of the broadcast shape back down to `shape`.
pub(crate) fn sum_to_shape(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let numel: usize = shape.iter().product();
    let mut out = vec![0.0; numel];
    if is_suffix(grad.shape(), shape) && numel > 0 {
        for chunk in grad.data().chunks_exact(numel) {
            for (o, g) in out.iter_mut().zip(chunk) {
                *o += g;
            }
        }
    } else {
        let map = index_map(shape, grad.shape());
        for (g, &i) in grad.data().iter().zip(&map) {
            out[i] += g;
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

/// Apply `f` element-wise over the broadcast of `a` and `b`.
pub(crate) fn zip_with(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let out = broadcast_shape(op, a.shape(), b.shape())?;
    if out == a.shape() && is_suffix(a.shape(), b.shape()) && b.numel() > 0 {
        let mut data = Vec::with_capacity(a.numel());
        for chunk in a.data().chunks_exact(b.numel()) {
            data.extend(chunk.iter().zip(b.data()).map(|(&x, &y)| f(x, y)));
        }
        return Ok(Tensor::from_parts(out, data));
    }
    if out == b.shape() && is_suffix(b.shape(), a.shape()) && a.numel() > 0 {
        let mut data = Vec::with_capacity(b.numel());
        for chunk in b.data().chunks_exact(a.numel()) {
            data.extend(a.data().iter().zip(chunk).map(|(&x, &y)| f(x, y)));
        }
        return Ok(Tensor::from_parts(out, data));
    }
    let ma = index_map(a.shape(), &out);
    let mb = index_map(b.shape(), &out);
    let data = ma
        .iter()
        .zip(&mb)
        .map(|(&i, &j)| f(a.data()[i], b.data()[j]))
        .collect();
    Ok(Tensor::from_parts(out, data))
}
