//! Forward and backward kernels.
//!
//! Backward functions take the saved forward inputs (or a cache) and the
//! upstream gradient and return input gradients. Parameter gradients are
//! separate functions so frozen callers never allocate them.

use crate::error::{Result, VillmError};

use super::{ensure_finite, Tensor};

/// `c = a * b` (or `c += a * b` when `accumulate`) on strided row-major
/// buffers. `a` is m×k, `b` is k×n, `c` is m×n contiguous.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let max_a = (m - 1) as isize * a_strides.0 + (k - 1) as isize * a_strides.1;
    let max_b = (k - 1) as isize * b_strides.0 + (n - 1) as isize * b_strides.1;
    assert!(max_a >= 0 && (max_a as usize) < a.len());
    assert!(max_b >= 0 && (max_b as usize) < b.len());
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index dgemm touches in a and b,
    // and c holds m*n contiguous elements with row stride n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> VillmError {
    VillmError::Shape {
        op,
        lhs: a.dims().to_vec(),
        rhs: b.dims().to_vec(),
    }
}

fn finite(op: &str, t: Tensor) -> Result<Tensor> {
    ensure_finite(op, t.data())?;
    Ok(t)
}

/// Matrix product of an M×D and a D×K tensor.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, d) = a.shape2().map_err(|_| shape_err("matmul", a, b))?;
    let (d2, k) = b.shape2().map_err(|_| shape_err("matmul", a, b))?;
    if d != d2 {
        return Err(shape_err("matmul", a, b));
    }
    let mut out = vec![0.0; m * k];
    gemm(m, d, k, a.data(), (d as isize, 1), b.data(), (k as isize, 1), &mut out, false);
    finite("matmul", Tensor::from_parts(vec![m, k], out))
}

/// `a * bᵀ` for a M×D and b K×D.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, d) = a.shape2().map_err(|_| shape_err("matmul_nt", a, b))?;
    let (k, d2) = b.shape2().map_err(|_| shape_err("matmul_nt", a, b))?;
    if d != d2 {
        return Err(shape_err("matmul_nt", a, b));
    }
    let mut out = vec![0.0; m * k];
    gemm(m, d, k, a.data(), (d as isize, 1), b.data(), (1, d as isize), &mut out, false);
    finite("matmul_nt", Tensor::from_parts(vec![m, k], out))
}

/// `aᵀ * b` for a D×M and b D×K.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (d, m) = a.shape2().map_err(|_| shape_err("matmul_tn", a, b))?;
    let (d2, k) = b.shape2().map_err(|_| shape_err("matmul_tn", a, b))?;
    if d != d2 {
        return Err(shape_err("matmul_tn", a, b));
    }
    let mut out = vec![0.0; m * k];
    gemm(m, d, k, a.data(), (1, m as isize), b.data(), (k as isize, 1), &mut out, false);
    finite("matmul_tn", Tensor::from_parts(vec![m, k], out))
}

/// Gradients of `c = a * b`: `(dA, dB) = (dC·Bᵀ, Aᵀ·dC)`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, dc: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((matmul_backward_lhs(b, dc)?, matmul_tn(a, dc)?))
}

/// Only `dA = dC·Bᵀ`, for callers whose right operand is frozen.
pub fn matmul_backward_lhs(b: &Tensor, dc: &Tensor) -> Result<Tensor> {
    matmul_nt(dc, b)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.shape2()?;
    let src = a.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Ok(Tensor::from_parts(vec![c, r], out))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(shape_err("add", a, b));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    finite("add", Tensor::from_parts(a.dims().to_vec(), data))
}

pub fn scale(a: &Tensor, s: f64) -> Result<Tensor> {
    let data = a.data().iter().map(|x| x * s).collect();
    finite("scale", Tensor::from_parts(a.dims().to_vec(), data))
}

/// Adds a length-C bias to every row of an R×C tensor.
pub fn add_row_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, c) = x.shape2().map_err(|_| shape_err("add_row_bias", x, bias))?;
    if bias.dims() != [c] {
        return Err(shape_err("add_row_bias", x, bias));
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    finite("add_row_bias", Tensor::from_parts(x.dims().to_vec(), out))
}

/// Column sums of an R×C tensor: the bias gradient of [`add_row_bias`].
pub fn sum_rows(x: &Tensor) -> Result<Tensor> {
    let (_, c) = x.shape2()?;
    let mut out = vec![0.0; c];
    for row in x.data().chunks(c) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Ok(Tensor::from_parts(vec![c], out))
}

/// Stacks rank-2 tensors with equal column counts.
pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| VillmError::Config("concat_rows of nothing".into()))?;
    let (_, c) = first.shape2()?;
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        let (r, c2) = p.shape2().map_err(|_| shape_err("concat_rows", first, p))?;
        if c2 != c {
            return Err(shape_err("concat_rows", first, p));
        }
        rows += r;
        data.extend_from_slice(p.data());
    }
    Ok(Tensor::from_parts(vec![rows, c], data))
}

/// Rows `[start, end)` of a rank-2 tensor.
pub fn slice_rows(x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let (r, c) = x.shape2()?;
    if start >= end || end > r {
        return Err(VillmError::Shape {
            op: "slice_rows",
            lhs: x.dims().to_vec(),
            rhs: vec![start, end],
        });
    }
    Ok(Tensor::from_parts(
        vec![end - start, c],
        x.data()[start * c..end * c].to_vec(),
    ))
}

fn axis_split(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

/// Arithmetic mean along `axis`, which is removed from the output shape.
/// Reducing a rank-1 tensor yields a length-1 tensor.
pub fn mean_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(VillmError::Axis {
            axis,
            rank: x.rank(),
        });
    }
    let (outer, len, inner) = axis_split(x.dims(), axis);
    let src = x.data();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for a in 0..len {
            let base = (o * len + a) * inner;
            for (d, s) in dst.iter_mut().zip(&src[base..base + inner]) {
                *d += s;
            }
        }
        let inv = 1.0 / len as f64;
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    let mut dims = x.dims().to_vec();
    dims.remove(axis);
    if dims.is_empty() {
        dims.push(1);
    }
    finite("mean_axis", Tensor::from_parts(dims, out))
}

/// Spreads `dy` uniformly back over the reduced axis.
pub fn mean_axis_backward(input_dims: &[usize], axis: usize, dy: &Tensor) -> Result<Tensor> {
    if axis >= input_dims.len() {
        return Err(VillmError::Axis {
            axis,
            rank: input_dims.len(),
        });
    }
    let (outer, len, inner) = axis_split(input_dims, axis);
    if dy.numel() != outer * inner {
        return Err(VillmError::Shape {
            op: "mean_axis_backward",
            lhs: input_dims.to_vec(),
            rhs: dy.dims().to_vec(),
        });
    }
    let inv = 1.0 / len as f64;
    let g = dy.data();
    let mut out = vec![0.0; outer * len * inner];
    for o in 0..outer {
        for a in 0..len {
            let base = (o * len + a) * inner;
            for (d, s) in out[base..base + inner].iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                *d = s * inv;
            }
        }
    }
    Ok(Tensor::from_parts(input_dims.to_vec(), out))
}

/// Saved state of a layer-norm forward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
    width: usize,
}

/// Per-row normalization over the last axis followed by `gain ⊙ x̂ + bias`.
pub fn layer_norm(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    let width = *x.dims().last().expect("rank >= 1");
    if gain.dims() != [width] || bias.dims() != [width] {
        return Err(shape_err("layer_norm", x, gain));
    }
    if eps <= 0.0 {
        return Err(VillmError::Config(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let rows = x.numel() / width;
    let mut out = vec![0.0; x.numel()];
    let mut xhat = vec![0.0; x.numel()];
    let mut rstd = vec![0.0; rows];
    let (g, b) = (gain.data(), bias.data());
    for r in 0..rows {
        let row = &x.data()[r * width..(r + 1) * width];
        let mean = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..width {
            let h = (row[j] - mean) * rs;
            xhat[r * width + j] = h;
            out[r * width + j] = g[j] * h + b[j];
        }
    }
    let y = finite("layer_norm", Tensor::from_parts(x.dims().to_vec(), out))?;
    Ok((y, LayerNormCache { xhat, rstd, width }))
}

/// Input gradient of [`layer_norm`].
pub fn layer_norm_backward(cache: &LayerNormCache, gain: &Tensor, dy: &Tensor) -> Result<Tensor> {
    let w = cache.width;
    if dy.numel() != cache.xhat.len() || gain.dims() != [w] {
        return Err(VillmError::Shape {
            op: "layer_norm_backward",
            lhs: vec![cache.xhat.len()],
            rhs: dy.dims().to_vec(),
        });
    }
    let g = gain.data();
    let mut dx = vec![0.0; dy.numel()];
    let inv_w = 1.0 / w as f64;
    for (r, rs) in cache.rstd.iter().enumerate() {
        let xh = &cache.xhat[r * w..(r + 1) * w];
        let d = &dy.data()[r * w..(r + 1) * w];
        let mut sum_dh = 0.0;
        let mut sum_dh_xh = 0.0;
        for j in 0..w {
            let dh = d[j] * g[j];
            sum_dh += dh;
            sum_dh_xh += dh * xh[j];
        }
        for j in 0..w {
            let dh = d[j] * g[j];
            dx[r * w + j] = rs * (dh - inv_w * sum_dh - xh[j] * inv_w * sum_dh_xh);
        }
    }
    finite("layer_norm_backward", Tensor::from_parts(dy.dims().to_vec(), dx))
}

/// `(dgain, dbias)` of [`layer_norm`].
pub fn layer_norm_param_grads(cache: &LayerNormCache, dy: &Tensor) -> Result<(Tensor, Tensor)> {
    let w = cache.width;
    if dy.numel() != cache.xhat.len() {
        return Err(VillmError::Shape {
            op: "layer_norm_param_grads",
            lhs: vec![cache.xhat.len()],
            rhs: dy.dims().to_vec(),
        });
    }
    let mut dg = vec![0.0; w];
    let mut db = vec![0.0; w];
    for (xh, d) in cache.xhat.chunks(w).zip(dy.data().chunks(w)) {
        for j in 0..w {
            dg[j] += d[j] * xh[j];
            db[j] += d[j];
        }
    }
    Ok((Tensor::from_parts(vec![w], dg), Tensor::from_parts(vec![w], db)))
}

/// Numerically stable softmax of a slice, in place.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Softmax over the last axis.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let w = *x.dims().last().expect("rank >= 1");
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(w) {
        softmax_in_place(row);
    }
    finite("softmax_rows", Tensor::from_parts(x.dims().to_vec(), out))
}

/// Input gradient of [`softmax_rows`] given its output `y`.
pub fn softmax_rows_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if y.dims() != dy.dims() {
        return Err(shape_err("softmax_rows_backward", y, dy));
    }
    let w = *y.dims().last().expect("rank >= 1");
    let mut dx = vec![0.0; y.numel()];
    for ((o, p), d) in dx.chunks_mut(w).zip(y.data().chunks(w)).zip(dy.data().chunks(w)) {
        let dot: f64 = p.iter().zip(d).map(|(a, b)| a * b).sum();
        for j in 0..w {
            o[j] = p[j] * (d[j] - dot);
        }
    }
    Ok(Tensor::from_parts(y.dims().to_vec(), dx))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let data = x.data().iter().map(|&v| gelu_scalar(v)).collect();
    finite("gelu", Tensor::from_parts(x.dims().to_vec(), data))
}

/// tanh through a single `exp`; libm's tanh dominated decoder forwards.
fn tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

pub(crate) fn gelu_scalar(v: f64) -> f64 {
    0.5 * v * (1.0 + tanh(GELU_C * (v + 0.044715 * v * v * v)))
}

pub(crate) fn gelu_grad_scalar(v: f64) -> f64 {
    let u = GELU_C * (v + 0.044715 * v * v * v);
    let t = tanh(u);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du
}

/// Input gradient of [`gelu`] given its input `x`.
pub fn gelu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if x.dims() != dy.dims() {
        return Err(shape_err("gelu_backward", x, dy));
    }
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &d)| d * gelu_grad_scalar(v))
        .collect();
    Ok(Tensor::from_parts(x.dims().to_vec(), data))
}

/// Summed negative log-likelihood over the masked rows of an L×V logits
/// tensor, with the gradient of that sum.
#[derive(Clone, Debug)]
pub struct MaskedNll {
    pub sum: f64,
    pub count: usize,
    pub dlogits: Tensor,
}

pub fn masked_nll(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<MaskedNll> {
    let (l, v) = logits.shape2()?;
    if targets.len() != l || mask.len() != l {
        return Err(VillmError::Shape {
            op: "masked_nll",
            lhs: vec![l, v],
            rhs: vec![targets.len(), mask.len()],
        });
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(VillmError::EmptyMask);
    }
    let mut sum = 0.0;
    let mut d = vec![0.0; l * v];
    for i in (0..l).filter(|&i| mask[i]) {
        let t = targets[i];
        if t >= v {
            return Err(VillmError::Config(format!(
                "target {t} at position {i} outside vocabulary of {v}"
            )));
        }
        let row = logits.row(i);
        let probs = &mut d[i * v..(i + 1) * v];
        probs.copy_from_slice(row);
        softmax_in_place(probs);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        sum += lse - row[t];
        probs[t] -= 1.0;
    }
    if !sum.is_finite() {
        return Err(VillmError::NonFinite("masked_nll loss".into()));
    }
    Ok(MaskedNll {
        sum,
        count,
        dlogits: Tensor::from_parts(vec![l, v], d),
    })
}

/// Mean negative log-likelihood over masked positions only.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let nll = masked_nll(logits, targets, mask)?;
    Ok(nll.sum / nll.count as f64)
}

/// Gradient of [`cross_entropy`] with respect to the logits. Unmasked rows
/// are exactly zero.
pub fn cross_entropy_backward(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<Tensor> {
    let nll = masked_nll(logits, targets, mask)?;
    scale(&nll.dlogits, 1.0 / nll.count as f64)
}
