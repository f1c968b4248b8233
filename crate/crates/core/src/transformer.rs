//! Pre-norm transformer block shared by the image encoder (bidirectional)
//! and the decoder (causal, rotary positions).
//!
//! `x1 = x + Attn(LN1(x))`, `x2 = x1 + W2·gelu(W1·LN2(x1) + b1) + b2`.
//! Attention projections carry no bias.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::rng;
use crate::tensor::ops::{
    gelu_grad_scalar, gelu_scalar, gemm, layer_norm, layer_norm_backward, layer_norm_param_grads,
    softmax_in_place, LayerNormCache,
};
use crate::tensor::Tensor;

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct AttentionKind {
    pub causal: bool,
    /// Rotary embedding base; `None` disables rotary positions.
    pub rope_base: Option<f64>,
}

#[derive(Clone, Debug)]
pub(crate) struct Block {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w_qkv: Tensor,
    pub w_out: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_up: Tensor,
    pub b_up: Tensor,
    pub w_down: Tensor,
    pub b_down: Tensor,
}

/// Weight init: `std_for(fan_in)` gives the normal std of a projection.
impl Block {
    pub fn init(width: usize, rng: &mut ChaCha8Rng, std_for: impl Fn(usize) -> f64) -> Self {
        let hidden = 4 * width;
        Self {
            ln1_gain: Tensor::ones(&[width]),
            ln1_bias: Tensor::zeros(&[width]),
            w_qkv: rng::normal(rng, &[width, 3 * width], std_for(width)),
            w_out: rng::normal(rng, &[width, width], std_for(width)),
            ln2_gain: Tensor::ones(&[width]),
            ln2_bias: Tensor::zeros(&[width]),
            w_up: rng::normal(rng, &[width, hidden], std_for(width)),
            b_up: Tensor::zeros(&[hidden]),
            w_down: rng::normal(rng, &[hidden, width], std_for(hidden)),
            b_down: Tensor::zeros(&[width]),
        }
    }

    #[cfg(test)]
    pub fn zeros_like(&self) -> Self {
        let z = |t: &Tensor| Tensor::zeros(t.dims());
        Self {
            ln1_gain: z(&self.ln1_gain),
            ln1_bias: z(&self.ln1_bias),
            w_qkv: z(&self.w_qkv),
            w_out: z(&self.w_out),
            ln2_gain: z(&self.ln2_gain),
            ln2_bias: z(&self.ln2_bias),
            w_up: z(&self.w_up),
            b_up: z(&self.b_up),
            w_down: z(&self.w_down),
            b_down: z(&self.b_down),
        }
    }

    pub fn params(&self) -> [&Tensor; 10] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_qkv,
            &self.w_out,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w_up,
            &self.b_up,
            &self.w_down,
            &self.b_down,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 10] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_qkv,
            &mut self.w_out,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_up,
            &mut self.b_up,
            &mut self.w_down,
            &mut self.b_down,
        ]
    }

    pub const PARAM_NAMES: [&'static str; 10] = [
        "ln1_gain", "ln1_bias", "w_qkv", "w_out", "ln2_gain", "ln2_bias", "w_up", "b_up", "w_down",
        "b_down",
    ];

    pub fn width(&self) -> usize {
        self.ln1_gain.numel()
    }
}

pub(crate) struct BlockCache {
    len: usize,
    ln1: LayerNormCache,
    a: Vec<f64>,
    /// q and k after rotation, v as projected; L × 3C
    qkv: Vec<f64>,
    /// per-head attention probabilities, L × L each
    probs: Vec<Vec<f64>>,
    concat: Vec<f64>,
    ln2: LayerNormCache,
    m: Vec<f64>,
    pre_act: Vec<f64>,
    act: Vec<f64>,
    rope: Option<RopeTable>,
}

struct RopeTable {
    cos: Vec<f64>,
    sin: Vec<f64>,
    half: usize,
}

impl RopeTable {
    fn new(len: usize, head_dim: usize, base: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = vec![0.0; len * half];
        let mut sin = vec![0.0; len * half];
        let inv_freq: Vec<f64> = (0..half).map(|i| base.powf(-((2 * i) as f64) / head_dim as f64)).collect();
        for p in 0..len {
            for (i, f) in inv_freq.iter().enumerate() {
                let angle = p as f64 * f;
                cos[p * half + i] = angle.cos();
                sin[p * half + i] = angle.sin();
            }
        }
        Self { cos, sin, half }
    }

    /// Rotates consecutive pairs `(2i, 2i+1)` of `x` (one head at position
    /// `p`); `inverse` applies the transpose rotation.
    fn apply(&self, x: &mut [f64], p: usize, inverse: bool) {
        let sign = if inverse { -1.0 } else { 1.0 };
        for i in 0..self.half {
            let c = self.cos[p * self.half + i];
            let s = sign * self.sin[p * self.half + i];
            let (x0, x1) = (x[2 * i], x[2 * i + 1]);
            x[2 * i] = x0 * c - x1 * s;
            x[2 * i + 1] = x0 * s + x1 * c;
        }
    }
}

/// Row-major product of contiguous `a` (m×k) and `b` (k×n).
pub(crate) fn mm(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1), &mut out, false);
    out
}

/// `a · bᵀ` for a m×k and b n×k.
pub(crate) fn mm_nt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a, (k as isize, 1), b, (1, k as isize), &mut out, false);
    out
}

/// `out += aᵀ · b` for a m×k and b m×n; out is k×n.
pub(crate) fn mm_tn_acc(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    gemm(k, m, n, a, (1, k as isize), b, (n as isize, 1), out, true);
}

pub(crate) fn col_sum_acc(x: &[f64], width: usize, out: &mut [f64]) {
    for row in x.chunks(width) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

fn add_bias(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Copies head `h` (columns `off + h*dh ..`) out of a row-major buffer with
/// `stride` columns.
fn gather_head(src: &[f64], len: usize, stride: usize, off: usize, dh: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * dh];
    for r in 0..len {
        out[r * dh..(r + 1) * dh].copy_from_slice(&src[r * stride + off..r * stride + off + dh]);
    }
    out
}

fn scatter_head(dst: &mut [f64], src: &[f64], len: usize, stride: usize, off: usize, dh: usize) {
    for r in 0..len {
        dst[r * stride + off..r * stride + off + dh].copy_from_slice(&src[r * dh..(r + 1) * dh]);
    }
}

impl Block {
    pub fn forward(&self, x: &Tensor, heads: usize, kind: AttentionKind) -> Result<(Tensor, BlockCache)> {
        let (len, c) = x.shape2()?;
        let dh = c / heads;
        let (a_t, ln1) = layer_norm(x, &self.ln1_gain, &self.ln1_bias, LN_EPS)?;
        let a = a_t.into_data();
        let mut qkv = mm(&a, len, c, self.w_qkv.data(), 3 * c);

        let rope = kind.rope_base.map(|base| RopeTable::new(len, dh, base));
        if let Some(table) = &rope {
            for p in 0..len {
                let row = &mut qkv[p * 3 * c..p * 3 * c + 2 * c];
                for h in 0..2 * heads {
                    table.apply(&mut row[h * dh..(h + 1) * dh], p, false);
                }
            }
        }

        let scale = 1.0 / (dh as f64).sqrt();
        let mut concat = vec![0.0; len * c];
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = gather_head(&qkv, len, 3 * c, h * dh, dh);
            let k = gather_head(&qkv, len, 3 * c, c + h * dh, dh);
            let v = gather_head(&qkv, len, 3 * c, 2 * c + h * dh, dh);
            let mut s = mm_nt(&q, len, dh, &k, len);
            for i in 0..len {
                let row = &mut s[i * len..(i + 1) * len];
                let visible = if kind.causal { i + 1 } else { len };
                row[..visible].iter_mut().for_each(|v| *v *= scale);
                softmax_in_place(&mut row[..visible]);
                row[visible..].fill(0.0);
            }
            let o = mm(&s, len, len, &v, dh);
            scatter_head(&mut concat, &o, len, c, h * dh, dh);
            probs.push(s);
        }
        let attn = mm(&concat, len, c, self.w_out.data(), c);
        let x1: Vec<f64> = x.data().iter().zip(&attn).map(|(a, b)| a + b).collect();
        let x1 = Tensor::from_parts(vec![len, c], x1);

        let (m_t, ln2) = layer_norm(&x1, &self.ln2_gain, &self.ln2_bias, LN_EPS)?;
        let m = m_t.into_data();
        let hidden = 4 * c;
        let mut pre_act = mm(&m, len, c, self.w_up.data(), hidden);
        add_bias(&mut pre_act, self.b_up.data());
        let act: Vec<f64> = pre_act.iter().map(|&v| gelu_scalar(v)).collect();
        let mut down = mm(&act, len, hidden, self.w_down.data(), c);
        add_bias(&mut down, self.b_down.data());
        let mut out = x1.into_data();
        out.iter_mut().zip(&down).for_each(|(o, d)| *o += d);
        let out = Tensor::new(vec![len, c], out)?;

        Ok((
            out,
            BlockCache {
                len,
                ln1,
                a,
                qkv,
                probs,
                concat,
                ln2,
                m,
                pre_act,
                act,
                rope,
            },
        ))
    }

    /// Gradient with respect to the block input. Parameter gradients are
    /// accumulated into `grads` only when it is given.
    pub fn backward(
        &self,
        cache: &BlockCache,
        dout: &Tensor,
        heads: usize,
        mut grads: Option<&mut Block>,
    ) -> Result<Tensor> {
        let len = cache.len;
        let c = self.width();
        let dh = c / heads;
        let hidden = 4 * c;
        let d2 = dout.data();

        // MLP branch.
        if let Some(g) = grads.as_deref_mut() {
            mm_tn_acc(&cache.act, len, hidden, d2, c, g.w_down.data_mut());
            col_sum_acc(d2, c, g.b_down.data_mut());
        }
        let dact = mm_nt(d2, len, c, self.w_down.data(), hidden);
        let dpre: Vec<f64> = dact
            .iter()
            .zip(&cache.pre_act)
            .map(|(d, &v)| d * gelu_grad_scalar(v))
            .collect();
        if let Some(g) = grads.as_deref_mut() {
            mm_tn_acc(&cache.m, len, c, &dpre, hidden, g.w_up.data_mut());
            col_sum_acc(&dpre, hidden, g.b_up.data_mut());
        }
        let dm = Tensor::from_parts(vec![len, c], mm_nt(&dpre, len, hidden, self.w_up.data(), c));
        if let Some(g) = grads.as_deref_mut() {
            let (dg, db) = layer_norm_param_grads(&cache.ln2, &dm)?;
            add_into(&mut g.ln2_gain, &dg);
            add_into(&mut g.ln2_bias, &db);
        }
        let dx1_ln = layer_norm_backward(&cache.ln2, &self.ln2_gain, &dm)?;
        let dx1: Vec<f64> = d2.iter().zip(dx1_ln.data()).map(|(a, b)| a + b).collect();

        // Attention branch.
        if let Some(g) = grads.as_deref_mut() {
            mm_tn_acc(&cache.concat, len, c, &dx1, c, g.w_out.data_mut());
        }
        let dconcat = mm_nt(&dx1, len, c, self.w_out.data(), c);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dqkv = vec![0.0; len * 3 * c];
        for h in 0..heads {
            let q = gather_head(&cache.qkv, len, 3 * c, h * dh, dh);
            let k = gather_head(&cache.qkv, len, 3 * c, c + h * dh, dh);
            let v = gather_head(&cache.qkv, len, 3 * c, 2 * c + h * dh, dh);
            let p = &cache.probs[h];
            let d_o = gather_head(&dconcat, len, c, h * dh, dh);
            let dp = mm_nt(&d_o, len, dh, &v, len);
            let mut dv = vec![0.0; len * dh];
            mm_tn_acc(p, len, len, &d_o, dh, &mut dv);
            let mut ds = vec![0.0; len * len];
            for i in 0..len {
                let pr = &p[i * len..(i + 1) * len];
                let dpr = &dp[i * len..(i + 1) * len];
                let dot: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
                for j in 0..len {
                    ds[i * len + j] = pr[j] * (dpr[j] - dot) * scale;
                }
            }
            let dq = mm(&ds, len, len, &k, dh);
            let mut dk = vec![0.0; len * dh];
            mm_tn_acc(&ds, len, len, &q, dh, &mut dk);
            scatter_head(&mut dqkv, &dq, len, 3 * c, h * dh, dh);
            scatter_head(&mut dqkv, &dk, len, 3 * c, c + h * dh, dh);
            scatter_head(&mut dqkv, &dv, len, 3 * c, 2 * c + h * dh, dh);
        }
        if let Some(table) = &cache.rope {
            for p in 0..len {
                let row = &mut dqkv[p * 3 * c..p * 3 * c + 2 * c];
                for h in 0..2 * heads {
                    table.apply(&mut row[h * dh..(h + 1) * dh], p, true);
                }
            }
        }
        if let Some(g) = grads.as_deref_mut() {
            mm_tn_acc(&cache.a, len, c, &dqkv, 3 * c, g.w_qkv.data_mut());
        }
        let da = Tensor::from_parts(vec![len, c], mm_nt(&dqkv, len, 3 * c, self.w_qkv.data(), c));
        if let Some(g) = grads.as_deref_mut() {
            let (dg, db) = layer_norm_param_grads(&cache.ln1, &da)?;
            add_into(&mut g.ln1_gain, &dg);
            add_into(&mut g.ln1_bias, &db);
        }
        let dx_ln = layer_norm_backward(&cache.ln1, &self.ln1_gain, &da)?;
        let dx: Vec<f64> = dx1.iter().zip(dx_ln.data()).map(|(a, b)| a + b).collect();
        Tensor::new(vec![len, c], dx)
    }
}

pub(crate) fn add_into(dst: &mut Tensor, src: &Tensor) {
    debug_assert_eq!(dst.dims(), src.dims());
    dst.data_mut().iter_mut().zip(src.data()).for_each(|(a, b)| *a += b);
}
