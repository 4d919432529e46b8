//! Eager (tape-free) versions of the neural primitives.

use super::kernels;
use super::Tensor;
use crate::error::{shape_err, GinotError, Result};

/// Scaled dot-product attention on head-major tensors.
///
/// `q: [h × n_q × d_h]`, `k, v: [h × n_k × d_h]`. Keys whose `key_mask` entry is
/// false get zero weight in every head.
pub fn scaled_dot_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    key_mask: Option<&[bool]>,
) -> Result<Tensor> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 {
        return shape_err("attention expects rank-3 [heads × rows × d_h] tensors");
    }
    let (heads, n_q, d_h) = (qs[0], qs[1], qs[2]);
    let n_k = ks[1];
    if d_h == 0 || ks[0] != heads || vs[0] != heads || ks[2] != d_h || vs[2] != d_h || vs[1] != n_k
    {
        return shape_err(format!("q {qs:?}, k {ks:?}, v {vs:?}"));
    }
    if let Some(m) = key_mask {
        if m.len() != n_k {
            return shape_err(format!("key mask length {} vs {n_k} keys", m.len()));
        }
        if !m.iter().any(|&b| b) {
            return Err(GinotError::NoAttendableKeys);
        }
    }
    if n_k == 0 {
        return Err(GinotError::NoAttendableKeys);
    }
    let width = heads * d_h;
    let (ql, kl, vl) = (
        heads_to_rows(q.data(), heads, n_q, d_h),
        heads_to_rows(k.data(), heads, n_k, d_h),
        heads_to_rows(v.data(), heads, n_k, d_h),
    );
    let mut out = vec![0.0; n_q * width];
    let mut probs = vec![0.0; heads * n_q * n_k];
    kernels::attention_forward(
        &ql, &kl, &vl, n_q, n_k, width, heads, key_mask, &mut out, &mut probs,
    );
    Tensor::new(vec![heads, n_q, d_h], rows_to_heads(&out, heads, n_q, d_h))
}

/// Attention weights `[h × n_q × n_k]` for the same inputs as [`scaled_dot_attention`].
pub fn attention_weights(q: &Tensor, k: &Tensor, key_mask: Option<&[bool]>) -> Result<Tensor> {
    let (qs, ks) = (q.shape(), k.shape());
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] {
        return shape_err(format!("q {qs:?}, k {ks:?}"));
    }
    let (heads, n_q, d_h, n_k) = (qs[0], qs[1], qs[2], ks[1]);
    let scale = 1.0 / (d_h as f64).sqrt();
    let mut w = vec![0.0; heads * n_q * n_k];
    for h in 0..heads {
        for i in 0..n_q {
            let qi = &q.data()[(h * n_q + i) * d_h..(h * n_q + i + 1) * d_h];
            let row = &mut w[(h * n_q + i) * n_k..(h * n_q + i + 1) * n_k];
            for (j, s) in row.iter_mut().enumerate() {
                let kj = &k.data()[(h * n_k + j) * d_h..(h * n_k + j + 1) * d_h];
                *s = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
            }
            kernels::softmax_masked_inplace(row, key_mask);
        }
    }
    Tensor::new(vec![heads, n_q, n_k], w)
}

fn heads_to_rows(x: &[f64], heads: usize, n: usize, d_h: usize) -> Vec<f64> {
    let width = heads * d_h;
    let mut out = vec![0.0; n * width];
    for h in 0..heads {
        for i in 0..n {
            out[i * width + h * d_h..i * width + (h + 1) * d_h]
                .copy_from_slice(&x[(h * n + i) * d_h..(h * n + i + 1) * d_h]);
        }
    }
    out
}

fn rows_to_heads(x: &[f64], heads: usize, n: usize, d_h: usize) -> Vec<f64> {
    let width = heads * d_h;
    let mut out = vec![0.0; n * width];
    for h in 0..heads {
        for i in 0..n {
            out[(h * n + i) * d_h..(h * n + i + 1) * d_h]
                .copy_from_slice(&x[i * width + h * d_h..i * width + (h + 1) * d_h]);
        }
    }
    out
}

/// Normalizes every slice along the last axis with population variance.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.last_dim();
    if d == 0 || gain.len() != d || bias.len() != d {
        return shape_err(format!(
            "layer_norm: x {:?}, gain {:?}, bias {:?}",
            x.shape(),
            gain.shape(),
            bias.shape()
        ));
    }
    if eps <= 0.0 {
        return Err(GinotError::InvalidArgument("eps must be positive".into()));
    }
    let mut out = vec![0.0; x.len()];
    kernels::layer_norm_forward(x.data(), d, gain.data(), bias.data(), eps, &mut out);
    Tensor::new(x.shape().to_vec(), out)
}

pub fn gelu(x: f64) -> f64 {
    kernels::gelu(x)
}
