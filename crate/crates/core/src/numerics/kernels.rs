//! Raw slice kernels shared by the eager functions and the tape.

/// Score assigned to masked keys before the softmax.
pub const MASKED_SCORE: f64 = f64::MIN;

/// Strided view of a row-major matrix.
#[derive(Clone, Copy)]
pub(crate) struct View {
    pub offset: usize,
    pub rs: isize,
    pub cs: isize,
}

impl View {
    pub fn rowmajor(cols: usize) -> Self {
        Self {
            offset: 0,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn transposed(cols: usize) -> Self {
        Self {
            offset: 0,
            rs: 1,
            cs: cols as isize,
        }
    }

    pub fn at(self, offset: usize) -> Self {
        Self { offset, ..self }
    }
}

/// `c = alpha * a·b + beta * c` with `a: m×k`, `b: k×n`, `c: m×n` given as strided views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    av: View,
    b: &[f64],
    bv: View,
    beta: f64,
    c: &mut [f64],
    cv: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        // matrixmultiply handles k == 0 but we keep beta semantics explicit
        for i in 0..m {
            for j in 0..n {
                let idx = (cv.offset as isize + i as isize * cv.rs + j as isize * cv.cs) as usize;
                c[idx] *= beta;
            }
        }
        return;
    }
    let a_last = last_index(av, m, k);
    let b_last = last_index(bv, k, n);
    let c_last = last_index(cv, m, n);
    assert!(a_last < a.len() && b_last < b.len() && c_last < c.len());
    // SAFETY: the asserts above bound every strided access of the three views.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset),
            av.rs,
            av.cs,
            b.as_ptr().add(bv.offset),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs,
            cv.cs,
        );
    }
}

fn last_index(v: View, rows: usize, cols: usize) -> usize {
    let idx = v.offset as isize + (rows as isize - 1) * v.rs + (cols as isize - 1) * v.cs;
    debug_assert!(idx >= 0);
    idx as usize
}

/// Multi-head attention over a `[rows × heads·d_h]` layout. Writes the output and the
/// per-head probability matrices `[heads × n_q × n_k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n_q: usize,
    n_k: usize,
    width: usize,
    heads: usize,
    key_mask: Option<&[bool]>,
    out: &mut [f64],
    probs: &mut [f64],
) {
    let d_h = width / heads;
    let scale = 1.0 / (d_h as f64).sqrt();
    for h in 0..heads {
        let p = &mut probs[h * n_q * n_k..(h + 1) * n_q * n_k];
        let off = h * d_h;
        gemm(
            n_q,
            d_h,
            n_k,
            scale,
            q,
            View::rowmajor(width).at(off),
            k,
            View::transposed(width).at(off),
            0.0,
            p,
            View::rowmajor(n_k),
        );
        for row in p.chunks_exact_mut(n_k) {
            softmax_masked_inplace(row, key_mask);
        }
        gemm(
            n_q,
            n_k,
            d_h,
            1.0,
            p,
            View::rowmajor(n_k),
            v,
            View::rowmajor(width).at(off),
            0.0,
            out,
            View::rowmajor(width).at(off),
        );
    }
}

/// Accumulates gradients of the attention inputs given the output gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    d_out: &[f64],
    n_q: usize,
    n_k: usize,
    width: usize,
    heads: usize,
    d_q: &mut [f64],
    d_k: &mut [f64],
    d_v: &mut [f64],
) {
    let d_h = width / heads;
    let scale = 1.0 / (d_h as f64).sqrt();
    let mut d_s = vec![0.0; n_q * n_k];
    for h in 0..heads {
        let p = &probs[h * n_q * n_k..(h + 1) * n_q * n_k];
        let off = h * d_h;
        // dP = dOut · Vᵀ
        gemm(
            n_q,
            d_h,
            n_k,
            1.0,
            d_out,
            View::rowmajor(width).at(off),
            v,
            View::transposed(width).at(off),
            0.0,
            &mut d_s,
            View::rowmajor(n_k),
        );
        for (ds_row, p_row) in d_s.chunks_exact_mut(n_k).zip(p.chunks_exact(n_k)) {
            let dot: f64 = ds_row.iter().zip(p_row).map(|(a, b)| a * b).sum();
            for (ds, &pj) in ds_row.iter_mut().zip(p_row) {
                *ds = pj * (*ds - dot);
            }
        }
        // dQ += scale · dS · K
        gemm(
            n_q,
            n_k,
            d_h,
            scale,
            &d_s,
            View::rowmajor(n_k),
            k,
            View::rowmajor(width).at(off),
            1.0,
            d_q,
            View::rowmajor(width).at(off),
        );
        // dK += scale · dSᵀ · Q
        gemm(
            n_k,
            n_q,
            d_h,
            scale,
            &d_s,
            View::transposed(n_k),
            q,
            View::rowmajor(width).at(off),
            1.0,
            d_k,
            View::rowmajor(width).at(off),
        );
        // dV += Pᵀ · dOut
        gemm(
            n_k,
            n_q,
            d_h,
            1.0,
            p,
            View::transposed(n_k),
            d_out,
            View::rowmajor(width).at(off),
            1.0,
            d_v,
            View::rowmajor(width).at(off),
        );
    }
}

/// Numerically shifted softmax; masked entries get exactly zero weight.
pub(crate) fn softmax_masked_inplace(row: &mut [f64], mask: Option<&[bool]>) {
    if let Some(m) = mask {
        for (s, &ok) in row.iter_mut().zip(m) {
            if !ok {
                *s = MASKED_SCORE;
            }
        }
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for s in row.iter_mut() {
        *s = exp_nonpositive(*s - max);
    }
    if let Some(m) = mask {
        for (s, &ok) in row.iter_mut().zip(m) {
            if !ok {
                *s = 0.0;
            }
        }
    }
    let inv = 1.0 / row.iter().sum::<f64>();
    for s in row.iter_mut() {
        *s *= inv;
    }
}

/// `eˣ` for `x ≤ 0`, branch-free so the softmax loop vectorizes. Arguments
/// below −700 are clamped (their exponentials are < 1e-304). Agrees with
/// `f64::exp` to a few ulp.
#[inline(always)]
pub(crate) fn exp_nonpositive(x: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    const SHIFT: f64 = 6_755_399_441_055_744.0; // 1.5 · 2⁵²
    let x = if x > -700.0 { x } else { -700.0 };
    let t = x * std::f64::consts::LOG2_E + SHIFT;
    let kf = t - SHIFT;
    let k = t.to_bits() as i64 - SHIFT.to_bits() as i64;
    let r = (x - kf * LN2_HI) - kf * LN2_LO;
    const C: [f64; 14] = [
        1.0,
        1.0,
        0.5,
        1.0 / 6.0,
        1.0 / 24.0,
        1.0 / 120.0,
        1.0 / 720.0,
        1.0 / 5_040.0,
        1.0 / 40_320.0,
        1.0 / 362_880.0,
        1.0 / 3_628_800.0,
        1.0 / 39_916_800.0,
        1.0 / 479_001_600.0,
        1.0 / 6_227_020_800.0,
    ];
    let r2 = r * r;
    // Estrin-style pairing keeps the dependency chain short
    let p01 = C[0] + C[1] * r;
    let p23 = C[2] + C[3] * r;
    let p45 = C[4] + C[5] * r;
    let p67 = C[6] + C[7] * r;
    let p89 = C[8] + C[9] * r;
    let p1011 = C[10] + C[11] * r;
    let p1213 = C[12] + C[13] * r;
    let r4 = r2 * r2;
    let q0 = p01 + p23 * r2;
    let q1 = p45 + p67 * r2;
    let q2 = p89 + p1011 * r2;
    let q3 = p1213;
    let r8 = r4 * r4;
    let p = (q0 + q1 * r4) + (q2 + q3 * r4) * r8;
    let scale = f64::from_bits(((k + 1023) as u64) << 52);
    p * scale
}

/// Normalizes each `d`-wide row; returns per-row `(mean, 1/sqrt(var + eps))`.
pub(crate) fn layer_norm_forward(
    x: &[f64],
    d: usize,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
    out: &mut [f64],
) -> Vec<(f64, f64)> {
    let mut stats = Vec::with_capacity(x.len() / d.max(1));
    for (xr, yr) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            yr[j] = (xr[j] - mean) * rstd * gain[j] + bias[j];
        }
        stats.push((mean, rstd));
    }
    stats
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward(
    x: &[f64],
    d: usize,
    gain: &[f64],
    stats: &[(f64, f64)],
    d_out: &[f64],
    d_x: &mut [f64],
    d_gain: &mut [f64],
    d_bias: &mut [f64],
) {
    let mut xhat = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for (r, &(mean, rstd)) in stats.iter().enumerate() {
        let xr = &x[r * d..(r + 1) * d];
        let dy = &d_out[r * d..(r + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            xhat[j] = (xr[j] - mean) * rstd;
            dxhat[j] = dy[j] * gain[j];
            d_gain[j] += dy[j] * xhat[j];
            d_bias[j] += dy[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xhat[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let dx = &mut d_x[r * d..(r + 1) * d];
        for j in 0..d {
            dx[j] += rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
/// `tanh` through [`exp_nonpositive`]; absolute error below 1e-15.
#[inline(always)]
pub(crate) fn tanh(u: f64) -> f64 {
    let e = exp_nonpositive(-2.0 * u.abs());
    ((1.0 - e) / (1.0 + e)).copysign(u)
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + tanh(GELU_C * (x + GELU_A * x * x * x)))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = tanh(GELU_C * (x + GELU_A * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
