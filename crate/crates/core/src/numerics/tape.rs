//! Tensor-level reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass together with the
//! intermediate values the backward pass needs. Parameters are read in place
//! from a borrowed [`ParamStore`], so independent tapes over the same store
//! can run concurrently; their [`Gradients`] are merged afterwards.

use super::kernels::{self, View};
use super::params::{Gradients, ParamId, ParamStore};
use super::Tensor;
use crate::error::{shape_err, GinotError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        stats: Vec<(f64, f64)>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Gather {
        x: Var,
        indices: Vec<usize>,
    },
    Concat(Var, Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Repeat {
        x: Var,
        times: usize,
    },
    Softmax(Var),
    Ln(Var),
    Sum(Var),
    MaskedSse {
        pred: Var,
        target: Vec<f64>,
        mask: Vec<bool>,
        denom: f64,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

impl Op {
    fn children(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param(_) => vec![],
            Op::Linear { x, w, b } => {
                let mut c = vec![*x, *w];
                c.extend(b);
                c
            }
            Op::Add(a, b) | Op::Mul(a, b) | Op::Concat(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Gelu(a) | Op::Softmax(a) | Op::Ln(a) | Op::Sum(a) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Gather { x, .. }
            | Op::MaxPool { x, .. }
            | Op::Repeat { x, .. } => vec![*x],
            Op::MaskedSse { pred, .. } => vec![*pred],
        }
    }
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.get(id).data(),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape")
    }

    fn last_dim(&self, v: Var) -> usize {
        self.shape(v).last().copied().unwrap_or(1)
    }

    fn rows(&self, v: Var) -> usize {
        let d = self.last_dim(v);
        if d == 0 {
            0
        } else {
            self.value(v).len() / d
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let needs_grad = op.children().iter().any(|c| self.nodes[c.0].needs_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; receives no gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Input)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let shape = self.params.get(id).shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Vec::new(),
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// `x·w + b` applied to every row of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 {
            return shape_err(format!("linear weight must be 2-D, got {ws:?}"));
        }
        let (k, n) = (ws[0], ws[1]);
        if self.last_dim(x) != k {
            return shape_err(format!(
                "linear input width {} vs weight {ws:?}",
                self.last_dim(x)
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return shape_err(format!("bias {:?} vs out dim {n}", self.shape(b)));
            }
        }
        let m = self.rows(x);
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let bv = self.value(b);
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(bv);
            }
        }
        kernels::gemm(
            m,
            k,
            n,
            1.0,
            self.value(x),
            View::rowmajor(k),
            self.value(w),
            View::rowmajor(n),
            1.0,
            &mut out,
            View::rowmajor(n),
        );
        let mut shape = self.shape(x).to_vec();
        if shape.is_empty() {
            shape.push(n);
        } else {
            *shape.last_mut().unwrap() = n;
        }
        Ok(self.push(shape, out, Op::Linear { x, w, b }))
    }

    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        self.linear(x, w, None)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * s).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| kernels::gelu(v)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.last_dim(x);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return shape_err(format!(
                "layer_norm affine {:?}/{:?} vs width {d}",
                self.shape(gain),
                self.shape(bias)
            ));
        }
        if d == 0 || eps <= 0.0 {
            return Err(GinotError::InvalidArgument(
                "layer_norm needs d >= 1 and eps > 0".into(),
            ));
        }
        let mut out = vec![0.0; self.value(x).len()];
        let stats = kernels::layer_norm_forward(
            self.value(x),
            d,
            self.value(gain),
            self.value(bias),
            eps,
            &mut out,
        );
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            },
        ))
    }

    /// Multi-head scaled dot-product attention. `q: [n_q × width]`, `k, v: [n_k × width]`;
    /// head `h` uses columns `h·d_h..(h+1)·d_h`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let width = self.last_dim(q);
        if heads == 0 || width % heads != 0 || width == 0 {
            return shape_err(format!("width {width} not divisible into {heads} heads"));
        }
        if self.last_dim(k) != width || self.last_dim(v) != width {
            return shape_err("attention q/k/v widths differ");
        }
        let (n_q, n_k) = (self.rows(q), self.rows(k));
        if self.rows(v) != n_k {
            return shape_err("attention k/v row counts differ");
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
        let mut out = vec![0.0; n_q * width];
        let mut probs = vec![0.0; heads * n_q * n_k];
        kernels::attention_forward(
            self.value(q),
            self.value(k),
            self.value(v),
            n_q,
            n_k,
            width,
            heads,
            key_mask,
            &mut out,
            &mut probs,
        );
        Ok(self.push(
            vec![n_q, width],
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        ))
    }

    /// Selects rows of `x` by index.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let d = self.last_dim(x);
        let n = self.rows(x);
        let src = self.value(x);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= n {
                return Err(GinotError::IndexOutOfRange { index: i, len: n });
            }
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            vec![indices.len(), d],
            out,
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Concatenates two row-aligned matrices along the channel axis.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.last_dim(a), self.last_dim(b));
        let m = self.rows(a);
        if self.rows(b) != m {
            return shape_err(format!("concat rows {m} vs {}", self.rows(b)));
        }
        let mut out = Vec::with_capacity(m * (da + db));
        for (ra, rb) in self
            .value(a)
            .chunks_exact(da.max(1))
            .zip(self.value(b).chunks_exact(db.max(1)))
        {
            out.extend_from_slice(&ra[..da]);
            out.extend_from_slice(&rb[..db]);
        }
        Ok(self.push(vec![m, da + db], out, Op::Concat(a, b)))
    }

    /// Max over consecutive blocks of `group` rows: `[g·group × d] → [g × d]`.
    pub fn max_pool_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let d = self.last_dim(x);
        let n = self.rows(x);
        if group == 0 || n % group != 0 {
            return shape_err(format!("{n} rows not divisible into groups of {group}"));
        }
        let g = n / group;
        let src = self.value(x);
        let mut out = vec![f64::NEG_INFINITY; g * d];
        let mut argmax = vec![0usize; g * d];
        for gi in 0..g {
            for r in 0..group {
                let row = gi * group + r;
                for c in 0..d {
                    let val = src[row * d + c];
                    // strict > keeps the first maximum
                    if val > out[gi * d + c] || r == 0 {
                        out[gi * d + c] = val;
                        argmax[gi * d + c] = row;
                    }
                }
            }
        }
        Ok(self.push(vec![g, d], out, Op::MaxPool { x, argmax }))
    }

    /// Tiles `x` (`[1 × d]` or `[d]`) into `[times × d]`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        if self.rows(x) != 1 {
            return shape_err("repeat_rows expects a single row");
        }
        let d = self.last_dim(x);
        let out = self.value(x).repeat(times);
        Ok(self.push(vec![times, d], out, Op::Repeat { x, times }))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let d = self.last_dim(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(d.max(1)) {
            kernels::softmax_masked_inplace(row, None);
        }
        self.push(self.shape(x).to_vec(), out, Op::Softmax(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.ln()).collect();
        self.push(self.shape(x).to_vec(), out, Op::Ln(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![], vec![s], Op::Sum(x))
    }

    /// `Σ_rows mask·Σ_channels (pred − target)² / denom`.
    pub fn masked_sse(
        &mut self,
        pred: Var,
        target: &[f64],
        mask: &[bool],
        denom: f64,
    ) -> Result<Var> {
        let c = self.last_dim(pred);
        let n = self.rows(pred);
        if target.len() != self.value(pred).len() || mask.len() != n {
            return shape_err(format!(
                "masked_sse: pred {:?}, target len {}, mask len {}",
                self.shape(pred),
                target.len(),
                mask.len()
            ));
        }
        let p = self.value(pred);
        let mut s = 0.0;
        for (r, &m) in mask.iter().enumerate() {
            if m {
                for j in r * c..(r + 1) * c {
                    let e = p[j] - target[j];
                    s += e * e;
                }
            }
        }
        Ok(self.push(
            vec![],
            vec![s / denom],
            Op::MaskedSse {
                pred,
                target: target.to_vec(),
                mask: mask.to_vec(),
                denom,
            },
        ))
    }

    /// Reverse pass from a scalar root. Returns the gradient of every reachable parameter.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_node = &self.nodes[root.0];
        if root_node.shape.iter().product::<usize>() != 1 {
            return Err(GinotError::NonScalarRoot(root_node.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        let mut out = Gradients::zeros_like(self.params);
        let mut scratch = Vec::new();

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(id) => out.add_to(*id, &g),
                Op::Linear { x, w, b } => {
                    let k = self.last_dim(*x);
                    let n = self.last_dim(Var(i));
                    let m = self.rows(*x);
                    if self.nodes[x.0].needs_grad {
                        let dx = slot(&self.nodes, &mut grads, &mut scratch, *x, m * k);
                        kernels::gemm(
                            m,
                            n,
                            k,
                            1.0,
                            &g,
                            View::rowmajor(n),
                            self.value(*w),
                            View::transposed(n),
                            1.0,
                            dx,
                            View::rowmajor(k),
                        );
                    }
                    {
                        let dw = slot(&self.nodes, &mut grads, &mut scratch, *w, k * n);
                        kernels::gemm(
                            k,
                            m,
                            n,
                            1.0,
                            self.value(*x),
                            View::transposed(k),
                            &g,
                            View::rowmajor(n),
                            1.0,
                            dw,
                            View::rowmajor(n),
                        );
                    }
                    if let Some(b) = b {
                        let db = slot(&self.nodes, &mut grads, &mut scratch, *b, n);
                        for row in g.chunks_exact(n) {
                            for (d, r) in db.iter_mut().zip(row) {
                                *d += r;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(slot(&self.nodes, &mut grads, &mut scratch, *a, g.len()), &g);
                    add_into(slot(&self.nodes, &mut grads, &mut scratch, *b, g.len()), &g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let da = slot(&self.nodes, &mut grads, &mut scratch, *a, g.len());
                    for j in 0..g.len() {
                        da[j] += g[j] * vb[j];
                    }
                    let db = slot(&self.nodes, &mut grads, &mut scratch, *b, g.len());
                    for j in 0..g.len() {
                        db[j] += g[j] * va[j];
                    }
                }
                Op::Scale(a, s) => {
                    let da = slot(&self.nodes, &mut grads, &mut scratch, *a, g.len());
                    for (d, x) in da.iter_mut().zip(&g) {
                        *d += s * x;
                    }
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let dx = slot(&self.nodes, &mut grads, &mut scratch, *x, g.len());
                    for j in 0..g.len() {
                        dx[j] += g[j] * kernels::gelu_grad(xv[j]);
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    stats,
                } => {
                    let d = self.last_dim(*x);
                    let mut dx = vec![0.0; g.len()];
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    kernels::layer_norm_backward(
                        self.value(*x),
                        d,
                        self.value(*gain),
                        stats,
                        &g,
                        &mut dx,
                        &mut dg,
                        &mut db,
                    );
                    add_into(slot(&self.nodes, &mut grads, &mut scratch, *x, g.len()), &dx);
                    add_into(slot(&self.nodes, &mut grads, &mut scratch, *gain, d), &dg);
                    add_into(slot(&self.nodes, &mut grads, &mut scratch, *bias, d), &db);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let width = self.last_dim(*q);
                    let (n_q, n_k) = (self.rows(*q), self.rows(*k));
                    let mut dq = vec![0.0; n_q * width];
                    let mut dk = vec![0.0; n_k * width];
                    let mut dv = vec![0.0; n_k * width];
                    kernels::attention_backward(
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        probs,
                        &g,
                        n_q,
                        n_k,
                        width,
                        *heads,
                        &mut dq,
                        &mut dk,
                        &mut dv,
                    );
                    add_into(slot(&self.nodes, &mut grads, &mut scratch, *q, dq.len()), &dq);
                    add_into(slot(&self.nodes, &mut grads, &mut scratch, *k, dk.len()), &dk);
                    add_into(slot(&self.nodes, &mut grads, &mut scratch, *v, dv.len()), &dv);
                }
                Op::Gather { x, indices } => {
                    let d = self.last_dim(*x);
                    let len = self.value(*x).len();
                    let dx = slot(&self.nodes, &mut grads, &mut scratch, *x, len);
                    for (r, &src) in indices.iter().enumerate() {
                        for c in 0..d {
                            dx[src * d + c] += g[r * d + c];
                        }
                    }
                }
                Op::Concat(a, b) => {
                    let (da, db) = (self.last_dim(*a), self.last_dim(*b));
                    let m = self.rows(*a);
                    {
                        let ga = slot(&self.nodes, &mut grads, &mut scratch, *a, m * da);
                        for r in 0..m {
                            for c in 0..da {
                                ga[r * da + c] += g[r * (da + db) + c];
                            }
                        }
                    }
                    let gb = slot(&self.nodes, &mut grads, &mut scratch, *b, m * db);
                    for r in 0..m {
                        for c in 0..db {
                            gb[r * db + c] += g[r * (da + db) + da + c];
                        }
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let d = self.last_dim(*x);
                    let len = self.value(*x).len();
                    let dx = slot(&self.nodes, &mut grads, &mut scratch, *x, len);
                    for (j, &row) in argmax.iter().enumerate() {
                        dx[row * d + j % d] += g[j];
                    }
                }
                Op::Repeat { x, times } => {
                    let d = self.last_dim(*x);
                    let dx = slot(&self.nodes, &mut grads, &mut scratch, *x, d);
                    for r in 0..*times {
                        for c in 0..d {
                            dx[c] += g[r * d + c];
                        }
                    }
                }
                Op::Softmax(x) => {
                    let d = self.last_dim(*x);
                    let y = &node.value;
                    let dx = slot(&self.nodes, &mut grads, &mut scratch, *x, g.len());
                    for (r, (yr, gr)) in y.chunks_exact(d).zip(g.chunks_exact(d)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..d {
                            dx[r * d + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
                Op::Ln(x) => {
                    let xv = self.value(*x);
                    let dx = slot(&self.nodes, &mut grads, &mut scratch, *x, g.len());
                    for j in 0..g.len() {
                        dx[j] += g[j] / xv[j];
                    }
                }
                Op::Sum(x) => {
                    let len = self.value(*x).len();
                    let dx = slot(&self.nodes, &mut grads, &mut scratch, *x, len);
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
                Op::MaskedSse {
                    pred,
                    target,
                    mask,
                    denom,
                } => {
                    let c = self.last_dim(*pred);
                    let p = self.value(*pred);
                    let dp = slot(&self.nodes, &mut grads, &mut scratch, *pred, p.len());
                    let s = 2.0 * g[0] / denom;
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            for j in r * c..(r + 1) * c {
                                dp[j] += s * (p[j] - target[j]);
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn slot<'g>(
    nodes: &[Node],
    grads: &'g mut [Option<Vec<f64>>],
    scratch: &'g mut Vec<f64>,
    v: Var,
    len: usize,
) -> &'g mut Vec<f64> {
    if nodes[v.0].needs_grad {
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    } else {
        // constant operands: accumulate into a throwaway buffer
        scratch.clear();
        scratch.resize(len, 0.0);
        scratch
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
