//! Parameterized building blocks recorded onto a [`Tape`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GinotError, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-coordinate sinusoidal features at geometrically spaced frequencies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyEncodingConfig {
    pub num_frequencies: usize,
    pub include_input: bool,
    pub base: f64,
}

impl Default for FrequencyEncodingConfig {
    fn default() -> Self {
        Self {
            num_frequencies: 8,
            include_input: true,
            base: 2.0,
        }
    }
}

impl FrequencyEncodingConfig {
    pub fn channels_per_coord(&self) -> usize {
        usize::from(self.include_input) + 2 * self.num_frequencies
    }

    pub fn out_dim(&self, d: usize) -> usize {
        d * self.channels_per_coord()
    }
}

/// Encodes every coordinate `p` as `[p?, sin(b⁰πp), cos(b⁰πp), …, sin(b^{L−1}πp), cos(b^{L−1}πp)]`,
/// coordinate blocks concatenated in input order.
pub fn frequency_encode(x: &Tensor, cfg: &FrequencyEncodingConfig) -> Result<Tensor> {
    if cfg.num_frequencies == 0 {
        return Err(GinotError::InvalidArgument(
            "frequency encoding needs L >= 1".into(),
        ));
    }
    let d = x.last_dim();
    let per = cfg.channels_per_coord();
    let freqs: Vec<f64> = (0..cfg.num_frequencies)
        .map(|k| cfg.base.powf(k as f64) * std::f64::consts::PI)
        .collect();
    let mut out = Vec::with_capacity(x.len() * per);
    for &p in x.data() {
        if cfg.include_input {
            out.push(p);
        }
        for &w in &freqs {
            let (s, c) = (w * p).sin_cos();
            out.push(s);
            out.push(c);
        }
    }
    let mut shape = x.shape().to_vec();
    match shape.last_mut() {
        Some(last) => *last = d * per,
        None => shape.push(per),
    }
    Tensor::new(shape, out)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = ps.add_glorot(format!("{name}.weight"), in_dim, out_dim, rng);
        let bias = ps.add_filled(format!("{name}.bias"), &[out_dim], 0.0);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.linear(x, w, Some(b))
    }
}

/// Linear layers with GELU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden…, out]`.
    pub fn new(ps: &mut ParamStore, name: &str, dims: &[usize], rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(ps, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape, mut x: Var) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, x)?;
            if i + 1 < self.layers.len() {
                x = tape.gelu(x);
            }
        }
        Ok(x)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }
}

/// Multi-head attention sublayer with residual connection and post layer norm:
/// `LN(x + W_o · Attention(W_q x, W_k s, W_v s))`.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    pub heads: usize,
}

impl AttentionBlock {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(GinotError::InvalidArgument(format!(
                "embedding width {width} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(ps, &format!("{name}.q"), width, width, rng),
            key: Linear::new(ps, &format!("{name}.k"), width, width, rng),
            value: Linear::new(ps, &format!("{name}.v"), width, width, rng),
            output: Linear::new(ps, &format!("{name}.o"), width, width, rng),
            norm_gain: ps.add_filled(format!("{name}.norm.gain"), &[width], 1.0),
            norm_bias: ps.add_filled(format!("{name}.norm.bias"), &[width], 0.0),
            heads,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        source: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let q = self.query.forward(tape, x)?;
        let k = self.key.forward(tape, source)?;
        let v = self.value.forward(tape, source)?;
        let a = tape.attention(q, k, v, self.heads, key_mask)?;
        let o = self.output.forward(tape, a)?;
        let r = tape.add(x, o)?;
        let g = tape.param(self.norm_gain);
        let b = tape.param(self.norm_bias);
        tape.layer_norm(r, g, b, LAYER_NORM_EPS)
    }
}
