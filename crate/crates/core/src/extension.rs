//! Fusion of non-geometric scalar inputs (a source load factor) into the
//! decoder's key/value tokens.

use rand::Rng;

use crate::error::{GinotError, Result};
use crate::layers::Mlp;
use crate::numerics::{ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtraInputs {
    pub load: f64,
}

impl ExtraInputs {
    pub fn new(load: f64) -> Result<Self> {
        if !load.is_finite() {
            return Err(GinotError::InvalidArgument("load must be finite".into()));
        }
        Ok(Self { load })
    }
}

/// `extras → MLP → [d_e]`, tiled over the tokens, concatenated channel-wise
/// with them and aggregated by a second MLP back to `[N_s × d_e]`.
#[derive(Debug, Clone)]
pub struct ExtrasFusion {
    pub extras_mlp: Mlp,
    pub aggregate_mlp: Mlp,
}

impl ExtrasFusion {
    pub fn new(ps: &mut ParamStore, embed_dim: usize, rng: &mut impl Rng) -> Self {
        Self::with_aggregate_hidden(ps, embed_dim, &[embed_dim], rng)
    }

    /// Variant with explicit aggregation hidden widths (empty = single linear map).
    pub fn with_aggregate_hidden(
        ps: &mut ParamStore,
        embed_dim: usize,
        hidden: &[usize],
        rng: &mut impl Rng,
    ) -> Self {
        let extras_mlp = Mlp::new(ps, "extension.extras_mlp", &[1, embed_dim, embed_dim], rng);
        let mut dims = vec![2 * embed_dim];
        dims.extend_from_slice(hidden);
        dims.push(embed_dim);
        let aggregate_mlp = Mlp::new(ps, "extension.aggregate_mlp", &dims, rng);
        Self {
            extras_mlp,
            aggregate_mlp,
        }
    }

    /// Concatenated `[N_s × 2·d_e]` tensor before aggregation.
    pub fn concatenated(&self, tape: &mut Tape, tokens: Var, extras: ExtraInputs) -> Result<Var> {
        let n_tokens = tape.shape(tokens)[0];
        let x = tape.input(Tensor::new(vec![1, 1], vec![extras.load])?);
        let e = self.extras_mlp.forward(tape, x)?;
        let tiled = tape.repeat_rows(e, n_tokens)?;
        tape.concat_cols(tokens, tiled)
    }

    pub fn fuse(&self, tape: &mut Tape, tokens: Var, extras: ExtraInputs) -> Result<Var> {
        let joined = self.concatenated(tape, tokens, extras)?;
        self.aggregate_mlp.forward(tape, joined)
    }
}
