//! Query coordinates + geometry tokens → solution values.
//!
//! Queries never attend to each other, so every output row depends only on
//! its own coordinates and the tokens. Padded query rows are computed like
//! any other row and ignored downstream through the mask.

use rand::Rng;

use crate::error::{shape_err, GinotError, Result};
use crate::layers::{frequency_encode, AttentionBlock, FrequencyEncodingConfig, Mlp};
use crate::model::GinotConfig;
use crate::numerics::{ParamStore, Tape, Tensor, Var};

/// Padded query coordinates `[N_q × d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBatch {
    pub points: Tensor,
    pub valid: Vec<bool>,
}

impl QueryBatch {
    pub fn new(points: Tensor, valid: Vec<bool>) -> Result<Self> {
        if points.shape().len() != 2 || points.shape()[0] != valid.len() {
            return shape_err(format!(
                "queries {:?} with {} mask entries",
                points.shape(),
                valid.len()
            ));
        }
        Ok(Self { points, valid })
    }

    pub fn all_valid(points: Tensor) -> Result<Self> {
        let n = points.shape().first().copied().unwrap_or(0);
        Self::new(points, vec![true; n])
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Per-query field values `[N_q × channels]` sharing the query mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldBatch {
    pub values: Tensor,
    pub valid: Vec<bool>,
}

impl FieldBatch {
    pub fn new(values: Tensor, valid: Vec<bool>) -> Result<Self> {
        if values.shape().len() != 2 || values.shape()[0] != valid.len() {
            return shape_err(format!(
                "field {:?} with {} mask entries",
                values.shape(),
                valid.len()
            ));
        }
        Ok(Self { values, valid })
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct SolutionDecoder {
    pub encoding: FrequencyEncodingConfig,
    pub query_mlp: Mlp,
    pub cross_blocks: Vec<AttentionBlock>,
    pub output_mlp: Mlp,
}

impl SolutionDecoder {
    pub fn new(ps: &mut ParamStore, cfg: &GinotConfig, rng: &mut impl Rng) -> Result<Self> {
        let de = cfg.embed_dim;
        let query_mlp = Mlp::new(
            ps,
            "decoder.query_mlp",
            &[cfg.encoding.out_dim(cfg.coord_dim), de, de],
            rng,
        );
        let cross_blocks = (0..cfg.decoder_cross_layers)
            .map(|i| AttentionBlock::new(ps, &format!("decoder.cross.{i}"), de, cfg.decoder_heads, rng))
            .collect::<Result<_>>()?;
        let output_mlp = Mlp::new(ps, "decoder.output_mlp", &[de, de, de, cfg.out_channels], rng);
        Ok(Self {
            encoding: cfg.encoding,
            query_mlp,
            cross_blocks,
            output_mlp,
        })
    }

    /// `[N_q × out_channels]` predictions; `tokens` is `[N_s × d_e]` and is shared by every block.
    pub fn decode(&self, tape: &mut Tape, queries: &Tensor, tokens: Var) -> Result<Var> {
        if queries.shape().len() != 2 || queries.shape()[0] == 0 {
            return Err(GinotError::Shape(format!(
                "decoder needs a non-empty [N_q × d] query set, got {:?}",
                queries.shape()
            )));
        }
        let enc = frequency_encode(queries, &self.encoding)?;
        let x = tape.input(enc);
        let mut x = self.query_mlp.forward(tape, x)?;
        for block in &self.cross_blocks {
            x = block.forward(tape, x, tokens, None)?;
        }
        self.output_mlp.forward(tape, x)
    }
}
