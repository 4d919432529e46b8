//! Boundary point cloud → geometry tokens.
//!
//! Local features come from sampling and grouping: the frequency-encoded cloud
//! is projected, gathered by group index, concatenated with the raw group
//! coordinates, passed through a shared per-point MLP and max-pooled over each
//! group. Those local features query the whole projected cloud through masked
//! cross-attention, then self-attention refines the tokens.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::layers::{frequency_encode, AttentionBlock, FrequencyEncodingConfig, Linear, Mlp};
use crate::model::GinotConfig;
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::pointcloud::{ball_group, farthest_point_sample, FpsInit, GroupedFeatures, PointCloud};

/// Encoder output: `[N_s × d_e]`, the key/value source of the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryTokens {
    pub tokens: Tensor,
}

impl GeometryTokens {
    pub fn new(tokens: Tensor) -> Result<Self> {
        if tokens.shape().len() != 2 {
            return shape_err(format!("tokens must be [N_s × d_e], got {:?}", tokens.shape()));
        }
        Ok(Self { tokens })
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[1]
    }
}

#[derive(Debug, Clone)]
pub struct GeometryEncoder {
    pub encoding: FrequencyEncodingConfig,
    pub n_samples: usize,
    pub group_size: usize,
    pub radius: f64,
    pub pe_linear: Linear,
    pub group_mlp: Mlp,
    pub cross_blocks: Vec<AttentionBlock>,
    pub self_blocks: Vec<AttentionBlock>,
    pub final_linear: Linear,
}

impl GeometryEncoder {
    pub fn new(ps: &mut ParamStore, cfg: &GinotConfig, rng: &mut impl Rng) -> Result<Self> {
        let de = cfg.embed_dim;
        let d = cfg.coord_dim;
        let pe_linear = Linear::new(ps, "encoder.pe", cfg.encoding.out_dim(d), de, rng);
        let group_mlp = Mlp::new(ps, "encoder.group_mlp", &[de + d, de, de, de], rng);
        let cross_blocks = (0..cfg.encoder_cross_layers)
            .map(|i| AttentionBlock::new(ps, &format!("encoder.cross.{i}"), de, cfg.encoder_heads, rng))
            .collect::<Result<_>>()?;
        let self_blocks = (0..cfg.encoder_self_layers)
            .map(|i| AttentionBlock::new(ps, &format!("encoder.self.{i}"), de, cfg.encoder_heads, rng))
            .collect::<Result<_>>()?;
        let final_linear = Linear::new(ps, "encoder.final", de, de, rng);
        Ok(Self {
            encoding: cfg.encoding,
            n_samples: cfg.n_samples,
            group_size: cfg.group_size,
            radius: cfg.radius,
            pe_linear,
            group_mlp,
            cross_blocks,
            self_blocks,
            final_linear,
        })
    }

    /// Projected positional encoding of every cloud point, `[N × d_e]`.
    pub fn embed_points(&self, tape: &mut Tape, pc: &PointCloud) -> Result<Var> {
        let enc = frequency_encode(pc.points(), &self.encoding)?;
        let x = tape.input(enc);
        self.pe_linear.forward(tape, x)
    }

    /// `[N_s × C]` pooled local features for precomputed groups.
    pub fn local_feature_extract(
        &self,
        tape: &mut Tape,
        pc: &PointCloud,
        groups: &GroupedFeatures,
        embedded: Var,
    ) -> Result<Var> {
        if groups.centroids.last_dim() != pc.dim() {
            return shape_err("group and cloud dimensions differ");
        }
        let gathered = tape.gather_rows(embedded, &groups.group_indices)?;
        let coords = tape.input(groups.relative_points());
        let joined = tape.concat_cols(gathered, coords)?;
        let per_point = self.group_mlp.forward(tape, joined)?;
        tape.max_pool_groups(per_point, groups.group_size)
    }

    pub fn encode(&self, tape: &mut Tape, pc: &PointCloud, init: FpsInit) -> Result<Var> {
        let sampling = farthest_point_sample(pc, self.n_samples, init)?;
        let groups = ball_group(pc, &sampling, self.radius, self.group_size)?;
        let embedded = self.embed_points(tape, pc)?;
        let mut x = self.local_feature_extract(tape, pc, &groups, embedded)?;
        for block in &self.cross_blocks {
            x = block.forward(tape, x, embedded, Some(pc.valid()))?;
        }
        for block in &self.self_blocks {
            x = block.forward(tape, x, x, None)?;
        }
        self.final_linear.forward(tape, x)
    }
}
