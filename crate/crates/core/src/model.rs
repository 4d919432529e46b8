//! The assembled operator: geometry encoder, optional extras fusion and
//! solution decoder over one shared parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GinotError, Result};
use crate::extension::{ExtraInputs, ExtrasFusion};
use crate::geometry_encoder::{GeometryEncoder, GeometryTokens};
use crate::layers::FrequencyEncodingConfig;
use crate::numerics::{ParamStore, Tape, Var};
use crate::pointcloud::{FpsInit, PointCloud};
use crate::solution_decoder::{FieldBatch, QueryBatch, SolutionDecoder};

/// Architecture hyperparameters. Defaults follow the structured-mesh Poisson setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GinotConfig {
    pub coord_dim: usize,
    pub out_channels: usize,
    pub embed_dim: usize,
    pub n_samples: usize,
    pub group_size: usize,
    pub radius: f64,
    pub encoder_heads: usize,
    pub decoder_heads: usize,
    pub encoder_cross_layers: usize,
    pub encoder_self_layers: usize,
    pub decoder_cross_layers: usize,
    pub encoding: FrequencyEncodingConfig,
    pub with_extras: bool,
}

impl Default for GinotConfig {
    fn default() -> Self {
        Self {
            coord_dim: 2,
            out_channels: 1,
            embed_dim: 64,
            n_samples: 64,
            group_size: 18,
            radius: 0.2,
            encoder_heads: 8,
            decoder_heads: 8,
            encoder_cross_layers: 1,
            encoder_self_layers: 3,
            decoder_cross_layers: 4,
            encoding: FrequencyEncodingConfig::default(),
            with_extras: false,
        }
    }
}

impl GinotConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| {
            Err(GinotError::InvalidArgument(format!("{field}: {why}")))
        };
        if self.coord_dim == 0 {
            return bad("coord_dim", "must be >= 1");
        }
        if self.out_channels == 0 {
            return bad("out_channels", "must be >= 1");
        }
        if self.embed_dim == 0 {
            return bad("embed_dim", "must be >= 1");
        }
        if self.n_samples == 0 {
            return bad("n_samples", "must be >= 1");
        }
        if self.group_size == 0 {
            return bad("group_size", "must be >= 1");
        }
        if !(self.radius > 0.0) {
            return bad("radius", "must be > 0");
        }
        for (field, heads) in [
            ("encoder_heads", self.encoder_heads),
            ("decoder_heads", self.decoder_heads),
        ] {
            if heads == 0 || self.embed_dim % heads != 0 {
                return bad(field, "must divide embed_dim");
            }
        }
        if self.encoding.num_frequencies == 0 {
            return bad("encoding.num_frequencies", "must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Ginot {
    pub config: GinotConfig,
    pub params: ParamStore,
    pub encoder: GeometryEncoder,
    pub decoder: SolutionDecoder,
    pub extension: Option<ExtrasFusion>,
}

impl Ginot {
    /// Freshly initialized model; the seed fixes every initial weight.
    pub fn new(config: GinotConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = GeometryEncoder::new(&mut params, &config, &mut rng)?;
        let extension = config
            .with_extras
            .then(|| ExtrasFusion::new(&mut params, config.embed_dim, &mut rng));
        let decoder = SolutionDecoder::new(&mut params, &config, &mut rng)?;
        Ok(Self {
            config,
            params,
            encoder,
            decoder,
            extension,
        })
    }

    /// Geometry tokens, with extras fused in when the model carries an extension.
    pub fn key_value_tokens(
        &self,
        tape: &mut Tape,
        cloud: &PointCloud,
        extras: Option<ExtraInputs>,
        init: FpsInit,
    ) -> Result<Var> {
        let tokens = self.encoder.encode(tape, cloud, init)?;
        match (&self.extension, extras) {
            (Some(ext), Some(e)) => ext.fuse(tape, tokens, e),
            (Some(_), None) => Err(GinotError::InvalidArgument(
                "model expects extra inputs".into(),
            )),
            (None, Some(_)) => Err(GinotError::InvalidArgument(
                "model has no extras encoder".into(),
            )),
            (None, None) => Ok(tokens),
        }
    }

    /// Records the full forward pass; returns `[N_q × out_channels]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        cloud: &PointCloud,
        queries: &QueryBatch,
        extras: Option<ExtraInputs>,
        init: FpsInit,
    ) -> Result<Var> {
        let kv = self.key_value_tokens(tape, cloud, extras, init)?;
        self.decoder.decode(tape, &queries.points, kv)
    }

    pub fn encode_geometry(&self, cloud: &PointCloud, init: FpsInit) -> Result<GeometryTokens> {
        let mut tape = Tape::new(&self.params);
        let v = self.encoder.encode(&mut tape, cloud, init)?;
        GeometryTokens::new(tape.tensor(v))
    }

    pub fn fuse_extras(&self, geo: &GeometryTokens, extras: ExtraInputs) -> Result<GeometryTokens> {
        let ext = self
            .extension
            .as_ref()
            .ok_or_else(|| GinotError::InvalidArgument("model has no extras encoder".into()))?;
        let mut tape = Tape::new(&self.params);
        let t = tape.input(geo.tokens.clone());
        let v = ext.fuse(&mut tape, t, extras)?;
        GeometryTokens::new(tape.tensor(v))
    }

    /// Decodes against precomputed (plain or fused) tokens.
    pub fn decode(&self, queries: &QueryBatch, geo: &GeometryTokens) -> Result<FieldBatch> {
        if !geo.tokens.is_finite() {
            return Err(GinotError::InvalidArgument("non-finite geometry tokens".into()));
        }
        let mut tape = Tape::new(&self.params);
        let t = tape.input(geo.tokens.clone());
        let v = self.decoder.decode(&mut tape, &queries.points, t)?;
        FieldBatch::new(tape.tensor(v), queries.valid.clone())
    }

    pub fn decode_with_extras(&self, queries: &QueryBatch, fused: &GeometryTokens) -> Result<FieldBatch> {
        self.decode(queries, fused)
    }

    pub fn predict(
        &self,
        cloud: &PointCloud,
        queries: &QueryBatch,
        extras: Option<ExtraInputs>,
        init: FpsInit,
    ) -> Result<FieldBatch> {
        let mut tape = Tape::new(&self.params);
        let v = self.forward(&mut tape, cloud, queries, extras, init)?;
        FieldBatch::new(tape.tensor(v), queries.valid.clone())
    }
}
