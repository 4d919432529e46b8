use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{l2_relative_error, NormStats};
use crate::datagen::{sample_seed, PoissonDataset, PoissonSample};
use crate::error::{GinotError, Result};
use crate::extension::ExtraInputs;
use crate::model::Ginot;
use crate::numerics::{Tape, Tensor};
use crate::pointcloud::{FpsInit, PointCloud};
use crate::solution_decoder::QueryBatch;

pub const PAD_COUNT: usize = 199;
pub const PAD_COORD: f64 = -1000.0;

/// Normalized prediction for raw inputs; padded query rows are evaluated too.
pub(crate) fn forward_normalized(
    model: &Ginot,
    norm: &NormStats,
    cloud: &PointCloud,
    queries: &QueryBatch,
    load: f64,
    init: FpsInit,
) -> Result<Tensor> {
    let cloud = PointCloud::new(norm.normalize_coords(cloud.points())?, cloud.valid().to_vec())?;
    let q = norm.normalize_coords(&queries.points)?;
    let extras = match model.extension {
        Some(_) => Some(ExtraInputs::new(load)?),
        None => None,
    };
    let mut tape = Tape::new(&model.params);
    let kv = model.key_value_tokens(&mut tape, &cloud, extras, init)?;
    let pred = model.decoder.decode(&mut tape, &q, kv)?;
    Ok(tape.tensor(pred))
}

/// Maps a (possibly modified) boundary cloud plus a sample's queries to field values in physical units.
pub trait FieldPredictor: Sync {
    fn predict(&self, sample: &PoissonSample, cloud: &PointCloud) -> Result<Tensor>;
}

/// A trained model with its normalization, operating on raw coordinates.
pub struct Predictor {
    pub model: Ginot,
    pub norm: NormStats,
    pub init: FpsInit,
}

impl Predictor {
    pub fn new(model: Ginot, norm: NormStats) -> Self {
        Self {
            model,
            norm,
            init: FpsInit::FixedFirstValid,
        }
    }

    pub fn with_init(mut self, init: FpsInit) -> Self {
        self.init = init;
        self
    }

    /// Field values at `queries` for the geometry `cloud`, in physical units.
    pub fn predict_raw(&self, cloud: &PointCloud, queries: &QueryBatch, load: f64) -> Result<Tensor> {
        let y = forward_normalized(&self.model, &self.norm, cloud, queries, load, self.init)?;
        self.norm.denormalize_values(&y)
    }
}

impl FieldPredictor for Predictor {
    fn predict(&self, sample: &PoissonSample, cloud: &PointCloud) -> Result<Tensor> {
        self.predict_raw(cloud, &sample.queries, sample.load)
    }
}

/// Returns the stored solution; its errors are zero by construction.
pub struct StoredTargets;

impl FieldPredictor for StoredTargets {
    fn predict(&self, sample: &PoissonSample, _cloud: &PointCloud) -> Result<Tensor> {
        Ok(sample.solution.values.clone())
    }
}

/// Point-cloud perturbations of the robustness protocol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CloudVariant {
    Original,
    /// Random permutation of the points.
    Shuffled,
    /// Random permutation keeping the first `keep` fraction.
    ShuffledReduced { keep: f64 },
    /// 199 padding rows appended at (−1000, −1000).
    Padded,
    /// The padded cloud, permuted.
    ShuffledPadded,
    /// Random subset holding `percent` % of the points.
    Density { percent: f64 },
}

impl CloudVariant {
    pub fn label(&self) -> String {
        match self {
            CloudVariant::Original => "original".into(),
            CloudVariant::Shuffled => "shuffled".into(),
            CloudVariant::ShuffledReduced { keep } => format!("shuffled_{:.0}pct", keep * 100.0),
            CloudVariant::Padded => "padded".into(),
            CloudVariant::ShuffledPadded => "shuffled_padded".into(),
            CloudVariant::Density { percent } => format!("density_{percent}pct"),
        }
    }

    pub fn apply(&self, cloud: &PointCloud, seed: u64) -> Result<PointCloud> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..cloud.len()).collect();
        match *self {
            CloudVariant::Original => Ok(cloud.clone()),
            CloudVariant::Shuffled => {
                perm.shuffle(&mut rng);
                cloud.reordered(&perm)
            }
            CloudVariant::ShuffledReduced { keep } => {
                if !(keep > 0.0 && keep <= 1.0) {
                    return Err(GinotError::InvalidArgument(format!(
                        "keep fraction {keep} outside (0, 1]"
                    )));
                }
                let c = cloud.compacted();
                let mut perm: Vec<usize> = (0..c.len()).collect();
                perm.shuffle(&mut rng);
                perm.truncate(((keep * c.len() as f64).round() as usize).max(1));
                c.reordered(&perm)
            }
            CloudVariant::Padded => Ok(cloud.padded(PAD_COUNT, PAD_COORD)),
            CloudVariant::ShuffledPadded => {
                let p = cloud.padded(PAD_COUNT, PAD_COORD);
                let mut perm: Vec<usize> = (0..p.len()).collect();
                perm.shuffle(&mut rng);
                p.reordered(&perm)
            }
            CloudVariant::Density { percent } => density_subset(cloud, percent, seed),
        }
    }
}

/// Random subset holding `percent` % of the valid points (at least one), in original order.
pub fn density_subset(cloud: &PointCloud, percent: f64, seed: u64) -> Result<PointCloud> {
    if !(percent > 0.0 && percent <= 100.0) {
        return Err(GinotError::InvalidArgument(format!(
            "density must lie in (0, 100], got {percent}"
        )));
    }
    let c = cloud.compacted();
    let keep = ((percent / 100.0 * c.len() as f64).round() as usize).clamp(1, c.len());
    let mut idx: Vec<usize> = (0..c.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(keep);
    idx.sort_unstable();
    c.reordered(&idx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub worst: f64,
    /// `(sample index, L2 relative error)`
    pub per_sample: Vec<(usize, f64)>,
}

impl EvalSummary {
    pub fn from_errors(per_sample: Vec<(usize, f64)>) -> Self {
        let n = per_sample.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                median: f64::NAN,
                worst: f64::NAN,
                per_sample,
            };
        }
        let mut v: Vec<f64> = per_sample.iter().map(|p| p.1).collect();
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        v.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
        Self {
            mean,
            std,
            median,
            worst: v[n - 1],
            per_sample,
        }
    }
}

/// L2 relative errors over `indices` with each cloud transformed by `variant`.
pub fn evaluate(
    predictor: &dyn FieldPredictor,
    data: &PoissonDataset,
    indices: &[usize],
    variant: CloudVariant,
    seed: u64,
) -> Result<EvalSummary> {
    let errors = indices
        .par_iter()
        .map(|&i| {
            let s = data
                .samples
                .get(i)
                .ok_or(GinotError::IndexOutOfRange { index: i, len: data.len() })?;
            let cloud = variant.apply(&s.boundary, sample_seed(seed, i))?;
            let pred = predictor.predict(s, &cloud)?;
            Ok((i, l2_relative_error(&pred, &s.solution.values, &s.solution.valid)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalSummary::from_errors(errors))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub mode: String,
    pub summary: EvalSummary,
}

pub const DENSITY_LEVELS: [f64; 5] = [100.0, 80.0, 60.0, 40.0, 20.0];

/// Original, shuffled-80 %, padded and shuffled-padded variants followed by the density sweep.
pub fn robustness_table(
    predictor: &dyn FieldPredictor,
    data: &PoissonDataset,
    indices: &[usize],
    densities: &[f64],
    seed: u64,
) -> Result<Vec<RobustnessRow>> {
    let mut variants = vec![
        CloudVariant::Original,
        CloudVariant::ShuffledReduced { keep: 0.8 },
        CloudVariant::Padded,
        CloudVariant::ShuffledPadded,
    ];
    variants.extend(densities.iter().map(|&percent| CloudVariant::Density { percent }));
    variants
        .into_iter()
        .map(|v| {
            if let CloudVariant::Density { percent } = v {
                if !(percent > 0.0) {
                    return Err(GinotError::InvalidArgument(format!(
                        "density must be > 0, got {percent}"
                    )));
                }
            }
            Ok(RobustnessRow {
                mode: v.label(),
                summary: evaluate(predictor, data, indices, v, seed)?,
            })
        })
        .collect()
}
