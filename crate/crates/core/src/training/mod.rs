//! Padding-aware batching, the masked loss and relative-error metric, the
//! epoch loop with plateau scheduling, checkpoints and evaluation protocols.

mod checkpoint;
mod eval;
mod norm;
mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainState};
pub use eval::{
    density_subset, evaluate, robustness_table, CloudVariant, EvalSummary, FieldPredictor,
    Predictor, RobustnessRow, StoredTargets, DENSITY_LEVELS, PAD_COORD, PAD_COUNT,
};
pub use norm::{NormStats, STD_FLOOR};
pub use trainer::{EpochMetrics, TrainConfig, Trainer, BEST_DIR, CONFIG_FILE, LAST_DIR, METRICS_FILE};

use crate::datagen::PoissonSample;
use crate::error::{shape_err, GinotError, Result};
use crate::numerics::Tensor;
use crate::pointcloud::PointCloud;
use crate::solution_decoder::{FieldBatch, QueryBatch};

/// `(1 / (1 + Σm)) · Σ m_i ‖y_i − ŷ_i‖²` over one field.
pub fn masked_mse(pred: &FieldBatch, target: &FieldBatch) -> Result<f64> {
    batch_masked_mse(std::slice::from_ref(pred), std::slice::from_ref(target))
}

/// Masked MSE with a single denominator shared by every sample of the batch.
pub fn batch_masked_mse(preds: &[FieldBatch], targets: &[FieldBatch]) -> Result<f64> {
    if preds.len() != targets.len() {
        return shape_err("prediction and target batch sizes differ");
    }
    let mut sse = 0.0;
    let mut count = 0usize;
    for (p, t) in preds.iter().zip(targets) {
        if p.valid != t.valid {
            return Err(GinotError::InvalidArgument(
                "prediction and target masks differ".into(),
            ));
        }
        if p.values.shape() != t.values.shape() {
            return shape_err(format!(
                "prediction {:?} vs target {:?}",
                p.values.shape(),
                t.values.shape()
            ));
        }
        let c = t.channels();
        for (r, &m) in t.valid.iter().enumerate() {
            if m {
                count += 1;
                for j in r * c..(r + 1) * c {
                    let e = t.values.data()[j] - p.values.data()[j];
                    sse += e * e;
                }
            }
        }
    }
    Ok(sse / (1.0 + count as f64))
}

/// `‖y − ŷ‖₂ / ‖y‖₂` over the masked rows, all channels flattened.
pub fn l2_relative_error(pred: &Tensor, target: &Tensor, mask: &[bool]) -> Result<f64> {
    if pred.shape() != target.shape() || mask.len() != target.rows() {
        return shape_err(format!(
            "l2: pred {:?}, target {:?}, mask {}",
            pred.shape(),
            target.shape(),
            mask.len()
        ));
    }
    let c = target.last_dim();
    let (mut num, mut den) = (0.0, 0.0);
    for (r, &m) in mask.iter().enumerate() {
        if m {
            for j in r * c..(r + 1) * c {
                let y = target.data()[j];
                num += (y - pred.data()[j]).powi(2);
                den += y * y;
            }
        }
    }
    if den == 0.0 {
        return Err(GinotError::InvalidArgument(
            "relative error of a zero-norm target".into(),
        ));
    }
    Ok((num / den).sqrt())
}

/// One collated minibatch; every cloud shares `N` and every query set shares
/// `N_q`, the maxima within the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub clouds: Vec<PointCloud>,
    pub queries: Vec<QueryBatch>,
    pub targets: Vec<FieldBatch>,
    pub extras: Option<Vec<f64>>,
    pub masks: Vec<Vec<bool>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    pub fn valid_rows(&self) -> usize {
        self.masks.iter().flatten().filter(|&&m| m).count()
    }
}

fn pad_rows(t: &Tensor, rows: usize) -> Result<Tensor> {
    let c = t.last_dim();
    let mut data = t.data().to_vec();
    data.resize(rows * c, 0.0);
    Tensor::new(vec![rows, c], data)
}

/// Normalizes and pads `samples` into one batch. Padded query and target rows are zero.
pub fn collate(samples: &[&PoissonSample], norm: &NormStats, with_extras: bool) -> Result<Batch> {
    let n_max = samples.iter().map(|s| s.boundary.len()).max().unwrap_or(0);
    let q_max = samples.iter().map(|s| s.queries.len()).max().unwrap_or(0);
    let mut batch = Batch {
        clouds: Vec::with_capacity(samples.len()),
        queries: Vec::with_capacity(samples.len()),
        targets: Vec::with_capacity(samples.len()),
        extras: with_extras.then(Vec::new),
        masks: Vec::with_capacity(samples.len()),
    };
    for s in samples {
        let pts = norm.normalize_coords(s.boundary.points())?;
        let cloud = PointCloud::new(pts, s.boundary.valid().to_vec())?;
        let extra = n_max - cloud.len();
        batch.clouds.push(cloud.padded(extra, 0.0));

        let mut mask = s.queries.valid.clone();
        mask.resize(q_max, false);
        let q = pad_rows(&norm.normalize_coords(&s.queries.points)?, q_max)?;
        let y = pad_rows(&norm.normalize_values(&s.solution.values)?, q_max)?;
        batch.queries.push(QueryBatch::new(q, mask.clone())?);
        batch.targets.push(FieldBatch::new(y, mask.clone())?);
        batch.masks.push(mask);
        if let Some(e) = batch.extras.as_mut() {
            e.push(s.load);
        }
    }
    Ok(batch)
}
