use serde::{Deserialize, Serialize};

use crate::datagen::PoissonSample;
use crate::error::{shape_err, Result};
use crate::numerics::Tensor;

pub const STD_FLOOR: f64 = 1e-8;

/// Per-channel affine normalization of coordinates and field values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub output_mean: Vec<f64>,
    pub output_std: Vec<f64>,
}

fn mean_std(rows: &[&[f64]], channels: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; channels];
    let mut std = vec![1.0; channels];
    let mut n = 0usize;
    for r in rows {
        for row in r.chunks_exact(channels) {
            n += 1;
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
    }
    if n == 0 {
        return (mean, std);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; channels];
    for r in rows {
        for row in r.chunks_exact(channels) {
            for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
    }
    for (s, v) in std.iter_mut().zip(var) {
        *s = (v / n as f64).sqrt().max(STD_FLOOR);
    }
    (mean, std)
}

impl NormStats {
    pub fn identity(coord_dim: usize, channels: usize) -> Self {
        Self {
            input_mean: vec![0.0; coord_dim],
            input_std: vec![1.0; coord_dim],
            output_mean: vec![0.0; channels],
            output_std: vec![1.0; channels],
        }
    }

    /// Coordinate statistics pool boundary and query points; output statistics
    /// use the valid solution rows. An empty set gives the identity.
    pub fn fit(samples: &[&PoissonSample]) -> Self {
        let d = samples.first().map_or(2, |s| s.boundary.dim());
        let c = samples.first().map_or(1, |s| s.solution.channels());
        let mut coords: Vec<&[f64]> = Vec::new();
        let mut values: Vec<&[f64]> = Vec::new();
        let mut owned = Vec::new();
        for s in samples {
            owned.push(s.boundary.compacted().points().data().to_vec());
            let q = &s.queries;
            if q.num_valid() == q.len() {
                coords.push(q.points.data());
                values.push(s.solution.values.data());
            } else {
                for r in (0..q.len()).filter(|&r| q.valid[r]) {
                    coords.push(q.points.row(r));
                    values.push(s.solution.values.row(r));
                }
            }
        }
        coords.extend(owned.iter().map(Vec::as_slice));
        let (input_mean, input_std) = mean_std(&coords, d);
        let (output_mean, output_std) = mean_std(&values, c);
        Self {
            input_mean,
            input_std,
            output_mean,
            output_std,
        }
    }

    fn apply(t: &Tensor, mean: &[f64], std: &[f64], forward: bool) -> Result<Tensor> {
        if t.last_dim() != mean.len() {
            return shape_err(format!(
                "normalization expects {} channels, got {:?}",
                mean.len(),
                t.shape()
            ));
        }
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(mean.len()) {
            for ((x, m), s) in row.iter_mut().zip(mean).zip(std) {
                *x = if forward { (*x - m) / s } else { *x * s + m };
            }
        }
        Ok(out)
    }

    pub fn normalize_coords(&self, t: &Tensor) -> Result<Tensor> {
        Self::apply(t, &self.input_mean, &self.input_std, true)
    }

    pub fn denormalize_coords(&self, t: &Tensor) -> Result<Tensor> {
        Self::apply(t, &self.input_mean, &self.input_std, false)
    }

    pub fn normalize_values(&self, t: &Tensor) -> Result<Tensor> {
        Self::apply(t, &self.output_mean, &self.output_std, true)
    }

    pub fn denormalize_values(&self, t: &Tensor) -> Result<Tensor> {
        Self::apply(t, &self.output_mean, &self.output_std, false)
    }
}
