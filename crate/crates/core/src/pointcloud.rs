//! Farthest-point sampling and ball grouping over padded point clouds.
//!
//! Padding points (`valid == false`) are never selected as centroids and
//! never appear in a group. All ties are broken by the lowest point index.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, GinotError, Result};
use crate::numerics::Tensor;

/// Padded point cloud: `[N × d]` coordinates plus a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Tensor,
    valid: Vec<bool>,
}

impl PointCloud {
    pub fn new(points: Tensor, valid: Vec<bool>) -> Result<Self> {
        if points.shape().len() != 2 {
            return shape_err(format!("point cloud must be [N × d], got {:?}", points.shape()));
        }
        if points.shape()[0] != valid.len() {
            return shape_err(format!(
                "{} points but {} mask entries",
                points.shape()[0],
                valid.len()
            ));
        }
        if !valid.iter().any(|&v| v) {
            return Err(GinotError::InvalidArgument(
                "point cloud has no valid points".into(),
            ));
        }
        Ok(Self { points, valid })
    }

    /// Cloud where every point is valid.
    pub fn from_points(points: Tensor) -> Result<Self> {
        let n = points.shape().first().copied().unwrap_or(0);
        Self::new(points, vec![true; n])
    }

    pub fn from_xy(xy: &[[f64; 2]]) -> Result<Self> {
        let data = xy.iter().flat_map(|p| p.iter().copied()).collect();
        Self::from_points(Tensor::new(vec![xy.len(), 2], data)?)
    }

    pub fn points(&self) -> &Tensor {
        &self.points
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.shape()[1]
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        self.points.row(i)
    }

    pub fn first_valid(&self) -> usize {
        self.valid.iter().position(|&v| v).expect("at least one valid point")
    }

    /// Appends `count` padding rows at `coord`.
    pub fn padded(&self, count: usize, coord: f64) -> Self {
        let mut data = self.points.data().to_vec();
        data.extend(std::iter::repeat(coord).take(count * self.dim()));
        let mut valid = self.valid.clone();
        valid.extend(std::iter::repeat(false).take(count));
        let points = Tensor::new(vec![valid.len(), self.dim()], data).expect("consistent");
        Self { points, valid }
    }

    /// Row `i` of the result is row `order[i]` of `self`.
    pub fn reordered(&self, order: &[usize]) -> Result<Self> {
        let d = self.dim();
        let mut data = Vec::with_capacity(order.len() * d);
        let mut valid = Vec::with_capacity(order.len());
        for &i in order {
            if i >= self.len() {
                return Err(GinotError::IndexOutOfRange {
                    index: i,
                    len: self.len(),
                });
            }
            data.extend_from_slice(self.point(i));
            valid.push(self.valid[i]);
        }
        Self::new(Tensor::new(vec![order.len(), d], data)?, valid)
    }

    /// Valid points only, in their original order.
    pub fn compacted(&self) -> Self {
        let order: Vec<usize> = (0..self.len()).filter(|&i| self.valid[i]).collect();
        self.reordered(&order).expect("indices in range")
    }
}

/// First-centroid policy for farthest-point sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FpsInit {
    /// First non-padding point (inference default).
    FixedFirstValid,
    /// Uniformly random valid point drawn from the seed (training).
    SeededRandom(u64),
    /// A specific point index, which must be valid.
    Anchor(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingResult {
    pub centroid_indices: Vec<usize>,
    /// `[N_s × d]`
    pub centroids: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupedFeatures {
    /// Row-major `[N_s × N_p]` indices into the point cloud.
    pub group_indices: Vec<usize>,
    /// `[N_s × N_p × d]`
    pub group_points: Tensor,
    /// `[N_s × d]`
    pub centroids: Tensor,
    pub radius: f64,
    pub n_samples: usize,
    pub group_size: usize,
}

impl GroupedFeatures {
    pub fn group(&self, s: usize) -> &[usize] {
        &self.group_indices[s * self.group_size..(s + 1) * self.group_size]
    }

    /// Group members in their centroid's frame, flattened to `[N_s·N_p × d]`.
    pub fn relative_points(&self) -> Tensor {
        let d = self.centroids.last_dim();
        let mut data = self.group_points.data().to_vec();
        for (k, row) in data.chunks_mut(d).enumerate() {
            let c = self.centroids.row(k / self.group_size);
            for (x, c) in row.iter_mut().zip(c) {
                *x -= c;
            }
        }
        Tensor::new(vec![self.n_samples * self.group_size, d], data).expect("consistent")
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Greedy max-min centroid selection over the valid points.
pub fn farthest_point_sample(
    pc: &PointCloud,
    n_samples: usize,
    init: FpsInit,
) -> Result<SamplingResult> {
    let mut evals = 0;
    fps_counted(pc, n_samples, init, &mut evals)
}

fn fps_counted(
    pc: &PointCloud,
    n_samples: usize,
    init: FpsInit,
    evals: &mut u64,
) -> Result<SamplingResult> {
    if n_samples == 0 {
        return Err(GinotError::InvalidArgument("N_s must be >= 1".into()));
    }
    let valid: Vec<usize> = (0..pc.len()).filter(|&i| pc.valid[i]).collect();
    let nv = valid.len();
    if nv == 0 {
        return Err(GinotError::InvalidArgument(
            "point cloud has no valid points".into(),
        ));
    }
    let start = match init {
        FpsInit::FixedFirstValid => 0,
        FpsInit::SeededRandom(seed) => ChaCha8Rng::seed_from_u64(seed).gen_range(0..nv),
        FpsInit::Anchor(idx) => valid.iter().position(|&i| i == idx).ok_or_else(|| {
            GinotError::InvalidArgument(format!("anchor {idx} is not a valid point"))
        })?,
    };

    // all-pairs distance table over valid points
    let mut table = vec![0.0; nv * nv];
    for a in 0..nv {
        for b in a + 1..nv {
            let d = sq_dist(pc.point(valid[a]), pc.point(valid[b]));
            table[a * nv + b] = d;
            table[b * nv + a] = d;
            *evals += 1;
        }
    }

    let mut order = Vec::with_capacity(n_samples.min(nv));
    let mut min_d = vec![f64::INFINITY; nv];
    let mut taken = vec![false; nv];
    let mut current = start;
    loop {
        order.push(current);
        taken[current] = true;
        if order.len() == n_samples.min(nv) {
            break;
        }
        let row = &table[current * nv..(current + 1) * nv];
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for j in 0..nv {
            if row[j] < min_d[j] {
                min_d[j] = row[j];
            }
            if !taken[j] && min_d[j] > best_d {
                best_d = min_d[j];
                best = j;
            }
        }
        current = best;
    }
    // fewer valid points than samples: cycle through the selection order
    let distinct = order.len();
    for k in distinct..n_samples {
        order.push(order[k % distinct]);
    }

    let centroid_indices: Vec<usize> = order.iter().map(|&a| valid[a]).collect();
    let d = pc.dim();
    let mut c = Vec::with_capacity(n_samples * d);
    for &i in &centroid_indices {
        c.extend_from_slice(pc.point(i));
    }
    Ok(SamplingResult {
        centroid_indices,
        centroids: Tensor::new(vec![n_samples, d], c)?,
    })
}

/// Groups the `group_size` nearest admissible points around each centroid.
///
/// Candidates are the valid points within `radius`; surplus candidates are
/// truncated to the nearest ones and a short ball is topped up with the
/// nearest valid points outside it. Groups are ordered by ascending distance.
pub fn ball_group(
    pc: &PointCloud,
    sampling: &SamplingResult,
    radius: f64,
    group_size: usize,
) -> Result<GroupedFeatures> {
    let mut evals = 0;
    ball_group_counted(pc, sampling, radius, group_size, &mut evals)
}

fn ball_group_counted(
    pc: &PointCloud,
    sampling: &SamplingResult,
    radius: f64,
    group_size: usize,
    evals: &mut u64,
) -> Result<GroupedFeatures> {
    if !(radius > 0.0) {
        return Err(GinotError::InvalidArgument("radius must be > 0".into()));
    }
    if group_size == 0 {
        return Err(GinotError::InvalidArgument("N_p must be >= 1".into()));
    }
    let d = pc.dim();
    if sampling.centroids.shape().get(1) != Some(&d) {
        return shape_err("centroid dimension differs from the cloud");
    }
    let valid: Vec<usize> = (0..pc.len()).filter(|&i| pc.valid[i]).collect();
    let r2 = radius * radius;
    let n_samples = sampling.centroid_indices.len();
    let mut group_indices = Vec::with_capacity(n_samples * group_size);
    let mut inside: Vec<(f64, usize)> = Vec::with_capacity(valid.len());
    let mut outside: Vec<(f64, usize)> = Vec::with_capacity(valid.len());
    let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));

    for s in 0..n_samples {
        let c = sampling.centroids.row(s);
        inside.clear();
        outside.clear();
        for &i in &valid {
            let dist = sq_dist(pc.point(i), c);
            *evals += 1;
            if dist <= r2 {
                inside.push((dist, i));
            } else {
                outside.push((dist, i));
            }
        }
        take_nearest(&mut inside, group_size, by_dist);
        let start = group_indices.len();
        group_indices.extend(inside.iter().map(|&(_, i)| i));
        if inside.len() < group_size {
            let missing = group_size - inside.len();
            take_nearest(&mut outside, missing, by_dist);
            group_indices.extend(outside.iter().map(|&(_, i)| i));
        }
        // only possible when the cloud has fewer than N_p valid points
        let nearest = group_indices[start];
        while group_indices.len() < start + group_size {
            group_indices.push(nearest);
        }
    }

    let mut pts = Vec::with_capacity(group_indices.len() * d);
    for &i in &group_indices {
        pts.extend_from_slice(pc.point(i));
    }
    Ok(GroupedFeatures {
        group_points: Tensor::new(vec![n_samples, group_size, d], pts)?,
        centroids: sampling.centroids.clone(),
        group_indices,
        radius,
        n_samples,
        group_size,
    })
}

/// Keeps the `k` smallest entries, sorted.
fn take_nearest<F>(v: &mut Vec<(f64, usize)>, k: usize, cmp: F)
where
    F: Fn(&(f64, usize), &(f64, usize)) -> std::cmp::Ordering + Copy,
{
    if v.len() > k && k > 0 {
        v.select_nth_unstable_by(k - 1, cmp);
        v.truncate(k);
    } else if k == 0 {
        v.clear();
    }
    v.sort_unstable_by(cmp);
}

/// Distance-evaluation counts of the sampling and grouping kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelCounts {
    pub fps_distance_evals: u64,
    pub ball_query_distance_evals: u64,
}

/// Runs both kernels on a seeded random 2-D cloud and reports their distance-evaluation counts.
pub fn complexity_probe(n_points: usize, n_samples: usize) -> Result<KernelCounts> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ n_points as u64);
    let data = (0..n_points * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let pc = PointCloud::from_points(Tensor::new(vec![n_points, 2], data)?)?;
    let mut counts = KernelCounts {
        fps_distance_evals: 0,
        ball_query_distance_evals: 0,
    };
    let s = fps_counted(&pc, n_samples, FpsInit::FixedFirstValid, &mut counts.fps_distance_evals)?;
    ball_group_counted(&pc, &s, 0.2, 8, &mut counts.ball_query_distance_evals)?;
    Ok(counts)
}
