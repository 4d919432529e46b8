//! Poisson dataset factory: random star-shaped domains, finite-difference
//! solutions on the interior grid nodes, and on-disk serialization.

pub mod container;
pub mod domain;
pub mod poisson;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use container::{Container, NamedArray};
pub use domain::{sample_domain, DomainParams, StarDomain};
pub use poisson::{solve_poisson, GridSolution};

use crate::error::{GinotError, Result};
use crate::numerics::Tensor;
use crate::pointcloud::PointCloud;
use crate::solution_decoder::{FieldBatch, QueryBatch};
use crate::training::NormStats;

/// One geometry: its boundary cloud, interior query nodes and solution there.
#[derive(Debug, Clone, PartialEq)]
pub struct PoissonSample {
    pub boundary: PointCloud,
    pub queries: QueryBatch,
    pub solution: FieldBatch,
    pub load: f64,
}

impl PoissonSample {
    pub fn from_solution(domain: &StarDomain, sol: GridSolution, load: f64) -> Result<Self> {
        let n = sol.nodes.len();
        let q = Tensor::new(vec![n, 2], sol.nodes.iter().flatten().copied().collect())?;
        Ok(Self {
            boundary: PointCloud::from_points(domain.boundary_points.clone())?,
            queries: QueryBatch::all_valid(q)?,
            solution: FieldBatch::new(Tensor::new(vec![n, 1], sol.values)?, vec![true; n])?,
            load,
        })
    }

    pub fn num_queries(&self) -> usize {
        self.queries.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Seeded shuffle; `train_fraction` of the samples (at least one, leaving at
    /// least one for testing when there are two or more) go to training.
    pub fn shuffled(n: usize, train_fraction: f64, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x5151_7e57)));
        let mut n_train = (train_fraction * n as f64).round() as usize;
        if n >= 2 {
            n_train = n_train.clamp(1, n - 1);
        } else {
            n_train = n;
        }
        let test = idx.split_off(n_train);
        Self { train: idx, test }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub n_samples: usize,
    pub grid_n: usize,
    pub seed: u64,
    /// Uniform range for the source scale λ; `None` fixes λ = 1.
    pub load_range: Option<(f64, f64)>,
    pub train_fraction: f64,
    pub domain: DomainParams,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            n_samples: 500,
            grid_n: 48,
            seed: 0,
            load_range: None,
            train_fraction: 0.8,
            domain: DomainParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub kind: String,
    pub generator: GenerateConfig,
    pub split: Split,
    /// Statistics over the training split only.
    pub norm: NormStats,
    pub query_count_min: usize,
    pub query_count_max: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoissonDataset {
    pub meta: DatasetMeta,
    pub samples: Vec<PoissonSample>,
}

impl PoissonDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn train(&self) -> Vec<&PoissonSample> {
        self.meta.split.train.iter().map(|&i| &self.samples[i]).collect()
    }

    pub fn test(&self) -> Vec<&PoissonSample> {
        self.meta.split.test.iter().map(|&i| &self.samples[i]).collect()
    }

    /// Builds the metadata (split, training statistics, query-count range) for `samples`.
    pub fn assemble(generator: GenerateConfig, samples: Vec<PoissonSample>) -> Self {
        let split = Split::shuffled(samples.len(), generator.train_fraction, generator.seed);
        let train: Vec<&PoissonSample> = split.train.iter().map(|&i| &samples[i]).collect();
        let norm = NormStats::fit(&train);
        let counts = samples.iter().map(PoissonSample::num_queries);
        let meta = DatasetMeta {
            kind: "poisson".into(),
            query_count_min: counts.clone().min().unwrap_or(0),
            query_count_max: counts.max().unwrap_or(0),
            generator,
            split,
            norm,
        };
        Self { meta, samples }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed of the `index`-th sample; independent of the dataset size.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    splitmix64(seed ^ splitmix64(index as u64))
}

pub fn generate_sample(cfg: &GenerateConfig, index: usize) -> Result<PoissonSample> {
    let s = sample_seed(cfg.seed, index);
    let domain = sample_domain(s, &cfg.domain)?;
    let load = match cfg.load_range {
        Some((lo, hi)) => ChaCha8Rng::seed_from_u64(splitmix64(s)).gen_range(lo..=hi),
        None => 1.0,
    };
    let sol = solve_poisson(&domain, cfg.grid_n, load)?;
    PoissonSample::from_solution(&domain, sol, load)
}

pub fn generate_dataset(cfg: &GenerateConfig) -> Result<PoissonDataset> {
    if let Some((lo, hi)) = cfg.load_range {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(GinotError::InvalidArgument(format!(
                "invalid load range [{lo}, {hi}]"
            )));
        }
    }
    let samples = (0..cfg.n_samples)
        .into_par_iter()
        .map(|i| generate_sample(cfg, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(PoissonDataset::assemble(cfg.clone(), samples))
}

pub fn write_dataset(ds: &PoissonDataset, dir: &Path) -> Result<()> {
    let mut c = Container::new(serde_json::to_value(&ds.meta)?);
    for (i, s) in ds.samples.iter().enumerate() {
        let nb = s.boundary.len();
        let nq = s.queries.len();
        let ch = s.solution.channels();
        c.push(NamedArray::f64(
            format!("sample.{i}.boundary"),
            vec![nb, s.boundary.dim()],
            s.boundary.points().data().to_vec(),
        ));
        c.push(NamedArray::f64(
            format!("sample.{i}.queries"),
            vec![nq, s.queries.points.shape()[1]],
            s.queries.points.data().to_vec(),
        ));
        c.push(NamedArray::f64(
            format!("sample.{i}.solution"),
            vec![nq, ch],
            s.solution.values.data().to_vec(),
        ));
        c.push(NamedArray::f64(format!("sample.{i}.load"), vec![1], vec![s.load]));
    }
    c.write(dir)
}

pub fn read_dataset(dir: &Path) -> Result<PoissonDataset> {
    let c = Container::read(dir)?;
    let meta: DatasetMeta = serde_json::from_value(c.meta.clone())
        .map_err(|e| GinotError::Container(format!("corrupt dataset manifest: {e}")))?;
    if c.arrays.len() % 4 != 0 {
        return Err(GinotError::Container(
            "dataset arrays are not grouped per sample".into(),
        ));
    }
    let n = c.arrays.len() / 4;
    let tensor = |name: String| -> Result<Tensor> {
        let a = c.get(&name)?;
        Tensor::new(a.shape.clone(), a.as_f64()?.to_vec())
    };
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let boundary = PointCloud::from_points(tensor(format!("sample.{i}.boundary"))?)?;
        let queries = QueryBatch::all_valid(tensor(format!("sample.{i}.queries"))?)?;
        let values = tensor(format!("sample.{i}.solution"))?;
        let solution = FieldBatch::new(values, queries.valid.clone())?;
        let load = tensor(format!("sample.{i}.load"))?.data()[0];
        samples.push(PoissonSample {
            boundary,
            queries,
            solution,
            load,
        });
    }
    let split_ok = meta
        .split
        .train
        .iter()
        .chain(&meta.split.test)
        .all(|&i| i < n);
    if !split_ok {
        return Err(GinotError::Container(
            "split references samples outside the dataset".into(),
        ));
    }
    Ok(PoissonDataset { meta, samples })
}
