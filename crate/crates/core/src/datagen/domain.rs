use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{GinotError, Result};
use crate::numerics::Tensor;

/// Star-shaped domain parameters: `r(θ) = clamp(μ + Σ a_k cos kθ + b_k sin kθ, r_min, r_max)`
/// with `a_k, b_k ~ N(0, amplitude² / k^smoothness)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainParams {
    pub n_boundary: usize,
    pub n_modes: usize,
    pub smoothness: f64,
    pub amplitude: f64,
    pub mean_radius: f64,
    pub r_min: f64,
    pub r_max: f64,
}

impl Default for DomainParams {
    fn default() -> Self {
        Self {
            n_boundary: 144,
            n_modes: 6,
            smoothness: 2.0,
            amplitude: 0.1,
            mean_radius: 0.5,
            r_min: 0.2,
            r_max: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StarDomain {
    pub radii: Vec<f64>,
    pub angles: Vec<f64>,
    /// `[n_b × 2]`
    pub boundary_points: Tensor,
}

impl StarDomain {
    pub fn from_radii(radii: Vec<f64>) -> Result<Self> {
        let n = radii.len();
        if n < 3 {
            return Err(GinotError::InvalidArgument(
                "a boundary needs at least 3 points".into(),
            ));
        }
        let angles: Vec<f64> = (0..n)
            .map(|i| 2.0 * std::f64::consts::PI * i as f64 / n as f64)
            .collect();
        let pts = radii
            .iter()
            .zip(&angles)
            .flat_map(|(r, t)| [r * t.cos(), r * t.sin()])
            .collect();
        Ok(Self {
            boundary_points: Tensor::new(vec![n, 2], pts)?,
            radii,
            angles,
        })
    }

    pub fn vertex(&self, i: usize) -> [f64; 2] {
        let r = self.boundary_points.row(i);
        [r[0], r[1]]
    }

    pub fn len(&self) -> usize {
        self.radii.len()
    }

    pub fn is_empty(&self) -> bool {
        self.radii.is_empty()
    }

    /// True when `p` lies strictly inside the boundary polygon.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        const EDGE_TOL: f64 = 1e-12;
        let n = self.len();
        let mut inside = false;
        for i in 0..n {
            let a = self.vertex(i);
            let b = self.vertex((i + 1) % n);
            if segment_distance(p, a, b) <= EDGE_TOL {
                return false;
            }
            if (a[1] > p[1]) != (b[1] > p[1]) {
                let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
                if p[0] < x {
                    inside = !inside;
                }
            }
        }
        inside
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a[0] + t * dx, a[1] + t * dy);
    ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt()
}

/// Draws a random star-shaped domain; deterministic in `seed`.
pub fn sample_domain(seed: u64, params: &DomainParams) -> Result<StarDomain> {
    if params.n_boundary < 8 {
        return Err(GinotError::InvalidArgument("n_b must be >= 8".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let coeffs: Vec<(f64, f64)> = (1..=params.n_modes)
        .map(|k| {
            let sd = params.amplitude / (k as f64).powf(params.smoothness / 2.0);
            (sd * std_normal.sample(&mut rng), sd * std_normal.sample(&mut rng))
        })
        .collect();
    let n = params.n_boundary;
    let radii = (0..n)
        .map(|i| {
            let theta = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            let r = coeffs
                .iter()
                .enumerate()
                .fold(params.mean_radius, |acc, (j, (a, b))| {
                    let k = (j + 1) as f64;
                    acc + a * (k * theta).cos() + b * (k * theta).sin()
                });
            r.clamp(params.r_min, params.r_max)
        })
        .collect();
    StarDomain::from_radii(radii)
}
