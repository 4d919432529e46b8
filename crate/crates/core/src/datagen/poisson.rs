//! `−∇²u = λ` in a star-shaped domain with `u = 0` on its boundary, solved
//! with the 5-point stencil on the masked uniform grid over `[−1, 1]²`.
//!
//! Grid nodes strictly inside the boundary polygon are unknowns; every
//! neighbor outside (or on) the curve is a Dirichlet node with `u = 0`.
//! This is first-order accurate at the boundary.

use super::domain::StarDomain;
use crate::error::{GinotError, Result};

pub const CG_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct GridSolution {
    /// Interior node coordinates, row-major grid order.
    pub nodes: Vec<[f64; 2]>,
    pub values: Vec<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
}

pub fn solve_poisson(domain: &StarDomain, grid_n: usize, load: f64) -> Result<GridSolution> {
    if grid_n < 16 {
        return Err(GinotError::InvalidArgument("grid_n must be >= 16".into()));
    }
    if !load.is_finite() {
        return Err(GinotError::InvalidArgument("load must be finite".into()));
    }
    let h = 2.0 / (grid_n - 1) as f64;
    let coord = |i: usize| -1.0 + i as f64 * h;

    let mut unknown = vec![usize::MAX; grid_n * grid_n];
    let mut nodes = Vec::new();
    for j in 0..grid_n {
        for i in 0..grid_n {
            let p = [coord(i), coord(j)];
            if domain.contains(p) {
                unknown[j * grid_n + i] = nodes.len();
                nodes.push(p);
            }
        }
    }
    if nodes.is_empty() {
        return Err(GinotError::DegenerateDomain(
            "no grid node lies inside the boundary".into(),
        ));
    }

    // neighbor lists of interior unknowns; Dirichlet neighbors drop out
    let mut neighbors = Vec::with_capacity(nodes.len());
    for j in 0..grid_n {
        for i in 0..grid_n {
            if unknown[j * grid_n + i] == usize::MAX {
                continue;
            }
            let mut nb = [usize::MAX; 4];
            let cand = [
                (i.wrapping_sub(1), j),
                (i + 1, j),
                (i, j.wrapping_sub(1)),
                (i, j + 1),
            ];
            for (slot, (ii, jj)) in nb.iter_mut().zip(cand) {
                if ii < grid_n && jj < grid_n {
                    *slot = unknown[jj * grid_n + ii];
                }
            }
            neighbors.push(nb);
        }
    }

    // scaled system (4I − adjacency) u = λ h²
    let apply = |x: &[f64], y: &mut [f64]| {
        for (k, nb) in neighbors.iter().enumerate() {
            let mut s = 4.0 * x[k];
            for &n in nb {
                if n != usize::MAX {
                    s -= x[n];
                }
            }
            y[k] = s;
        }
    };
    let b = vec![load * h * h; nodes.len()];
    let (values, iterations, relative_residual) = conjugate_gradient(apply, &b, CG_TOLERANCE)?;
    Ok(GridSolution {
        nodes,
        values,
        iterations,
        relative_residual,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unpreconditioned CG from a zero initial guess for an SPD operator.
pub fn conjugate_gradient<F>(apply: F, b: &[f64], tol: f64) -> Result<(Vec<f64>, usize, f64)>
where
    F: Fn(&[f64], &mut [f64]),
{
    let n = b.len();
    let b_norm = dot(b, b).sqrt();
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return Ok((x, 0, 0.0));
    }
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rr = dot(&r, &r);
    let max_iter = 10 * n + 100;
    for it in 1..=max_iter {
        apply(&p, &mut ap);
        let alpha = rr / dot(&p, &ap);
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        let rr_new = dot(&r, &r);
        let rel = rr_new.sqrt() / b_norm;
        if rel <= tol {
            return Ok((x, it, rel));
        }
        let beta = rr_new / rr;
        for k in 0..n {
            p[k] = r[k] + beta * p[k];
        }
        rr = rr_new;
    }
    Err(GinotError::SolverDiverged {
        residual: rr.sqrt() / b_norm,
        iterations: max_iter,
    })
}
