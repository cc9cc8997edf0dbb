//! Objective value and convergence diagnostics shared by all solvers.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::solvers::Problem;

/// The objective split into its two terms.
///
/// `data_term = 0.5 ||m - (I ⊗ K) f||^2`, `penalty_term = (lambda/2) ||D f||^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostBreakdown {
    pub data_term: f64,
    pub penalty_term: f64,
    pub total: f64,
}

/// Evaluates the objective at `f` (a `Q x N` matrix).
///
/// The data term always uses the exact dictionary, never the truncation. The
/// penalty is evaluated directly from the edge list: summing
/// `||f_a - f_b||^2` over unordered adjacent pairs equals `0.5 ||D f||^2`
/// under the ordered-pair convention, so `penalty = lambda * sum_edges`.
pub fn cost(problem: &Problem, f: &DMatrix<f64>) -> Result<CostBreakdown> {
    let k = problem.dict().entries();
    if f.nrows() != k.ncols() || f.ncols() != problem.graph().n_voxels() {
        return Err(Error::DimensionMismatch(format!(
            "image is {}x{}, expected {}x{}",
            f.nrows(),
            f.ncols(),
            k.ncols(),
            problem.graph().n_voxels()
        )));
    }
    let m = problem.data().values();
    let q = f.nrows();

    // Per-voxel residual energies, summed in voxel order.
    let p = k.nrows();
    let mut residual = vec![0.0; p];
    let mut data_term = 0.0;
    let f_slice = f.as_slice();
    let m_slice = m.as_slice();
    for n in 0..f.ncols() {
        let f_col = &f_slice[n * q..(n + 1) * q];
        let m_col = &m_slice[n * p..(n + 1) * p];
        residual.copy_from_slice(m_col);
        for (j, &fj) in f_col.iter().enumerate() {
            if fj != 0.0 {
                let k_col = &k.as_slice()[j * p..(j + 1) * p];
                for (r, kv) in residual.iter_mut().zip(k_col) {
                    *r -= kv * fj;
                }
            }
        }
        data_term += 0.5 * residual.iter().map(|r| r * r).sum::<f64>();
    }

    let mut penalty = 0.0;
    for &(a, b) in problem.graph().edges() {
        let fa = &f_slice[a * q..(a + 1) * q];
        let fb = &f_slice[b * q..(b + 1) * q];
        penalty += fa
            .iter()
            .zip(fb)
            .map(|(x, y)| {
                let d = x - y;
                d * d
            })
            .sum::<f64>();
    }
    let penalty_term = problem.lambda() * penalty;

    Ok(CostBreakdown { data_term, penalty_term, total: data_term + penalty_term })
}

/// Distance from the converged solution: `||f_k - f_star|| / ||f_star||`
/// over the flattened arrays.
pub fn dfcs(f_k: &DMatrix<f64>, f_star: &DMatrix<f64>) -> Result<f64> {
    if f_k.shape() != f_star.shape() {
        return Err(Error::DimensionMismatch(format!(
            "shapes {:?} and {:?} differ",
            f_k.shape(),
            f_star.shape()
        )));
    }
    let denom: f64 = f_star.iter().map(|v| v * v).sum::<f64>().sqrt();
    if denom == 0.0 {
        return Err(Error::ZeroReference);
    }
    let num: f64 = f_k
        .iter()
        .zip(f_star.iter())
        .map(|(a, b)| {
            let d = a - b;
            d * d
        })
        .sum::<f64>()
        .sqrt();
    Ok(num / denom)
}
