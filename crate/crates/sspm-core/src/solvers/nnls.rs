//! Lawson-Hanson active-set solver for nonnegative least squares.
//!
//! Solves `min 0.5 ||A x - b||^2` subject to `x >= 0` by growing a passive
//! set of unconstrained coordinates. Each candidate enters at the most
//! positive dual coordinate; the unconstrained least-squares solution on the
//! passive set is computed by SVD, and infeasible steps are pulled back to
//! the boundary. Terminates in finitely many steps at the global optimum,
//! with a complementary-slackness certificate on the way out.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::image::{MeasuredStack, SpectroscopicImage};

#[derive(Debug, Clone)]
pub struct NnlsSolution {
    pub x: DVector<f64>,
    pub residual_norm: f64,
    /// Outer (active-set) iterations used.
    pub iterations: usize,
}

/// Relative floor for the dual-feasibility stopping threshold.
const DUAL_TOL_REL: f64 = 1e-12;

pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<NnlsSolution> {
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument("nnls needs a nonempty matrix".into()));
    }
    if b.len() != rows {
        return Err(Error::DimensionMismatch(format!(
            "matrix has {} rows, rhs has length {}",
            rows,
            b.len()
        )));
    }

    let mut x = DVector::<f64>::zeros(cols);
    let mut passive: Vec<usize> = Vec::new();
    let mut in_passive = vec![false; cols];
    let mut residual = b.clone();
    let mut w = a.transpose() * &residual;
    let scale = w.amax().max(1.0);
    let dual_tol = DUAL_TOL_REL * scale;

    let max_outer = 3 * cols.max(rows) + 10;
    let max_inner = 3 * cols + 10;
    let mut outer = 0;

    loop {
        // Dual vector on the free set; stop when no coordinate can improve.
        let mut best = None;
        for j in 0..cols {
            if !in_passive[j] && w[j] > dual_tol {
                match best {
                    Some((_, wj)) if wj >= w[j] => {}
                    _ => best = Some((j, w[j])),
                }
            }
        }
        let Some((enter, _)) = best else { break };
        if passive.len() == rows.min(cols) {
            // Passive set saturated; the residual is already orthogonal to
            // the span, remaining duals are rounding noise.
            break;
        }
        outer += 1;
        if outer > max_outer {
            return Err(Error::Solver(format!(
                "nnls failed to converge after {max_outer} active-set steps"
            )));
        }
        passive.push(enter);
        in_passive[enter] = true;

        // Inner loop: unconstrained LS on the passive set; while the step
        // leaves the cone, interpolate back to the boundary and drop the
        // coordinates that landed there.
        let mut s = ls_on_subset(a, b, &passive)?;
        let mut inner = 0;
        while s.iter().any(|&v| v < 0.0) {
            inner += 1;
            if inner > max_inner {
                return Err(Error::Solver("nnls inner loop failed to make progress".into()));
            }
            let mut alpha = f64::INFINITY;
            for (idx, &j) in passive.iter().enumerate() {
                if s[idx] < 0.0 {
                    // x >= 0 and s < 0, so the denominator is positive.
                    let t = x[j] / (x[j] - s[idx]);
                    if t < alpha {
                        alpha = t;
                    }
                }
            }
            let alpha = alpha.clamp(0.0, 1.0);
            for (idx, &j) in passive.iter().enumerate() {
                x[j] += alpha * (s[idx] - x[j]);
            }
            // Drop coordinates that reached the boundary.
            let x_scale = passive.iter().map(|&j| x[j].abs()).fold(1.0, f64::max);
            let mut kept = Vec::with_capacity(passive.len());
            for &j in &passive {
                if x[j] <= f64::EPSILON * x_scale {
                    x[j] = 0.0;
                    in_passive[j] = false;
                } else {
                    kept.push(j);
                }
            }
            passive = kept;
            if passive.is_empty() {
                break;
            }
            s = ls_on_subset(a, b, &passive)?;
        }
        for (idx, &j) in passive.iter().enumerate() {
            x[j] = s[idx].max(0.0);
        }

        residual = b - a * &x;
        w = a.transpose() * &residual;
    }

    Ok(NnlsSolution { x, residual_norm: residual.norm(), iterations: outer })
}

/// Least squares on the selected columns via SVD (rank-deficiency tolerant).
fn ls_on_subset(a: &DMatrix<f64>, b: &DVector<f64>, subset: &[usize]) -> Result<DVector<f64>> {
    let sub = DMatrix::from_columns(&subset.iter().map(|&j| a.column(j)).collect::<Vec<_>>());
    let svd = sub.svd(true, true);
    let sigma_max = svd.singular_values.amax();
    svd.solve(b, sigma_max * 1e-13)
        .map_err(|e| Error::Solver(format!("least-squares subproblem failed: {e}")))
}

/// Per-voxel NNLS over a measurement stack.
///
/// With `tikhonov > 0` the voxel objective gains `tikhonov/2 * ||f_n||^2`,
/// implemented by augmenting the system with `sqrt(tikhonov) I` rows. Voxels
/// are independent and solved in parallel.
pub fn solve_nnls_voxelwise(
    dict: &Dictionary,
    data: &MeasuredStack,
    tikhonov: f64,
) -> Result<SpectroscopicImage> {
    if data.n_measurements() != dict.n_measurements() {
        return Err(Error::DimensionMismatch(format!(
            "data has P = {}, dictionary has P = {}",
            data.n_measurements(),
            dict.n_measurements()
        )));
    }
    if tikhonov < 0.0 || !tikhonov.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "tikhonov weight must be nonnegative, got {tikhonov}"
        )));
    }
    let p = dict.n_measurements();
    let q = dict.n_spectral();
    let n = data.n_voxels();

    let a = if tikhonov > 0.0 {
        let mut aug = DMatrix::<f64>::zeros(p + q, q);
        aug.view_mut((0, 0), (p, q)).copy_from(dict.entries());
        let root = tikhonov.sqrt();
        for j in 0..q {
            aug[(p + j, j)] = root;
        }
        aug
    } else {
        dict.entries().clone()
    };
    let rhs_len = a.nrows();

    let mut f = DMatrix::<f64>::zeros(q, n);
    let columns: Vec<Result<DVector<f64>>> = (0..n)
        .into_par_iter()
        .map(|vox| {
            let mut b = DVector::<f64>::zeros(rhs_len);
            b.as_mut_slice()[..p].copy_from_slice(data.voxel(vox));
            let solution = nnls(&a, &b)?;
            debug_assert!(kkt_satisfied(&a, &b, &solution.x), "KKT failed at voxel {vox}");
            Ok(solution.x)
        })
        .collect();
    for (vox, col) in columns.into_iter().enumerate() {
        f.column_mut(vox).copy_from(&col?);
    }
    SpectroscopicImage::new(f, true)
}

/// Complementary-slackness check used in debug builds and tests.
pub(crate) fn kkt_satisfied(a: &DMatrix<f64>, b: &DVector<f64>, x: &DVector<f64>) -> bool {
    let grad = a.transpose() * (a * x - b);
    let scale = (a.transpose() * b).amax().max(1.0);
    x.iter().zip(grad.iter()).all(|(&xi, &gi)| {
        if xi > 0.0 {
            gi.abs() <= 1e-8 * scale
        } else {
            gi >= -1e-8
        }
    })
}
