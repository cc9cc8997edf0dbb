//! The single-splitting LADMM solver.
//!
//! Splits the objective as `f = z` with the data term on `f` and the
//! nonnegativity indicator plus spatial penalty on `z`. The proximal matrix
//! `P = xi_p I - lambda D^T D` cancels the spatial coupling, so the z-step is
//! a noniterative clamped affine update, while the f-step is an analytic
//! per-voxel regularized inverse evaluated through the truncated SVD.
//!
//! Holds exactly four image-sized arrays across iterations: `f` and the dual
//! `d` (voxel-contiguous), the back-projected data `g` (voxel-contiguous),
//! and `z` (bin-contiguous so the z-step can run parallel over spectral bins
//! with an `O(N)` scratch row).

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::dictionary::{
    apply_regularized_inverse, apply_regularized_inverse_into, LowRankDictionary,
};
use crate::error::{Error, Result};
use crate::image::SpectroscopicImage;
use crate::metrics;
use crate::spatial::{apply_dtd, compute_xi_p, SpatialGraph};

use super::{
    Problem, SolveResult, SolverConfig, StopTracker, Termination, TraceRecord, DIV_GUARD,
};

/// Per-voxel f-step: `f_n = (K_r^T K_r + beta I)^-1 (g_n + beta z_n - d_n)`.
///
/// `g_n` is the precomputed back-projection `K_r^T m_n`.
pub fn f_update(
    lrd: &LowRankDictionary,
    g_n: &DVector<f64>,
    z_n: &DVector<f64>,
    d_n: &DVector<f64>,
    beta: f64,
) -> Result<DVector<f64>> {
    let q = lrd.n_spectral();
    if g_n.len() != q || z_n.len() != q || d_n.len() != q {
        return Err(Error::DimensionMismatch(format!(
            "f-update inputs must have length Q = {q}"
        )));
    }
    let rhs = g_n + z_n * beta - d_n;
    apply_regularized_inverse(lrd, beta, &rhs)
}

/// Matrix-level z-step:
/// `z = max(0, (xi_p z_prev - lambda D^T D z_prev + beta f_new + d) / (xi_p + beta))`.
pub fn z_update(
    graph: &SpatialGraph,
    z_prev: &DMatrix<f64>,
    f_new: &DMatrix<f64>,
    d: &DMatrix<f64>,
    beta: f64,
    xi_p: f64,
    lambda: f64,
) -> Result<DMatrix<f64>> {
    if z_prev.shape() != f_new.shape() || z_prev.shape() != d.shape() {
        return Err(Error::DimensionMismatch("z-update inputs must share a shape".into()));
    }
    if xi_p <= 0.0 || xi_p.is_nan() {
        return Err(Error::InvalidArgument(format!("xi_p must be positive, got {xi_p}")));
    }
    let dtd = apply_dtd(graph, z_prev)?;
    let denom = xi_p + beta;
    let mut out = DMatrix::zeros(z_prev.nrows(), z_prev.ncols());
    for (o, ((zp, lap), (fv, dv))) in out
        .iter_mut()
        .zip(z_prev.iter().zip(dtd.iter()).zip(f_new.iter().zip(d.iter())))
    {
        *o = ((xi_p * zp - lambda * lap + beta * fv + dv) / denom).max(0.0);
    }
    Ok(out)
}

pub fn solve_ladmm(problem: &Problem, config: &SolverConfig) -> Result<SolveResult> {
    solve_ladmm_with_reference(problem, config, None)
}

/// Like [`solve_ladmm`], also reporting the trace distance to a reference
/// image (for convergence studies).
pub fn solve_ladmm_with_reference(
    problem: &Problem,
    config: &SolverConfig,
    reference: Option<&DMatrix<f64>>,
) -> Result<SolveResult> {
    config.validate()?;
    let required = compute_xi_p(problem.lambda(), problem.norm_dtd())?;
    if config.xi_p < required || config.xi_p.is_nan() {
        return Err(Error::InvalidArgument(format!(
            "xi_p = {} violates the convergence bound {required}",
            config.xi_p
        )));
    }
    if let Some(r) = reference {
        if r.shape() != (problem.n_spectral(), problem.n_voxels()) {
            return Err(Error::DimensionMismatch("reference image shape".into()));
        }
    }

    let q = problem.n_spectral();
    let n = problem.n_voxels();
    let graph = problem.graph();
    let lrd = problem.lrd();
    let beta = config.beta;
    let xi_p = config.xi_p;
    let lambda = problem.lambda();
    let denom = xi_p + beta;

    // The four persistent image-sized arrays.
    let mut f = vec![0.0f64; q * n]; // voxel-contiguous
    let mut d = vec![0.0f64; q * n]; // voxel-contiguous
    let mut g = vec![0.0f64; q * n]; // voxel-contiguous
    let mut z = vec![0.0f64; q * n]; // bin-contiguous

    // g_n = K_r^T m_n, once.
    {
        let data = problem.data();
        g.par_chunks_mut(q)
            .enumerate()
            .for_each(|(vox, g_col)| lrd.project_measurement_into(data.voxel(vox), g_col));
    }

    let mut f_norm_parts = vec![0.0f64; n];
    let mut z_parts = vec![[0.0f64; 3]; q];
    let mut trace = Vec::new();
    let mut tracker = StopTracker::new(config);
    let mut termination = Termination::MaxIters;
    let mut iterations = config.max_iters;
    let started = Instant::now();

    for k in 1..=config.max_iters {
        // f-step, parallel over voxels.
        {
            let z_ref = &z;
            let g_ref = &g;
            let d_ref = &d;
            f.par_chunks_mut(q)
                .zip(f_norm_parts.par_iter_mut())
                .enumerate()
                .for_each_init(
                    || vec![0.0f64; q],
                    |rhs, (vox, (f_col, norm_part))| {
                        let g_col = &g_ref[vox * q..(vox + 1) * q];
                        let d_col = &d_ref[vox * q..(vox + 1) * q];
                        for i in 0..q {
                            rhs[i] = g_col[i] + beta * z_ref[i * n + vox] - d_col[i];
                        }
                        apply_regularized_inverse_into(lrd, beta, rhs, f_col)
                            .expect("validated beta");
                        *norm_part = f_col.iter().map(|v| v * v).sum();
                    },
                );
        }

        // z-step, parallel over spectral bins with a scratch copy of the row.
        {
            let f_ref = &f;
            let d_ref = &d;
            z.par_chunks_mut(n)
                .zip(z_parts.par_iter_mut())
                .enumerate()
                .for_each_init(
                    || vec![0.0f64; n],
                    |row_old, (qi, (z_row, part))| {
                        row_old.copy_from_slice(z_row);
                        let mut dz2 = 0.0;
                        let mut z_old2 = 0.0;
                        let mut split2 = 0.0;
                        for vox in 0..n {
                            let old = row_old[vox];
                            let mut lap = graph.degree(vox) as f64 * old;
                            for &m in graph.neighbors(vox) {
                                lap -= row_old[m];
                            }
                            lap *= 2.0;
                            let fv = f_ref[vox * q + qi];
                            let dv = d_ref[vox * q + qi];
                            let new =
                                ((xi_p * old - lambda * lap + beta * fv + dv) / denom).max(0.0);
                            let df = new - old;
                            dz2 += df * df;
                            z_old2 += old * old;
                            let sp = new - fv;
                            split2 += sp * sp;
                            z_row[vox] = new;
                        }
                        *part = [dz2, z_old2, split2];
                    },
                );
        }

        // Dual ascent, parallel over voxels.
        {
            let z_ref = &z;
            let f_ref = &f;
            d.par_chunks_mut(q).enumerate().for_each(|(vox, d_col)| {
                let f_col = &f_ref[vox * q..(vox + 1) * q];
                for i in 0..q {
                    d_col[i] -= beta * (z_ref[i * n + vox] - f_col[i]);
                }
            });
        }

        // Deterministic reductions: fixed-order sums of the per-item parts.
        let f_norm2: f64 = f_norm_parts.iter().sum();
        let dz2: f64 = z_parts.iter().map(|p| p[0]).sum();
        let z_old2: f64 = z_parts.iter().map(|p| p[1]).sum();
        let split2: f64 = z_parts.iter().map(|p| p[2]).sum();
        let rel_change = dz2.sqrt() / z_old2.sqrt().max(DIV_GUARD);
        let split_residual = split2.sqrt() / f_norm2.sqrt().max(DIV_GUARD);
        let dual_residual = beta * dz2.sqrt();

        let stop = tracker.evaluate(rel_change, split_residual);
        if k % config.trace_every == 0 || stop.is_some() || k == config.max_iters {
            let estimate = bin_major_to_matrix(&z, q, n);
            let cost = metrics::cost(problem, &estimate)?;
            let dfcs = match reference {
                Some(r) => Some(metrics::dfcs(&estimate, r)?),
                None => None,
            };
            trace.push(TraceRecord {
                iteration: k,
                wall_seconds: started.elapsed().as_secs_f64(),
                cost: cost.total,
                split_residual,
                dual_residual,
                dfcs,
            });
        }
        if let Some(label) = stop {
            termination = label;
            iterations = k;
            break;
        }
    }

    let estimate = bin_major_to_matrix(&z, q, n);
    Ok(SolveResult {
        f: SpectroscopicImage::new(estimate, true)?,
        iterations,
        trace,
        state_vector_count: 4,
        termination,
    })
}

/// Copies a bin-contiguous buffer into a standard (voxel-contiguous) matrix.
fn bin_major_to_matrix(z: &[f64], q: usize, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(q, n, |qi, vox| z[qi * n + vox])
}
