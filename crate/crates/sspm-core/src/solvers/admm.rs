//! The three-splitting ADMM baseline.
//!
//! Auxiliary variables `x` (data term), `y` (nonnegativity) and `z` (spatial
//! penalty) are all tied to `f`. The iteration is:
//!
//! 1. `f = (beta x + d_x + beta y + d_y + beta z + d_z) / (3 beta)`
//! 2. `x = (K^T K + beta I)^-1 (g + beta f - d_x)` per voxel, through the
//!    stored SVD factors
//! 3. `y = max(0, f - d_y / beta)`
//! 4. `(lambda D^T D + beta I) z = beta f - d_z`, solved per spectral bin by
//!    warm-started conjugate gradients (the bin systems are independent)
//! 5. three dual ascent steps
//!
//! Holds eight image-sized arrays across iterations (f, x, y, z, three
//! duals, and `g = (I ⊗ K^T) m`); the CG workspace is per-bin `O(N)`.
//!
//! `g` and the x-step both go through the stored SVD factors, so with a
//! truncated dictionary the algorithm minimizes the same truncated objective
//! as LADMM; at full rank this reduces to the exact `(I ⊗ K^T) m`.

use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::dictionary::{apply_regularized_inverse_into, dot};
use crate::error::{Error, Result};
use crate::image::SpectroscopicImage;
use crate::metrics;
use crate::spatial::SpatialGraph;

use super::{
    dual_step, Problem, SolveResult, SolverConfig, StopTracker, Termination, TraceRecord,
    DIV_GUARD,
};

/// Relative residual target of the per-bin CG solves.
const CG_TOL: f64 = 1e-10;

pub fn solve_admm(problem: &Problem, config: &SolverConfig) -> Result<SolveResult> {
    solve_admm_with_reference(problem, config, None)
}

/// Like [`solve_admm`], also reporting the trace distance to a reference
/// image (for convergence studies).
pub fn solve_admm_with_reference(
    problem: &Problem,
    config: &SolverConfig,
    reference: Option<&DMatrix<f64>>,
) -> Result<SolveResult> {
    config.validate()?;
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
    let lambda = problem.lambda();

    // The eight persistent image-sized arrays.
    let mut f = vec![0.0f64; q * n]; // voxel-contiguous
    let mut x = vec![0.0f64; q * n];
    let mut y = vec![0.0f64; q * n];
    let mut dx = vec![0.0f64; q * n];
    let mut dy = vec![0.0f64; q * n];
    let mut dz = vec![0.0f64; q * n];
    let mut g = vec![0.0f64; q * n];
    let mut z = vec![0.0f64; q * n]; // bin-contiguous

    // g_n = K_r^T m_n, once.
    {
        let data = problem.data();
        g.par_chunks_mut(q)
            .enumerate()
            .for_each(|(vox, g_col)| lrd.project_measurement_into(data.voxel(vox), g_col));
    }

    let mut f_parts = vec![0.0f64; n];
    let mut fx_parts = vec![0.0f64; n];
    let mut y_parts = vec![[0.0f64; 3]; n];
    let mut fz_parts = vec![0.0f64; q];
    let mut trace = Vec::new();
    let mut tracker = StopTracker::new(config);
    let mut termination = Termination::MaxIters;
    let mut iterations = config.max_iters;
    let started = Instant::now();

    for k in 1..=config.max_iters {
        // Averaging step for f.
        {
            let (x_ref, y_ref, z_ref) = (&x, &y, &z);
            let (dx_ref, dy_ref, dz_ref) = (&dx, &dy, &dz);
            let inv3b = 1.0 / (3.0 * beta);
            f.par_chunks_mut(q)
                .zip(f_parts.par_iter_mut())
                .enumerate()
                .for_each(|(vox, (f_col, part))| {
                    let base = vox * q;
                    let mut norm2 = 0.0;
                    for i in 0..q {
                        let v = (beta * x_ref[base + i]
                            + dx_ref[base + i]
                            + beta * y_ref[base + i]
                            + dy_ref[base + i]
                            + beta * z_ref[i * n + vox]
                            + dz_ref[base + i])
                            * inv3b;
                        f_col[i] = v;
                        norm2 += v * v;
                    }
                    *part = norm2;
                });
        }

        // x-step through the regularized inverse.
        {
            let (f_ref, g_ref, dx_ref) = (&f, &g, &dx);
            x.par_chunks_mut(q)
                .zip(fx_parts.par_iter_mut())
                .enumerate()
                .for_each_init(
                    || vec![0.0f64; q],
                    |rhs, (vox, (x_col, part))| {
                        let base = vox * q;
                        for i in 0..q {
                            rhs[i] = g_ref[base + i] + beta * f_ref[base + i] - dx_ref[base + i];
                        }
                        apply_regularized_inverse_into(lrd, beta, rhs, x_col)
                            .expect("validated beta");
                        let mut gap2 = 0.0;
                        for i in 0..q {
                            let d = f_ref[base + i] - x_col[i];
                            gap2 += d * d;
                        }
                        *part = gap2;
                    },
                );
        }

        // y-step: projection onto the nonnegative orthant.
        {
            let (f_ref, dy_ref) = (&f, &dy);
            let inv_beta = 1.0 / beta;
            y.par_chunks_mut(q)
                .zip(y_parts.par_iter_mut())
                .enumerate()
                .for_each(|(vox, (y_col, part))| {
                    let base = vox * q;
                    let mut change2 = 0.0;
                    let mut old2 = 0.0;
                    let mut gap2 = 0.0;
                    for i in 0..q {
                        let old = y_col[i];
                        let new = (f_ref[base + i] - dy_ref[base + i] * inv_beta).max(0.0);
                        let dc = new - old;
                        change2 += dc * dc;
                        old2 += old * old;
                        let gp = f_ref[base + i] - new;
                        gap2 += gp * gp;
                        y_col[i] = new;
                    }
                    *part = [change2, old2, gap2];
                });
        }

        // z-step: per-bin SPD solves, warm-started from the previous z.
        {
            let (f_ref, dz_ref) = (&f, &dz);
            z.par_chunks_mut(n)
                .zip(fz_parts.par_iter_mut())
                .enumerate()
                .try_for_each_init(
                    || CgWorkspace::new(n),
                    |ws, (qi, (z_row, part))| -> Result<()> {
                        for vox in 0..n {
                            ws.rhs[vox] = beta * f_ref[vox * q + qi] - dz_ref[vox * q + qi];
                        }
                        cg_solve_bin(graph, lambda, beta, ws, z_row)?;
                        let mut gap2 = 0.0;
                        for vox in 0..n {
                            let d = f_ref[vox * q + qi] - z_row[vox];
                            gap2 += d * d;
                        }
                        *part = gap2;
                        Ok(())
                    },
                )?;
        }

        // Dual ascent for all three splittings: d <- d - beta (f - aux).
        {
            let (f_ref, x_ref, y_ref, z_ref) = (&f, &x, &y, &z);
            dx.par_chunks_mut(q)
                .zip(dy.par_chunks_mut(q))
                .zip(dz.par_chunks_mut(q))
                .enumerate()
                .for_each(|(vox, ((dx_col, dy_col), dz_col))| {
                    let base = vox * q;
                    let f_col = &f_ref[base..base + q];
                    dual_step(dx_col, f_col, &x_ref[base..base + q], beta);
                    dual_step(dy_col, f_col, &y_ref[base..base + q], beta);
                    for i in 0..q {
                        dz_col[i] -= beta * (f_col[i] - z_ref[i * n + vox]);
                    }
                });
        }

        // Deterministic reductions.
        let f_norm2: f64 = f_parts.iter().sum();
        let fx2: f64 = fx_parts.iter().sum();
        let dy2: f64 = y_parts.iter().map(|p| p[0]).sum();
        let y_old2: f64 = y_parts.iter().map(|p| p[1]).sum();
        let fy2: f64 = y_parts.iter().map(|p| p[2]).sum();
        let fz2: f64 = fz_parts.iter().sum();
        let denom = f_norm2.sqrt().max(DIV_GUARD);
        let split_residual = fx2.max(fy2).max(fz2).sqrt() / denom;
        let rel_change = dy2.sqrt() / y_old2.sqrt().max(DIV_GUARD);
        let dual_residual = beta * dy2.sqrt();

        let stop = tracker.evaluate(rel_change, split_residual);
        if k % config.trace_every == 0 || stop.is_some() || k == config.max_iters {
            let estimate = DMatrix::from_column_slice(q, n, &y);
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

    let estimate = DMatrix::from_column_slice(q, n, &y);
    Ok(SolveResult {
        f: SpectroscopicImage::new(estimate, true)?,
        iterations,
        trace,
        state_vector_count: 8,
        termination,
    })
}

struct CgWorkspace {
    rhs: Vec<f64>,
    r: Vec<f64>,
    p: Vec<f64>,
    ap: Vec<f64>,
}

impl CgWorkspace {
    fn new(n: usize) -> Self {
        Self { rhs: vec![0.0; n], r: vec![0.0; n], p: vec![0.0; n], ap: vec![0.0; n] }
    }
}

/// Applies `lambda * 2L + beta I` to `v`.
fn apply_bin_operator(graph: &SpatialGraph, lambda: f64, beta: f64, v: &[f64], out: &mut [f64]) {
    for vox in 0..v.len() {
        let mut lap = graph.degree(vox) as f64 * v[vox];
        for &m in graph.neighbors(vox) {
            lap -= v[m];
        }
        out[vox] = 2.0 * lambda * lap + beta * v[vox];
    }
}

/// Solves `(lambda D^T D + beta I) z_row = rhs` in place, warm-started from
/// the incoming `z_row`.
fn cg_solve_bin(
    graph: &SpatialGraph,
    lambda: f64,
    beta: f64,
    ws: &mut CgWorkspace,
    z_row: &mut [f64],
) -> Result<()> {
    let n = z_row.len();
    let rhs_norm2 = dot(&ws.rhs, &ws.rhs);
    if rhs_norm2 == 0.0 {
        z_row.fill(0.0);
        return Ok(());
    }
    let target2 = CG_TOL * CG_TOL * rhs_norm2;

    apply_bin_operator(graph, lambda, beta, z_row, &mut ws.ap);
    for i in 0..n {
        ws.r[i] = ws.rhs[i] - ws.ap[i];
    }
    ws.p.copy_from_slice(&ws.r);
    let mut rs = dot(&ws.r, &ws.r);

    let cap = 10 * n + 100;
    for _ in 0..cap {
        if rs <= target2 {
            return Ok(());
        }
        apply_bin_operator(graph, lambda, beta, &ws.p, &mut ws.ap);
        let p_ap = dot(&ws.p, &ws.ap);
        if p_ap <= 0.0 {
            return Err(Error::Solver(
                "conjugate gradient lost positive definiteness".into(),
            ));
        }
        let alpha = rs / p_ap;
        for ((zv, rv), (pv, apv)) in
            z_row.iter_mut().zip(&mut ws.r).zip(ws.p.iter().zip(&ws.ap))
        {
            *zv += alpha * pv;
            *rv -= alpha * apv;
        }
        let rs_new = dot(&ws.r, &ws.r);
        let ratio = rs_new / rs;
        rs = rs_new;
        for i in 0..n {
            ws.p[i] = ws.r[i] + ratio * ws.p[i];
        }
    }
    if rs <= target2 {
        Ok(())
    } else {
        Err(Error::Solver(format!(
            "conjugate gradient did not reach tolerance within {cap} iterations"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::full_rank_dictionary;
    use crate::image::MeasuredStack;
    use crate::phantom::presets::standard_t2_problem;
    use crate::phantom::generate_phantom;
    use crate::solvers::solve_ladmm;
    use crate::spatial::{build_spatial_graph, Connectivity, Mask};
    use std::sync::Arc;

    fn small_problem(sigma: f64, seed: u64, lambda: f64) -> Problem {
        let (dict, graph, _mask, spec) = standard_t2_problem(8, 12, 4, 4, sigma, seed);
        let (_, data) = generate_phantom(&spec, &dict, &graph).unwrap();
        let lrd = full_rank_dictionary(&dict).unwrap();
        Problem::new(Arc::new(data), Arc::new(dict), Arc::new(lrd), Arc::new(graph), lambda)
            .unwrap()
    }

    #[test]
    fn zero_data_returns_zero() {
        let (dict, graph, _mask, _spec) = standard_t2_problem(6, 8, 3, 3, 0.0, 1);
        let data = MeasuredStack::new(DMatrix::zeros(6, graph.n_voxels())).unwrap();
        let lrd = full_rank_dictionary(&dict).unwrap();
        let problem =
            Problem::new(Arc::new(data), Arc::new(dict), Arc::new(lrd), Arc::new(graph), 1.0)
                .unwrap();
        let config = SolverConfig::for_problem(&problem).unwrap();
        let result = solve_admm(&problem, &config).unwrap();
        assert!(result.f.values.iter().all(|v| *v == 0.0));
        assert!(result.iterations <= 2);
        assert_eq!(result.state_vector_count, 8);
    }

    #[test]
    fn cg_solves_bin_system() {
        let mask = Mask::full(vec![3, 3]).unwrap();
        let graph = build_spatial_graph(&mask, Connectivity::Faces).unwrap();
        let n = graph.n_voxels();
        let lambda = 0.7;
        let beta = 0.4;
        let mut ws = CgWorkspace::new(n);
        for i in 0..n {
            ws.rhs[i] = (i as f64 * 1.37).sin();
        }
        let mut sol = vec![0.0; n];
        cg_solve_bin(&graph, lambda, beta, &mut ws, &mut sol).unwrap();
        let mut check = vec![0.0; n];
        apply_bin_operator(&graph, lambda, beta, &sol, &mut check);
        for i in 0..n {
            assert!((check[i] - ws.rhs[i]).abs() <= 1e-9 * ws.rhs[i].abs().max(1.0));
        }
    }

    #[test]
    fn warm_start_reuses_solution() {
        let mask = Mask::full(vec![4, 4]).unwrap();
        let graph = build_spatial_graph(&mask, Connectivity::Faces).unwrap();
        let n = graph.n_voxels();
        let mut ws = CgWorkspace::new(n);
        for i in 0..n {
            ws.rhs[i] = 1.0 + (i as f64 * 0.3).cos();
        }
        let mut sol = vec![0.0; n];
        cg_solve_bin(&graph, 1.0, 1.0, &mut ws, &mut sol).unwrap();
        // Re-solving from the converged state must not move the solution.
        let before = sol.clone();
        cg_solve_bin(&graph, 1.0, 1.0, &mut ws, &mut sol).unwrap();
        for (a, b) in before.iter().zip(&sol) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn admm_and_ladmm_share_the_optimum() {
        let (dict, graph, _mask, spec) =
            crate::phantom::presets::well_posed_t2_problem(6, 6, 0.01, 31);
        let (_, data) = generate_phantom(&spec, &dict, &graph).unwrap();
        let lrd = crate::dictionary::truncate_dictionary(&dict, 8e-2).unwrap();
        let problem =
            Problem::new(Arc::new(data), Arc::new(dict), Arc::new(lrd), Arc::new(graph), 1.0)
                .unwrap();
        let mut config = SolverConfig::for_problem(&problem).unwrap();
        config.beta = 3.0;
        config.rel_change_tol = 1e-11;
        config.split_residual_tol = 1e-9;
        config.max_iters = 30_000;
        let ladmm = solve_ladmm(&problem, &config).unwrap();
        let admm = solve_admm(&problem, &config).unwrap();
        let cost_l = ladmm.trace.last().unwrap().cost;
        let cost_a = admm.trace.last().unwrap().cost;
        let rel = (cost_l - cost_a).abs() / cost_l.abs().max(1e-30);
        assert!(rel <= 1e-8, "final costs differ by {rel:e} ({cost_l} vs {cost_a})");
        assert!(admm.f.values.iter().all(|v| *v >= 0.0));
        let diff = (&ladmm.f.values - &admm.f.values).norm() / admm.f.values.norm();
        assert!(diff <= 1e-4, "estimates differ by {diff:e}");
    }

    #[test]
    fn admm_thread_invariance() {
        let problem = small_problem(0.01, 5, 0.5);
        let mut config = SolverConfig::for_problem(&problem).unwrap();
        config.max_iters = 80;
        config.rel_change_tol = 0.0;
        config.split_residual_tol = 0.0;
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| solve_admm(&problem, &config).unwrap())
        };
        let a = run(1);
        let b = run(3);
        let bits = |m: &DMatrix<f64>| -> Vec<u64> { m.iter().map(|v| v.to_bits()).collect() };
        assert_eq!(bits(&a.f.values), bits(&b.f.values));
    }
}
