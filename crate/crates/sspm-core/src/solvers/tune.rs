//! Small-patch penalty-parameter search.
//!
//! Convergence speed depends strongly on `beta` but the optimum is problem
//! dependent, so the solver is probed for a fixed number of iterations on a
//! small image patch for each candidate and the candidate with the lowest
//! final objective wins. The chosen value is then used on the full problem.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::image::MeasuredStack;
use crate::metrics;
use crate::spatial::SpatialGraph;

use super::{ladmm::solve_ladmm, Problem, SolverConfig};

/// Probes LADMM on the patch for each candidate `beta` and returns the one
/// with the lowest objective after `probe_iters` iterations. Ties break
/// toward the smallest candidate.
pub fn tune_beta(
    problem: &Problem,
    patch_origin: &[usize],
    patch_shape: &[usize],
    candidates: &[f64],
    probe_iters: usize,
) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no beta candidates given".into()));
    }
    for &c in candidates {
        if c <= 0.0 || !c.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "beta candidates must be positive, got {c}"
            )));
        }
    }
    if probe_iters == 0 {
        return Err(Error::InvalidArgument("probe_iters must be at least 1".into()));
    }
    let sub = extract_patch_problem(problem, patch_origin, patch_shape)?;

    let mut sorted: Vec<f64> = candidates.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite candidates"));

    let mut best: Option<(f64, f64)> = None;
    for &beta in &sorted {
        let mut config = SolverConfig::for_problem(&sub)?;
        config.beta = beta;
        config.max_iters = probe_iters;
        // Zero tolerances: run exactly probe_iters iterations per candidate.
        config.rel_change_tol = 0.0;
        config.split_residual_tol = 0.0;
        config.trace_every = probe_iters;
        let result = solve_ladmm(&sub, &config)?;
        let cost = metrics::cost(&sub, &result.f.values)?.total;
        match &best {
            Some((best_cost, _)) if *best_cost <= cost => {}
            _ => best = Some((cost, beta)),
        }
    }
    Ok(best.expect("nonempty candidates").1)
}

/// Restricts a problem to the voxels of an axis-aligned lattice patch.
///
/// Every lattice cell of the patch must be present in the mask; edges of the
/// restricted graph are the original edges with both endpoints inside.
fn extract_patch_problem(
    problem: &Problem,
    patch_origin: &[usize],
    patch_shape: &[usize],
) -> Result<Problem> {
    let graph = problem.graph();
    let lattice = graph.lattice().ok_or_else(|| {
        Error::InvalidArgument("patch extraction needs a lattice-backed graph".into())
    })?;
    let dims = lattice.shape.len();
    if patch_origin.len() != dims || patch_shape.len() != dims {
        return Err(Error::DimensionMismatch(format!(
            "patch is {}-dimensional, lattice is {dims}-dimensional",
            patch_origin.len()
        )));
    }
    if patch_shape.contains(&0) {
        return Err(Error::InvalidArgument("patch shape has a zero extent".into()));
    }
    for (axis, (&o, &s)) in patch_origin.iter().zip(patch_shape).enumerate() {
        if o + s > lattice.shape[axis] {
            return Err(Error::PatchOutsideMask(format!(
                "axis {axis}: {o}+{s} exceeds extent {}",
                lattice.shape[axis]
            )));
        }
    }

    // Map lattice flat index -> node for membership lookups.
    let lattice_len: usize = lattice.shape.iter().product();
    let mut node_of = vec![usize::MAX; lattice_len];
    for (node, &flat) in lattice.flat_index.iter().enumerate() {
        node_of[flat] = node;
    }

    // Enumerate patch cells in scan order.
    let patch_len: usize = patch_shape.iter().product();
    let mut nodes = Vec::with_capacity(patch_len);
    for cell in 0..patch_len {
        let mut rem = cell;
        let mut flat = 0;
        let mut stride = 1;
        for axis in 0..dims {
            let c = patch_origin[axis] + rem % patch_shape[axis];
            rem /= patch_shape[axis];
            flat += c * stride;
            stride *= lattice.shape[axis];
        }
        let node = node_of[flat];
        if node == usize::MAX {
            return Err(Error::PatchOutsideMask(format!(
                "lattice cell {flat} is not in the mask"
            )));
        }
        nodes.push(node);
    }

    let mut new_index = vec![usize::MAX; graph.n_voxels()];
    for (new, &old) in nodes.iter().enumerate() {
        new_index[old] = new;
    }
    let mut edges = Vec::new();
    for (new_a, &old_a) in nodes.iter().enumerate() {
        for &old_b in graph.neighbors(old_a) {
            let new_b = new_index[old_b];
            if new_b != usize::MAX && new_a < new_b {
                edges.push((new_a, new_b));
            }
        }
    }
    let sub_graph = SpatialGraph::from_edges(nodes.len(), &edges)?;

    let p = problem.n_measurements();
    let data = problem.data().values();
    let mut sub_data = DMatrix::<f64>::zeros(p, nodes.len());
    for (new, &old) in nodes.iter().enumerate() {
        sub_data.column_mut(new).copy_from(&data.column(old));
    }

    Problem::new(
        Arc::new(MeasuredStack::new(sub_data)?),
        problem.dict_arc(),
        problem.lrd_arc(),
        Arc::new(sub_graph),
        problem.lambda(),
    )
}
