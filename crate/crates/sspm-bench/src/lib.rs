//! Shared fixtures for the solver benchmarks.

use std::sync::Arc;

use sspm_core::dictionary::{full_rank_dictionary, truncate_dictionary, LowRankDictionary};
use sspm_core::phantom::{generate_phantom, presets};
use sspm_core::solvers::Problem;

/// A mid-sized diffusion-T2 problem (P=48, Q=400, N=n*n) with a snapped
/// two-compartment phantom, built once per benchmark group.
pub fn diffusion_t2_problem(n_side: usize, lambda: f64) -> Problem {
    let schedule = presets::diffusion_t2_schedule(6, 1000.0, 8, 0.02, 0.08);
    let grid = sspm_core::dictionary::build_grid(&presets::diffusion_t2_grid_axes(20))
        .expect("valid grid");
    let dict = sspm_core::dictionary::build_dictionary(&schedule, &grid).expect("dictionary");
    let mask = sspm_core::spatial::Mask::full(vec![n_side, n_side]).expect("mask");
    let graph = sspm_core::spatial::build_spatial_graph(&mask, sspm_core::spatial::Connectivity::Faces)
        .expect("graph");
    let spec = presets::snapped_uniform_phantom(
        dict.grid(),
        vec![n_side, n_side],
        &[(145, 1.0), (254, 0.7)],
        0.01,
        7,
    );
    let (_, data) = generate_phantom(&spec, &dict, &graph).expect("phantom");
    let lrd = truncate_dictionary(&dict, sspm_core::DEFAULT_RANK_TOLERANCE).expect("svd");
    Problem::new(Arc::new(data), Arc::new(dict), Arc::new(lrd), Arc::new(graph), lambda)
        .expect("problem")
}

/// Full-rank factors for the same dictionary (the "exact K" mode).
pub fn full_rank_factors(problem: &Problem) -> LowRankDictionary {
    full_rank_dictionary(problem.dict()).expect("svd")
}

/// The small well-posed T2 problem used for end-to-end solve benchmarks.
pub fn small_t2_problem() -> Problem {
    let (dict, graph, _mask, spec) = presets::well_posed_t2_problem(8, 8, 0.01, 42);
    let (_, data) = generate_phantom(&spec, &dict, &graph).expect("phantom");
    let lrd = truncate_dictionary(&dict, 8e-2).expect("svd");
    Problem::new(Arc::new(data), Arc::new(dict), Arc::new(lrd), Arc::new(graph), 1.0)
        .expect("problem")
}
