use sspm_core::*;
use sspm_core::phantom::presets;
use std::sync::Arc;

const WIDTH: f64 = 1.4;

fn main() {
    let schedule = presets::t2_schedule(16, 0.008, 0.3);
    let grid = build_grid(&presets::t2_grid_axes(32, 0.005, 5.0)).unwrap();
    let dict = build_dictionary(&schedule, &grid).unwrap();
    let mask = Mask::full(vec![8, 8]).unwrap();
    let graph = build_spatial_graph(&mask, Connectivity::Faces).unwrap();
    let mut spec = presets::snapped_uniform_phantom(dict.grid(), vec![8, 8], &[(14, 1.0)], 0.0, 5);
    for c in &mut spec.compartments { c.spectral_width = WIDTH; }
    let (f_true, data) = generate_phantom(&spec, &dict, &graph).unwrap();

    for (rank_tol, lambda, beta) in [
        (1e-3f64, 0.03f64, 0.01f64), (1e-4, 0.03, 0.01), (1e-3, 0.1, 0.03),
    ] {
        let lrd = truncate_dictionary(&dict, rank_tol).unwrap();
        let r = lrd.rank();
        let v = lrd.right_vectors();
        let range = v * (v.transpose() * &f_true.values);
        let null_frac = (&f_true.values - &range).norm() / f_true.values.norm();
        let problem = Problem::new(Arc::new(data.clone()), Arc::new(dict.clone()), Arc::new(lrd),
            Arc::new(graph.clone()), lambda).unwrap();
        let mut config = SolverConfig::for_problem(&problem).unwrap();
        config.beta = beta;
        config.max_iters = 20_000;
        config.trace_every = 20_000;
        let result = solve_ladmm(&problem, &config).unwrap();
        let d = dfcs(&result.f.values, &f_true.values).unwrap();
        println!("rtol={rank_tol} r={r} lam={lambda} beta={beta}: beyond_r={null_frac:.3} it={} ({:?}) dfcs={d:.3}",
            result.iterations, result.termination);
    }
}
