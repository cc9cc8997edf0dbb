use sspm_core::*;
use std::sync::Arc;
use std::time::Instant;

fn run_cfg(lambda: f64, beta: f64, trace_every: usize) {
    let schedule = phantom::presets::diffusion_t2_schedule(6, 3000.0, 8, 0.02, 0.16);
    let grid = build_grid(&[
        AxisSpec { min: 2e-4, max: 3e-3, count: 20, spacing: Spacing::Logarithmic },
        AxisSpec { min: 0.03, max: 0.3, count: 20, spacing: Spacing::Logarithmic },
    ]).unwrap();
    let dict = build_dictionary(&schedule, &grid).unwrap();
    let lrd = truncate_dictionary(&dict, 5e-5).unwrap();
    let full = full_rank_dictionary(&dict).unwrap();
    let mask = Mask::full(vec![32, 32]).unwrap();
    let graph = build_spatial_graph(&mask, Connectivity::Faces).unwrap();
    let spec = phantom::presets::snapped_uniform_phantom(
        dict.grid(), vec![32, 32], &[(145, 1.0), (254, 0.7)], 0.01, 7);
    let (_, data) = generate_phantom(&spec, &dict, &graph).unwrap();

    let exact_problem = Problem::new(Arc::new(data.clone()), Arc::new(dict.clone()),
        Arc::new(full.clone()), Arc::new(graph.clone()), lambda).unwrap();
    let mut config = SolverConfig::for_problem(&exact_problem).unwrap();
    config.beta = beta;
    config.rel_change_tol = 1e-7;
    config.split_residual_tol = 1e-6;
    config.max_iters = 8_000;
    config.trace_every = 8_000;
    let t1 = Instant::now();
    let fstar = solve_ladmm(&exact_problem, &config).unwrap();
    let tstar = t1.elapsed().as_secs_f64();

    let problem = Problem::new(Arc::new(data.clone()), Arc::new(dict.clone()),
        Arc::new(lrd.clone()), Arc::new(graph.clone()), lambda).unwrap();
    let mut run = SolverConfig::for_problem(&problem).unwrap();
    run.beta = beta;
    run.rel_change_tol = 1e-9;
    run.split_residual_tol = 1e-8;
    run.max_iters = 6_000;
    run.trace_every = trace_every;
    let t2 = Instant::now();
    let l = sspm_core::solvers::solve_ladmm_with_reference(&problem, &run, Some(&fstar.f.values)).unwrap();
    let tl = t2.elapsed().as_secs_f64();
    let t3 = Instant::now();
    let a = sspm_core::solvers::solve_admm_with_reference(&problem, &run, Some(&fstar.f.values)).unwrap();
    let ta = t3.elapsed().as_secs_f64();
    let cross = |r: &SolveResult| r.trace.iter().find(|t| t.dfcs.unwrap() <= 0.05).map(|t| (t.iteration, t.wall_seconds));
    let lc = cross(&l);
    let ac = cross(&a);
    let ratio = match (&lc, &ac) { (Some((_, a2)), Some((_, b))) => a2 / b, _ => f64::NAN };
    println!("lam={lambda} beta={beta} every={trace_every}: r={} f*({:?} {} it {tstar:.0}s) L({tl:.0}s cross {lc:?}) A({ta:.0}s cross {ac:?}) RATIO={ratio:.3}",
        lrd.rank(), fstar.termination, fstar.iterations);
}

fn main() {
    run_cfg(1.0, 3.0, 50);
    run_cfg(1.0, 1.0, 50);
    run_cfg(3.0, 3.0, 50);
}
