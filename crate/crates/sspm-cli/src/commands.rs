//! Implementations of the six subcommands.

use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;


use serde::{Deserialize, Serialize};
use sspm_core::dictionary::{
    build_dictionary, build_grid, full_rank_dictionary, truncate_dictionary,
    AcquisitionSchedule, AxisSpec, Kernel,
};
use sspm_core::image::MeasuredStack;
use sspm_core::phantom::{generate_phantom, integrate_components, PhantomSpec, RNG_IDENTITY};
use sspm_core::solvers::{
    solve_admm_with_reference, solve_ladmm, solve_ladmm_with_reference, solve_nnls_voxelwise,
    tune_beta, write_trace_csv, Problem, SolveResult, SolverConfig, Termination,
};
use sspm_core::spatial::{build_spatial_graph, compute_xi_p, Connectivity};
use sspm_core::{io, metrics, Error};

use crate::manifest::{write_timing, RunManifest};
use crate::{
    Algorithm, CliError, CliResult, Command, CompareArgs, MakeDictArgs, MapsArgs, PhantomArgs,
    ProblemArgs, SolveArgs, TuneBetaArgs,
};

pub fn run(command: Command) -> CliResult<u8> {
    match command {
        Command::MakeDict(args) => make_dict(args),
        Command::Phantom(args) => phantom(args),
        Command::Solve(args) => solve(args),
        Command::Compare(args) => compare(args),
        Command::Maps(args) => maps(args),
        Command::TuneBeta(args) => tune_beta_cmd(args),
    }
}

fn ensure_out_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    }))
}

#[derive(Debug, Serialize, Deserialize)]
struct DictConfig {
    kernel: Kernel,
    schedule: Vec<Vec<f64>>,
    grid: Vec<AxisSpec>,
}

fn make_dict(args: MakeDictArgs) -> CliResult<u8> {
    let started = Instant::now();
    let config: DictConfig = io::read_json(&args.config)?;
    let grid = build_grid(&config.grid)?;
    let schedule = AcquisitionSchedule::new(config.kernel, config.schedule)?;
    let dict = build_dictionary(&schedule, &grid)?;

    ensure_out_dir(&args.out)?;
    io::save_dictionary(&args.out.join("dict.sspm"), &dict)?;

    let mut manifest = RunManifest::new("make-dict", 1);
    manifest.input(&args.config)?;
    manifest.flag("out", args.out.display().to_string());
    manifest.write(&args.out)?;
    write_timing(&args.out, started.elapsed().as_secs_f64())?;
    println!(
        "dictionary: P = {}, Q = {} -> {}",
        dict.n_measurements(),
        dict.n_spectral(),
        args.out.join("dict.sspm").display()
    );
    Ok(0)
}

#[derive(Debug, Serialize)]
struct PhantomMeta<'a> {
    generator: &'a str,
    seed: u64,
    noise_sigma: f64,
}

fn phantom(args: PhantomArgs) -> CliResult<u8> {
    let started = Instant::now();
    let dict = io::load_dictionary(&args.dict)?;
    let mut spec: PhantomSpec = io::read_json(&args.config)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let mask = sspm_core::spatial::Mask::full(spec.image_shape.clone())?;
    let graph = build_spatial_graph(&mask, Connectivity::Faces)?;
    let (f_true, data) = generate_phantom(&spec, &dict, &graph)?;

    ensure_out_dir(&args.out)?;
    io::write_matrix(&args.out.join("f_true.sspm"), &f_true.values)?;
    io::write_matrix(&args.out.join("data.sspm"), data.values())?;
    io::write_mask(&args.out.join("mask.sspm"), &mask)?;
    io::write_json(
        &args.out.join("data.meta.json"),
        &PhantomMeta { generator: RNG_IDENTITY, seed: spec.seed, noise_sigma: spec.noise_sigma },
    )?;

    let mut manifest = RunManifest::new("phantom", 1);
    manifest.input(&args.dict)?;
    manifest.input(&args.config)?;
    manifest.seed = Some(spec.seed);
    manifest.flag("out", args.out.display().to_string());
    manifest.write(&args.out)?;
    write_timing(&args.out, started.elapsed().as_secs_f64())?;
    println!(
        "phantom: Q = {}, N = {}, P = {} -> {}",
        f_true.n_spectral(),
        f_true.n_voxels(),
        data.n_measurements(),
        args.out.display()
    );
    Ok(0)
}

/// Everything `solve`, `compare`, and `tune-beta` need from disk.
struct LoadedProblem {
    problem: Problem,
    config: SolverConfig,
    pool: rayon::ThreadPool,
}

fn build_pool(threads: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Usage(format!("could not build thread pool: {e}")))
}

fn load_problem(args: &ProblemArgs) -> CliResult<LoadedProblem> {
    let dict = Arc::new(io::load_dictionary(&args.dict)?);
    let data = Arc::new(MeasuredStack::new(io::read_matrix(&args.data)?)?);
    let mask = io::read_mask(&args.mask)?;
    let graph = Arc::new(build_spatial_graph(&mask, Connectivity::Faces)?);
    let lrd = Arc::new(if args.exact_k {
        full_rank_dictionary(&dict)?
    } else {
        truncate_dictionary(&dict, args.rank_tol)?
    });
    let problem = Problem::new(data, dict, lrd, graph, args.lambda)?;
    let mut config = SolverConfig::for_problem(&problem)?;
    if let Some(beta) = args.beta {
        config.beta = beta;
    }
    if let Some(xi_p) = args.xi_p {
        config.xi_p = xi_p;
    }
    config.max_iters = args.max_iters;
    config.rel_change_tol = args.tol;
    config.split_residual_tol = args.split_tol;
    config.trace_every = args.trace_every;
    let pool = build_pool(args.threads)?;
    Ok(LoadedProblem { problem, config, pool })
}

fn manifest_for_problem(
    subcommand: &str,
    args: &ProblemArgs,
    config: Option<&SolverConfig>,
) -> CliResult<RunManifest> {
    let mut manifest = RunManifest::new(subcommand, args.threads);
    manifest.input(&args.dict)?;
    manifest.input(&args.data)?;
    manifest.input(&args.mask)?;
    manifest.flag("lambda", args.lambda);
    manifest.flag("rank_tol", args.rank_tol);
    manifest.flag("exact_k", args.exact_k);
    manifest.solver_config = config.cloned();
    Ok(manifest)
}

#[derive(Debug, Serialize)]
struct SolveSummary {
    algorithm: String,
    iterations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    termination: Option<Termination>,
    #[serde(skip_serializing_if = "Option::is_none")]
    state_vector_count: Option<usize>,
    cost_total: f64,
    cost_data_term: f64,
    cost_penalty_term: f64,
}

fn solve(args: SolveArgs) -> CliResult<u8> {
    let started = Instant::now();
    let loaded = load_problem(&args.problem)?;
    ensure_out_dir(&args.out)?;

    let algorithm = match args.algorithm {
        Algorithm::Ladmm => "ladmm",
        Algorithm::Admm => "admm",
        Algorithm::Nnls => "nnls",
    };

    let (estimate, summary, exit) = match args.algorithm {
        Algorithm::Nnls => {
            let f = loaded.pool.install(|| {
                solve_nnls_voxelwise(loaded.problem.dict(), loaded.problem.data(), args.tikhonov)
            })?;
            // Voxelwise objective including the optional Tikhonov term.
            let residual = loaded.problem.data().values()
                - loaded.problem.dict().entries() * &f.values;
            let cost_data = 0.5 * residual.norm_squared();
            let cost_pen = 0.5 * args.tikhonov * f.values.norm_squared();
            let trace = [];
            write_trace_csv(&args.out.join("trace.csv"), &trace)?;
            let summary = SolveSummary {
                algorithm: algorithm.into(),
                iterations: 0,
                termination: None,
                state_vector_count: None,
                cost_total: cost_data + cost_pen,
                cost_data_term: cost_data,
                cost_penalty_term: cost_pen,
            };
            (f, summary, 0u8)
        }
        Algorithm::Ladmm | Algorithm::Admm => {
            let result: SolveResult = loaded.pool.install(|| match args.algorithm {
                Algorithm::Ladmm => solve_ladmm(&loaded.problem, &loaded.config),
                _ => sspm_core::solvers::solve_admm(&loaded.problem, &loaded.config),
            })?;
            write_trace_csv(&args.out.join("trace.csv"), &result.trace)?;
            let cost = metrics::cost(&loaded.problem, &result.f.values)?;
            let exit = if result.termination == Termination::MaxIters { 3 } else { 0 };
            let summary = SolveSummary {
                algorithm: algorithm.into(),
                iterations: result.iterations,
                termination: Some(result.termination),
                state_vector_count: Some(result.state_vector_count),
                cost_total: cost.total,
                cost_data_term: cost.data_term,
                cost_penalty_term: cost.penalty_term,
            };
            (result.f, summary, exit)
        }
    };

    io::write_matrix(&args.out.join("f.sspm"), &estimate.values)?;
    io::write_json(&args.out.join("result.json"), &summary)?;

    let mut manifest = manifest_for_problem("solve", &args.problem, Some(&loaded.config))?;
    manifest.flag("algorithm", algorithm);
    if args.algorithm == Algorithm::Nnls {
        manifest.flag("tikhonov", args.tikhonov);
    }
    manifest.flag("out", args.out.display().to_string());
    manifest.write(&args.out)?;
    write_timing(&args.out, started.elapsed().as_secs_f64())?;

    println!(
        "{algorithm}: {} iterations, cost {:.6e} -> {}",
        summary.iterations,
        summary.cost_total,
        args.out.display()
    );
    if exit == 3 {
        eprintln!("warning: iteration cap reached before convergence");
    }
    Ok(exit)
}

fn compare(args: CompareArgs) -> CliResult<u8> {
    let started = Instant::now();
    let loaded = load_problem(&args.problem)?;
    ensure_out_dir(&args.out)?;

    // Reference: long LADMM run with the unapproximated dictionary.
    let exact_lrd = Arc::new(full_rank_dictionary(loaded.problem.dict())?);
    let exact_problem = Problem::new(
        Arc::new(loaded.problem.data().clone()),
        Arc::new(loaded.problem.dict().clone()),
        exact_lrd,
        Arc::new(loaded.problem.graph().clone()),
        loaded.problem.lambda(),
    )?;
    let mut ref_config = loaded.config.clone();
    ref_config.max_iters = args.ref_max_iters;
    ref_config.rel_change_tol = args.ref_tol;
    ref_config.split_residual_tol = args.ref_tol * 10.0;
    ref_config.trace_every = args.ref_max_iters;
    ref_config.xi_p = compute_xi_p(exact_problem.lambda(), exact_problem.norm_dtd())?;
    let reference = loaded.pool.install(|| solve_ladmm(&exact_problem, &ref_config))?;

    let ladmm = loaded.pool.install(|| {
        solve_ladmm_with_reference(&loaded.problem, &loaded.config, Some(&reference.f.values))
    })?;
    let admm = loaded.pool.install(|| {
        solve_admm_with_reference(&loaded.problem, &loaded.config, Some(&reference.f.values))
    })?;

    io::write_matrix(&args.out.join("f_star.sspm"), &reference.f.values)?;
    io::write_matrix(&args.out.join("ladmm_f.sspm"), &ladmm.f.values)?;
    io::write_matrix(&args.out.join("admm_f.sspm"), &admm.f.values)?;
    write_compare_csv(&args.out.join("compare.csv"), &[("ladmm", &ladmm), ("admm", &admm)])?;

    #[derive(Serialize)]
    struct CompareSummary {
        reference_iterations: usize,
        reference_termination: Termination,
        ladmm_final_cost: f64,
        admm_final_cost: f64,
        ladmm_final_dfcs: f64,
        admm_final_dfcs: f64,
    }
    let summary = CompareSummary {
        reference_iterations: reference.iterations,
        reference_termination: reference.termination,
        ladmm_final_cost: ladmm.trace.last().map(|t| t.cost).unwrap_or(f64::NAN),
        admm_final_cost: admm.trace.last().map(|t| t.cost).unwrap_or(f64::NAN),
        ladmm_final_dfcs: ladmm
            .trace
            .last()
            .and_then(|t| t.dfcs)
            .unwrap_or(f64::NAN),
        admm_final_dfcs: admm.trace.last().and_then(|t| t.dfcs).unwrap_or(f64::NAN),
    };
    io::write_json(&args.out.join("compare.json"), &summary)?;

    let mut manifest = manifest_for_problem("compare", &args.problem, Some(&loaded.config))?;
    manifest.flag("ref_max_iters", args.ref_max_iters);
    manifest.flag("ref_tol", args.ref_tol);
    manifest.flag("out", args.out.display().to_string());
    manifest.write(&args.out)?;
    write_timing(&args.out, started.elapsed().as_secs_f64())?;

    println!(
        "compare: ladmm cost {:.6e}, admm cost {:.6e} -> {}",
        summary.ladmm_final_cost,
        summary.admm_final_cost,
        args.out.display()
    );
    // The probe runs may use a fixed budget; only a non-converged reference
    // invalidates the DFCS column.
    if reference.termination == Termination::MaxIters {
        eprintln!("warning: reference run hit its iteration cap");
        return Ok(3);
    }
    Ok(0)
}

fn write_compare_csv(path: &Path, runs: &[(&str, &SolveResult)]) -> CliResult<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    let mut w = std::io::BufWriter::new(file);
    let mut emit = || -> std::io::Result<()> {
        writeln!(w, "algorithm,iteration,wall_seconds,cost,split_residual,dual_residual,dfcs")?;
        for (name, result) in runs {
            for r in &result.trace {
                writeln!(
                    w,
                    "{},{},{:.6},{:.17e},{:.17e},{:.17e},{:.17e}",
                    name,
                    r.iteration,
                    r.wall_seconds,
                    r.cost,
                    r.split_residual,
                    r.dual_residual,
                    r.dfcs.unwrap_or(f64::NAN)
                )?;
            }
        }
        w.flush()
    };
    emit().map_err(|e| CliError::Core(Error::Io { path: path.to_path_buf(), source: e }))
}

fn parse_ranges(text: &str) -> CliResult<Vec<std::ops::Range<usize>>> {
    text.split(',')
        .map(|part| {
            let (lo, hi) = part
                .split_once(':')
                .ok_or_else(|| CliError::Usage(format!("range {part:?} is not lo:hi")))?;
            let lo: usize = lo
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad range start {lo:?}")))?;
            let hi: usize = hi
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad range end {hi:?}")))?;
            Ok(lo..hi)
        })
        .collect()
}

fn parse_usize_list(text: &str, what: &str) -> CliResult<Vec<usize>> {
    text.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad {what} component {p:?}")))
        })
        .collect()
}

fn parse_f64_list(text: &str, what: &str) -> CliResult<Vec<f64>> {
    text.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad {what} value {p:?}")))
        })
        .collect()
}

fn maps(args: MapsArgs) -> CliResult<u8> {
    let started = Instant::now();
    let regions = parse_ranges(&args.regions)?;
    let f = io::read_matrix(&args.image)?;
    let mask = io::read_mask(&args.mask)?;
    let graph = build_spatial_graph(&mask, Connectivity::Faces)?;
    if f.ncols() != graph.n_voxels() {
        return Err(CliError::Core(Error::DimensionMismatch(format!(
            "image has {} voxels, mask selects {}",
            f.ncols(),
            graph.n_voxels()
        ))));
    }
    let image = sspm_core::image::SpectroscopicImage::new(f, false)?;
    let maps = integrate_components(&image, &regions)?;
    ensure_out_dir(&args.out)?;

    let lattice = graph.lattice().expect("mask-built graph has lattice info");
    let lattice_len: usize = lattice.shape.iter().product();
    for (j, map) in maps.iter().enumerate() {
        // Re-embed the per-node map into the full lattice.
        let mut full = vec![0.0f64; lattice_len];
        for (node, &flat) in lattice.flat_index.iter().enumerate() {
            full[flat] = map[node];
        }
        let array = io::ArrayData::new(lattice.shape.clone(), full.clone())?;
        io::write_array(&args.out.join(format!("map_{j:02}.sspm")), &array)?;
        if lattice.shape.len() == 2 {
            io::write_pgm(
                &args.out.join(format!("map_{j:02}.pgm")),
                lattice.shape[0],
                lattice.shape[1],
                &full,
            )?;
        }
    }

    let mut manifest = RunManifest::new("maps", 1);
    manifest.input(&args.image)?;
    manifest.input(&args.mask)?;
    manifest.flag("regions", &args.regions);
    manifest.flag("out", args.out.display().to_string());
    manifest.write(&args.out)?;
    write_timing(&args.out, started.elapsed().as_secs_f64())?;
    println!("maps: {} region(s) -> {}", maps.len(), args.out.display());
    Ok(0)
}

fn tune_beta_cmd(args: TuneBetaArgs) -> CliResult<u8> {
    let started = Instant::now();
    let loaded = load_problem(&args.problem)?;
    let origin = parse_usize_list(&args.patch_origin, "patch origin")?;
    let shape = parse_usize_list(&args.patch_shape, "patch shape")?;
    let candidates = parse_f64_list(&args.candidates, "candidate")?;
    let beta = loaded.pool.install(|| {
        tune_beta(&loaded.problem, &origin, &shape, &candidates, args.probe_iters)
    })?;

    ensure_out_dir(&args.out)?;
    #[derive(Serialize)]
    struct TuneSummary<'a> {
        beta: f64,
        candidates: &'a [f64],
        probe_iters: usize,
    }
    io::write_json(
        &args.out.join("beta.json"),
        &TuneSummary { beta, candidates: &candidates, probe_iters: args.probe_iters },
    )?;

    let mut manifest = manifest_for_problem("tune-beta", &args.problem, None)?;
    manifest.flag("patch_origin", &args.patch_origin);
    manifest.flag("patch_shape", &args.patch_shape);
    manifest.flag("candidates", &args.candidates);
    manifest.flag("probe_iters", args.probe_iters);
    manifest.flag("out", args.out.display().to_string());
    manifest.write(&args.out)?;
    write_timing(&args.out, started.elapsed().as_secs_f64())?;
    println!("beta = {beta}");
    Ok(0)
}

