//! The three estimators: LADMM with a single splitting, the three-splitting
//! ADMM baseline, and voxelwise Lawson-Hanson NNLS, plus the small-patch
//! penalty-parameter search.
//!
//! # Concurrency contract
//!
//! Iterations are barriers. Within an iteration the per-voxel updates (f, x,
//! y, dual steps) and the per-spectral-bin updates (z steps) are independent
//! work items with disjoint writes, parallelized with rayon. Every reduction
//! (norms, costs) is accumulated into per-item slots and summed in index
//! order, so results are identical for any worker count. Callers pick the
//! worker count by running the solve inside a `rayon::ThreadPool`.
//!
//! # Memory accounting
//!
//! `SolveResult::state_vector_count` counts the image-sized (`Q x N`) arrays
//! a solver holds across iterations: 4 for LADMM (f, z, d, g) and 8 for ADMM
//! (f, x, y, z, three duals, g). Per-thread scratch of size `O(Q)` or `O(N)`
//! (including the conjugate-gradient workspace, which operates on one
//! spectral bin at a time) is not image-sized and is not counted.

use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dictionary::{Dictionary, LowRankDictionary};
use crate::error::{Error, Result};
use crate::image::{MeasuredStack, SpectroscopicImage};
use crate::spatial::{compute_xi_p, operator_norm_dtd, SpatialGraph};

mod admm;
mod ladmm;
mod nnls;
mod tune;

pub use admm::{solve_admm, solve_admm_with_reference};
pub use ladmm::{f_update, solve_ladmm, solve_ladmm_with_reference, z_update};
pub use nnls::{nnls, solve_nnls_voxelwise, NnlsSolution};
pub use tune::tune_beta;

/// Tolerance used for the cached `||D^T D||` estimate.
const NORM_ESTIMATE_TOL: f64 = 1e-6;

/// Guard against division by zero in relative quantities.
pub(crate) const DIV_GUARD: f64 = 1e-300;

/// A fully assembled estimation problem.
///
/// Shares its large parts through `Arc` so that sub-problems (patch tuning)
/// and long-lived references are cheap. The spectral-norm estimate of
/// `D^T D` is computed once at construction.
#[derive(Debug, Clone)]
pub struct Problem {
    data: Arc<MeasuredStack>,
    dict: Arc<Dictionary>,
    lrd: Arc<LowRankDictionary>,
    graph: Arc<SpatialGraph>,
    lambda: f64,
    norm_dtd: f64,
}

impl Problem {
    pub fn new(
        data: Arc<MeasuredStack>,
        dict: Arc<Dictionary>,
        lrd: Arc<LowRankDictionary>,
        graph: Arc<SpatialGraph>,
        lambda: f64,
    ) -> Result<Self> {
        if data.n_measurements() != dict.n_measurements() {
            return Err(Error::DimensionMismatch(format!(
                "data has P = {}, dictionary has P = {}",
                data.n_measurements(),
                dict.n_measurements()
            )));
        }
        if data.n_voxels() != graph.n_voxels() {
            return Err(Error::DimensionMismatch(format!(
                "data has N = {}, graph has N = {}",
                data.n_voxels(),
                graph.n_voxels()
            )));
        }
        if lrd.n_measurements() != dict.n_measurements()
            || lrd.n_spectral() != dict.n_spectral()
        {
            return Err(Error::DimensionMismatch(
                "low-rank factors do not match the dictionary shape".into(),
            ));
        }
        if lambda <= 0.0 || !lambda.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "lambda must be positive, got {lambda}"
            )));
        }
        let norm_dtd = operator_norm_dtd(&graph, NORM_ESTIMATE_TOL)?;
        Ok(Self { data, dict, lrd, graph, lambda, norm_dtd })
    }

    pub fn data(&self) -> &MeasuredStack {
        &self.data
    }

    pub fn dict(&self) -> &Dictionary {
        &self.dict
    }

    pub fn lrd(&self) -> &LowRankDictionary {
        &self.lrd
    }

    pub fn graph(&self) -> &SpatialGraph {
        &self.graph
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Cached estimate of `||D^T D||`.
    pub fn norm_dtd(&self) -> f64 {
        self.norm_dtd
    }

    pub fn n_measurements(&self) -> usize {
        self.dict.n_measurements()
    }

    pub fn n_spectral(&self) -> usize {
        self.dict.n_spectral()
    }

    pub fn n_voxels(&self) -> usize {
        self.graph.n_voxels()
    }

    pub(crate) fn dict_arc(&self) -> Arc<Dictionary> {
        Arc::clone(&self.dict)
    }

    pub(crate) fn lrd_arc(&self) -> Arc<LowRankDictionary> {
        Arc::clone(&self.lrd)
    }
}

pub const DEFAULT_MAX_ITERS: usize = 20_000;
pub const DEFAULT_REL_CHANGE_TOL: f64 = 1e-7;
pub const DEFAULT_SPLIT_RESIDUAL_TOL: f64 = 1e-6;
pub const DEFAULT_TRACE_EVERY: usize = 10;

/// Iteration controls shared by LADMM and ADMM.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Penalty parameter of the augmented Lagrangian.
    pub beta: f64,
    /// LADMM proximal step parameter; ignored by ADMM and NNLS.
    pub xi_p: f64,
    pub max_iters: usize,
    /// Threshold on the feasible iterate's relative change per iteration.
    pub rel_change_tol: f64,
    /// Threshold on the splitting residual `||z - f|| / max(||f||, eps)`.
    pub split_residual_tol: f64,
    /// Iterations between trace samples (the final iterate is always sampled).
    pub trace_every: usize,
}

impl SolverConfig {
    /// Defaults for a problem: `beta = sigma_1^2 / 10` (dictionary-scaled)
    /// and `xi_p` from the global-convergence rule.
    pub fn for_problem(problem: &Problem) -> Result<Self> {
        let sigma1 = problem
            .lrd()
            .singular_values()
            .first()
            .copied()
            .ok_or(Error::ZeroDictionary)?;
        Ok(Self {
            beta: sigma1 * sigma1 / 10.0,
            xi_p: compute_xi_p(problem.lambda(), problem.norm_dtd())?,
            max_iters: DEFAULT_MAX_ITERS,
            rel_change_tol: DEFAULT_REL_CHANGE_TOL,
            split_residual_tol: DEFAULT_SPLIT_RESIDUAL_TOL,
            trace_every: DEFAULT_TRACE_EVERY,
        })
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.beta <= 0.0 || !self.beta.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be at least 1".into()));
        }
        if self.trace_every == 0 {
            return Err(Error::InvalidArgument("trace_every must be at least 1".into()));
        }
        if self.rel_change_tol < 0.0 || self.split_residual_tol < 0.0 {
            return Err(Error::InvalidArgument("tolerances must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Which stopping rule ended the iteration.
///
/// Convergence requires the relative-change and split-residual conditions to
/// hold simultaneously; the label reports the condition that became
/// satisfied last (the binding one), with ties going to `RelChange`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    MaxIters,
    RelChange,
    SplitResidual,
}

/// One sampled iteration of a solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub wall_seconds: f64,
    pub cost: f64,
    pub split_residual: f64,
    pub dual_residual: f64,
    /// Distance from a caller-provided reference, when one was given.
    pub dfcs: Option<f64>,
}

/// Converged estimate plus diagnostics.
#[derive(Debug, Clone)]
pub struct SolveResult {
    /// The feasible iterate (z for LADMM, y for ADMM), elementwise >= 0.
    pub f: SpectroscopicImage,
    pub iterations: usize,
    pub trace: Vec<TraceRecord>,
    /// Number of image-sized arrays the algorithm held across iterations.
    pub state_vector_count: usize,
    pub termination: Termination,
}

/// Writes the five-column trace CSV.
pub fn write_trace_csv(path: &Path, trace: &[TraceRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut emit = || -> std::io::Result<()> {
        writeln!(w, "iteration,wall_seconds,cost,split_residual,dual_residual")?;
        for r in trace {
            writeln!(
                w,
                "{},{:.6},{:.17e},{:.17e},{:.17e}",
                r.iteration, r.wall_seconds, r.cost, r.split_residual, r.dual_residual
            )?;
        }
        w.flush()
    };
    emit().map_err(|e| Error::io(path, e))
}

/// Tracks the combined stopping rule and labels the binding condition.
pub(crate) struct StopTracker {
    rel_tol: f64,
    split_tol: f64,
    prev_rel_ok: bool,
    prev_split_ok: bool,
}

impl StopTracker {
    pub(crate) fn new(config: &SolverConfig) -> Self {
        Self {
            rel_tol: config.rel_change_tol,
            split_tol: config.split_residual_tol,
            prev_rel_ok: false,
            prev_split_ok: false,
        }
    }

    /// Feeds this iteration's diagnostics; `Some` means stop now.
    pub(crate) fn evaluate(&mut self, rel_change: f64, split_residual: f64) -> Option<Termination> {
        let rel_ok = rel_change < self.rel_tol;
        let split_ok = split_residual < self.split_tol;
        let verdict = if rel_ok && split_ok {
            if !self.prev_split_ok && self.prev_rel_ok {
                Some(Termination::SplitResidual)
            } else {
                Some(Termination::RelChange)
            }
        } else {
            None
        };
        self.prev_rel_ok = rel_ok;
        self.prev_split_ok = split_ok;
        verdict
    }
}

/// In-place dual ascent step `d <- d - beta * (z - f)`, elementwise over
/// equally shaped slices.
pub(crate) fn dual_step(d: &mut [f64], z: &[f64], f: &[f64], beta: f64) {
    debug_assert_eq!(d.len(), z.len());
    debug_assert_eq!(d.len(), f.len());
    for ((dv, zv), fv) in d.iter_mut().zip(z).zip(f) {
        *dv -= beta * (zv - fv);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dual_step_identity_is_exact() {
        // d_new - d_old must equal -beta (z - f) bit-for-bit.
        let mut state = 0x9E3779B97F4A7C15u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
        };
        for _ in 0..100 {
            let z: Vec<f64> = (0..16).map(|_| next()).collect();
            let f: Vec<f64> = (0..16).map(|_| next()).collect();
            let d_old: Vec<f64> = (0..16).map(|_| next()).collect();
            let beta = next().abs() + 0.1;
            let mut d = d_old.clone();
            dual_step(&mut d, &z, &f, beta);
            for i in 0..16 {
                let expect = d_old[i] - beta * (z[i] - f[i]);
                assert_eq!(d[i].to_bits(), expect.to_bits());
            }
        }
    }

    #[test]
    fn stop_tracker_labels_binding_condition() {
        let config = SolverConfig {
            beta: 1.0,
            xi_p: 1.0,
            max_iters: 10,
            rel_change_tol: 1e-7,
            split_residual_tol: 1e-6,
            trace_every: 1,
        };
        // Split satisfied after rel: binding condition is the split residual.
        let mut t = StopTracker::new(&config);
        assert_eq!(t.evaluate(1e-8, 1.0), None);
        assert_eq!(t.evaluate(1e-8, 1e-7), Some(Termination::SplitResidual));
        // Rel satisfied after split: binding condition is the relative change.
        let mut t = StopTracker::new(&config);
        assert_eq!(t.evaluate(1.0, 1e-7), None);
        assert_eq!(t.evaluate(1e-8, 1e-7), Some(Termination::RelChange));
        // Both at once (e.g. zero data): ties go to rel change.
        let mut t = StopTracker::new(&config);
        assert_eq!(t.evaluate(0.0, 0.0), Some(Termination::RelChange));
    }

    #[test]
    fn zero_tolerances_never_stop() {
        let config = SolverConfig {
            beta: 1.0,
            xi_p: 1.0,
            max_iters: 10,
            rel_change_tol: 0.0,
            split_residual_tol: 0.0,
            trace_every: 1,
        };
        let mut t = StopTracker::new(&config);
        assert_eq!(t.evaluate(0.0, 0.0), None);
    }
}
