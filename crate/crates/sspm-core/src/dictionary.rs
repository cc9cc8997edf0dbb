//! Forward-model dictionaries and their low-rank compression.
//!
//! A dictionary is the `P x Q` matrix `K` whose entry `(p, q)` is the ideal
//! signal of a pure compartment with tissue parameters `gamma_q` under the
//! `p`th acquisition setting, scaled by the quadrature weight `w_q` of the
//! spectral grid. The truncated SVD of `K` drives the `O(rQ)` evaluation of
//! `(K^T K + beta I)^-1 x` used by the solvers.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spacing rule of one spectral axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spacing {
    Linear,
    Logarithmic,
}

/// One axis of a tensor-product spectral grid.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AxisSpec {
    pub min: f64,
    pub max: f64,
    pub count: usize,
    pub spacing: Spacing,
}

/// Discretization of the spectral parameter space.
///
/// `points[q]` is the tuple `gamma_q` (one coordinate per axis, physical
/// units), `weights[q]` the positive quadrature weight `w_q`. Points are laid
/// out in tensor-product order with the first axis varying fastest, so
/// `axis_shape` recovers the grid layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectralGrid {
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
    axis_shape: Vec<usize>,
    axis_spacing: Vec<Spacing>,
}

impl SpectralGrid {
    /// Number of spectral positions `Q`.
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Number of axes of the parameter space.
    pub fn n_axes(&self) -> usize {
        self.axis_shape.len()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn axis_shape(&self) -> &[usize] {
        &self.axis_shape
    }

    pub fn axis_spacing(&self) -> &[Spacing] {
        &self.axis_spacing
    }

    /// Maps a physical coordinate to the axis's native quadrature coordinate
    /// (identity for linear axes, `ln` for logarithmic ones).
    pub fn native_coord(&self, axis: usize, value: f64) -> f64 {
        match self.axis_spacing[axis] {
            Spacing::Linear => value,
            Spacing::Logarithmic => value.ln(),
        }
    }
}

/// Builds a tensor-product grid with trapezoidal quadrature weights.
///
/// Weights are computed per axis in the axis's native coordinate (the log
/// coordinate for logarithmic axes) and tensor-multiplied across axes. A
/// single-point axis gets weight 1; its point sits at `min`.
pub fn build_grid(axis_specs: &[AxisSpec]) -> Result<SpectralGrid> {
    if axis_specs.is_empty() {
        return Err(Error::InvalidGrid("no axes given".into()));
    }
    let mut axes_points: Vec<Vec<f64>> = Vec::with_capacity(axis_specs.len());
    let mut axes_weights: Vec<Vec<f64>> = Vec::with_capacity(axis_specs.len());
    for (i, spec) in axis_specs.iter().enumerate() {
        let (pts, wts) = build_axis(spec)
            .map_err(|e| Error::InvalidGrid(format!("axis {i}: {e}")))?;
        axes_points.push(pts);
        axes_weights.push(wts);
    }

    let axis_shape: Vec<usize> = axes_points.iter().map(Vec::len).collect();
    let q_total: usize = axis_shape.iter().product();
    let mut points = Vec::with_capacity(q_total);
    let mut weights = Vec::with_capacity(q_total);
    // Tensor product, axis 0 fastest.
    for q in 0..q_total {
        let mut rem = q;
        let mut tuple = Vec::with_capacity(axis_shape.len());
        let mut w = 1.0;
        for (pts, wts) in axes_points.iter().zip(&axes_weights) {
            let idx = rem % pts.len();
            rem /= pts.len();
            tuple.push(pts[idx]);
            w *= wts[idx];
        }
        points.push(tuple);
        weights.push(w);
    }

    Ok(SpectralGrid {
        points,
        weights,
        axis_shape,
        axis_spacing: axis_specs.iter().map(|s| s.spacing).collect(),
    })
}

fn build_axis(spec: &AxisSpec) -> std::result::Result<(Vec<f64>, Vec<f64>), String> {
    if spec.count == 0 {
        return Err("count must be at least 1".into());
    }
    if spec.spacing == Spacing::Logarithmic && spec.min <= 0.0 {
        return Err(format!("logarithmic axis requires positive bounds, got min = {}", spec.min));
    }
    if spec.count == 1 {
        return Ok((vec![spec.min], vec![1.0]));
    }
    if spec.min >= spec.max || spec.min.is_nan() || spec.max.is_nan() {
        return Err(format!("requires min < max, got [{}, {}]", spec.min, spec.max));
    }
    // Uniform samples in the native coordinate.
    let (lo, hi) = match spec.spacing {
        Spacing::Linear => (spec.min, spec.max),
        Spacing::Logarithmic => (spec.min.ln(), spec.max.ln()),
    };
    let n = spec.count;
    let step = (hi - lo) / (n - 1) as f64;
    let coords: Vec<f64> = (0..n).map(|i| lo + step * i as f64).collect();
    let points: Vec<f64> = match spec.spacing {
        Spacing::Linear => coords.clone(),
        Spacing::Logarithmic => coords.iter().map(|c| c.exp()).collect(),
    };
    // Trapezoidal rule on the native coordinate.
    let mut weights = vec![0.0; n];
    weights[0] = (coords[1] - coords[0]) / 2.0;
    weights[n - 1] = (coords[n - 1] - coords[n - 2]) / 2.0;
    for i in 1..n - 1 {
        weights[i] = (coords[i + 1] - coords[i - 1]) / 2.0;
    }
    Ok((points, weights))
}

/// Signal model of one acquisition kernel.
///
/// Parameter tuple layouts (`theta` per measurement, `gamma` per grid point):
/// - `T2Exp`: theta `[TE]`, gamma `[T2]`, signal `exp(-TE/T2)`
/// - `InversionRecoveryMse`: theta `[TI, TE]`, gamma `[T1, T2]`,
///   signal `(1 - 2 exp(-TI/T1)) exp(-TE/T2)`
/// - `DiffusionT2`: theta `[b, TE]`, gamma `[D, T2]`,
///   signal `exp(-b D) exp(-TE/T2)`
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    T2Exp,
    InversionRecoveryMse,
    DiffusionT2,
}

impl Kernel {
    pub fn theta_arity(self) -> usize {
        match self {
            Kernel::T2Exp => 1,
            Kernel::InversionRecoveryMse | Kernel::DiffusionT2 => 2,
        }
    }

    pub fn gamma_arity(self) -> usize {
        match self {
            Kernel::T2Exp => 1,
            Kernel::InversionRecoveryMse | Kernel::DiffusionT2 => 2,
        }
    }

    /// Ideal signal `b(theta, gamma)`. Assumes arity was validated.
    fn evaluate(self, theta: &[f64], gamma: &[f64]) -> std::result::Result<f64, String> {
        match self {
            Kernel::T2Exp => {
                let (te, t2) = (theta[0], gamma[0]);
                if t2 <= 0.0 {
                    return Err(format!("T2 must be positive, got {t2}"));
                }
                Ok((-te / t2).exp())
            }
            Kernel::InversionRecoveryMse => {
                let (ti, te) = (theta[0], theta[1]);
                let (t1, t2) = (gamma[0], gamma[1]);
                if t1 <= 0.0 || t2 <= 0.0 {
                    return Err(format!("T1 and T2 must be positive, got ({t1}, {t2})"));
                }
                Ok((1.0 - 2.0 * (-ti / t1).exp()) * (-te / t2).exp())
            }
            Kernel::DiffusionT2 => {
                let (b, te) = (theta[0], theta[1]);
                let (diff, t2) = (gamma[0], gamma[1]);
                if diff < 0.0 {
                    return Err(format!("diffusivity must be nonnegative, got {diff}"));
                }
                if t2 <= 0.0 {
                    return Err(format!("T2 must be positive, got {t2}"));
                }
                Ok((-b * diff).exp() * (-te / t2).exp())
            }
        }
    }
}

/// The `P` acquisition settings of a contrast-encoded measurement stack.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AcquisitionSchedule {
    pub kernel: Kernel,
    pub entries: Vec<Vec<f64>>,
}

impl AcquisitionSchedule {
    pub fn new(kernel: Kernel, entries: Vec<Vec<f64>>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidArgument("schedule must have at least one entry".into()));
        }
        for (p, theta) in entries.iter().enumerate() {
            if theta.len() != kernel.theta_arity() {
                return Err(Error::DimensionMismatch(format!(
                    "schedule entry {p} has {} parameters, kernel expects {}",
                    theta.len(),
                    kernel.theta_arity()
                )));
            }
            if theta.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "schedule entry {p} has a negative or non-finite timing parameter"
                )));
            }
        }
        Ok(Self { kernel, entries })
    }

    /// Number of measurements `P`.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Dense forward-model matrix with its grid and schedule metadata.
#[derive(Debug, Clone)]
pub struct Dictionary {
    entries: DMatrix<f64>,
    grid: SpectralGrid,
    schedule: AcquisitionSchedule,
}

impl Dictionary {
    pub fn n_measurements(&self) -> usize {
        self.entries.nrows()
    }

    pub fn n_spectral(&self) -> usize {
        self.entries.ncols()
    }

    /// The `P x Q` matrix `K`.
    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn grid(&self) -> &SpectralGrid {
        &self.grid
    }

    pub fn schedule(&self) -> &AcquisitionSchedule {
        &self.schedule
    }

    /// Reassembles a dictionary from previously serialized parts, re-checking
    /// shape consistency and finiteness.
    pub fn from_parts(
        entries: DMatrix<f64>,
        grid: SpectralGrid,
        schedule: AcquisitionSchedule,
    ) -> Result<Self> {
        if entries.nrows() != schedule.len() || entries.ncols() != grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "dictionary is {}x{}, schedule has P={} and grid has Q={}",
                entries.nrows(),
                entries.ncols(),
                schedule.len(),
                grid.len()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dictionary entries".into()));
        }
        Ok(Self { entries, grid, schedule })
    }
}

/// Fills the dictionary: `entry(p, q) = w_q * b(theta_p, gamma_q)`.
pub fn build_dictionary(schedule: &AcquisitionSchedule, grid: &SpectralGrid) -> Result<Dictionary> {
    if grid.is_empty() {
        return Err(Error::InvalidGrid("empty grid".into()));
    }
    let arity = schedule.kernel.gamma_arity();
    if grid.n_axes() != arity {
        return Err(Error::DimensionMismatch(format!(
            "grid has {} axes, kernel expects {}",
            grid.n_axes(),
            arity
        )));
    }
    let p_count = schedule.len();
    let q_count = grid.len();
    let mut entries = DMatrix::<f64>::zeros(p_count, q_count);
    for q in 0..q_count {
        let gamma = &grid.points()[q];
        let w = grid.weights()[q];
        for p in 0..p_count {
            let b = schedule
                .kernel
                .evaluate(&schedule.entries[p], gamma)
                .map_err(Error::InvalidArgument)?;
            entries[(p, q)] = w * b;
        }
    }
    Dictionary::from_parts(entries, grid.clone(), schedule.clone())
}

/// Truncated SVD of a dictionary.
///
/// Holds the top `r` singular triplets of `K`, with `r` chosen as the
/// smallest rank whose relative Frobenius truncation error is below the
/// requested tolerance. Both singular vector sets are orthonormal and the
/// singular values are positive and non-increasing.
#[derive(Debug, Clone)]
pub struct LowRankDictionary {
    singular_values: Vec<f64>,
    /// `P x r`, columns are the left singular vectors `u_i`.
    left_vectors: DMatrix<f64>,
    /// `Q x r`, columns are the right singular vectors `v_i`.
    right_vectors: DMatrix<f64>,
    frobenius_error: f64,
}

/// Default relative Frobenius truncation tolerance (0.005%).
pub const DEFAULT_RANK_TOLERANCE: f64 = 5e-5;

impl LowRankDictionary {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn left_vectors(&self) -> &DMatrix<f64> {
        &self.left_vectors
    }

    pub fn right_vectors(&self) -> &DMatrix<f64> {
        &self.right_vectors
    }

    /// Achieved relative Frobenius truncation error.
    pub fn frobenius_error(&self) -> f64 {
        self.frobenius_error
    }

    pub fn n_measurements(&self) -> usize {
        self.left_vectors.nrows()
    }

    pub fn n_spectral(&self) -> usize {
        self.right_vectors.nrows()
    }

    /// Reconstructs the rank-`r` approximation `K_r = sum_i s_i u_i v_i^T`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut k = DMatrix::zeros(self.n_measurements(), self.n_spectral());
        for (i, s) in self.singular_values.iter().enumerate() {
            k += self.left_vectors.column(i) * self.right_vectors.column(i).transpose() * *s;
        }
        k
    }

    /// `K_r^T m` for a single voxel's measurement vector.
    pub fn project_measurement(&self, m: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_spectral());
        self.project_measurement_into(m.as_slice(), out.as_mut_slice());
        out
    }

    /// Slice form of [`Self::project_measurement`]: `out = sum_i s_i (u_i . m) v_i`.
    pub fn project_measurement_into(&self, m: &[f64], out: &mut [f64]) {
        assert_eq!(m.len(), self.n_measurements());
        assert_eq!(out.len(), self.n_spectral());
        out.fill(0.0);
        let p = self.n_measurements();
        let q = self.n_spectral();
        let u_all = self.left_vectors.as_slice();
        let v_all = self.right_vectors.as_slice();
        for (i, s) in self.singular_values.iter().enumerate() {
            let u = &u_all[i * p..(i + 1) * p];
            let c = s * dot(u, m);
            let v = &v_all[i * q..(i + 1) * q];
            for (o, vv) in out.iter_mut().zip(v) {
                *o += c * vv;
            }
        }
    }
}

fn svd_sorted(k: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>, DMatrix<f64>) {
    let svd = k.clone().svd(true, true);
    let u = svd.u.expect("svd with u");
    let vt = svd.v_t.expect("svd with v_t");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .expect("finite singular values")
    });
    let sigma: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let left = DMatrix::from_columns(&order.iter().map(|&i| u.column(i)).collect::<Vec<_>>());
    let right =
        DMatrix::from_columns(&order.iter().map(|&i| vt.row(i).transpose()).collect::<Vec<_>>());
    (sigma, left, right)
}

/// Compresses a dictionary to the smallest rank meeting the Frobenius rule.
///
/// Chooses the minimal `r` with `sqrt(sum_{i>r} s_i^2) / sqrt(sum_i s_i^2) <
/// tolerance`. The SVD is computed once here; solvers reuse the stored
/// factors.
pub fn truncate_dictionary(dict: &Dictionary, tolerance: f64) -> Result<LowRankDictionary> {
    if tolerance <= 0.0 || tolerance >= 1.0 || tolerance.is_nan() {
        return Err(Error::InvalidArgument(format!(
            "truncation tolerance must lie in (0, 1), got {tolerance}"
        )));
    }
    let (sigma, left, right) = svd_sorted(dict.entries());
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return Err(Error::ZeroDictionary);
    }
    // Walk ranks upward until the tail energy drops below tolerance.
    let mut tail = total;
    let mut rank = sigma.len();
    let mut err = 0.0;
    for (r, s) in sigma.iter().enumerate() {
        let rel = (tail.max(0.0)).sqrt() / total.sqrt();
        if rel < tolerance {
            rank = r;
            err = rel;
            break;
        }
        tail -= s * s;
        err = (tail.max(0.0)).sqrt() / total.sqrt();
        rank = r + 1;
    }
    build_low_rank(sigma, left, right, rank, err)
}

/// Keeps every numerically nonzero singular triplet ("exact K" mode).
///
/// The resulting operator applies `(K^T K + beta I)^-1` exactly (up to
/// rounding): directions in the null space of `K` are handled by the leading
/// `x / beta` term of the inverse formula.
pub fn full_rank_dictionary(dict: &Dictionary) -> Result<LowRankDictionary> {
    let (sigma, left, right) = svd_sorted(dict.entries());
    if sigma.is_empty() || sigma[0] == 0.0 {
        return Err(Error::ZeroDictionary);
    }
    let cutoff = sigma[0] * 1e-14;
    let rank = sigma.iter().take_while(|s| **s > cutoff).count();
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    let tail: f64 = sigma[rank..].iter().map(|s| s * s).sum();
    let err = tail.sqrt() / total.sqrt();
    build_low_rank(sigma, left, right, rank, err)
}

fn build_low_rank(
    sigma: Vec<f64>,
    left: DMatrix<f64>,
    right: DMatrix<f64>,
    rank: usize,
    err: f64,
) -> Result<LowRankDictionary> {
    let singular_values: Vec<f64> = sigma[..rank].to_vec();
    let left_vectors = left.columns(0, rank).into_owned();
    let right_vectors = right.columns(0, rank).into_owned();
    if rank > 0 {
        for (name, m) in [("left", &left_vectors), ("right", &right_vectors)] {
            let gram = m.transpose() * m;
            let dev = (&gram - DMatrix::<f64>::identity(rank, rank)).abs().max();
            if dev > 1e-10 {
                return Err(Error::Solver(format!(
                    "{name} singular vectors deviate from orthonormality by {dev:e}"
                )));
            }
        }
    }
    Ok(LowRankDictionary { singular_values, left_vectors, right_vectors, frobenius_error: err })
}

/// Applies `(K_r^T K_r + beta I)^-1` to `x` in `O(rQ)` time.
///
/// Evaluates `x / beta - sum_i [s_i^2 / (beta^2 + beta s_i^2)] v_i (v_i^T x)`.
pub fn apply_regularized_inverse(
    lrd: &LowRankDictionary,
    beta: f64,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    if x.len() != lrd.n_spectral() {
        return Err(Error::DimensionMismatch(format!(
            "input has length {}, dictionary has Q = {}",
            x.len(),
            lrd.n_spectral()
        )));
    }
    let mut out = DVector::zeros(x.len());
    apply_regularized_inverse_into(lrd, beta, x.as_slice(), out.as_mut_slice())?;
    Ok(out)
}

/// Allocation-free form of [`apply_regularized_inverse`] used in solver loops.
///
/// `x` and `out` may not alias; both must have length `Q`.
pub fn apply_regularized_inverse_into(
    lrd: &LowRankDictionary,
    beta: f64,
    x: &[f64],
    out: &mut [f64],
) -> Result<()> {
    if beta <= 0.0 || !beta.is_finite() {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    debug_assert_eq!(x.len(), lrd.n_spectral());
    debug_assert_eq!(out.len(), x.len());
    let inv_beta = 1.0 / beta;
    for (o, v) in out.iter_mut().zip(x) {
        *o = v * inv_beta;
    }
    let q = lrd.n_spectral();
    let v_all = lrd.right_vectors.as_slice();
    for (i, s) in lrd.singular_values.iter().enumerate() {
        let v = &v_all[i * q..(i + 1) * q];
        let c = (s * s) / (beta * beta + beta * s * s) * dot(v, x);
        for (o, vv) in out.iter_mut().zip(v) {
            *o -= c * vv;
        }
    }
    Ok(())
}

/// Dot product with four independent accumulators so the reduction
/// vectorizes; the summation order is fixed, keeping results identical
/// across thread counts.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}
