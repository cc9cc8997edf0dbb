//! Voxel adjacency, the finite-difference Gram operator, and the LADMM step
//! bound.
//!
//! The roughness penalty sums `0.5 * ||f_n - f_m||^2` over ordered pairs of
//! adjacent voxels, so each unordered neighbor pair is counted twice and the
//! Gram operator `D^T D` equals `2 L`, where `L = degree - adjacency` is the
//! combinatorial graph Laplacian. That factor of two is carried consistently
//! through the penalty, the z-update, and the step bound `xi_p`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Neighbor rule used when building a graph from a mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connectivity {
    /// Face-adjacency: 4-neighbor in 2D, 6-neighbor in 3D.
    Faces,
}

/// Boolean voxel selection over a 2D or 3D lattice.
///
/// Values are stored with the first dimension varying fastest (column-major),
/// matching the array file format.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    shape: Vec<usize>,
    values: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, values: Vec<bool>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(Error::InvalidArgument(format!(
                "mask must be 1-, 2- or 3-dimensional, got {} dims",
                shape.len()
            )));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::DimensionMismatch(format!(
                "mask shape {:?} implies {} values, got {}",
                shape,
                n,
                values.len()
            )));
        }
        Ok(Self { shape, values })
    }

    /// All-true mask over the given lattice.
    pub fn full(shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        Self::new(shape, vec![true; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for i in 1..self.shape.len() {
            strides[i] = strides[i - 1] * self.shape[i - 1];
        }
        strides
    }
}

/// Lattice placement of graph nodes, kept for image reshaping and patch
/// extraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeInfo {
    /// Shape of the originating image lattice.
    pub shape: Vec<usize>,
    /// Per-node flat index into the lattice (first dimension fastest).
    pub flat_index: Vec<usize>,
}

impl LatticeInfo {
    /// Integer coordinates of one node.
    pub fn coords(&self, node: usize) -> Vec<usize> {
        let mut rem = self.flat_index[node];
        self.shape
            .iter()
            .map(|&extent| {
                let c = rem % extent;
                rem /= extent;
                c
            })
            .collect()
    }
}

/// Adjacency structure of the masked voxels.
///
/// Nodes are the mask-true voxels in scan order (first dimension fastest);
/// edges connect face-adjacent pairs. Voxels outside the mask are excluded
/// entirely, so no smoothing acts across the mask boundary.
#[derive(Debug, Clone)]
pub struct SpatialGraph {
    n_voxels: usize,
    /// Unordered edges as `(a, b)` with `a < b`, sorted.
    edges: Vec<(usize, usize)>,
    /// CSR offsets into `neighbors`, length `n_voxels + 1`.
    offsets: Vec<usize>,
    /// Concatenated sorted neighbor lists.
    neighbors: Vec<usize>,
    degrees: Vec<usize>,
    lattice: Option<LatticeInfo>,
}

impl SpatialGraph {
    /// Builds a graph from an explicit edge list (mainly for tests and
    /// non-lattice callers). Self-edges and duplicates are rejected.
    pub fn from_edges(n_voxels: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n_voxels == 0 {
            return Err(Error::EmptyMask);
        }
        let mut normalized: Vec<(usize, usize)> = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            if a == b {
                return Err(Error::InvalidArgument(format!("self-edge at voxel {a}")));
            }
            if a >= n_voxels || b >= n_voxels {
                return Err(Error::InvalidArgument(format!(
                    "edge ({a}, {b}) out of range for {n_voxels} voxels"
                )));
            }
            normalized.push((a.min(b), a.max(b)));
        }
        normalized.sort_unstable();
        if normalized.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument("duplicate edge".into()));
        }
        Ok(Self::assemble(n_voxels, normalized, None))
    }

    fn assemble(
        n_voxels: usize,
        edges: Vec<(usize, usize)>,
        lattice: Option<LatticeInfo>,
    ) -> Self {
        let mut degrees = vec![0usize; n_voxels];
        for &(a, b) in &edges {
            degrees[a] += 1;
            degrees[b] += 1;
        }
        let mut offsets = vec![0usize; n_voxels + 1];
        for n in 0..n_voxels {
            offsets[n + 1] = offsets[n] + degrees[n];
        }
        let mut cursor = offsets.clone();
        let mut neighbors = vec![0usize; 2 * edges.len()];
        for &(a, b) in &edges {
            neighbors[cursor[a]] = b;
            cursor[a] += 1;
            neighbors[cursor[b]] = a;
            cursor[b] += 1;
        }
        for n in 0..n_voxels {
            neighbors[offsets[n]..offsets[n + 1]].sort_unstable();
        }
        Self { n_voxels, edges, offsets, neighbors, degrees, lattice }
    }

    pub fn n_voxels(&self) -> usize {
        self.n_voxels
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn degree(&self, node: usize) -> usize {
        self.degrees[node]
    }

    pub fn max_degree(&self) -> usize {
        self.degrees.iter().copied().max().unwrap_or(0)
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[self.offsets[node]..self.offsets[node + 1]]
    }

    pub fn lattice(&self) -> Option<&LatticeInfo> {
        self.lattice.as_ref()
    }

    /// Applies `D^T D = 2 L` to one scalar field over the voxels.
    ///
    /// `field` and `out` have length `n_voxels` and may not alias.
    pub fn apply_dtd_field(&self, field: &[f64], out: &mut [f64]) {
        debug_assert_eq!(field.len(), self.n_voxels);
        debug_assert_eq!(out.len(), self.n_voxels);
        for n in 0..self.n_voxels {
            let mut acc = self.degrees[n] as f64 * field[n];
            for &m in self.neighbors(n) {
                acc -= field[m];
            }
            out[n] = 2.0 * acc;
        }
    }
}

/// Builds the adjacency graph of the mask-true voxels.
pub fn build_spatial_graph(mask: &Mask, connectivity: Connectivity) -> Result<SpatialGraph> {
    let Connectivity::Faces = connectivity;
    let strides = mask.strides();
    // Node numbering: scan order over mask-true voxels.
    let mut node_of = vec![usize::MAX; mask.values.len()];
    let mut flat_index = Vec::new();
    for (i, &inside) in mask.values.iter().enumerate() {
        if inside {
            node_of[i] = flat_index.len();
            flat_index.push(i);
        }
    }
    if flat_index.is_empty() {
        return Err(Error::EmptyMask);
    }
    let n_voxels = flat_index.len();

    let mut edges = Vec::new();
    for (node_a, &flat) in flat_index.iter().enumerate() {
        // Decompose the flat index to know where axis boundaries are.
        let mut rem = flat;
        for (axis, &extent) in mask.shape.iter().enumerate() {
            let coord = rem % extent;
            rem /= extent;
            if coord + 1 < extent {
                let other = flat + strides[axis];
                if mask.values[other] {
                    edges.push((node_a, node_of[other]));
                }
            }
        }
    }
    edges.sort_unstable();
    let lattice = LatticeInfo { shape: mask.shape.clone(), flat_index };
    Ok(SpatialGraph::assemble(n_voxels, edges, Some(lattice)))
}

/// Applies the Gram operator to a `Q x N` image given as column-major storage
/// (column `n` is voxel `n`'s spectrum).
pub fn apply_dtd(
    graph: &SpatialGraph,
    image: &nalgebra::DMatrix<f64>,
) -> Result<nalgebra::DMatrix<f64>> {
    if image.ncols() != graph.n_voxels() {
        return Err(Error::DimensionMismatch(format!(
            "image has {} columns, graph has {} voxels",
            image.ncols(),
            graph.n_voxels()
        )));
    }
    let q = image.nrows();
    let mut out = nalgebra::DMatrix::<f64>::zeros(q, image.ncols());
    for n in 0..graph.n_voxels() {
        let deg = graph.degree(n) as f64;
        for i in 0..q {
            out[(i, n)] = 2.0 * deg * image[(i, n)];
        }
        for &m in graph.neighbors(n) {
            for i in 0..q {
                out[(i, n)] -= 2.0 * image[(i, m)];
            }
        }
    }
    Ok(out)
}

/// Deterministic power-iteration cap before falling back to the Gershgorin
/// bound.
const POWER_ITER_CAP: usize = 1000;

/// Estimates the spectral norm of `D^T D = 2 L`.
///
/// Power iteration starts from the all-ones vector perturbed by +1 at index 0
/// and stops once the Rayleigh quotient is stable to the requested relative
/// tolerance. If the iteration stagnates without certifying convergence, the
/// Gershgorin upper bound `4 * max_degree` is returned instead; an
/// overestimate keeps the downstream step-size rule valid.
pub fn operator_norm_dtd(graph: &SpatialGraph, tol: f64) -> Result<f64> {
    if tol <= 0.0 || tol >= 1.0 || tol.is_nan() {
        return Err(Error::InvalidArgument(format!("tol must lie in (0, 1), got {tol}")));
    }
    if graph.n_edges() == 0 {
        return Ok(0.0);
    }
    let n = graph.n_voxels();
    let gershgorin = 4.0 * graph.max_degree() as f64;
    let mut v = vec![1.0; n];
    v[0] += 1.0;
    let mut w = vec![0.0; n];
    let mut prev_rayleigh = 0.0;
    for _ in 0..POWER_ITER_CAP {
        let norm = l2_norm(&v);
        if norm == 0.0 {
            // Start vector annihilated; fall back.
            return Ok(gershgorin);
        }
        v.iter_mut().for_each(|x| *x /= norm);
        graph.apply_dtd_field(&v, &mut w);
        let rayleigh: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        if (rayleigh - prev_rayleigh).abs() <= 0.5 * tol * rayleigh.max(f64::MIN_POSITIVE) {
            return Ok(rayleigh);
        }
        prev_rayleigh = rayleigh;
        std::mem::swap(&mut v, &mut w);
    }
    Ok(gershgorin)
}

/// Step parameter from the global-convergence rule:
/// `xi_p = 0.75 * lambda * ||D^T D|| + 1e-10`.
pub fn compute_xi_p(lambda: f64, norm_dtd: f64) -> Result<f64> {
    if lambda <= 0.0 || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
    }
    if norm_dtd < 0.0 || !norm_dtd.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "operator norm must be nonnegative, got {norm_dtd}"
        )));
    }
    Ok(0.75 * lambda * norm_dtd + XI_P_EPSILON)
}

/// Additive margin that keeps the convergence inequality strict.
pub const XI_P_EPSILON: f64 = 1e-10;

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn mask2d(shape: [usize; 2], trues: &[bool]) -> Mask {
        Mask::new(shape.to_vec(), trues.to_vec()).unwrap()
    }

    #[test]
    fn single_voxel_graph() {
        let g =
            build_spatial_graph(&mask2d([1, 1], &[true]), Connectivity::Faces).unwrap();
        assert_eq!(g.n_voxels(), 1);
        assert_eq!(g.n_edges(), 0);
        assert_eq!(operator_norm_dtd(&g, 1e-8).unwrap(), 0.0);
    }

    #[test]
    fn full_2x2_graph() {
        let g = build_spatial_graph(&Mask::full(vec![2, 2]).unwrap(), Connectivity::Faces)
            .unwrap();
        assert_eq!(g.n_voxels(), 4);
        assert_eq!(g.n_edges(), 4);
        assert_eq!(g.degree(0), 2);
        // Node order is scan order: (0,0),(1,0),(0,1),(1,1).
        assert_eq!(g.edges(), &[(0, 1), (0, 2), (1, 3), (2, 3)]);
    }

    #[test]
    fn masked_center_not_bridged() {
        let g = build_spatial_graph(&mask2d([3, 1], &[true, false, true]), Connectivity::Faces)
            .unwrap();
        assert_eq!(g.n_voxels(), 2);
        assert_eq!(g.n_edges(), 0);
    }

    #[test]
    fn empty_mask_rejected() {
        let m = mask2d([2, 1], &[false, false]);
        assert!(matches!(
            build_spatial_graph(&m, Connectivity::Faces),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn three_d_faces() {
        let g = build_spatial_graph(&Mask::full(vec![2, 2, 2]).unwrap(), Connectivity::Faces)
            .unwrap();
        assert_eq!(g.n_voxels(), 8);
        assert_eq!(g.n_edges(), 12);
        assert!(g.degrees.iter().all(|&d| d == 3));
    }

    #[test]
    fn lattice_coords_roundtrip() {
        let m = mask2d([3, 2], &[true, false, true, true, true, false]);
        let g = build_spatial_graph(&m, Connectivity::Faces).unwrap();
        let lat = g.lattice().unwrap();
        assert_eq!(lat.coords(0), vec![0, 0]);
        assert_eq!(lat.coords(1), vec![2, 0]);
        assert_eq!(lat.coords(2), vec![0, 1]);
        assert_eq!(lat.coords(3), vec![1, 1]);
    }

    #[test]
    fn dtd_annihilates_constants() {
        let g = build_spatial_graph(&Mask::full(vec![3, 3]).unwrap(), Connectivity::Faces)
            .unwrap();
        let image = DMatrix::from_fn(4, 9, |q, _| q as f64 + 1.0);
        let out = apply_dtd(&g, &image).unwrap();
        assert!(out.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn dtd_two_voxel_chain() {
        let g = SpatialGraph::from_edges(2, &[(0, 1)]).unwrap();
        let image = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let out = apply_dtd(&g, &image).unwrap();
        assert_eq!(out.as_slice(), &[2.0, -2.0]);
    }

    #[test]
    fn dtd_no_edges_is_zero() {
        let g = SpatialGraph::from_edges(3, &[]).unwrap();
        let image = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 3.0, 4.0, 5.0, -6.0]);
        let out = apply_dtd(&g, &image).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn operator_norm_chains() {
        // 2L eigenvalues: 2-chain {0, 4}; 3-chain {0, 2, 6}.
        let two = SpatialGraph::from_edges(2, &[(0, 1)]).unwrap();
        assert_relative_eq!(operator_norm_dtd(&two, 1e-10).unwrap(), 4.0, epsilon = 1e-8);
        let three = SpatialGraph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        assert_relative_eq!(operator_norm_dtd(&three, 1e-10).unwrap(), 6.0, epsilon = 1e-8);
    }

    #[test]
    fn operator_norm_bounded_by_gershgorin() {
        let g = build_spatial_graph(&Mask::full(vec![4, 5]).unwrap(), Connectivity::Faces)
            .unwrap();
        let norm = operator_norm_dtd(&g, 1e-9).unwrap();
        assert!(norm <= 4.0 * g.max_degree() as f64 + 1e-9);
        // Rayleigh quotient of any test vector is a lower bound.
        let n = g.n_voxels();
        let v: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 5) as f64 - 2.0).collect();
        let mut w = vec![0.0; n];
        g.apply_dtd_field(&v, &mut w);
        let vv: f64 = v.iter().map(|x| x * x).sum();
        let rayleigh = v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / vv;
        assert!(norm >= rayleigh - 1e-9);
    }

    #[test]
    fn xi_p_rule() {
        assert_relative_eq!(compute_xi_p(1.0, 4.0).unwrap(), 3.0 + 1e-10, epsilon = 0.0);
        assert_relative_eq!(compute_xi_p(2.0, 0.0).unwrap(), 1e-10, epsilon = 0.0);
        assert_relative_eq!(compute_xi_p(0.5, 6.0).unwrap(), 2.25 + 1e-10, epsilon = 0.0);
        assert!(compute_xi_p(0.0, 1.0).is_err());
        assert!(compute_xi_p(-1.0, 1.0).is_err());
    }

    #[test]
    fn from_edges_rejects_malformed() {
        assert!(SpatialGraph::from_edges(0, &[]).is_err());
        assert!(SpatialGraph::from_edges(2, &[(0, 0)]).is_err());
        assert!(SpatialGraph::from_edges(2, &[(0, 1), (1, 0)]).is_err());
        assert!(SpatialGraph::from_edges(2, &[(0, 2)]).is_err());
    }

    #[test]
    fn dtd_is_symmetric_psd() {
        let g = build_spatial_graph(
            &mask2d([3, 3], &[true, true, false, true, true, true, false, true, true]),
            Connectivity::Faces,
        )
        .unwrap();
        let n = g.n_voxels();
        let probe = |seed: usize| -> Vec<f64> {
            (0..n).map(|i| (((i + seed) * 31 % 17) as f64 - 8.0) / 8.0).collect()
        };
        let x = probe(1);
        let y = probe(5);
        let mut lx = vec![0.0; n];
        let mut ly = vec![0.0; n];
        g.apply_dtd_field(&x, &mut lx);
        g.apply_dtd_field(&y, &mut ly);
        let xty: f64 = x.iter().zip(&ly).map(|(a, b)| a * b).sum();
        let ytx: f64 = y.iter().zip(&lx).map(|(a, b)| a * b).sum();
        assert_relative_eq!(xty, ytx, epsilon = 1e-12);
        let xx: f64 = x.iter().zip(&lx).map(|(a, b)| a * b).sum();
        assert!(xx >= -1e-12);
    }
}
