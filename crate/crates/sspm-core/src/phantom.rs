//! Synthetic ground truth and measurement generation.
//!
//! Phantoms place Gaussian spectral bumps inside rectangular spatial regions
//! and realize measurements through the exact forward model plus i.i.d.
//! Gaussian noise. The generator is ChaCha8 seeded from the spec's `seed`,
//! with normal deviates via the polar Box-Muller transform, so outputs are
//! bit-reproducible and the algorithm is simple to restate elsewhere. Noise
//! is drawn in column-major element order of the `P x N` stack.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::image::{MeasuredStack, SpectroscopicImage};
use crate::spatial::SpatialGraph;

/// Identity string recorded in sidecars for reproducibility.
pub const RNG_IDENTITY: &str = "chacha8/box-muller-polar";

/// Axis-aligned box of lattice voxels: `origin <= coord < origin + shape`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub origin: Vec<usize>,
    pub shape: Vec<usize>,
}

impl Region {
    pub fn contains(&self, coords: &[usize]) -> bool {
        coords.len() == self.origin.len()
            && coords
                .iter()
                .zip(self.origin.iter().zip(&self.shape))
                .all(|(&c, (&o, &s))| c >= o && c < o + s)
    }
}

/// One tissue compartment: a Gaussian bump in the spectral domain placed over
/// a spatial region.
///
/// `spectral_center` is given in physical units; `spectral_width` is measured
/// in each axis's native coordinate (the log coordinate for logarithmic
/// axes), shared across axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Compartment {
    pub spectral_center: Vec<f64>,
    pub spectral_width: f64,
    pub region: Region,
    pub amplitude: f64,
}

/// Recipe for a reproducible synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub image_shape: Vec<usize>,
    pub compartments: Vec<Compartment>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl PhantomSpec {
    fn validate(&self, dict: &Dictionary, graph: &SpatialGraph) -> Result<()> {
        let lattice = graph.lattice().ok_or_else(|| {
            Error::InvalidArgument("graph carries no lattice info; build it from a mask".into())
        })?;
        if lattice.shape != self.image_shape {
            return Err(Error::DimensionMismatch(format!(
                "phantom shape {:?} differs from graph lattice {:?}",
                self.image_shape, lattice.shape
            )));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "noise sigma must be nonnegative, got {}",
                self.noise_sigma
            )));
        }
        for (i, comp) in self.compartments.iter().enumerate() {
            if comp.amplitude < 0.0 || !comp.amplitude.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "compartment {i} has negative amplitude"
                )));
            }
            if comp.spectral_width <= 0.0 || comp.spectral_width.is_nan() {
                return Err(Error::InvalidArgument(format!(
                    "compartment {i} has non-positive spectral width"
                )));
            }
            if comp.spectral_center.len() != dict.grid().n_axes() {
                return Err(Error::DimensionMismatch(format!(
                    "compartment {i} center has {} coordinates, grid has {} axes",
                    comp.spectral_center.len(),
                    dict.grid().n_axes()
                )));
            }
            let r = &comp.region;
            if r.origin.len() != self.image_shape.len() || r.shape.len() != self.image_shape.len()
            {
                return Err(Error::DimensionMismatch(format!(
                    "compartment {i} region dimensionality differs from the image"
                )));
            }
            let inside = r
                .origin
                .iter()
                .zip(r.shape.iter().zip(&self.image_shape))
                .all(|(&o, (&s, &extent))| o + s <= extent);
            if !inside {
                return Err(Error::InvalidArgument(format!(
                    "compartment {i} region exceeds the image shape"
                )));
            }
        }
        Ok(())
    }
}

/// One standard normal deviate (polar Box-Muller, first component).
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u: f64 = rng.gen_range(-1.0..1.0);
        let v: f64 = rng.gen_range(-1.0..1.0);
        let s = u * u + v * v;
        if s > 0.0 && s < 1.0 {
            return u * (-2.0 * s.ln() / s).sqrt();
        }
    }
}

/// Builds the ground-truth image and its noisy measurement stack.
///
/// `data = (I ⊗ K) f_true + sigma * n` with `n` i.i.d. standard normal; a
/// zero sigma skips the generator entirely so the model identity is exact.
pub fn generate_phantom(
    spec: &PhantomSpec,
    dict: &Dictionary,
    graph: &SpatialGraph,
) -> Result<(SpectroscopicImage, MeasuredStack)> {
    spec.validate(dict, graph)?;
    let lattice = graph.lattice().expect("validated above");
    let q = dict.n_spectral();
    let n = graph.n_voxels();
    let grid = dict.grid();

    // Spectral profile of each compartment, evaluated once.
    let profiles: Vec<Vec<f64>> = spec
        .compartments
        .iter()
        .map(|comp| {
            (0..q)
                .map(|qi| {
                    let point = &grid.points()[qi];
                    let mut dist2 = 0.0;
                    for (axis, (&coord, &center)) in
                        point.iter().zip(&comp.spectral_center).enumerate()
                    {
                        let d = (grid.native_coord(axis, coord)
                            - grid.native_coord(axis, center))
                            / comp.spectral_width;
                        dist2 += d * d;
                    }
                    comp.amplitude * (-0.5 * dist2).exp()
                })
                .collect()
        })
        .collect();

    let mut f_true = DMatrix::<f64>::zeros(q, n);
    for node in 0..n {
        let coords = lattice.coords(node);
        for (comp, profile) in spec.compartments.iter().zip(&profiles) {
            if comp.region.contains(&coords) {
                let mut col = f_true.column_mut(node);
                for (dst, src) in col.iter_mut().zip(profile) {
                    *dst += src;
                }
            }
        }
    }

    let mut data = dict.entries() * &f_true;
    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        for v in data.as_mut_slice() {
            *v += spec.noise_sigma * standard_normal(&mut rng);
        }
    }

    Ok((SpectroscopicImage::new(f_true, true)?, MeasuredStack::new(data)?))
}

/// Sums `f` over spectral index ranges, one length-`N` map per range.
pub fn integrate_components(
    f: &SpectroscopicImage,
    regions: &[std::ops::Range<usize>],
) -> Result<Vec<Vec<f64>>> {
    let q = f.n_spectral();
    for r in regions {
        if r.end > q || r.start > r.end {
            return Err(Error::InvalidArgument(format!(
                "spectral range {}..{} out of bounds for Q = {q}",
                r.start, r.end
            )));
        }
    }
    Ok(regions
        .iter()
        .map(|r| {
            (0..f.n_voxels())
                .map(|n| f.voxel(n)[r.clone()].iter().sum())
                .collect()
        })
        .collect())
}

/// Ready-made schedules, grids, and phantoms used by tests, benches, and the
/// documentation examples.
pub mod presets {
    use super::*;
    use crate::dictionary::{
        build_dictionary, build_grid, AcquisitionSchedule, AxisSpec, Kernel, Spacing,
    };
    use crate::spatial::{build_spatial_graph, Connectivity, Mask};

    /// Multi-echo T2 schedule: `p` echoes linearly spaced over [te_min, te_max].
    pub fn t2_schedule(p: usize, te_min: f64, te_max: f64) -> AcquisitionSchedule {
        let step = if p > 1 { (te_max - te_min) / (p - 1) as f64 } else { 0.0 };
        AcquisitionSchedule::new(
            Kernel::T2Exp,
            (0..p).map(|i| vec![te_min + step * i as f64]).collect(),
        )
        .expect("valid T2 schedule")
    }

    /// Logarithmic T2 grid with `q` points over [t2_min, t2_max] seconds.
    pub fn t2_grid_axes(q: usize, t2_min: f64, t2_max: f64) -> Vec<AxisSpec> {
        vec![AxisSpec { min: t2_min, max: t2_max, count: q, spacing: Spacing::Logarithmic }]
    }

    /// Diffusion-T2 schedule: the cross product of `n_b` b-values (linear in
    /// [0, b_max]) and `n_te` echo times (linear in [te_min, te_max]).
    pub fn diffusion_t2_schedule(
        n_b: usize,
        b_max: f64,
        n_te: usize,
        te_min: f64,
        te_max: f64,
    ) -> AcquisitionSchedule {
        let b_step = if n_b > 1 { b_max / (n_b - 1) as f64 } else { 0.0 };
        let te_step = if n_te > 1 { (te_max - te_min) / (n_te - 1) as f64 } else { 0.0 };
        let mut entries = Vec::with_capacity(n_b * n_te);
        for i in 0..n_b {
            for j in 0..n_te {
                entries.push(vec![b_step * i as f64, te_min + te_step * j as f64]);
            }
        }
        AcquisitionSchedule::new(Kernel::DiffusionT2, entries).expect("valid schedule")
    }

    /// 2D diffusivity x T2 grid, both axes logarithmic. The ranges pair with
    /// [`diffusion_t2_schedule`] to give a dictionary whose 0.005%-error
    /// rank is well below `min(P, Q) / 4`.
    pub fn diffusion_t2_grid_axes(side: usize) -> Vec<AxisSpec> {
        vec![
            AxisSpec { min: 5e-4, max: 2e-3, count: side, spacing: Spacing::Logarithmic },
            AxisSpec { min: 0.06, max: 0.18, count: side, spacing: Spacing::Logarithmic },
        ]
    }

    /// Two overlapping T2 compartments on an `nx x ny` lattice.
    ///
    /// The left block holds a short-T2 compartment, the right block a long-T2
    /// one; the center columns mix both, exercising partial-volume behavior.
    pub fn two_compartment_t2(nx: usize, ny: usize, noise_sigma: f64, seed: u64) -> PhantomSpec {
        let left = (nx / 2 + 1).min(nx);
        let right_start = (nx / 2).saturating_sub(1);
        PhantomSpec {
            image_shape: vec![nx, ny],
            compartments: vec![
                Compartment {
                    spectral_center: vec![0.045],
                    spectral_width: 0.25,
                    region: Region { origin: vec![0, 0], shape: vec![left, ny] },
                    amplitude: 1.0,
                },
                Compartment {
                    spectral_center: vec![0.18],
                    spectral_width: 0.25,
                    region: Region {
                        origin: vec![right_start, 0],
                        shape: vec![nx - right_start, ny],
                    },
                    amplitude: 0.8,
                },
            ],
            noise_sigma,
            seed,
        }
    }

    /// Spatially uniform compartments whose spectral centers sit exactly on
    /// the given grid points, with a width far below the bin spacing. The
    /// resulting spectra are effectively one-bin deltas, so solutions
    /// concentrate on a few well-separated dictionary columns and the
    /// regularized problem stays well posed.
    pub fn snapped_uniform_phantom(
        grid: &crate::dictionary::SpectralGrid,
        image_shape: Vec<usize>,
        bins: &[(usize, f64)],
        noise_sigma: f64,
        seed: u64,
    ) -> PhantomSpec {
        let region = Region { origin: vec![0; image_shape.len()], shape: image_shape.clone() };
        PhantomSpec {
            image_shape,
            compartments: bins
                .iter()
                .map(|&(bin, amplitude)| Compartment {
                    spectral_center: grid.points()[bin].clone(),
                    spectral_width: 0.02,
                    region: region.clone(),
                    amplitude,
                })
                .collect(),
            noise_sigma,
            seed,
        }
    }

    /// The small well-posed T2 instance used by the solver cross-checks:
    /// 16 echoes against 32 log-spaced T2 bins over a wide range, with two
    /// uniform compartments snapped to bins 9 and 22.
    pub fn well_posed_t2_problem(
        nx: usize,
        ny: usize,
        noise_sigma: f64,
        seed: u64,
    ) -> (Dictionary, SpatialGraph, Mask, PhantomSpec) {
        let schedule = t2_schedule(16, 0.008, 0.3);
        let grid = build_grid(&t2_grid_axes(32, 0.005, 5.0)).expect("valid grid");
        let dict = build_dictionary(&schedule, &grid).expect("valid dictionary");
        let mask = Mask::full(vec![nx, ny]).expect("valid mask");
        let graph = build_spatial_graph(&mask, Connectivity::Faces).expect("valid graph");
        let spec = snapped_uniform_phantom(
            dict.grid(),
            vec![nx, ny],
            &[(9, 1.0), (22, 0.8)],
            noise_sigma,
            seed,
        );
        (dict, graph, mask, spec)
    }

    /// The standard small T2 test problem: dictionary (P x Q), full-mask
    /// graph, and a two-compartment phantom on an `nx x ny` lattice.
    pub fn standard_t2_problem(
        p: usize,
        q: usize,
        nx: usize,
        ny: usize,
        noise_sigma: f64,
        seed: u64,
    ) -> (Dictionary, SpatialGraph, Mask, PhantomSpec) {
        let schedule = t2_schedule(p, 0.01, 0.16);
        let grid = build_grid(&t2_grid_axes(q, 0.02, 0.5)).expect("valid grid");
        let dict = build_dictionary(&schedule, &grid).expect("valid dictionary");
        let mask = Mask::full(vec![nx, ny]).expect("valid mask");
        let graph = build_spatial_graph(&mask, Connectivity::Faces).expect("valid graph");
        let spec = two_compartment_t2(nx, ny, noise_sigma, seed);
        (dict, graph, mask, spec)
    }
}

#[cfg(test)]
mod tests {
    use super::presets::*;
    use super::*;
    use crate::spatial::{build_spatial_graph, Connectivity, Mask};

    #[test]
    fn noiseless_model_identity() {
        let (dict, graph, _mask, mut spec) = standard_t2_problem(8, 12, 4, 4, 0.0, 1);
        spec.noise_sigma = 0.0;
        let (f_true, data) = generate_phantom(&spec, &dict, &graph).unwrap();
        let residual = data.values() - dict.entries() * &f_true.values;
        assert!(residual.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_amplitude_gives_pure_noise() {
        let (dict, graph, _mask, mut spec) = standard_t2_problem(100, 8, 12, 12, 0.05, 7);
        for c in &mut spec.compartments {
            c.amplitude = 0.0;
        }
        let (f_true, data) = generate_phantom(&spec, &dict, &graph).unwrap();
        assert!(f_true.values.iter().all(|v| *v == 0.0));
        // P*N = 14400 samples: the sample std of N(0, sigma) is within 5%.
        let m = data.values();
        let count = (m.nrows() * m.ncols()) as f64;
        let mean: f64 = m.iter().sum::<f64>() / count;
        let var: f64 = m.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
        let std = var.sqrt();
        assert!(
            (std - spec.noise_sigma).abs() < 0.05 * spec.noise_sigma,
            "sample std {std} too far from {}",
            spec.noise_sigma
        );
    }

    #[test]
    fn same_seed_bit_identical() {
        let (dict, graph, _mask, spec) = standard_t2_problem(6, 10, 5, 3, 0.02, 99);
        let (f1, d1) = generate_phantom(&spec, &dict, &graph).unwrap();
        let (f2, d2) = generate_phantom(&spec, &dict, &graph).unwrap();
        assert_eq!(f1.values, f2.values);
        let bits = |m: &nalgebra::DMatrix<f64>| -> Vec<u64> {
            m.iter().map(|v| v.to_bits()).collect()
        };
        assert_eq!(bits(d1.values()), bits(d2.values()));
    }

    #[test]
    fn different_seed_differs() {
        let (dict, graph, _mask, mut spec) = standard_t2_problem(6, 10, 5, 3, 0.02, 1);
        let (_, d1) = generate_phantom(&spec, &dict, &graph).unwrap();
        spec.seed = 2;
        let (_, d2) = generate_phantom(&spec, &dict, &graph).unwrap();
        assert_ne!(d1.values(), d2.values());
    }

    #[test]
    fn region_outside_shape_rejected() {
        let (dict, graph, _mask, mut spec) = standard_t2_problem(6, 10, 4, 4, 0.0, 1);
        spec.compartments[0].region = Region { origin: vec![2, 2], shape: vec![3, 1] };
        assert!(generate_phantom(&spec, &dict, &graph).is_err());
    }

    #[test]
    fn masked_generation_skips_outside_voxels() {
        let (dict, _graph, _mask, spec) = standard_t2_problem(6, 10, 3, 1, 0.0, 1);
        let mask = Mask::new(vec![3, 1], vec![true, false, true]).unwrap();
        let graph = build_spatial_graph(&mask, Connectivity::Faces).unwrap();
        let (f_true, data) = generate_phantom(&spec, &dict, &graph).unwrap();
        assert_eq!(f_true.n_voxels(), 2);
        assert_eq!(data.n_voxels(), 2);
    }

    #[test]
    fn integrate_total_and_partition() {
        let (dict, graph, _mask, spec) = standard_t2_problem(8, 12, 4, 4, 0.0, 5);
        let (f, _) = generate_phantom(&spec, &dict, &graph).unwrap();
        let q = f.n_spectral();
        let total = integrate_components(&f, &[0..q]).unwrap();
        let parts = integrate_components(&f, &[0..5, 5..9, 9..q]).unwrap();
        for n in 0..f.n_voxels() {
            let sum: f64 = parts.iter().map(|m| m[n]).sum();
            assert!((sum - total[0][n]).abs() <= 1e-12 * total[0][n].abs().max(1.0));
        }
    }

    #[test]
    fn integrate_single_bin_indicator() {
        let mut values = nalgebra::DMatrix::<f64>::zeros(6, 3);
        values[(4, 1)] = 2.0;
        let f = SpectroscopicImage::new(values, true).unwrap();
        let maps = integrate_components(&f, &[0..4, 4..5, 5..6]).unwrap();
        assert!(maps[0].iter().all(|v| *v == 0.0));
        assert_eq!(maps[1], vec![0.0, 2.0, 0.0]);
        assert!(maps[2].iter().all(|v| *v == 0.0));
        assert!(integrate_components(&f, &[3..7]).is_err());
    }
}
