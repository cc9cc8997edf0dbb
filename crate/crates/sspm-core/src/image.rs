//! Measurement stacks and spectroscopic images.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// The measured data `m`: one length-`P` measurement vector per voxel,
/// stored as a `P x N` matrix (column `n` is voxel `n`).
#[derive(Debug, Clone, PartialEq)]
pub struct MeasuredStack {
    values: DMatrix<f64>,
}

impl MeasuredStack {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("measured stack".into()));
        }
        Ok(Self { values })
    }

    pub fn n_measurements(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_voxels(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Voxel `n`'s measurement vector as a contiguous slice.
    pub fn voxel(&self, n: usize) -> &[f64] {
        let p = self.n_measurements();
        &self.values.as_slice()[n * p..(n + 1) * p]
    }
}

/// The spatial-spectral unknown `f`: a `Q x N` matrix whose column `n` is the
/// spectrum at voxel `n`. `feasible` records whether the producer guarantees
/// elementwise nonnegativity (solver outputs do; intermediate iterates may
/// not).
#[derive(Debug, Clone, PartialEq)]
pub struct SpectroscopicImage {
    pub values: DMatrix<f64>,
    pub feasible: bool,
}

impl SpectroscopicImage {
    pub fn new(values: DMatrix<f64>, feasible: bool) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("spectroscopic image".into()));
        }
        if feasible && values.iter().any(|v| *v < 0.0) {
            return Err(Error::InvalidArgument(
                "image flagged feasible but has negative entries".into(),
            ));
        }
        Ok(Self { values, feasible })
    }

    pub fn zeros(q: usize, n: usize) -> Self {
        Self { values: DMatrix::zeros(q, n), feasible: true }
    }

    pub fn n_spectral(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_voxels(&self) -> usize {
        self.values.ncols()
    }

    /// Voxel `n`'s spectrum as a contiguous slice.
    pub fn voxel(&self, n: usize) -> &[f64] {
        let q = self.n_spectral();
        &self.values.as_slice()[n * q..(n + 1) * q]
    }
}
