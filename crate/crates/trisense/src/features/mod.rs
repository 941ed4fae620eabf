//! Feature extraction: per-patch image descriptors and per-point cloud
//! descriptors, sharing the [`PatchFeatureMap`] container that flows into
//! memory banks and scoring.

pub mod image;
pub mod pointcloud;

use thiserror::Error;

use crate::core::ModalityId;

/// A set of fixed-dimension feature vectors for one sample: one per image
/// patch (laid out on an `rows x cols` grid) or one per cloud point
/// (`grid = None`).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatureMap {
    pub modality: ModalityId,
    /// `(rows, cols)` for image modalities; `None` for unordered point features.
    pub grid: Option<(u32, u32)>,
    pub dim: usize,
    /// Row-major `count x dim` values.
    pub values: Vec<f32>,
}

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("feature map shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite feature value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("grid {rows}x{cols} exceeds working resolution {size}")]
    GridTooFine { rows: u32, cols: u32, size: u32 },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("degenerate neighborhood at point {0}: all neighbors coincident")]
    DegenerateNeighborhood(usize),
    #[error("zero-length connecting vector between points {0} and {1}")]
    ZeroLengthPair(usize, usize),
    #[error("k = {k} out of range for {n} points")]
    BadK { k: usize, n: usize },
}

impl PatchFeatureMap {
    pub fn new(
        modality: ModalityId,
        grid: Option<(u32, u32)>,
        dim: usize,
        values: Vec<f32>,
    ) -> Result<Self, FeatureError> {
        if dim == 0 {
            return Err(FeatureError::Shape("feature dimension is zero".into()));
        }
        if values.len() % dim != 0 {
            return Err(FeatureError::Shape(format!(
                "value count {} is not a multiple of dimension {dim}",
                values.len()
            )));
        }
        let count = values.len() / dim;
        if let Some((r, c)) = grid {
            if r as usize * c as usize != count {
                return Err(FeatureError::Shape(format!(
                    "grid {r}x{c} implies {} rows, got {count}",
                    r as usize * c as usize
                )));
            }
        }
        if count == 0 {
            return Err(FeatureError::Shape("feature map has zero rows".into()));
        }
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(FeatureError::NonFinite { row: i / dim, col: i % dim });
            }
        }
        Ok(Self { modality, grid, dim, values })
    }

    pub fn count(&self) -> usize {
        self.values.len() / self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.dim)
    }
}
