//! Brain-region cropping, foreground z-score normalization, and restoring
//! predictions to the original scan geometry.
//!
//! Background is any voxel that is exactly zero in all four modalities. The
//! foreground mask is computed once from the raw input and carried through
//! normalization, since a normalized foreground voxel may itself become zero.

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volgrid::{
    check_box_extent, check_box_shape, CropBox, Grid, GridShape, LabelMap, MultimodalVolume,
    VolumeError,
};

/// Channels whose foreground std falls below this are zeroed instead of scaled.
pub const MIN_STD: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("volume has no nonzero voxel in any channel")]
    EmptyForeground,
    #[error("crop box {lo:?}..{hi:?} does not fit a volume of shape {shape}")]
    BoxOutOfBounds {
        lo: [usize; 3],
        hi: [usize; 3],
        shape: GridShape,
    },
    #[error("prediction shape {actual} does not match crop extents {expected}")]
    ShapeMismatch {
        expected: GridShape,
        actual: GridShape,
    },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

pub type Result<T, E = PreprocessError> = std::result::Result<T, E>;

/// Union of per-channel nonzero voxels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ForegroundMask {
    shape: GridShape,
    mask: Vec<bool>,
}

impl ForegroundMask {
    pub fn from_volume(vol: &MultimodalVolume) -> Self {
        let n = vol.shape().voxel_count();
        let mut mask = vec![false; n];
        for c in 0..MultimodalVolume::CHANNELS {
            for (m, &v) in mask.iter_mut().zip(vol.channel(c)) {
                *m |= v != 0.0;
            }
        }
        Self {
            shape: vol.shape(),
            mask,
        }
    }

    pub fn from_bools(shape: GridShape, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != shape.voxel_count() {
            return Err(VolumeError::DataLength {
                expected: shape.voxel_count(),
                actual: mask.len(),
            }
            .into());
        }
        Ok(Self { shape, mask })
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.mask
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Tightest box around the mask, or `None` when it is empty.
    pub fn bounding_box(&self) -> Option<CropBox> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let GridShape { nx, ny, nz } = self.shape;
        for z in 0..nz {
            for y in 0..ny {
                let row = &self.mask[self.shape.index(0, y, z)..][..nx];
                let Some(first) = row.iter().position(|&m| m) else {
                    continue;
                };
                let last = row.iter().rposition(|&m| m).expect("row has a set voxel");
                lo[0] = lo[0].min(first);
                hi[0] = hi[0].max(last + 1);
                lo[1] = lo[1].min(y);
                hi[1] = hi[1].max(y + 1);
                lo[2] = lo[2].min(z);
                hi[2] = hi[2].max(z + 1);
            }
        }
        (lo[0] != usize::MAX).then(|| CropBox {
            lo,
            hi,
            original_shape: self.shape,
        })
    }

    pub fn crop(&self, bbox: &CropBox) -> Result<Self> {
        check_box_shape(bbox, self.shape)?;
        let grid = Grid::new(self.shape, 1, self.mask.clone())?.crop(bbox.lo, bbox.hi)?;
        Ok(Self {
            shape: grid.shape(),
            mask: grid.into_data(),
        })
    }
}

pub fn compute_foreground_box(vol: &MultimodalVolume) -> Result<CropBox> {
    ForegroundMask::from_volume(vol)
        .bounding_box()
        .ok_or(PreprocessError::EmptyForeground)
}

/// Sub-volume inside `bbox`; the affine is shifted so world positions are kept.
pub fn crop(vol: &MultimodalVolume, bbox: &CropBox) -> Result<MultimodalVolume> {
    let dims = vol.shape().dims();
    if bbox.original_shape != vol.shape() || (0..3).any(|a| bbox.hi[a] > dims[a]) {
        return Err(PreprocessError::BoxOutOfBounds {
            lo: bbox.lo,
            hi: bbox.hi,
            shape: vol.shape(),
        });
    }
    let grid = vol.grid().crop(bbox.lo, bbox.hi)?;
    let affine = vol.affine().shifted(bbox.lo.map(|v| v as i64));
    Ok(MultimodalVolume::new(grid, affine)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: [f64; 4],
    pub std: [f64; 4],
    pub foreground_count: usize,
}

#[derive(Clone, Debug)]
pub struct Normalized {
    pub volume: MultimodalVolume,
    pub stats: NormalizationStats,
    pub mask: ForegroundMask,
}

/// Z-score every channel over the union foreground of the raw input.
pub fn normalize(vol: &MultimodalVolume) -> Result<Normalized> {
    let mask = ForegroundMask::from_volume(vol);
    normalize_with_mask(vol, mask)
}

/// Z-score every channel over a precomputed foreground mask; voxels outside
/// the mask become 0.
pub fn normalize_with_mask(vol: &MultimodalVolume, mask: ForegroundMask) -> Result<Normalized> {
    if mask.shape() != vol.shape() {
        return Err(PreprocessError::ShapeMismatch {
            expected: vol.shape(),
            actual: mask.shape(),
        });
    }
    let count = mask.count();
    if count == 0 {
        return Err(PreprocessError::EmptyForeground);
    }
    let n = vol.shape().voxel_count();
    let mut out = Vec::with_capacity(n * 4);
    let mut mean = [0.0; 4];
    let mut std = [0.0; 4];
    for c in 0..MultimodalVolume::CHANNELS {
        let src = vol.channel(c);
        let fg = || src.iter().zip(mask.as_slice()).filter(|(_, &m)| m).map(|(&v, _)| v as f64);
        let mu = fg().sum::<f64>() / count as f64;
        let var = fg().map(|v| (v - mu).powi(2)).sum::<f64>() / count as f64;
        let sigma = var.sqrt();
        mean[c] = mu;
        std[c] = sigma;
        if sigma < MIN_STD {
            warn!("channel {c} has degenerate foreground std {sigma:e}; zeroing it");
            out.extend(std::iter::repeat_n(0.0f32, n));
            continue;
        }
        out.extend(src.iter().zip(mask.as_slice()).map(|(&v, &m)| {
            if m {
                ((v as f64 - mu) / sigma) as f32
            } else {
                0.0
            }
        }));
    }
    let volume = MultimodalVolume::from_data(vol.shape(), out, *vol.affine())?;
    Ok(Normalized {
        volume,
        stats: NormalizationStats {
            mean,
            std,
            foreground_count: count,
        },
        mask,
    })
}

/// Place a cropped label map back into the full scan; voxels outside the box are 0.
pub fn restore(pred: &LabelMap, bbox: &CropBox) -> Result<LabelMap> {
    check_box_extent(bbox, pred.shape()).map_err(|_| PreprocessError::ShapeMismatch {
        expected: bbox.extents(),
        actual: pred.shape(),
    })?;
    let grid = Grid::new(pred.shape(), 1, pred.data().to_vec())?.embed(
        bbox.original_shape,
        bbox.lo,
        0u8,
    )?;
    let affine = pred.affine().shifted(bbox.lo.map(|v| -(v as i64)));
    Ok(LabelMap::new(bbox.original_shape, grid.into_data(), affine)?)
}

/// Output of the full preprocessing chain for one scan.
#[derive(Clone, Debug)]
pub struct Preprocessed {
    pub volume: MultimodalVolume,
    pub crop_box: CropBox,
    pub stats: NormalizationStats,
    pub mask: ForegroundMask,
}

/// Crop to the foreground box, then normalize using the raw-input mask.
pub fn preprocess(vol: &MultimodalVolume) -> Result<Preprocessed> {
    let full_mask = ForegroundMask::from_volume(vol);
    let crop_box = full_mask
        .bounding_box()
        .ok_or(PreprocessError::EmptyForeground)?;
    let cropped = crop(vol, &crop_box)?;
    let mask = full_mask.crop(&crop_box)?;
    let Normalized {
        volume,
        stats,
        mask,
    } = normalize_with_mask(&cropped, mask)?;
    Ok(Preprocessed {
        volume,
        crop_box,
        stats,
        mask,
    })
}
