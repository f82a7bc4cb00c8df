use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volgrid::{LabelMap, MultimodalVolume};

/// Overlay colors for labels 1, 2 and 3.
pub const LABEL_COLORS: [[u8; 3]; 3] = [[220, 40, 40], [40, 200, 40], [250, 230, 30]];

#[derive(Debug, Error)]
pub enum OverlayError {
    #[error("slice {index} is out of bounds for axis {axis:?} of length {len}")]
    SliceOutOfBounds { axis: SliceAxis, index: usize, len: usize },
    #[error("modality {0} does not exist")]
    BadModality(usize),
    #[error("label map shape {labels} does not match volume shape {volume}")]
    ShapeMismatch {
        labels: crate::volgrid::GridShape,
        volume: crate::volgrid::GridShape,
    },
    #[error("cannot write image {path}: {message}")]
    Write { path: std::path::PathBuf, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceAxis {
    X,
    Y,
    Z,
}

impl std::str::FromStr for SliceAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "x" => Ok(Self::X),
            "y" => Ok(Self::Y),
            "z" => Ok(Self::Z),
            _ => Err(format!("slice axis must be x, y or z, got {s}")),
        }
    }
}

/// One slice of `modality` in grayscale with nonzero labels painted over it.
/// A z slice is `nx` wide and `ny` tall; x and y slices put z on the rows.
pub fn render_overlay(
    vol: &MultimodalVolume,
    labels: &LabelMap,
    modality: usize,
    axis: SliceAxis,
    index: usize,
) -> Result<RgbImage, OverlayError> {
    let shape = vol.shape();
    if labels.shape() != shape {
        return Err(OverlayError::ShapeMismatch {
            labels: labels.shape(),
            volume: shape,
        });
    }
    if modality >= MultimodalVolume::CHANNELS {
        return Err(OverlayError::BadModality(modality));
    }
    let [nx, ny, nz] = shape.dims();
    let (len, w, h) = match axis {
        SliceAxis::X => (nx, ny, nz),
        SliceAxis::Y => (ny, nx, nz),
        SliceAxis::Z => (nz, nx, ny),
    };
    if index >= len {
        return Err(OverlayError::SliceOutOfBounds { axis, index, len });
    }
    let voxel = |col: usize, row: usize| match axis {
        SliceAxis::X => shape.index(index, col, row),
        SliceAxis::Y => shape.index(col, index, row),
        SliceAxis::Z => shape.index(col, row, index),
    };
    let channel = vol.channel(modality);
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for row in 0..h {
        for col in 0..w {
            let v = channel[voxel(col, row)];
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let mut img = RgbImage::new(w as u32, h as u32);
    for row in 0..h {
        for col in 0..w {
            let i = voxel(col, row);
            let px = match labels.data()[i] {
                0 => {
                    let g = ((channel[i] - lo) * scale).round().clamp(0.0, 255.0) as u8;
                    [g, g, g]
                }
                l => LABEL_COLORS[l as usize - 1],
            };
            img.put_pixel(col as u32, row as u32, Rgb(px));
        }
    }
    Ok(img)
}

pub fn save_overlay(img: &RgbImage, path: &Path) -> Result<(), OverlayError> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| OverlayError::Write {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}
