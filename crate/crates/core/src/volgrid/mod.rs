//! Core 3D grid types shared by every stage of the pipeline.
//!
//! All grids are stored channel-major with the spatial axes linearized
//! x-fastest, z-slowest: `index = c * (nx*ny*nz) + (z * ny + y) * nx + x`.
//! This is also the on-disk voxel order of NIfTI, so no transposition happens
//! on load or save.

mod io;
pub mod nifti;
pub mod probfile;

pub use io::{load_labelmap, load_volume, save_labelmap, save_volume, ModalitySource};

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Modality names in channel order.
pub const MODALITY_NAMES: [&str; 4] = ["T1", "T1Gd", "T2", "T2-FLAIR"];

/// Output channel names in channel order.
pub const PROBABILITY_CHANNEL_NAMES: [&str; 3] = ["TC", "WT", "ET"];

/// Per-element tolerance when comparing affines of different modalities.
pub const AFFINE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("invalid grid shape {0:?}: every axis must be >= 1 and the voxel count must fit in memory")]
    InvalidShape([usize; 3]),
    #[error("data length {actual} does not match expected {expected}")]
    DataLength { expected: usize, actual: usize },
    #[error("expected {expected} channels, got {actual}")]
    ChannelCount { expected: usize, actual: usize },
    #[error("non-finite voxel in channel {channel} at linear index {index}")]
    NonFiniteVoxel { channel: usize, index: usize },
    #[error("probability {value} at channel {channel}, index {index} is outside [0, 1]")]
    ProbabilityOutOfRange {
        channel: usize,
        index: usize,
        value: f32,
    },
    #[error("label {value} at index {index} is not one of 0, 1, 2, 3")]
    InvalidLabel { index: usize, value: f32 },
    #[error("affine last row must be (0, 0, 0, 1)")]
    InvalidAffine,
    #[error("invalid crop box lo={lo:?} hi={hi:?} within {shape}")]
    InvalidCropBox {
        lo: [usize; 3],
        hi: [usize; 3],
        shape: GridShape,
    },
    #[error("missing modality {0}")]
    MissingModality(String),
    #[error("shape mismatch: {expected} vs {actual} ({context})")]
    ShapeMismatch {
        expected: GridShape,
        actual: GridShape,
        context: String,
    },
    #[error("affine of {path} differs from the reference affine by {max_delta}")]
    AffineMismatch { path: PathBuf, max_delta: f64 },
    #[error("unsupported or malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("I/O failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = VolumeError> = std::result::Result<T, E>;

/// Voxel counts along x, y and z.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[usize; 3]", into = "[usize; 3]")]
pub struct GridShape {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl GridShape {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Self> {
        let ok = nx >= 1
            && ny >= 1
            && nz >= 1
            && nx
                .checked_mul(ny)
                .and_then(|v| v.checked_mul(nz))
                .and_then(|v| v.checked_mul(4))
                .is_some_and(|v| v <= isize::MAX as usize);
        if ok {
            Ok(Self { nx, ny, nz })
        } else {
            Err(VolumeError::InvalidShape([nx, ny, nz]))
        }
    }

    pub fn cube(n: usize) -> Result<Self> {
        Self::new(n, n, n)
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn voxel_count(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.ny + y) * self.nx + x
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.nx;
        let rest = index / self.nx;
        [x, rest % self.ny, rest / self.ny]
    }
}

impl TryFrom<[usize; 3]> for GridShape {
    type Error = VolumeError;

    fn try_from(d: [usize; 3]) -> Result<Self> {
        Self::new(d[0], d[1], d[2])
    }
}

impl From<GridShape> for [usize; 3] {
    fn from(s: GridShape) -> Self {
        s.dims()
    }
}

impl fmt::Display for GridShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

/// 4x4 voxel-to-world transform, row-major.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 4]; 4]", into = "[[f64; 4]; 4]")]
pub struct Affine([[f64; 4]; 4]);

impl Affine {
    pub const IDENTITY: Affine = Affine([
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]);

    pub fn new(m: [[f64; 4]; 4]) -> Result<Self> {
        if m[3] != [0.0, 0.0, 0.0, 1.0] || m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(VolumeError::InvalidAffine);
        }
        Ok(Self(m))
    }

    pub fn from_spacing(spacing: [f64; 3]) -> Self {
        let mut m = Self::IDENTITY.0;
        for (a, s) in spacing.iter().enumerate() {
            m[a][a] = *s;
        }
        Self(m)
    }

    pub fn matrix(&self) -> &[[f64; 4]; 4] {
        &self.0
    }

    /// Affine of a grid whose voxel (0,0,0) sits at voxel `offset` of this grid.
    pub fn shifted(&self, offset: [i64; 3]) -> Self {
        let mut m = self.0;
        for (r, row) in m.iter_mut().enumerate().take(3) {
            row[3] = self.0[r][3]
                + (0..3)
                    .map(|c| self.0[r][c] * offset[c] as f64)
                    .sum::<f64>();
        }
        Self(m)
    }

    /// Voxel spacing, taken as the norms of the first three columns.
    pub fn spacing(&self) -> [f64; 3] {
        let mut s = [0.0; 3];
        for (c, sc) in s.iter_mut().enumerate() {
            *sc = (0..3).map(|r| self.0[r][c].powi(2)).sum::<f64>().sqrt();
        }
        s
    }

    pub fn max_abs_diff(&self, other: &Affine) -> f64 {
        self.0
            .iter()
            .flatten()
            .zip(other.0.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn approx_eq(&self, other: &Affine, tol: f64) -> bool {
        self.max_abs_diff(other) <= tol
    }
}

impl Default for Affine {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl TryFrom<[[f64; 4]; 4]> for Affine {
    type Error = VolumeError;

    fn try_from(m: [[f64; 4]; 4]) -> Result<Self> {
        Self::new(m)
    }
}

impl From<Affine> for [[f64; 4]; 4] {
    fn from(a: Affine) -> Self {
        a.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    X = 0,
    Y = 1,
    Z = 2,
}

/// A subset of the three spatial axes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AxisSet(u8);

impl AxisSet {
    pub const EMPTY: AxisSet = AxisSet(0);
    pub const X: AxisSet = AxisSet(1);
    pub const Y: AxisSet = AxisSet(2);
    pub const Z: AxisSet = AxisSet(4);
    pub const ALL: AxisSet = AxisSet(7);

    pub fn from_axes(axes: &[Axis]) -> Self {
        AxisSet(axes.iter().fold(0, |m, a| m | (1 << *a as u8)))
    }

    pub fn contains(self, axis: Axis) -> bool {
        self.0 & (1 << axis as u8) != 0
    }

    pub fn union(self, other: AxisSet) -> AxisSet {
        AxisSet(self.0 | other.0)
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// All eight subsets of {x, y, z}, starting with the empty set.
    pub fn power_set() -> [AxisSet; 8] {
        std::array::from_fn(|i| AxisSet(i as u8))
    }

    pub fn flags(self) -> [bool; 3] {
        [
            self.contains(Axis::X),
            self.contains(Axis::Y),
            self.contains(Axis::Z),
        ]
    }
}

impl fmt::Display for AxisSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("{}");
        }
        for (name, set) in [("x", Self::X), ("y", Self::Y), ("z", Self::Z)] {
            if self.0 & set.0 != 0 {
                f.write_str(name)?;
            }
        }
        Ok(())
    }
}

/// Multi-channel scalar grid in the crate's canonical layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    shape: GridShape,
    channels: usize,
    data: Vec<T>,
}

impl<T: Copy + Default> Grid<T> {
    pub fn new(shape: GridShape, channels: usize, data: Vec<T>) -> Result<Self> {
        let expected = shape.voxel_count() * channels;
        if data.len() != expected {
            return Err(VolumeError::DataLength {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape,
            channels,
            data,
        })
    }

    pub fn filled(shape: GridShape, channels: usize, value: T) -> Self {
        Self {
            shape,
            channels,
            data: vec![value; shape.voxel_count() * channels],
        }
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.shape.voxel_count();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.shape.voxel_count();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> T {
        self.data[c * self.shape.voxel_count() + self.shape.index(x, y, z)]
    }

    /// Copy of the data reversed along every axis in `axes`.
    pub fn flipped(&self, axes: AxisSet) -> Self {
        if axes.is_empty() {
            return self.clone();
        }
        let [fx, fy, fz] = axes.flags();
        let GridShape { nx, ny, nz } = self.shape;
        let mut out = Vec::with_capacity(self.data.len());
        for c in 0..self.channels {
            let src = self.channel(c);
            for z in 0..nz {
                let sz = if fz { nz - 1 - z } else { z };
                for y in 0..ny {
                    let sy = if fy { ny - 1 - y } else { y };
                    let row = &src[(sz * ny + sy) * nx..(sz * ny + sy + 1) * nx];
                    if fx {
                        out.extend(row.iter().rev());
                    } else {
                        out.extend_from_slice(row);
                    }
                }
            }
        }
        Self {
            shape: self.shape,
            channels: self.channels,
            data: out,
        }
    }

    /// Sub-grid `[lo, hi)` of every channel.
    pub fn crop(&self, lo: [usize; 3], hi: [usize; 3]) -> Result<Self> {
        let shape = GridShape::new(
            hi[0].saturating_sub(lo[0]),
            hi[1].saturating_sub(lo[1]),
            hi[2].saturating_sub(lo[2]),
        )?;
        if (0..3).any(|a| hi[a] > self.shape.dims()[a]) {
            return Err(VolumeError::InvalidCropBox {
                lo,
                hi,
                shape: self.shape,
            });
        }
        let mut out = Vec::with_capacity(shape.voxel_count() * self.channels);
        for c in 0..self.channels {
            let src = self.channel(c);
            for z in lo[2]..hi[2] {
                for y in lo[1]..hi[1] {
                    let start = self.shape.index(lo[0], y, z);
                    out.extend_from_slice(&src[start..start + shape.nx]);
                }
            }
        }
        Self::new(shape, self.channels, out)
    }

    /// Grid of `shape` filled with `fill`, with `self` placed at `offset`.
    pub fn embed(&self, shape: GridShape, offset: [usize; 3], fill: T) -> Result<Self> {
        let dims = self.shape.dims();
        let outer = shape.dims();
        if (0..3).any(|a| offset[a] + dims[a] > outer[a]) {
            return Err(VolumeError::ShapeMismatch {
                expected: shape,
                actual: self.shape,
                context: format!("embedding at offset {offset:?} overflows"),
            });
        }
        let mut out = Self::filled(shape, self.channels, fill);
        for c in 0..self.channels {
            let src = self.channel(c);
            let dst = out.channel_mut(c);
            for z in 0..dims[2] {
                for y in 0..dims[1] {
                    let s = self.shape.index(0, y, z);
                    let d = shape.index(offset[0], offset[1] + y, offset[2] + z);
                    dst[d..d + dims[0]].copy_from_slice(&src[s..s + dims[0]]);
                }
            }
        }
        Ok(out)
    }
}

/// Data-level reversal along a set of axes.
pub trait Flip: Sized {
    fn flip(&self, axes: AxisSet) -> Self;
}

impl<T: Copy + Default> Flip for Grid<T> {
    fn flip(&self, axes: AxisSet) -> Self {
        self.flipped(axes)
    }
}

pub fn flip<G: Flip>(grid: &G, axes: AxisSet) -> G {
    grid.flip(axes)
}

/// Four-channel MRI scan (T1, T1Gd, T2, T2-FLAIR).
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalVolume {
    grid: Grid<f32>,
    affine: Affine,
}

impl MultimodalVolume {
    pub const CHANNELS: usize = 4;

    pub fn new(grid: Grid<f32>, affine: Affine) -> Result<Self> {
        if grid.channels() != Self::CHANNELS {
            return Err(VolumeError::ChannelCount {
                expected: Self::CHANNELS,
                actual: grid.channels(),
            });
        }
        let n = grid.shape().voxel_count();
        if let Some(i) = grid.data().iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFiniteVoxel {
                channel: i / n,
                index: i % n,
            });
        }
        Ok(Self { grid, affine })
    }

    pub fn from_data(shape: GridShape, data: Vec<f32>, affine: Affine) -> Result<Self> {
        Self::new(Grid::new(shape, Self::CHANNELS, data)?, affine)
    }

    pub fn shape(&self) -> GridShape {
        self.grid.shape()
    }

    pub fn grid(&self) -> &Grid<f32> {
        &self.grid
    }

    pub fn affine(&self) -> &Affine {
        &self.affine
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        self.grid.channel(c)
    }

    pub fn channel_names(&self) -> [&'static str; 4] {
        MODALITY_NAMES
    }

    pub fn into_grid(self) -> Grid<f32> {
        self.grid
    }
}

impl Flip for MultimodalVolume {
    fn flip(&self, axes: AxisSet) -> Self {
        Self {
            grid: self.grid.flipped(axes),
            affine: self.affine,
        }
    }
}

/// Per-voxel tumor probabilities for TC, WT and ET.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    grid: Grid<f32>,
}

impl ProbabilityMap {
    pub const CHANNELS: usize = 3;

    pub fn new(grid: Grid<f32>) -> Result<Self> {
        if grid.channels() != Self::CHANNELS {
            return Err(VolumeError::ChannelCount {
                expected: Self::CHANNELS,
                actual: grid.channels(),
            });
        }
        let n = grid.shape().voxel_count();
        // negated comparison also rejects NaN
        if let Some(i) = grid
            .data()
            .iter()
            .position(|v| !(0.0..=1.0).contains(v))
        {
            return Err(VolumeError::ProbabilityOutOfRange {
                channel: i / n,
                index: i % n,
                value: grid.data()[i],
            });
        }
        Ok(Self { grid })
    }

    pub fn from_data(shape: GridShape, data: Vec<f32>) -> Result<Self> {
        Self::new(Grid::new(shape, Self::CHANNELS, data)?)
    }

    pub fn constant(shape: GridShape, value: f32) -> Result<Self> {
        Self::new(Grid::filled(shape, Self::CHANNELS, value))
    }

    pub fn shape(&self) -> GridShape {
        self.grid.shape()
    }

    pub fn grid(&self) -> &Grid<f32> {
        &self.grid
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        self.grid.channel(c)
    }

    pub fn channel_names(&self) -> [&'static str; 3] {
        PROBABILITY_CHANNEL_NAMES
    }

    pub fn into_grid(self) -> Grid<f32> {
        self.grid
    }

    /// Place this map inside a zero-filled grid of the box's original shape.
    pub fn restore(&self, bbox: &CropBox) -> Result<Self> {
        check_box_extent(bbox, self.shape())?;
        Ok(Self {
            grid: self.grid.embed(bbox.original_shape, bbox.lo, 0.0)?,
        })
    }
}

impl Flip for ProbabilityMap {
    fn flip(&self, axes: AxisSet) -> Self {
        Self {
            grid: self.grid.flipped(axes),
        }
    }
}

/// Discrete segmentation: 0 background, 1 TC-only, 2 edema, 3 enhancing tumor.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    shape: GridShape,
    data: Vec<u8>,
    affine: Affine,
}

impl LabelMap {
    pub const MAX_LABEL: u8 = 3;

    pub fn new(shape: GridShape, data: Vec<u8>, affine: Affine) -> Result<Self> {
        if data.len() != shape.voxel_count() {
            return Err(VolumeError::DataLength {
                expected: shape.voxel_count(),
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|&v| v > Self::MAX_LABEL) {
            return Err(VolumeError::InvalidLabel {
                index: i,
                value: data[i] as f32,
            });
        }
        Ok(Self {
            shape,
            data,
            affine,
        })
    }

    pub fn zeros(shape: GridShape, affine: Affine) -> Self {
        Self {
            shape,
            data: vec![0; shape.voxel_count()],
            affine,
        }
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn affine(&self) -> &Affine {
        &self.affine
    }

    pub fn with_affine(mut self, affine: Affine) -> Self {
        self.affine = affine;
        self
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[self.shape.index(x, y, z)]
    }

    /// Voxel counts of labels 0..=3.
    pub fn histogram(&self) -> [usize; 4] {
        let mut h = [0; 4];
        for &v in &self.data {
            h[v as usize] += 1;
        }
        h
    }

    pub fn crop(&self, bbox: &CropBox) -> Result<Self> {
        check_box_shape(bbox, self.shape)?;
        let grid = Grid::new(self.shape, 1, self.data.clone())?.crop(bbox.lo, bbox.hi)?;
        Ok(Self {
            shape: grid.shape(),
            data: grid.into_data(),
            affine: self.affine.shifted(bbox.lo.map(|v| v as i64)),
        })
    }
}

impl Flip for LabelMap {
    fn flip(&self, axes: AxisSet) -> Self {
        let grid = Grid {
            shape: self.shape,
            channels: 1,
            data: self.data.clone(),
        }
        .flipped(axes);
        Self {
            shape: self.shape,
            data: grid.data,
            affine: self.affine,
        }
    }
}

/// Axis-aligned `[lo, hi)` box inside a grid of `original_shape`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "CropBoxRepr", into = "CropBoxRepr")]
pub struct CropBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
    pub original_shape: GridShape,
}

#[derive(Serialize, Deserialize)]
struct CropBoxRepr {
    lo: [usize; 3],
    hi: [usize; 3],
    original_shape: GridShape,
}

impl CropBox {
    pub fn new(lo: [usize; 3], hi: [usize; 3], original_shape: GridShape) -> Result<Self> {
        let dims = original_shape.dims();
        if (0..3).all(|a| lo[a] < hi[a] && hi[a] <= dims[a]) {
            Ok(Self {
                lo,
                hi,
                original_shape,
            })
        } else {
            Err(VolumeError::InvalidCropBox {
                lo,
                hi,
                shape: original_shape,
            })
        }
    }

    pub fn full(shape: GridShape) -> Self {
        Self {
            lo: [0; 3],
            hi: shape.dims(),
            original_shape: shape,
        }
    }

    pub fn extents(&self) -> GridShape {
        GridShape {
            nx: self.hi[0] - self.lo[0],
            ny: self.hi[1] - self.lo[1],
            nz: self.hi[2] - self.lo[2],
        }
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| self.lo[a] <= p[a] && p[a] < self.hi[a])
    }
}

impl TryFrom<CropBoxRepr> for CropBox {
    type Error = VolumeError;

    fn try_from(r: CropBoxRepr) -> Result<Self> {
        Self::new(r.lo, r.hi, r.original_shape)
    }
}

impl From<CropBox> for CropBoxRepr {
    fn from(b: CropBox) -> Self {
        Self {
            lo: b.lo,
            hi: b.hi,
            original_shape: b.original_shape,
        }
    }
}

pub(crate) fn check_box_shape(bbox: &CropBox, shape: GridShape) -> Result<()> {
    if bbox.original_shape != shape {
        return Err(VolumeError::ShapeMismatch {
            expected: bbox.original_shape,
            actual: shape,
            context: "crop box was computed for a different grid".into(),
        });
    }
    Ok(())
}

pub(crate) fn check_box_extent(bbox: &CropBox, shape: GridShape) -> Result<()> {
    if bbox.extents() != shape {
        return Err(VolumeError::ShapeMismatch {
            expected: bbox.extents(),
            actual: shape,
            context: "grid does not match crop box extents".into(),
        });
    }
    Ok(())
}
