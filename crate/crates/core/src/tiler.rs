//! Sliding-window decomposition and overlap blending.
//!
//! Windows are laid out per axis at `0, s, 2s, ...` with stride
//! `s = ceil(patch * (1 - overlap))`; the last window is clamped so it ends
//! flush with the volume boundary. Axes shorter than the patch are
//! zero-padded symmetrically up to the patch size, and the padding is removed
//! again after blending.
//!
//! Every voxel of the blended map is `sum(w_i * p_i) / sum(w_i)` over the
//! windows covering it. Weighted sums are kept in `f32`, weight sums in
//! `f64`.

use std::sync::Arc;

use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::predictor::{predict_patch, PredictError, PredictorBackend, DEFAULT_PATCH};
use crate::volgrid::{Grid, GridShape, ProbabilityMap, VolumeError};

pub const DEFAULT_OVERLAP: f64 = 0.5;
/// Gaussian blend sigma as a fraction of the patch length along each axis.
pub const GAUSSIAN_SIGMA_FRACTION: f64 = 1.0 / 8.0;
pub const GAUSSIAN_WEIGHT_FLOOR: f32 = 1e-3;

#[derive(Debug, Error)]
pub enum TileError {
    #[error("overlap {0} is outside [0, 1)")]
    InvalidOverlap(f64),
    #[error("no output for window at {0:?}")]
    MissingWindowOutput([usize; 3]),
    #[error("output for window at {0:?} is not part of the plan or was given twice")]
    UnexpectedWindow([usize; 3]),
    #[error("window output has {actual_channels} x {actual}, expected 3 x {expected}")]
    ShapeMismatch {
        expected: GridShape,
        actual: GridShape,
        actual_channels: usize,
    },
    #[error("voxel {0:?} is not covered by any window")]
    Uncovered([usize; 3]),
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

pub type Result<T, E = TileError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlendMode {
    Uniform,
    #[default]
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TilerConfig {
    pub patch_shape: GridShape,
    pub overlap: f64,
    pub blend_mode: BlendMode,
}

impl Default for TilerConfig {
    fn default() -> Self {
        Self {
            patch_shape: GridShape::cube(DEFAULT_PATCH).expect("valid"),
            overlap: DEFAULT_OVERLAP,
            blend_mode: BlendMode::Gaussian,
        }
    }
}

/// Window origin in padded-volume coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Window {
    pub origin: [usize; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowPlan {
    pub volume_shape: GridShape,
    pub padded_shape: GridShape,
    pub pad_before: [usize; 3],
    pub patch_shape: GridShape,
    pub overlap: f64,
    pub starts: [Vec<usize>; 3],
    pub blend_mode: BlendMode,
}

pub fn stride(patch: usize, overlap: f64) -> usize {
    // the epsilon keeps e.g. 100 * (1 - 0.7) from rounding up to 31
    ((patch as f64 * (1.0 - overlap)) - 1e-9).ceil().max(1.0) as usize
}

/// Start indices along one axis of length `dim >= patch`.
pub fn axis_starts(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = dim.saturating_sub(patch);
    let mut starts = Vec::new();
    let mut s = 0;
    loop {
        let clamped = s.min(last);
        if starts.last() != Some(&clamped) {
            starts.push(clamped);
        }
        if s + patch >= dim {
            break;
        }
        s += stride;
    }
    starts
}

pub fn plan_windows(volume_shape: GridShape, patch_shape: GridShape, overlap: f64) -> Result<WindowPlan> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(TileError::InvalidOverlap(overlap));
    }
    let dims = volume_shape.dims();
    let patch = patch_shape.dims();
    let padded: [usize; 3] = std::array::from_fn(|a| dims[a].max(patch[a]));
    let pad_before: [usize; 3] = std::array::from_fn(|a| (padded[a] - dims[a]) / 2);
    let starts = std::array::from_fn(|a| axis_starts(padded[a], patch[a], stride(patch[a], overlap)));
    Ok(WindowPlan {
        volume_shape,
        padded_shape: GridShape::try_from(padded)?,
        pad_before,
        patch_shape,
        overlap,
        starts,
        blend_mode: BlendMode::default(),
    })
}

impl WindowPlan {
    pub fn from_config(volume_shape: GridShape, cfg: &TilerConfig) -> Result<Self> {
        Ok(plan_windows(volume_shape, cfg.patch_shape, cfg.overlap)?.with_blend_mode(cfg.blend_mode))
    }

    pub fn with_blend_mode(mut self, mode: BlendMode) -> Self {
        self.blend_mode = mode;
        self
    }

    pub fn window_count(&self) -> usize {
        self.starts.iter().map(Vec::len).product()
    }

    /// Windows with x varying fastest.
    pub fn windows(&self) -> Vec<Window> {
        let mut out = Vec::with_capacity(self.window_count());
        for &z in &self.starts[2] {
            for &y in &self.starts[1] {
                for &x in &self.starts[0] {
                    out.push(Window { origin: [x, y, z] });
                }
            }
        }
        out
    }

    pub fn is_padded(&self) -> bool {
        self.padded_shape != self.volume_shape
    }

    /// Zero-pad an input grid to the plan's padded shape.
    pub fn pad(&self, grid: &Grid<f32>) -> Result<Grid<f32>> {
        if grid.shape() != self.volume_shape {
            return Err(VolumeError::ShapeMismatch {
                expected: self.volume_shape,
                actual: grid.shape(),
                context: "input does not match the window plan".into(),
            }
            .into());
        }
        if !self.is_padded() {
            return Ok(grid.clone());
        }
        Ok(grid.embed(self.padded_shape, self.pad_before, 0.0)?)
    }

    pub fn extract(&self, padded: &Grid<f32>, window: Window) -> Result<Grid<f32>> {
        let p = self.patch_shape.dims();
        let hi = std::array::from_fn(|a| window.origin[a] + p[a]);
        Ok(padded.crop(window.origin, hi)?)
    }

    /// Per-voxel blend weights of one window, in patch layout.
    pub fn weight_map(&self) -> Vec<f32> {
        let p = self.patch_shape;
        match self.blend_mode {
            BlendMode::Uniform => vec![1.0; p.voxel_count()],
            BlendMode::Gaussian => {
                let axis: Vec<Vec<f64>> = p.dims().iter().map(|&n| gaussian_1d(n)).collect();
                let mut w = Vec::with_capacity(p.voxel_count());
                for z in 0..p.nz {
                    for y in 0..p.ny {
                        let zy = axis[2][z] * axis[1][y];
                        w.extend(
                            axis[0]
                                .iter()
                                .map(|&gx| ((gx * zy) as f32).max(GAUSSIAN_WEIGHT_FLOOR)),
                        );
                    }
                }
                w
            }
        }
    }
}

/// Gaussian centred on the window, peak-normalized to 1.
fn gaussian_1d(n: usize) -> Vec<f64> {
    let sigma = n as f64 * GAUSSIAN_SIGMA_FRACTION;
    let centre = (n as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..n)
        .map(|i| (-(i as f64 - centre).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let peak = g.iter().cloned().fold(0.0, f64::max);
    g.into_iter().map(|v| v / peak).collect()
}

/// Running weighted sums over the padded volume.
#[derive(Clone, Debug)]
pub struct BlendAccumulator {
    shape: GridShape,
    weighted_sum: Vec<f64>,
    weight_sum: Vec<f64>,
}

impl BlendAccumulator {
    pub fn new(plan: &WindowPlan) -> Self {
        let n = plan.padded_shape.voxel_count();
        Self {
            shape: plan.padded_shape,
            weighted_sum: vec![0.0; 3 * n],
            weight_sum: vec![0.0; n],
        }
    }

    pub fn add(&mut self, window: Window, output: &Grid<f32>, weights: &[f32]) -> Result<()> {
        let p = output.shape();
        if output.channels() != 3 || weights.len() != p.voxel_count() {
            return Err(TileError::ShapeMismatch {
                expected: p,
                actual: p,
                actual_channels: output.channels(),
            });
        }
        let n = self.shape.voxel_count();
        let [ox, oy, oz] = window.origin;
        for z in 0..p.nz {
            for y in 0..p.ny {
                let src = p.index(0, y, z);
                let dst = self.shape.index(ox, oy + y, oz + z);
                let w = &weights[src..src + p.nx];
                for (acc, &wv) in self.weight_sum[dst..dst + p.nx].iter_mut().zip(w) {
                    *acc += wv as f64;
                }
                for c in 0..3 {
                    let vals = &output.channel(c)[src..src + p.nx];
                    let acc = &mut self.weighted_sum[c * n + dst..c * n + dst + p.nx];
                    for ((a, &v), &wv) in acc.iter_mut().zip(vals).zip(w) {
                        *a += wv as f64 * v as f64;
                    }
                }
            }
        }
        Ok(())
    }

    /// Fold another partial accumulator over the same plan into this one.
    pub fn merge(&mut self, other: &BlendAccumulator) {
        assert_eq!(self.shape, other.shape, "accumulators of different plans");
        for (a, b) in self.weighted_sum.iter_mut().zip(&other.weighted_sum) {
            *a += b;
        }
        for (a, b) in self.weight_sum.iter_mut().zip(&other.weight_sum) {
            *a += b;
        }
    }

    /// Normalize, clamp to [0, 1] and strip padding.
    pub fn finish(self, plan: &WindowPlan) -> Result<ProbabilityMap> {
        let n = self.shape.voxel_count();
        if let Some(i) = self.weight_sum.iter().position(|&w| !(w > 0.0)) {
            return Err(TileError::Uncovered(self.shape.coords(i)));
        }
        let data: Vec<f32> = self
            .weighted_sum
            .chunks(n)
            .flat_map(|ch| ch.iter().zip(&self.weight_sum).map(|(&v, &w)| ((v / w) as f32).clamp(0.0, 1.0)))
            .collect();
        let mut grid = Grid::new(self.shape, 3, data)?;
        if plan.is_padded() {
            let lo = plan.pad_before;
            let dims = plan.volume_shape.dims();
            grid = grid.crop(lo, std::array::from_fn(|a| lo[a] + dims[a]))?;
        }
        Ok(ProbabilityMap::new(grid)?)
    }
}

/// Blend one output per planned window into a full-volume map.
pub fn blend<I>(plan: &WindowPlan, outputs: I) -> Result<ProbabilityMap>
where
    I: IntoIterator<Item = (Window, Grid<f32>)>,
{
    let planned = plan.windows();
    let mut seen = vec![false; planned.len()];
    let weights = plan.weight_map();
    let mut acc = BlendAccumulator::new(plan);
    for (window, output) in outputs {
        let slot = planned
            .binary_search_by(|w| (w.origin[2], w.origin[1], w.origin[0]).cmp(&(window.origin[2], window.origin[1], window.origin[0])))
            .map_err(|_| TileError::UnexpectedWindow(window.origin))?;
        if std::mem::replace(&mut seen[slot], true) {
            return Err(TileError::UnexpectedWindow(window.origin));
        }
        if output.shape() != plan.patch_shape || output.channels() != 3 {
            return Err(TileError::ShapeMismatch {
                expected: plan.patch_shape,
                actual: output.shape(),
                actual_channels: output.channels(),
            });
        }
        acc.add(window, &output, &weights)?;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(TileError::MissingWindowOutput(planned[i].origin));
    }
    acc.finish(plan)
}

/// Predict every window of `plan` with `backend` and blend the results.
///
/// Up to `workers` windows (capped by the backend's concurrency hint) are
/// predicted at a time on the current rayon pool; outputs are accumulated in
/// plan order, so the result does not depend on the worker count.
pub fn sliding_window_inference(
    backend: &dyn PredictorBackend,
    volume: &Grid<f32>,
    plan: &WindowPlan,
    workers: usize,
) -> Result<ProbabilityMap> {
    if backend.spec().patch_shape != plan.patch_shape {
        return Err(PredictError::ShapeMismatch {
            expected: backend.spec().patch_shape,
            expected_channels: backend.spec().in_channels,
            actual: plan.patch_shape,
            actual_channels: volume.channels(),
        }
        .into());
    }
    let padded = plan.pad(volume)?;
    let weights = Arc::new(plan.weight_map());
    let windows = plan.windows();
    let batch = workers.min(backend.max_concurrency()).max(1);
    debug!(
        "{} windows over {} (batch {batch}, {:?})",
        windows.len(),
        plan.volume_shape,
        plan.blend_mode
    );
    let mut acc = BlendAccumulator::new(plan);
    for chunk in windows.chunks(batch) {
        let run = |w: &Window| -> Result<Grid<f32>> {
            let patch = plan.extract(&padded, *w)?;
            Ok(predict_patch(backend, &patch)?.into_grid())
        };
        let outputs: Vec<Grid<f32>> = if batch > 1 {
            chunk.par_iter().map(run).collect::<Result<_>>()?
        } else {
            chunk.iter().map(run).collect::<Result<_>>()?
        };
        for (w, out) in chunk.iter().zip(&outputs) {
            acc.add(*w, out, &weights)?;
        }
    }
    acc.finish(plan)
}
