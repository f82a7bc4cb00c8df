//! Dice overlap and 95th-percentile Hausdorff distance for the three nested
//! tumor regions.
//!
//! Both-empty and one-empty cases follow the usual challenge conventions:
//! Dice is 1 when both masks are empty and 0 when exactly one is; HD95 is 0
//! when both are empty and a fixed penalty when exactly one is.

mod edt;
mod evaluate;

pub use edt::squared_distance_transform;
pub use evaluate::{
    aggregate, evaluate_dirs, pair_cases, write_aggregate_json, write_case_csv, Aggregate, CaseResult, Summary,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volgrid::{GridShape, LabelMap, VolumeError};

/// HD95 assigned when exactly one of the two masks is empty.
pub const EMPTY_HD95_PENALTY: f64 = 373.13;

pub const HD_PERCENTILE: f64 = 95.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: prediction {pred}, reference {reference}")]
    ShapeMismatch { pred: GridShape, reference: GridShape },
    #[error("no prediction for case {0}")]
    MissingPrediction(String),
    #[error("no reference label maps in {0}")]
    EmptyDataset(std::path::PathBuf),
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Region {
    Et,
    Tc,
    Wt,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Et, Region::Tc, Region::Wt];

    pub fn contains_label(self, label: u8) -> bool {
        match self {
            Region::Et => label == 3,
            Region::Tc => label == 1 || label == 3,
            Region::Wt => label != 0,
        }
    }
}

/// Binary mask of one region derived from a label map.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask {
    pub region: Region,
    pub shape: GridShape,
    pub mask: Vec<bool>,
}

impl RegionMask {
    pub fn from_labels(labels: &LabelMap, region: Region) -> Self {
        Self {
            region,
            shape: labels.shape(),
            mask: labels.data().iter().map(|&l| region.contains_label(l)).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceUnit {
    /// Distances in voxel steps.
    #[default]
    Voxel,
    /// Distances scaled by the reference affine's voxel spacing.
    Mm,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub units: DistanceUnit,
    pub empty_hd95_penalty: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            units: DistanceUnit::Voxel,
            empty_hd95_penalty: EMPTY_HD95_PENALTY,
        }
    }
}

fn check_shapes(pred: GridShape, reference: GridShape) -> Result<()> {
    if pred != reference {
        return Err(MetricsError::ShapeMismatch { pred, reference });
    }
    Ok(())
}

/// `2|P∩R| / (|P|+|R|)`.
pub fn dice(pred: &RegionMask, reference: &RegionMask) -> Result<f64> {
    check_shapes(pred.shape, reference.shape)?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &r) in pred.mask.iter().zip(&reference.mask) {
        inter += (p && r) as usize;
        total += p as usize + r as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Foreground voxels with a face neighbor outside the mask or on the grid edge.
pub fn boundary(shape: GridShape, mask: &[bool]) -> Vec<bool> {
    let [nx, ny, nz] = shape.dims();
    let mut out = vec![false; mask.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = shape.index(x, y, z);
                if !mask[i] {
                    continue;
                }
                let edge = x == 0 || y == 0 || z == 0 || x + 1 == nx || y + 1 == ny || z + 1 == nz;
                out[i] = edge
                    || !mask[i - 1]
                    || !mask[i + 1]
                    || !mask[i - nx]
                    || !mask[i + nx]
                    || !mask[i - nx * ny]
                    || !mask[i + nx * ny];
            }
        }
    }
    out
}

/// Linear interpolation between closest ranks of an ascending slice.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty set");
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

/// Symmetric surface distances: every boundary voxel of `a` to the nearest
/// boundary voxel of `b`, followed by the reverse direction. Both masks must
/// be non-empty.
pub fn surface_distances(shape: GridShape, a: &[bool], b: &[bool], spacing: [f64; 3]) -> Vec<f64> {
    let ba = boundary(shape, a);
    let bb = boundary(shape, b);
    // the transform only needs the box holding both boundaries
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for (i, _) in ba.iter().zip(&bb).enumerate().filter(|(_, (p, q))| **p || **q) {
        let p = shape.coords(i);
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k] + 1);
        }
    }
    let sub = GridShape::new(hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]).expect("non-empty boundaries");
    let crop = |m: &[bool]| -> Vec<bool> {
        (0..sub.voxel_count())
            .map(|i| {
                let [x, y, z] = sub.coords(i);
                m[shape.index(x + lo[0], y + lo[1], z + lo[2])]
            })
            .collect()
    };
    let (ca, cb) = (crop(&ba), crop(&bb));
    let to_b = squared_distance_transform(sub, &cb, spacing);
    let to_a = squared_distance_transform(sub, &ca, spacing);
    let mut out: Vec<f64> = ca.iter().zip(&to_b).filter(|(m, _)| **m).map(|(_, d)| d.sqrt()).collect();
    out.extend(cb.iter().zip(&to_a).filter(|(m, _)| **m).map(|(_, d)| d.sqrt()));
    out
}

/// Percentile `q` of the pooled symmetric surface distances.
pub fn hausdorff_percentile(
    pred: &RegionMask,
    reference: &RegionMask,
    spacing: [f64; 3],
    q: f64,
    empty_penalty: f64,
) -> Result<f64> {
    check_shapes(pred.shape, reference.shape)?;
    let (pe, re) = (!pred.mask.contains(&true), !reference.mask.contains(&true));
    match (pe, re) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(empty_penalty),
        _ => {}
    }
    let mut d = surface_distances(pred.shape, &pred.mask, &reference.mask, spacing);
    d.sort_by(f64::total_cmp);
    Ok(percentile(&d, q))
}

pub fn hd95(pred: &RegionMask, reference: &RegionMask, spacing: [f64; 3]) -> Result<f64> {
    hausdorff_percentile(pred, reference, spacing, HD_PERCENTILE, EMPTY_HD95_PENALTY)
}

/// One value per region.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionScores {
    #[serde(rename = "ET")]
    pub et: f64,
    #[serde(rename = "TC")]
    pub tc: f64,
    #[serde(rename = "WT")]
    pub wt: f64,
}

impl RegionScores {
    pub fn get(&self, r: Region) -> f64 {
        match r {
            Region::Et => self.et,
            Region::Tc => self.tc,
            Region::Wt => self.wt,
        }
    }

    pub fn set(&mut self, r: Region, v: f64) {
        match r {
            Region::Et => self.et = v,
            Region::Tc => self.tc = v,
            Region::Wt => self.wt = v,
        }
    }

    pub fn mean(&self) -> f64 {
        (self.et + self.tc + self.wt) / 3.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseScore {
    pub dice: RegionScores,
    pub hd95: RegionScores,
    pub mean_dice: f64,
    pub mean_hd95: f64,
}

pub fn score_case(pred: &LabelMap, reference: &LabelMap, cfg: &MetricsConfig) -> Result<CaseScore> {
    check_shapes(pred.shape(), reference.shape())?;
    let spacing = match cfg.units {
        DistanceUnit::Voxel => [1.0; 3],
        DistanceUnit::Mm => reference.affine().spacing(),
    };
    let mut dice_s = RegionScores::default();
    let mut hd_s = RegionScores::default();
    for r in Region::ALL {
        let p = RegionMask::from_labels(pred, r);
        let g = RegionMask::from_labels(reference, r);
        dice_s.set(r, dice(&p, &g)?);
        hd_s.set(r, hausdorff_percentile(&p, &g, spacing, HD_PERCENTILE, cfg.empty_hd95_penalty)?);
    }
    Ok(CaseScore {
        dice: dice_s,
        hd95: hd_s,
        mean_dice: dice_s.mean(),
        mean_hd95: hd_s.mean(),
    })
}
