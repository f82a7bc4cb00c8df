//! Probability maps to label maps: per-channel thresholding, removal of small
//! or low-confidence connected components, and fusion of the three channels
//! into one discrete segmentation.

mod components;

pub use components::{connected_components, Component, Components, Connectivity};

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volgrid::{Affine, CropBox, Grid, GridShape, LabelMap, ProbabilityMap, VolumeError};

#[derive(Debug, Error)]
pub enum PostprocessError {
    #[error("invalid postprocessing parameters: {0}")]
    InvalidParams(String),
    #[error("cannot write report {path}: {source}")]
    Report {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

pub type Result<T, E = PostprocessError> = std::result::Result<T, E>;

/// Output channel, in probability-map channel order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Channel {
    Tc,
    Wt,
    Et,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Tc, Channel::Wt, Channel::Et];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// One value per output channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerChannel<T> {
    pub tc: T,
    pub wt: T,
    pub et: T,
}

impl<T: Copy> PerChannel<T> {
    pub fn splat(v: T) -> Self {
        Self { tc: v, wt: v, et: v }
    }

    pub fn get(&self, c: Channel) -> T {
        match c {
            Channel::Tc => self.tc,
            Channel::Wt => self.wt,
            Channel::Et => self.et,
        }
    }

    pub fn set(&mut self, c: Channel, v: T) {
        match c {
            Channel::Tc => self.tc = v,
            Channel::Wt => self.wt = v,
            Channel::Et => self.et = v,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessParams {
    pub threshold: PerChannel<f32>,
    pub min_component_size: PerChannel<usize>,
    pub min_mean_probability: PerChannel<f32>,
    pub connectivity: Connectivity,
}

impl Default for PostprocessParams {
    fn default() -> Self {
        Self {
            threshold: PerChannel::splat(0.5),
            min_component_size: PerChannel {
                tc: 150,
                wt: 500,
                et: 100,
            },
            min_mean_probability: PerChannel::splat(0.0),
            connectivity: Connectivity::TwentySix,
        }
    }
}

impl PostprocessParams {
    /// Thresholding and fusion only; every component is kept.
    pub fn unfiltered() -> Self {
        Self {
            min_component_size: PerChannel::splat(0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for c in Channel::ALL {
            let t = self.threshold.get(c);
            if !(t > 0.0 && t < 1.0) {
                return Err(PostprocessError::InvalidParams(format!(
                    "{c:?} threshold {t} is outside (0, 1)"
                )));
            }
            let m = self.min_mean_probability.get(c);
            if !(0.0..=1.0).contains(&m) {
                return Err(PostprocessError::InvalidParams(format!(
                    "{c:?} min_mean_probability {m} is outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Audit entry for one component of one channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentRecord {
    pub channel: Channel,
    pub id: u32,
    pub size: usize,
    pub mean_probability: f64,
    pub bbox: CropBox,
    pub kept: bool,
}

/// Three-channel mask, 1 where probability >= the channel threshold.
pub fn binarize(map: &ProbabilityMap, params: &PostprocessParams) -> Grid<bool> {
    let shape = map.shape();
    let mut data = Vec::with_capacity(3 * shape.voxel_count());
    for c in Channel::ALL {
        let t = params.threshold.get(c);
        data.extend(map.channel(c.index()).iter().map(|&p| p >= t));
    }
    Grid::new(shape, 3, data).expect("three channels of the map's shape")
}

/// Drop components below the channel's size or mean-probability cutoff.
/// Means are taken over the continuous probabilities.
pub fn filter_components(
    components: &Components,
    probabilities: &[f32],
    channel: Channel,
    params: &PostprocessParams,
) -> (Vec<bool>, Vec<ComponentRecord>) {
    let mut sums = vec![0.0f64; components.components.len()];
    for (&l, &p) in components.labels.iter().zip(probabilities) {
        if l > 0 {
            sums[l as usize - 1] += p as f64;
        }
    }
    let min_size = params.min_component_size.get(channel);
    let min_mean = params.min_mean_probability.get(channel) as f64;
    let records: Vec<ComponentRecord> = components
        .components
        .iter()
        .zip(&sums)
        .map(|(c, &sum)| {
            let mean_probability = (sum / c.size as f64).clamp(0.0, 1.0);
            ComponentRecord {
                channel,
                id: c.id,
                size: c.size,
                mean_probability,
                bbox: c.bbox,
                kept: c.size >= min_size && mean_probability >= min_mean,
            }
        })
        .collect();
    let mask = components
        .labels
        .iter()
        .map(|&l| l > 0 && records[l as usize - 1].kept)
        .collect();
    (mask, records)
}

/// Label 3 where ET, else 1 where TC, else 2 where WT, else 0.
pub fn fuse_labels(shape: GridShape, tc: &[bool], wt: &[bool], et: &[bool], affine: Affine) -> LabelMap {
    let data = (0..shape.voxel_count())
        .map(|i| match (et[i], tc[i], wt[i]) {
            (true, _, _) => 3,
            (false, true, _) => 1,
            (false, false, true) => 2,
            _ => 0,
        })
        .collect();
    LabelMap::new(shape, data, affine).expect("labels are 0..=3")
}

/// Region masks implied by a label map, in channel order TC, WT, ET.
pub fn region_masks(labels: &LabelMap) -> [Vec<bool>; 3] {
    let d = labels.data();
    [
        d.iter().map(|&l| l == 1 || l == 3).collect(),
        d.iter().map(|&l| l != 0).collect(),
        d.iter().map(|&l| l == 3).collect(),
    ]
}

/// Binarize, filter each channel's components, fuse. Records are ordered by
/// channel then component id.
pub fn postprocess(
    map: &ProbabilityMap,
    params: &PostprocessParams,
    affine: Affine,
) -> Result<(LabelMap, Vec<ComponentRecord>)> {
    params.validate()?;
    let shape = map.shape();
    let masks = binarize(map, params);
    let per_channel: Vec<(Vec<bool>, Vec<ComponentRecord>)> = Channel::ALL
        .par_iter()
        .map(|&c| {
            let cc = connected_components(shape, masks.channel(c.index()), params.connectivity);
            filter_components(&cc, map.channel(c.index()), c, params)
        })
        .collect();
    let labels = fuse_labels(shape, &per_channel[0].0, &per_channel[1].0, &per_channel[2].0, affine);
    let records = per_channel.into_iter().flat_map(|(_, r)| r).collect();
    Ok((labels, records))
}

/// One JSON object per line.
pub fn write_component_report(path: &Path, records: &[ComponentRecord]) -> Result<()> {
    let io = |source| PostprocessError::Report {
        path: path.to_path_buf(),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| io(e.into()))?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}
