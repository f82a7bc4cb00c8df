//! Grid search over postprocessing parameters on cached probability maps.

use std::cmp::Ordering;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{score_case, MetricsConfig, MetricsError, Region, RegionScores};
use crate::postprocess::{postprocess, Channel, Connectivity, PostprocessError, PostprocessParams};
use crate::volgrid::probfile::load_probability_map;
use crate::volgrid::{load_labelmap, Affine, LabelMap, ProbabilityMap, VolumeError};

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("sweep dataset is empty")]
    EmptyDataset,
    #[error("sweep grid axis {0} has no values")]
    EmptyGrid(String),
    #[error("file not found: {0}")]
    FileMissing(PathBuf),
    #[error("invalid sweep spec: {0}")]
    InvalidSpec(String),
    #[error("case {case}: {source}")]
    Case {
        case: String,
        #[source]
        source: Box<TuneError>,
    },
    #[error(transparent)]
    Postprocess(#[from] PostprocessError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = TuneError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Mean Dice over the three regions.
    #[default]
    MeanDice,
    /// Mean Dice minus `hd95_weight * mean_hd95 / empty_hd95_penalty`.
    MeanDiceMinusHd95Penalty,
}

/// Optional value list per channel; absent channels keep the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelValues<T> {
    pub tc: Option<Vec<T>>,
    pub wt: Option<Vec<T>>,
    pub et: Option<Vec<T>>,
}

impl<T: Clone> ChannelValues<T> {
    fn get(&self, c: Channel) -> Option<&Vec<T>> {
        match c {
            Channel::Tc => self.tc.as_ref(),
            Channel::Wt => self.wt.as_ref(),
            Channel::Et => self.et.as_ref(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub threshold: ChannelValues<f32>,
    pub min_component_size: ChannelValues<usize>,
    pub min_mean_probability: ChannelValues<f32>,
    pub connectivity: Option<Vec<Connectivity>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub probabilities: PathBuf,
    pub reference: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub objective: Objective,
    #[serde(default = "default_hd95_weight")]
    pub hd95_weight: f64,
    /// Values used for every parameter the grid leaves out.
    #[serde(default)]
    pub base: PostprocessParams,
    #[serde(default)]
    pub grid: SweepGrid,
    #[serde(default)]
    pub metrics: MetricsConfig,
    pub dataset: Vec<DatasetEntry>,
}

fn default_hd95_weight() -> f64 {
    1.0
}

impl SweepSpec {
    /// Parse a TOML spec; relative dataset paths are taken relative to the
    /// spec file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| TuneError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut spec: SweepSpec = toml::from_str(&text).map_err(|e| TuneError::InvalidSpec(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for e in &mut spec.dataset {
            e.probabilities = base.join(&e.probabilities);
            e.reference = base.join(&e.reference);
        }
        Ok(spec)
    }

    /// Every grid point, in lexicographic parameter order.
    pub fn points(&self) -> Result<Vec<PostprocessParams>> {
        let mut points = vec![self.base];
        fn expand<T: Copy>(
            points: Vec<PostprocessParams>,
            name: String,
            values: Option<&Vec<T>>,
            apply: impl Fn(&mut PostprocessParams, T),
        ) -> Result<Vec<PostprocessParams>> {
            let Some(values) = values else {
                return Ok(points);
            };
            if values.is_empty() {
                return Err(TuneError::EmptyGrid(name));
            }
            let mut out = Vec::with_capacity(points.len() * values.len());
            for p in points {
                for &v in values {
                    let mut q = p;
                    apply(&mut q, v);
                    out.push(q);
                }
            }
            Ok(out)
        }
        for c in Channel::ALL {
            let name = format!("threshold.{}", format!("{c:?}").to_lowercase());
            points = expand(points, name, self.grid.threshold.get(c), |p, v| p.threshold.set(c, v))?;
        }
        for c in Channel::ALL {
            let name = format!("min_component_size.{}", format!("{c:?}").to_lowercase());
            points = expand(points, name, self.grid.min_component_size.get(c), |p, v| p.min_component_size.set(c, v))?;
        }
        for c in Channel::ALL {
            let name = format!("min_mean_probability.{}", format!("{c:?}").to_lowercase());
            points = expand(points, name, self.grid.min_mean_probability.get(c), |p, v| {
                p.min_mean_probability.set(c, v)
            })?;
        }
        points = expand(points, "connectivity".into(), self.grid.connectivity.as_ref(), |p, v| p.connectivity = v)?;
        for p in &points {
            p.validate()?;
        }
        points.sort_by(compare_params);
        points.dedup();
        Ok(points)
    }
}

fn param_key(p: &PostprocessParams) -> [f64; 10] {
    [
        p.threshold.tc as f64,
        p.threshold.wt as f64,
        p.threshold.et as f64,
        p.min_component_size.tc as f64,
        p.min_component_size.wt as f64,
        p.min_component_size.et as f64,
        p.min_mean_probability.tc as f64,
        p.min_mean_probability.wt as f64,
        p.min_mean_probability.et as f64,
        u8::from(p.connectivity) as f64,
    ]
}

/// Lexicographic over thresholds, sizes, mean cutoffs, connectivity.
pub fn compare_params(a: &PostprocessParams, b: &PostprocessParams) -> Ordering {
    let (ka, kb) = (param_key(a), param_key(b));
    ka.iter()
        .zip(&kb)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub params: PostprocessParams,
    pub objective: f64,
    /// Dataset means per region.
    pub dice: RegionScores,
    pub hd95: RegionScores,
    pub mean_dice: f64,
    pub mean_hd95: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOutcome {
    /// Best first.
    pub results: Vec<SweepResult>,
    /// Grid points times dataset cases.
    pub evaluations: usize,
}

/// A cached case: probability map, its affine and the reference labels.
pub struct LoadedCase {
    pub id: String,
    pub map: ProbabilityMap,
    pub affine: Affine,
    pub reference: LabelMap,
}

pub fn load_dataset(entries: &[DatasetEntry]) -> Result<Vec<LoadedCase>> {
    if entries.is_empty() {
        return Err(TuneError::EmptyDataset);
    }
    entries
        .par_iter()
        .map(|e| {
            for p in [&e.probabilities, &e.reference] {
                if !p.is_file() {
                    return Err(TuneError::FileMissing(p.clone()));
                }
            }
            let (map, affine) = load_probability_map(&e.probabilities)?;
            let reference = load_labelmap(&e.reference)?;
            Ok(LoadedCase {
                id: e.probabilities.display().to_string(),
                map,
                affine,
                reference,
            })
        })
        .collect()
}

/// Postprocess and score every case with one parameter set.
pub fn evaluate_params(
    params: &PostprocessParams,
    cases: &[LoadedCase],
    metrics: &MetricsConfig,
    objective: Objective,
    hd95_weight: f64,
) -> Result<SweepResult> {
    let mut dice = RegionScores::default();
    let mut hd95 = RegionScores::default();
    for case in cases {
        let wrap = |e: TuneError| TuneError::Case {
            case: case.id.clone(),
            source: Box::new(e),
        };
        let (labels, _) = postprocess(&case.map, params, case.affine).map_err(|e| wrap(e.into()))?;
        let s = score_case(&labels, &case.reference, metrics).map_err(|e| wrap(e.into()))?;
        for r in Region::ALL {
            dice.set(r, dice.get(r) + s.dice.get(r));
            hd95.set(r, hd95.get(r) + s.hd95.get(r));
        }
    }
    let n = cases.len() as f64;
    for r in Region::ALL {
        dice.set(r, dice.get(r) / n);
        hd95.set(r, hd95.get(r) / n);
    }
    let (mean_dice, mean_hd95) = (dice.mean(), hd95.mean());
    let objective = match objective {
        Objective::MeanDice => mean_dice,
        Objective::MeanDiceMinusHd95Penalty => mean_dice - hd95_weight * mean_hd95 / metrics.empty_hd95_penalty,
    };
    Ok(SweepResult {
        params: *params,
        objective,
        dice,
        hd95,
        mean_dice,
        mean_hd95,
    })
}

pub fn run_sweep(spec: &SweepSpec) -> Result<SweepOutcome> {
    let points = spec.points()?;
    let cases = load_dataset(&spec.dataset)?;
    info!("sweeping {} grid points over {} cases", points.len(), cases.len());
    let mut results = points
        .par_iter()
        .map(|p| evaluate_params(p, &cases, &spec.metrics, spec.objective, spec.hd95_weight))
        .collect::<Result<Vec<_>>>()?;
    results.sort_by(|a, b| {
        b.objective
            .total_cmp(&a.objective)
            .then_with(|| compare_params(&a.params, &b.params))
    });
    Ok(SweepOutcome {
        evaluations: points.len() * cases.len(),
        results,
    })
}

pub fn write_results_csv(path: &Path, results: &[SweepResult]) -> Result<()> {
    let io = |e: csv::Error| TuneError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record([
        "rank",
        "objective",
        "threshold_tc",
        "threshold_wt",
        "threshold_et",
        "min_size_tc",
        "min_size_wt",
        "min_size_et",
        "min_mean_tc",
        "min_mean_wt",
        "min_mean_et",
        "connectivity",
        "dice_et",
        "dice_tc",
        "dice_wt",
        "mean_dice",
        "hd95_et",
        "hd95_tc",
        "hd95_wt",
        "mean_hd95",
    ])
    .map_err(io)?;
    for (rank, r) in results.iter().enumerate() {
        let p = &r.params;
        let row = [
            (rank + 1).to_string(),
            format!("{:.6}", r.objective),
            p.threshold.tc.to_string(),
            p.threshold.wt.to_string(),
            p.threshold.et.to_string(),
            p.min_component_size.tc.to_string(),
            p.min_component_size.wt.to_string(),
            p.min_component_size.et.to_string(),
            p.min_mean_probability.tc.to_string(),
            p.min_mean_probability.wt.to_string(),
            p.min_mean_probability.et.to_string(),
            u8::from(p.connectivity).to_string(),
            format!("{:.6}", r.dice.et),
            format!("{:.6}", r.dice.tc),
            format!("{:.6}", r.dice.wt),
            format!("{:.6}", r.mean_dice),
            format!("{:.6}", r.hd95.et),
            format!("{:.6}", r.hd95.tc),
            format!("{:.6}", r.hd95.wt),
            format!("{:.6}", r.mean_hd95),
        ];
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|source| TuneError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// TOML that deserializes straight into [`PostprocessParams`].
pub fn write_best_params(path: &Path, params: &PostprocessParams) -> Result<()> {
    let text = toml::to_string(params).expect("params serialize");
    std::fs::write(path, text).map_err(|source| TuneError::Io {
        path: path.to_path_buf(),
        source,
    })
}
