use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{score_case, CaseScore, MetricsConfig, MetricsError, Region, RegionScores, Result};
use crate::volgrid::load_labelmap;
use crate::volgrid::nifti::{is_nifti_path, stem};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case_id: String,
    pub score: CaseScore,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub dice: RegionScores,
    pub hd95: RegionScores,
    pub mean_dice: f64,
    pub mean_hd95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub cases: usize,
    pub mean: Summary,
    pub median: Summary,
}

/// Case id of a label file: its NIfTI stem minus a trailing `-seg`/`_seg`.
fn case_id(path: &Path) -> String {
    let s = stem(path);
    for suffix in ["-seg", "_seg"] {
        if let Some(base) = s.strip_suffix(suffix) {
            return base.to_string();
        }
    }
    s
}

fn label_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|source| MetricsError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry
            .map_err(|source| MetricsError::Io {
                path: dir.to_path_buf(),
                source,
            })?
            .path();
        if path.is_file() && is_nifti_path(&path) {
            out.insert(case_id(&path), path);
        }
    }
    Ok(out)
}

/// `(case_id, prediction, reference)` for every reference label map, sorted
/// by case id.
pub fn pair_cases(pred_dir: &Path, ref_dir: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let refs = label_files(ref_dir)?;
    if refs.is_empty() {
        return Err(MetricsError::EmptyDataset(ref_dir.to_path_buf()));
    }
    let preds = label_files(pred_dir)?;
    refs.into_iter()
        .map(|(id, r)| match preds.get(&id) {
            Some(p) => Ok((id, p.clone(), r)),
            None => Err(MetricsError::MissingPrediction(id)),
        })
        .collect()
}

pub fn evaluate_dirs(pred_dir: &Path, ref_dir: &Path, cfg: &MetricsConfig) -> Result<Vec<CaseResult>> {
    pair_cases(pred_dir, ref_dir)?
        .into_par_iter()
        .map(|(case_id, p, r)| {
            let score = score_case(&load_labelmap(&p)?, &load_labelmap(&r)?, cfg)?;
            Ok(CaseResult { case_id, score })
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn summarize(results: &[CaseResult], reduce: impl Fn(Vec<f64>) -> f64) -> Summary {
    let column = |f: &dyn Fn(&CaseScore) -> f64| reduce(results.iter().map(|r| f(&r.score)).collect());
    let mut s = Summary::default();
    for r in Region::ALL {
        s.dice.set(r, column(&|c| c.dice.get(r)));
        s.hd95.set(r, column(&|c| c.hd95.get(r)));
    }
    s.mean_dice = column(&|c| c.mean_dice);
    s.mean_hd95 = column(&|c| c.mean_hd95);
    s
}

pub fn aggregate(results: &[CaseResult]) -> Aggregate {
    assert!(!results.is_empty(), "aggregate of zero cases");
    Aggregate {
        cases: results.len(),
        mean: summarize(results, |v| v.iter().sum::<f64>() / v.len() as f64),
        median: summarize(results, median),
    }
}

pub fn write_case_csv(path: &Path, results: &[CaseResult]) -> Result<()> {
    let io = |e: csv::Error| MetricsError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record([
        "case_id", "dice_et", "dice_tc", "dice_wt", "dice_mean", "hd95_et", "hd95_tc", "hd95_wt", "hd95_mean",
    ])
    .map_err(io)?;
    for r in results {
        let s = &r.score;
        let mut row = vec![r.case_id.clone()];
        row.extend(
            [s.dice.et, s.dice.tc, s.dice.wt, s.mean_dice, s.hd95.et, s.hd95.tc, s.hd95.wt, s.mean_hd95]
                .iter()
                .map(|v| format!("{v:.6}")),
        );
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_aggregate_json(path: &Path, agg: &Aggregate) -> Result<()> {
    let text = serde_json::to_string_pretty(agg).expect("aggregate serializes");
    std::fs::write(path, text + "\n").map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })
}
