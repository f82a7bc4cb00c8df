//! Flip test-time augmentation and multi-model averaging.
//!
//! For each backend, full sliding-window inference runs on every flipped copy
//! of the scan; each map is flipped back and the maps are averaged. Backend
//! maps are then combined with the ensemble weights. Both averages are linear,
//! so the order of the two reductions does not change the result. Sums are
//! accumulated in `f64` in a fixed order.

use std::sync::Arc;

use log::debug;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::predictor::PredictorBackend;
use crate::tiler::{sliding_window_inference, TileError, TilerConfig, WindowPlan};
use crate::volgrid::{AxisSet, Flip, Grid, MultimodalVolume, ProbabilityMap};

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("an ensemble needs at least one backend")]
    EmptyEnsemble,
    #[error("invalid ensemble weights: {0}")]
    InvalidWeights(String),
    #[error("backend {backend}: {source}")]
    Backend {
        backend: String,
        #[source]
        source: TileError,
    },
    #[error(transparent)]
    Tile(#[from] TileError),
}

pub type Result<T, E = EnsembleError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TtaConfig {
    pub enabled: bool,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self { enabled: true }
    }
}

impl TtaConfig {
    /// All eight flip subsets when enabled, otherwise only the identity.
    pub fn flip_sets(&self) -> Vec<AxisSet> {
        if self.enabled {
            AxisSet::power_set().to_vec()
        } else {
            vec![AxisSet::EMPTY]
        }
    }
}

/// Backends plus their averaging weights.
#[derive(Clone)]
pub struct EnsembleConfig {
    backends: Vec<Arc<dyn PredictorBackend>>,
    weights: Vec<f64>,
}

impl EnsembleConfig {
    /// Weights, when given, must be non-negative and sum to 1 within 1e-9;
    /// otherwise every backend gets the same weight.
    pub fn new(backends: Vec<Arc<dyn PredictorBackend>>, weights: Option<Vec<f64>>) -> Result<Self> {
        if backends.is_empty() {
            return Err(EnsembleError::EmptyEnsemble);
        }
        let weights = match weights {
            None => vec![1.0 / backends.len() as f64; backends.len()],
            Some(w) => {
                if w.len() != backends.len() {
                    return Err(EnsembleError::InvalidWeights(format!(
                        "{} weights for {} backends",
                        w.len(),
                        backends.len()
                    )));
                }
                if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                    return Err(EnsembleError::InvalidWeights(format!("negative or non-finite weight in {w:?}")));
                }
                let sum: f64 = w.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(EnsembleError::InvalidWeights(format!("weights sum to {sum}, not 1")));
                }
                w
            }
        };
        Ok(Self { backends, weights })
    }

    pub fn single(backend: Arc<dyn PredictorBackend>) -> Self {
        Self {
            backends: vec![backend],
            weights: vec![1.0],
        }
    }

    pub fn backends(&self) -> &[Arc<dyn PredictorBackend>] {
        &self.backends
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Add `weight` times the TTA-mean map of `backend` into `acc`.
fn accumulate_tta(
    backend: &dyn PredictorBackend,
    vol: &MultimodalVolume,
    plan: &WindowPlan,
    tta: &TtaConfig,
    workers: usize,
    weight: f64,
    acc: &mut [f64],
) -> Result<(), TileError> {
    let flips = tta.flip_sets();
    let scale = weight / flips.len() as f64;
    for axes in flips {
        debug!("{}: flip {axes}", backend.identity());
        let flipped = vol.flip(axes);
        let map = sliding_window_inference(backend, flipped.grid(), plan, workers)?;
        let map = map.flip(axes);
        for (a, &p) in acc.iter_mut().zip(map.grid().data()) {
            *a += scale * p as f64;
        }
    }
    Ok(())
}

fn finish(vol: &MultimodalVolume, acc: Vec<f64>) -> ProbabilityMap {
    let data = acc.into_iter().map(|v| (v as f32).clamp(0.0, 1.0)).collect();
    let grid = Grid::new(vol.shape(), ProbabilityMap::CHANNELS, data).expect("accumulator sized to volume");
    ProbabilityMap::new(grid).expect("clamped to [0, 1]")
}

/// Sliding-window inference averaged over the configured flip sets.
pub fn infer_tta(
    backend: &dyn PredictorBackend,
    vol: &MultimodalVolume,
    tiler: &TilerConfig,
    tta: &TtaConfig,
    workers: usize,
) -> Result<ProbabilityMap> {
    let plan = WindowPlan::from_config(vol.shape(), tiler)?;
    let mut acc = vec![0.0f64; ProbabilityMap::CHANNELS * vol.shape().voxel_count()];
    accumulate_tta(backend, vol, &plan, tta, workers, 1.0, &mut acc)?;
    Ok(finish(vol, acc))
}

/// Weighted mean of the per-backend TTA maps.
pub fn infer_ensemble(
    cfg: &EnsembleConfig,
    vol: &MultimodalVolume,
    tiler: &TilerConfig,
    tta: &TtaConfig,
    workers: usize,
) -> Result<ProbabilityMap> {
    let plan = WindowPlan::from_config(vol.shape(), tiler)?;
    let mut acc = vec![0.0f64; ProbabilityMap::CHANNELS * vol.shape().voxel_count()];
    for (backend, &w) in cfg.backends.iter().zip(&cfg.weights) {
        if w == 0.0 {
            continue;
        }
        accumulate_tta(backend.as_ref(), vol, &plan, tta, workers, w, &mut acc).map_err(|source| {
            EnsembleError::Backend {
                backend: backend.identity().to_string(),
                source,
            }
        })?;
    }
    Ok(finish(vol, acc))
}
