//! End-to-end case runner: load, crop, normalize, ensemble/TTA inference,
//! postprocess, restore to the original geometry, save.

mod config;
pub mod overlay;

pub use config::{
    apply_override, collect_cases, CaseInput, CaseSource, EnsembleSection, InputConfig, OutputConfig, PipelineConfig,
    DEFAULT_FILENAME,
};

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::{infer_ensemble, EnsembleConfig};
use crate::postprocess::{postprocess, write_component_report, Channel, ComponentRecord};
use crate::predictor::{load_backend, PatchSpec, PredictorBackend};
use crate::preprocess::{self, ForegroundMask, NormalizationStats};
use crate::tiler::WindowPlan;
use crate::volgrid::probfile::save_probability_map;
use crate::volgrid::{load_volume, save_labelmap, Affine, CropBox, GridShape, LabelMap, ModalitySource, MultimodalVolume, ProbabilityMap};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("case {case_id} failed at stage {stage}: {message}")]
    Stage {
        case_id: String,
        stage: Stage,
        message: String,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Load,
    Crop,
    Normalize,
    Infer,
    Postprocess,
    Restore,
    Save,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Load,
        Stage::Crop,
        Stage::Normalize,
        Stage::Infer,
        Stage::Postprocess,
        Stage::Restore,
        Stage::Save,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Load => "load",
            Stage::Crop => "crop",
            Stage::Normalize => "normalize",
            Stage::Infer => "infer",
            Stage::Postprocess => "postprocess",
            Stage::Restore => "restore",
            Stage::Save => "save",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: Stage,
    pub message: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSummary {
    pub channel: Channel,
    pub components: usize,
    pub kept: usize,
    pub removed_voxels: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CaseOutputs {
    pub labels: Option<PathBuf>,
    pub probabilities: Option<PathBuf>,
    pub components: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseManifest {
    pub case_id: String,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<StageFailure>,
    pub config_hash: String,
    pub timings_ms: Vec<StageTiming>,
    pub original_shape: Option<GridShape>,
    pub crop_box: Option<CropBox>,
    /// Windows in one sliding-window pass over the cropped volume.
    pub window_count: usize,
    /// Sliding-window passes: flip variants times backends.
    pub passes: usize,
    pub components: Vec<ChannelSummary>,
    pub outputs: CaseOutputs,
}

impl CaseManifest {
    fn new(case_id: &str, config_hash: &str) -> Self {
        Self {
            case_id: case_id.to_string(),
            ok: false,
            failure: None,
            config_hash: config_hash.to_string(),
            timings_ms: Vec::new(),
            original_shape: None,
            crop_box: None,
            window_count: 0,
            passes: 0,
            components: Vec::new(),
            outputs: CaseOutputs::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedCase {
    pub case_id: String,
    pub stage: Stage,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub config_hash: String,
    pub cases: usize,
    pub succeeded: usize,
    pub failed: Vec<FailedCase>,
    /// Mean over successful cases.
    pub mean_timings_ms: Vec<StageTiming>,
    pub manifests: Vec<CaseManifest>,
}

impl BatchReport {
    /// 0 when every case succeeded, 2 when some failed, 1 when all failed.
    pub fn exit_code(&self) -> i32 {
        match (self.succeeded, self.failed.len()) {
            (_, 0) => 0,
            (0, _) => 1,
            _ => 2,
        }
    }
}

/// Stage outputs up to and including normalization.
pub struct Prepared {
    pub original_shape: GridShape,
    pub original_affine: Affine,
    pub crop_box: CropBox,
    pub volume: MultimodalVolume,
    pub stats: NormalizationStats,
}

/// Ensemble probability map on the cropped grid.
pub struct Inference {
    pub prepared: Prepared,
    pub probabilities: ProbabilityMap,
    pub window_count: usize,
    pub passes: usize,
}

struct Timer<'a> {
    timings: &'a mut Vec<StageTiming>,
}

impl Timer<'_> {
    fn run<T, E: std::fmt::Display>(&mut self, stage: Stage, f: impl FnOnce() -> Result<T, E>) -> Result<T, StageFailure> {
        let t0 = Instant::now();
        let out = f();
        self.timings.push(StageTiming {
            stage,
            ms: t0.elapsed().as_secs_f64() * 1e3,
        });
        out.map_err(|e| StageFailure {
            stage,
            message: e.to_string(),
        })
    }
}

pub fn load_case(case: &CaseInput) -> Result<MultimodalVolume, crate::volgrid::VolumeError> {
    let source = match &case.source {
        CaseSource::Dir(d) => ModalitySource::discover(d)?,
        CaseSource::Stacked(p) => ModalitySource::Stacked(p.clone()),
    };
    load_volume(&source)
}

/// Configuration plus loaded backends.
pub struct Pipeline {
    cfg: PipelineConfig,
    ensemble: EnsembleConfig,
    hash: String,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let spec = PatchSpec::new(cfg.tiler.patch_shape);
        let backends = cfg
            .ensemble
            .backends
            .iter()
            .map(|b| load_backend(b, spec.clone()))
            .collect::<Result<Vec<Arc<dyn PredictorBackend>>, _>>()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let ensemble = EnsembleConfig::new(backends, cfg.ensemble.weights.clone())
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let hash = cfg.hash();
        Ok(Self { cfg, ensemble, hash })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn cases(&self) -> Result<Vec<CaseInput>, PipelineError> {
        collect_cases(&self.cfg.input)
    }

    fn prepare(&self, vol: MultimodalVolume, timer: &mut Timer) -> Result<Prepared, StageFailure> {
        let (original_shape, original_affine) = (vol.shape(), *vol.affine());
        let (crop_box, cropped, mask) = timer.run(Stage::Crop, || {
            let mask = ForegroundMask::from_volume(&vol);
            let crop_box = mask.bounding_box().ok_or(preprocess::PreprocessError::EmptyForeground)?;
            let cropped = preprocess::crop(&vol, &crop_box)?;
            let mask = mask.crop(&crop_box)?;
            Ok::<_, preprocess::PreprocessError>((crop_box, cropped, mask))
        })?;
        let normalized = timer.run(Stage::Normalize, || preprocess::normalize_with_mask(&cropped, mask))?;
        Ok(Prepared {
            original_shape,
            original_affine,
            crop_box,
            volume: normalized.volume,
            stats: normalized.stats,
        })
    }

    fn infer_prepared(&self, prepared: Prepared, timer: &mut Timer) -> Result<Inference, StageFailure> {
        let cfg = &self.cfg;
        let (probabilities, window_count) = timer.run(Stage::Infer, || {
            let plan = WindowPlan::from_config(prepared.volume.shape(), &cfg.tiler)?;
            let map = infer_ensemble(&self.ensemble, &prepared.volume, &cfg.tiler, &cfg.tta, cfg.workers)?;
            Ok::<_, crate::ensemble::EnsembleError>((map, plan.window_count()))
        })?;
        Ok(Inference {
            prepared,
            probabilities,
            window_count,
            passes: cfg.tta.flip_sets().len() * self.ensemble.backends().len(),
        })
    }

    /// Load, crop, normalize, infer.
    pub fn infer_case(&self, case: &CaseInput, timings: &mut Vec<StageTiming>) -> Result<Inference, StageFailure> {
        let mut timer = Timer { timings };
        let vol = timer.run(Stage::Load, || load_case(case))?;
        let prepared = self.prepare(vol, &mut timer)?;
        self.infer_prepared(prepared, &mut timer)
    }

    fn write_manifest(&self, manifest: &mut CaseManifest) {
        let dir = &self.cfg.output.dir;
        let path = dir.join(format!("{}_manifest.json", manifest.case_id));
        manifest.outputs.manifest = Some(path.clone());
        let written = std::fs::create_dir_all(dir).and_then(|_| {
            std::fs::write(&path, serde_json::to_string_pretty(&*manifest).expect("manifest serializes") + "\n")
        });
        if let Err(e) = written {
            warn!("cannot write manifest {}: {e}", path.display());
            manifest.outputs.manifest = None;
        }
    }

    /// Run every stage for one case. Failures are reported in the manifest,
    /// which is written next to the outputs either way.
    pub fn run_case(&self, case: &CaseInput) -> CaseManifest {
        let mut manifest = CaseManifest::new(&case.id, &self.hash);
        let mut timings = Vec::new();
        let result = self.run_stages(case, &mut manifest, &mut timings);
        manifest.timings_ms = timings;
        match result {
            Ok(()) => {
                manifest.ok = true;
                info!("{}: done", case.id);
            }
            Err(f) => {
                warn!("{}: failed at {}: {}", case.id, f.stage, f.message);
                manifest.failure = Some(f);
            }
        }
        self.write_manifest(&mut manifest);
        manifest
    }

    fn run_stages(&self, case: &CaseInput, manifest: &mut CaseManifest, timings: &mut Vec<StageTiming>) -> Result<(), StageFailure> {
        let inference = self.infer_case(case, timings)?;
        let mut timer = Timer { timings };
        let prepared = &inference.prepared;
        manifest.original_shape = Some(prepared.original_shape);
        manifest.crop_box = Some(prepared.crop_box);
        manifest.window_count = inference.window_count;
        manifest.passes = inference.passes;

        let cropped_affine = prepared.original_affine.shifted(prepared.crop_box.lo.map(|v| v as i64));
        let (labels, records) = timer.run(Stage::Postprocess, || {
            postprocess(&inference.probabilities, &self.cfg.postprocess, cropped_affine)
        })?;
        manifest.components = summarize_components(&records);

        let (labels, probabilities) = timer.run(Stage::Restore, || {
            let labels = preprocess::restore(&labels, &prepared.crop_box)?;
            let probs = if self.cfg.output.save_probabilities {
                Some(inference.probabilities.restore(&prepared.crop_box)?)
            } else {
                None
            };
            Ok::<_, preprocess::PreprocessError>((labels, probs))
        })?;

        let outputs = timer.run(Stage::Save, || self.save(&case.id, &labels, probabilities.as_ref(), &prepared.original_affine, &records))?;
        manifest.outputs = outputs;
        Ok(())
    }

    fn save(
        &self,
        case_id: &str,
        labels: &LabelMap,
        probabilities: Option<&ProbabilityMap>,
        affine: &Affine,
        records: &[ComponentRecord],
    ) -> Result<CaseOutputs, String> {
        let dir = &self.cfg.output.dir;
        std::fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
        let label_path = dir.join(self.cfg.label_filename(case_id));
        save_labelmap(labels, &label_path).map_err(|e| e.to_string())?;
        let comp_path = dir.join(format!("{case_id}_components.jsonl"));
        write_component_report(&comp_path, records).map_err(|e| e.to_string())?;
        let prob_path = match probabilities {
            Some(p) => {
                let path = dir.join(format!("{case_id}_prob.tsg"));
                save_probability_map(&path, p, affine).map_err(|e| e.to_string())?;
                Some(path)
            }
            None => None,
        };
        Ok(CaseOutputs {
            labels: Some(label_path),
            probabilities: prob_path,
            components: Some(comp_path),
            manifest: None,
        })
    }

    /// Process cases on a pool of `workers` threads and write
    /// `batch_report.json` to the output directory.
    pub fn run_batch(&self, cases: &[CaseInput]) -> Result<BatchReport, PipelineError> {
        if cases.is_empty() {
            return Err(PipelineError::Usage("no cases to process".into()));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.workers)
            .build()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let manifests: Vec<CaseManifest> = pool.install(|| cases.par_iter().map(|c| self.run_case(c)).collect());
        let report = batch_report(&self.hash, manifests);
        let path = self.cfg.output.dir.join("batch_report.json");
        std::fs::create_dir_all(&self.cfg.output.dir)
            .and_then(|_| std::fs::write(&path, serde_json::to_string_pretty(&report).expect("report serializes") + "\n"))
            .map_err(|source| PipelineError::Io { path, source })?;
        Ok(report)
    }
}

fn summarize_components(records: &[ComponentRecord]) -> Vec<ChannelSummary> {
    Channel::ALL
        .iter()
        .map(|&c| {
            let of: Vec<_> = records.iter().filter(|r| r.channel == c).collect();
            ChannelSummary {
                channel: c,
                components: of.len(),
                kept: of.iter().filter(|r| r.kept).count(),
                removed_voxels: of.iter().filter(|r| !r.kept).map(|r| r.size).sum(),
            }
        })
        .collect()
}

pub fn batch_report(config_hash: &str, manifests: Vec<CaseManifest>) -> BatchReport {
    let ok: Vec<&CaseManifest> = manifests.iter().filter(|m| m.ok).collect();
    let mean_timings_ms = Stage::ALL
        .iter()
        .map(|&stage| {
            let v: Vec<f64> = ok
                .iter()
                .filter_map(|m| m.timings_ms.iter().find(|t| t.stage == stage).map(|t| t.ms))
                .collect();
            StageTiming {
                stage,
                ms: if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 },
            }
        })
        .collect();
    let failed = manifests
        .iter()
        .filter_map(|m| {
            m.failure.as_ref().map(|f| FailedCase {
                case_id: m.case_id.clone(),
                stage: f.stage,
                error: f.message.clone(),
            })
        })
        .collect();
    BatchReport {
        config_hash: config_hash.to_string(),
        cases: manifests.len(),
        succeeded: ok.len(),
        failed,
        mean_timings_ms,
        manifests,
    }
}

/// Output path of a case's label file.
pub fn label_path(cfg: &PipelineConfig, case_id: &str) -> PathBuf {
    cfg.output.dir.join(cfg.label_filename(case_id))
}

