//! Model backends: anything that turns a 4-channel input patch into a
//! 3-channel (TC, WT, ET) probability patch.
//!
//! Backends emit probabilities in `[0, 1]`; any sigmoid lives inside the
//! backend. Patches use the crate's canonical channel-major layout, which is
//! the NCDHW order `[channel][z][y][x]` most runtimes expect.

mod replay;
mod stub;
#[cfg(feature = "onnx")]
mod onnx;

pub use replay::{patch_hash, RecordingBackend, ReplayBackend};
pub use stub::{ConstantBackend, RampRule, SphereStubBackend};

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volgrid::{Grid, GridShape, MultimodalVolume, ProbabilityMap, VolumeError};

pub const DEFAULT_PATCH: usize = 128;

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("backend {backend} failed: {message}")]
    BackendFailure { backend: String, message: String },
    #[error("patch shape mismatch: expected {expected_channels} x {expected}, got {actual_channels} x {actual}")]
    ShapeMismatch {
        expected: GridShape,
        expected_channels: usize,
        actual: GridShape,
        actual_channels: usize,
    },
    #[error("could not load model for backend {backend}: {message}")]
    ModelLoadFailure { backend: String, message: String },
    #[error("invalid backend configuration: {0}")]
    ConfigInvalid(String),
}

pub type Result<T, E = PredictError> = std::result::Result<T, E>;

/// Patch geometry a backend accepts and produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub patch_shape: GridShape,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl PatchSpec {
    pub fn new(patch_shape: GridShape) -> Self {
        Self {
            patch_shape,
            in_channels: MultimodalVolume::CHANNELS,
            out_channels: ProbabilityMap::CHANNELS,
        }
    }
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self::new(GridShape::cube(DEFAULT_PATCH).expect("valid default patch"))
    }
}

pub trait PredictorBackend: Send + Sync {
    /// Model name or fold id, used in logs and error messages.
    fn identity(&self) -> &str;

    fn spec(&self) -> &PatchSpec;

    /// How many patches may be in flight at once; `1` means calls are serialized.
    fn max_concurrency(&self) -> usize {
        usize::MAX
    }

    /// Run the model on one validated patch. Use [`predict_patch`] to call it.
    fn predict(&self, patch: &Grid<f32>) -> Result<Grid<f32>>;
}

/// Validate the patch, run the backend and validate its output.
pub fn predict_patch(backend: &dyn PredictorBackend, patch: &Grid<f32>) -> Result<ProbabilityMap> {
    let spec = backend.spec();
    if patch.shape() != spec.patch_shape || patch.channels() != spec.in_channels {
        return Err(PredictError::ShapeMismatch {
            expected: spec.patch_shape,
            expected_channels: spec.in_channels,
            actual: patch.shape(),
            actual_channels: patch.channels(),
        });
    }
    let out = backend.predict(patch)?;
    if out.shape() != patch.shape() || out.channels() != spec.out_channels {
        return Err(PredictError::BackendFailure {
            backend: backend.identity().to_string(),
            message: format!(
                "returned {} x {} for a {} input",
                out.channels(),
                out.shape(),
                patch.shape()
            ),
        });
    }
    ProbabilityMap::new(out).map_err(|e| PredictError::BackendFailure {
        backend: backend.identity().to_string(),
        message: match e {
            VolumeError::ProbabilityOutOfRange { .. } => format!("output is not a probability: {e}"),
            other => other.to_string(),
        },
    })
}

/// Backend block of the pipeline configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    /// Identity reported in manifests; defaults to the kind name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_concurrency: Option<usize>,
    #[serde(flatten)]
    pub kind: BackendKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackendKind {
    StubSphere {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rules: Option<[RampRule; 3]>,
    },
    StubConstant {
        value: f32,
    },
    Replay {
        dir: PathBuf,
    },
    NnRuntime {
        model: PathBuf,
        /// Set when the network emits logits.
        #[serde(default)]
        apply_sigmoid: bool,
    },
}

impl BackendKind {
    pub fn name(&self) -> &'static str {
        match self {
            BackendKind::StubSphere { .. } => "stub-sphere",
            BackendKind::StubConstant { .. } => "stub-constant",
            BackendKind::Replay { .. } => "replay",
            BackendKind::NnRuntime { .. } => "nn-runtime",
        }
    }
}

pub fn load_backend(config: &BackendConfig, spec: PatchSpec) -> Result<Arc<dyn PredictorBackend>> {
    let identity = config
        .name
        .clone()
        .unwrap_or_else(|| config.kind.name().to_string());
    if config.max_concurrency == Some(0) {
        return Err(PredictError::ConfigInvalid(
            "max_concurrency must be at least 1".into(),
        ));
    }
    let backend: Arc<dyn PredictorBackend> = match &config.kind {
        BackendKind::StubSphere { rules } => {
            let rules = rules.unwrap_or_else(SphereStubBackend::default_rules);
            Arc::new(
                SphereStubBackend::new(identity, spec, rules)?
                    .with_max_concurrency(config.max_concurrency),
            )
        }
        BackendKind::StubConstant { value } => Arc::new(
            ConstantBackend::new(identity, spec, *value)?.with_max_concurrency(config.max_concurrency),
        ),
        BackendKind::Replay { dir } => Arc::new(
            ReplayBackend::open(identity, spec, dir)?.with_max_concurrency(config.max_concurrency),
        ),
        #[cfg(feature = "onnx")]
        BackendKind::NnRuntime {
            model,
            apply_sigmoid,
        } => Arc::new(onnx::OnnxBackend::load(
            identity,
            spec,
            model,
            *apply_sigmoid,
            config.max_concurrency,
        )?),
        #[cfg(not(feature = "onnx"))]
        BackendKind::NnRuntime { .. } => {
            return Err(PredictError::ConfigInvalid(
                "nn-runtime backends need the `onnx` build feature".into(),
            ))
        }
    };
    Ok(backend)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(kind: BackendKind) -> BackendConfig {
        BackendConfig {
            name: None,
            max_concurrency: None,
            kind,
        }
    }

    fn small_spec() -> PatchSpec {
        PatchSpec::new(GridShape::cube(4).unwrap())
    }

    #[test]
    fn constant_out_of_range_is_config_error() {
        let r = load_backend(&cfg(BackendKind::StubConstant { value: 1.5 }), small_spec());
        assert!(matches!(r, Err(PredictError::ConfigInvalid(_))));
    }

    #[test]
    fn shape_checked_before_predicting() {
        let b = load_backend(&cfg(BackendKind::StubConstant { value: 0.7 }), small_spec()).unwrap();
        let wrong = Grid::filled(GridShape::cube(5).unwrap(), 4, 0.0f32);
        assert!(matches!(predict_patch(b.as_ref(), &wrong), Err(PredictError::ShapeMismatch { .. })));
        let three = Grid::filled(GridShape::cube(4).unwrap(), 3, 0.0f32);
        assert!(matches!(predict_patch(b.as_ref(), &three), Err(PredictError::ShapeMismatch { .. })));
    }

    struct Broken(PatchSpec);

    impl PredictorBackend for Broken {
        fn identity(&self) -> &str {
            "broken"
        }
        fn spec(&self) -> &PatchSpec {
            &self.0
        }
        fn predict(&self, patch: &Grid<f32>) -> Result<Grid<f32>> {
            Ok(Grid::filled(patch.shape(), 3, 2.0))
        }
    }

    #[test]
    fn out_of_range_output_is_backend_failure() {
        let b = Broken(small_spec());
        let patch = Grid::filled(GridShape::cube(4).unwrap(), 4, 0.0f32);
        let err = predict_patch(&b, &patch).unwrap_err();
        assert!(matches!(err, PredictError::BackendFailure { ref backend, .. } if backend == "broken"));
    }

    #[test]
    fn config_parses_from_toml() {
        let c: BackendConfig = toml::from_str(
            r#"
            kind = "stub-constant"
            value = 0.25
            max_concurrency = 2
            name = "fold0"
            "#,
        )
        .unwrap();
        assert_eq!(c.kind, BackendKind::StubConstant { value: 0.25 });
        assert_eq!(c.max_concurrency, Some(2));
        let b = load_backend(&c, small_spec()).unwrap();
        assert_eq!(b.identity(), "fold0");
        assert_eq!(b.max_concurrency(), 2);

        let s: BackendConfig = toml::from_str(r#"kind = "stub-sphere""#).unwrap();
        assert_eq!(load_backend(&s, small_spec()).unwrap().identity(), "stub-sphere");
        assert!(toml::from_str::<BackendConfig>(r#"kind = "mystery""#).is_err());
    }

    #[cfg(not(feature = "onnx"))]
    #[test]
    fn nn_runtime_requires_feature() {
        let c = cfg(BackendKind::NnRuntime {
            model: "model.onnx".into(),
            apply_sigmoid: false,
        });
        assert!(matches!(load_backend(&c, small_spec()), Err(PredictError::ConfigInvalid(_))));
    }
}
