use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::ensemble::TtaConfig;
use crate::postprocess::PostprocessParams;
use crate::predictor::{BackendConfig, BackendKind};
use crate::tiler::{plan_windows, TilerConfig};
use crate::volgrid::nifti::{is_nifti_path, stem};

pub const DEFAULT_FILENAME: &str = "{case_id}.nii.gz";

/// Where cases come from. Each entry of `cases` is a case directory (four
/// modality files found by suffix) or a 4-volume NIfTI; every subdirectory of
/// `dir` is a case directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    pub dir: Option<PathBuf>,
    pub cases: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Label file name; `{case_id}` is replaced by the case id.
    #[serde(default = "default_filename")]
    pub filename: String,
    /// Also write the restored probability map of each case.
    #[serde(default)]
    pub save_probabilities: bool,
}

fn default_filename() -> String {
    DEFAULT_FILENAME.to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSection {
    pub backends: Vec<BackendConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub input: InputConfig,
    #[serde(default)]
    pub tiler: TilerConfig,
    #[serde(default)]
    pub tta: TtaConfig,
    pub ensemble: EnsembleSection,
    #[serde(default)]
    pub postprocess: PostprocessParams,
    pub output: OutputConfig,
    /// Parallel cases in a batch, and parallel windows within a case.
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_workers() -> usize {
    1
}

/// Set `dotted.key` to `raw` parsed as a TOML value, falling back to a plain
/// string. Numeric segments index into arrays.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<(), PipelineError> {
    let bad = |why: &str| PipelineError::Config(format!("override `{assignment}`: {why}"));
    let (key, raw) = assignment.split_once('=').ok_or_else(|| bad("expected key=value"))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(bad("empty key segment"));
    }
    let mut cur = root;
    for (k, p) in parts.iter().enumerate() {
        let last = k + 1 == parts.len();
        cur = match cur {
            toml::Value::Table(t) => {
                if last {
                    t.insert(p.to_string(), value);
                    return Ok(());
                }
                t.entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            }
            toml::Value::Array(a) => {
                let i: usize = p.parse().map_err(|_| bad("array segment must be an index"))?;
                let slot = a.get_mut(i).ok_or_else(|| bad("array index out of range"))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(bad(&format!("`{p}` is inside a non-table value"))),
        };
    }
    unreachable!("loop returns on the last segment")
}

impl PipelineConfig {
    /// Parse TOML, apply `key=value` overrides, and resolve relative paths
    /// against `base`.
    pub fn from_toml(text: &str, base: &Path, overrides: &[String]) -> Result<Self, PipelineError> {
        let parse = |v: toml::Value| -> Result<PipelineConfig, PipelineError> {
            v.try_into().map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))
        };
        let table: toml::Table = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        let mut cfg = parse(toml::Value::Table(table))?;
        if !overrides.is_empty() {
            // overrides apply to the effective config so defaulted sections can be patched
            let mut root = toml::Value::try_from(&cfg).map_err(|e| PipelineError::Config(e.to_string()))?;
            for o in overrides {
                apply_override(&mut root, o)?;
            }
            cfg = parse(root)?;
        }
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")), overrides)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(d) = &mut self.input.dir {
            fix(d);
        }
        self.input.cases.iter_mut().for_each(fix);
        fix(&mut self.output.dir);
        for b in &mut self.ensemble.backends {
            match &mut b.kind {
                BackendKind::Replay { dir } => fix(dir),
                BackendKind::NnRuntime { model, .. } => fix(model),
                BackendKind::StubSphere { .. } | BackendKind::StubConstant { .. } => {}
            }
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if self.ensemble.backends.is_empty() {
            return bad("ensemble.backends must list at least one backend".into());
        }
        if !self.output.filename.contains("{case_id}") {
            return bad(format!("output.filename `{}` must contain {{case_id}}", self.output.filename));
        }
        self.postprocess.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        plan_windows(self.tiler.patch_shape, self.tiler.patch_shape, self.tiler.overlap)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if let Some(d) = &self.input.dir {
            if !d.is_dir() {
                return bad(format!("input.dir {} is not a directory", d.display()));
            }
        }
        for c in &self.input.cases {
            if !c.exists() {
                return bad(format!("input case {} does not exist", c.display()));
            }
        }
        Ok(())
    }

    /// SHA-256 of the effective configuration's canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn label_filename(&self, case_id: &str) -> String {
        self.output.filename.replace("{case_id}", case_id)
    }
}

/// How one case's scans are stored.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseSource {
    Dir(PathBuf),
    Stacked(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseInput {
    pub id: String,
    pub source: CaseSource,
}

impl CaseInput {
    pub fn from_path(path: &Path) -> Self {
        if path.is_file() && is_nifti_path(path) {
            CaseInput {
                id: stem(path),
                source: CaseSource::Stacked(path.to_path_buf()),
            }
        } else {
            CaseInput {
                id: path
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| path.display().to_string()),
                source: CaseSource::Dir(path.to_path_buf()),
            }
        }
    }
}

/// Explicit cases first, then the subdirectories of `input.dir` in name order.
pub fn collect_cases(input: &InputConfig) -> Result<Vec<CaseInput>, PipelineError> {
    let mut out: Vec<CaseInput> = input.cases.iter().map(|p| CaseInput::from_path(p)).collect();
    if let Some(dir) = &input.dir {
        let entries = std::fs::read_dir(dir).map_err(|source| PipelineError::Io {
            path: dir.clone(),
            source,
        })?;
        let mut subdirs: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        subdirs.sort();
        out.extend(subdirs.iter().map(|p| CaseInput::from_path(p)));
    }
    let mut ids: Vec<&str> = out.iter().map(|c| c.id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(PipelineError::Config(format!("duplicate case id {}", w[0])));
    }
    Ok(out)
}
