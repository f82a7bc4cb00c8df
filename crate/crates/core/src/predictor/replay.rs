use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use byteorder::{ByteOrder, LittleEndian};
use sha2::{Digest, Sha256};

use super::{predict_patch, PatchSpec, PredictError, PredictorBackend, Result};
use crate::volgrid::probfile;
use crate::volgrid::{Affine, Grid};

const EXTENSION: &str = "tsg";

/// SHA-256 over the patch geometry and its little-endian `f32` payload.
pub fn patch_hash(patch: &Grid<f32>) -> String {
    let mut h = Sha256::new();
    for d in patch.shape().dims() {
        h.update((d as u64).to_le_bytes());
    }
    h.update((patch.channels() as u64).to_le_bytes());
    let mut buf = vec![0u8; patch.data().len() * 4];
    LittleEndian::write_f32_into(patch.data(), &mut buf);
    h.update(&buf);
    hex::encode(h.finalize())
}

/// Answers from outputs recorded earlier, keyed by input content hash, so
/// golden tests do not depend on the order windows are visited in.
pub struct ReplayBackend {
    identity: String,
    spec: PatchSpec,
    dir: PathBuf,
    index: OnceLock<std::result::Result<HashMap<String, PathBuf>, String>>,
    max_concurrency: usize,
}

impl ReplayBackend {
    pub fn open(identity: impl Into<String>, spec: PatchSpec, dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(PredictError::ConfigInvalid(format!(
                "replay directory {} does not exist",
                dir.display()
            )));
        }
        Ok(Self {
            identity: identity.into(),
            spec,
            dir: dir.to_path_buf(),
            index: OnceLock::new(),
            max_concurrency: usize::MAX,
        })
    }

    pub fn with_max_concurrency(mut self, limit: Option<usize>) -> Self {
        self.max_concurrency = limit.unwrap_or(usize::MAX);
        self
    }

    fn index(&self) -> Result<&HashMap<String, PathBuf>> {
        let load_err = |message: String| PredictError::ModelLoadFailure {
            backend: self.identity.clone(),
            message,
        };
        let index = self
            .index
            .get_or_init(|| {
                let entries = std::fs::read_dir(&self.dir).map_err(|e| e.to_string())?;
                let mut map = HashMap::new();
                for entry in entries {
                    let path = entry.map_err(|e| e.to_string())?.path();
                    if path.extension().is_some_and(|e| e == EXTENSION) {
                        if let Some(stem) = path.file_stem() {
                            map.insert(stem.to_string_lossy().into_owned(), path);
                        }
                    }
                }
                Ok(map)
            })
            .as_ref()
            .map_err(|e| load_err(e.clone()))?;
        if index.is_empty() {
            return Err(load_err(format!(
                "no recordings in {}",
                self.dir.display()
            )));
        }
        Ok(index)
    }
}

impl PredictorBackend for ReplayBackend {
    fn identity(&self) -> &str {
        &self.identity
    }

    fn spec(&self) -> &PatchSpec {
        &self.spec
    }

    fn max_concurrency(&self) -> usize {
        self.max_concurrency
    }

    fn predict(&self, patch: &Grid<f32>) -> Result<Grid<f32>> {
        let key = patch_hash(patch);
        let path = self.index()?.get(&key).ok_or_else(|| PredictError::BackendFailure {
            backend: self.identity.clone(),
            message: format!("no recording for patch {key}"),
        })?;
        let (grid, _) = probfile::read_grid(path).map_err(|e| PredictError::BackendFailure {
            backend: self.identity.clone(),
            message: e.to_string(),
        })?;
        Ok(grid)
    }
}

/// Passes calls through to another backend and stores every output under
/// the input's hash, producing a directory [`ReplayBackend`] can serve.
pub struct RecordingBackend {
    inner: Arc<dyn PredictorBackend>,
    dir: PathBuf,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn PredictorBackend>, dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| {
            PredictError::ConfigInvalid(format!("cannot create {}: {e}", dir.display()))
        })?;
        Ok(Self {
            inner,
            dir: dir.to_path_buf(),
        })
    }
}

impl PredictorBackend for RecordingBackend {
    fn identity(&self) -> &str {
        self.inner.identity()
    }

    fn spec(&self) -> &PatchSpec {
        self.inner.spec()
    }

    fn max_concurrency(&self) -> usize {
        self.inner.max_concurrency()
    }

    fn predict(&self, patch: &Grid<f32>) -> Result<Grid<f32>> {
        let out = predict_patch(self.inner.as_ref(), patch)?.into_grid();
        let key = patch_hash(patch);
        let fail = |e: String| PredictError::BackendFailure {
            backend: self.identity().to_string(),
            message: format!("recording {key}: {e}"),
        };
        // write-then-rename so concurrent readers never see a partial file
        let tmp = self.dir.join(format!("{key}.{}.partial", std::process::id()));
        probfile::write_grid(&tmp, &out, &Affine::IDENTITY).map_err(|e| fail(e.to_string()))?;
        std::fs::rename(&tmp, self.dir.join(format!("{key}.{EXTENSION}")))
            .map_err(|e| fail(e.to_string()))?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{predict_patch, ConstantBackend};
    use super::*;
    use crate::volgrid::GridShape;

    fn spec() -> PatchSpec {
        PatchSpec::new(GridShape::new(3, 4, 5).unwrap())
    }

    /// Deterministic but input-dependent output.
    struct Hashy(PatchSpec);

    impl PredictorBackend for Hashy {
        fn identity(&self) -> &str {
            "hashy"
        }
        fn spec(&self) -> &PatchSpec {
            &self.0
        }
        fn predict(&self, patch: &Grid<f32>) -> Result<Grid<f32>> {
            let n = patch.shape().voxel_count();
            let data = (0..3 * n)
                .map(|i| ((patch.data()[i % n] * 31.0 + i as f32).sin() + 1.0) / 2.0)
                .collect();
            Ok(Grid::new(patch.shape(), 3, data).unwrap())
        }
    }

    fn patch(seed: f32) -> Grid<f32> {
        let s = spec().patch_shape;
        Grid::new(s, 4, (0..4 * s.voxel_count()).map(|i| (i as f32 * seed).cos()).collect()).unwrap()
    }

    #[test]
    fn record_then_replay_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let rec = RecordingBackend::new(Arc::new(Hashy(spec())), dir.path()).unwrap();
        let patches: Vec<_> = [0.1, 0.2, 0.3].map(patch).into();
        let recorded: Vec<_> = patches.iter().map(|p| predict_patch(&rec, p).unwrap()).collect();
        let replay = ReplayBackend::open("r", spec(), dir.path()).unwrap();
        // reverse order: lookups are by content, not sequence
        for (p, want) in patches.iter().zip(&recorded).rev() {
            let got = predict_patch(&replay, p).unwrap();
            assert_eq!(&got, want);
        }
        let unseen = predict_patch(&replay, &patch(0.9));
        assert!(matches!(unseen, Err(PredictError::BackendFailure { .. })));
    }

    #[test]
    fn empty_directory_fails_on_first_predict() {
        let dir = tempfile::tempdir().unwrap();
        let replay = ReplayBackend::open("r", spec(), dir.path()).unwrap();
        assert!(matches!(
            predict_patch(&replay, &patch(0.1)),
            Err(PredictError::ModelLoadFailure { .. })
        ));
        assert!(matches!(
            ReplayBackend::open("r", spec(), &dir.path().join("nope")),
            Err(PredictError::ConfigInvalid(_))
        ));
    }

    #[test]
    fn hash_depends_on_content_and_shape() {
        let a = patch(0.1);
        assert_eq!(patch_hash(&a), patch_hash(&a.clone()));
        assert_ne!(patch_hash(&a), patch_hash(&patch(0.2)));
        let flat = Grid::new(GridShape::new(5, 4, 3).unwrap(), 4, a.data().to_vec()).unwrap();
        assert_ne!(patch_hash(&a), patch_hash(&flat));
        let c = ConstantBackend::new("c", spec(), 0.5).unwrap();
        assert_eq!(c.identity(), "c");
    }
}
