//! Synthetic multimodal phantoms with analytically known tumors.
//!
//! A phantom is an ellipsoidal "brain" of near-constant tissue intensity with
//! three nested spheres (ET inside TC inside WT) that raise the intensity of
//! the modalities the sphere stub reads, plus optional small bright blobs
//! that are not part of the reference and play the role of false positives.
//! Tumor edges fall off linearly across one voxel so predictions are not
//! purely binary.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::volgrid::{
    nifti::{write_nifti, NiftiData},
    save_labelmap, Affine, GridShape, LabelMap, ModalitySource, MultimodalVolume, VolumeError,
};

const TISSUE: [f32; 4] = [100.0, 110.0, 120.0, 90.0];
const TISSUE_JITTER: f32 = 1.0;
const CONTRAST: f32 = 300.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub center: [f64; 3],
    pub radius: f64,
}

impl Sphere {
    fn distance(&self, p: [usize; 3]) -> f64 {
        (0..3).map(|a| (p[a] as f64 - self.center[a]).powi(2)).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub shape: GridShape,
    pub tumor_center: [f64; 3],
    /// Radii of ET, TC and WT, non-decreasing.
    pub radii: [f64; 3],
    pub blobs: Vec<Sphere>,
    /// Tissue everywhere instead of inside an ellipsoid.
    pub fill: bool,
    pub seed: u64,
}

impl PhantomSpec {
    /// Tumor at a random spot near the middle and `blobs` false-positive
    /// blobs of radius 1.5 (19 voxels) centred on voxels away from the tumor
    /// and each other.
    pub fn random(shape: GridShape, blobs: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = shape.dims().map(|d| d as f64);
        let et = rng.gen_range(4.0..5.5);
        let tc = et + rng.gen_range(1.5..2.5);
        let wt = tc + rng.gen_range(2.5..4.0);
        let tumor_center = dims.map(|d| d / 2.0 + rng.gen_range(-0.08..0.08) * d);
        let spec = Self {
            shape,
            tumor_center,
            radii: [et, tc, wt],
            blobs: Vec::new(),
            fill: false,
            seed,
        };
        let mut placed: Vec<Sphere> = Vec::new();
        let mut attempts = 0;
        while placed.len() < blobs && attempts < 10_000 {
            attempts += 1;
            let c = dims.map(|d| rng.gen_range(0.15 * d..0.85 * d).round());
            let far = |o: [f64; 3], r: f64| (0..3).map(|a| (c[a] - o[a]).powi(2)).sum::<f64>().sqrt() > r;
            let inside = spec.brain_level(c) < 0.85;
            if inside && far(tumor_center, wt + 5.0) && placed.iter().all(|b| far(b.center, 6.0)) {
                placed.push(Sphere {
                    center: c,
                    radius: 1.5,
                });
            }
        }
        Self { blobs: placed, ..spec }
    }

    /// Ellipsoid level set value; below 1 is brain.
    fn brain_level(&self, p: [f64; 3]) -> f64 {
        let dims = self.shape.dims().map(|d| d as f64);
        (0..3)
            .map(|a| ((p[a] - (dims[a] - 1.0) / 2.0) / (0.45 * dims[a])).powi(2))
            .sum()
    }

    fn validate(&self) -> Result<(), VolumeError> {
        let [et, tc, wt] = self.radii;
        if !(0.0 < et && et <= tc && tc <= wt) {
            return Err(VolumeError::Format {
                path: PathBuf::new(),
                reason: format!("phantom radii must satisfy 0 < ET <= TC <= WT, got {:?}", self.radii),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub volume: MultimodalVolume,
    pub reference: LabelMap,
    /// Voxel count of each blob, in spec order.
    pub blob_sizes: Vec<usize>,
    /// Linear indices of all blob voxels.
    pub blob_voxels: Vec<usize>,
}

/// `1` well inside the sphere, `0` well outside, linear across a one-voxel shell.
fn soft(s: &Sphere, p: [usize; 3]) -> f32 {
    (0.5 + (s.radius - s.distance(p))).clamp(0.0, 1.0) as f32
}

pub fn generate(spec: &PhantomSpec) -> Result<Phantom, VolumeError> {
    spec.validate()?;
    let shape = spec.shape;
    let n = shape.voxel_count();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_5eed);
    let sphere = |r: f64| Sphere {
        center: spec.tumor_center,
        radius: r,
    };
    let [et, tc, wt] = spec.radii.map(sphere);
    let mut data = vec![0.0f32; 4 * n];
    let mut labels = vec![0u8; n];
    let mut blob_sizes = vec![0usize; spec.blobs.len()];
    let mut blob_voxels = Vec::new();
    for i in 0..n {
        let p = shape.coords(i);
        let in_brain = spec.fill || spec.brain_level(p.map(|v| v as f64)) < 1.0;
        if !in_brain {
            continue;
        }
        // soft region weights drive the modalities the stub reads
        let (set, stc, swt) = (soft(&et, p), soft(&tc, p), soft(&wt, p));
        let mut blob = 0.0f32;
        for (k, b) in spec.blobs.iter().enumerate() {
            if b.distance(p) <= b.radius {
                blob = 1.0;
                blob_sizes[k] += 1;
                blob_voxels.push(i);
            }
        }
        let signal = [stc, set, swt, swt];
        for c in 0..4 {
            let jitter = rng.gen_range(-TISSUE_JITTER..=TISSUE_JITTER);
            data[c * n + i] = TISSUE[c] + jitter + CONTRAST * signal[c].max(blob);
        }
        labels[i] = if et.distance(p) <= et.radius {
            3
        } else if tc.distance(p) <= tc.radius {
            1
        } else if wt.distance(p) <= wt.radius {
            2
        } else {
            0
        };
    }
    Ok(Phantom {
        volume: MultimodalVolume::from_data(shape, data, Affine::IDENTITY)?,
        reference: LabelMap::new(shape, labels, Affine::IDENTITY)?,
        blob_sizes,
        blob_voxels,
    })
}

/// Write `<dir>/<case_id>/<case_id>-{t1n,t1c,t2w,t2f}.nii.gz` and return the
/// source; the reference goes to `<ref_dir>/<case_id>-seg.nii.gz` when given.
pub fn write_case(
    phantom: &Phantom,
    dir: &Path,
    case_id: &str,
    ref_dir: Option<&Path>,
) -> Result<ModalitySource, VolumeError> {
    let case_dir = dir.join(case_id);
    std::fs::create_dir_all(&case_dir).map_err(|source| VolumeError::IoFailure {
        path: case_dir.clone(),
        source,
    })?;
    let vol = &phantom.volume;
    let mut paths: [PathBuf; 4] = Default::default();
    for (c, suffix) in ["t1n", "t1c", "t2w", "t2f"].iter().enumerate() {
        let path = case_dir.join(format!("{case_id}-{suffix}.nii.gz"));
        write_nifti(&path, vol.shape(), 1, vol.affine(), NiftiData::F32(vol.channel(c)))?;
        paths[c] = path;
    }
    if let Some(r) = ref_dir {
        std::fs::create_dir_all(r).map_err(|source| VolumeError::IoFailure {
            path: r.to_path_buf(),
            source,
        })?;
        save_labelmap(&phantom.reference, &r.join(format!("{case_id}-seg.nii.gz")))?;
    }
    Ok(ModalitySource::Separate(paths))
}
