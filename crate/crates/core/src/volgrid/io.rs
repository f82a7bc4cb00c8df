use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::nifti::{self, NiftiData};
use super::{
    Affine, Grid, GridShape, LabelMap, MultimodalVolume, Result, VolumeError, AFFINE_TOLERANCE,
    MODALITY_NAMES,
};

/// File-name suffixes recognised for each modality, in channel order. Both
/// the current (`-t1n`) and the older (`_t1ce`) BraTS naming are accepted.
const MODALITY_SUFFIXES: [&[&str]; 4] = [
    &["-t1n", "_t1n", "_t1"],
    &["-t1c", "_t1c", "_t1ce", "_t1gd"],
    &["-t2w", "_t2w", "_t2"],
    &["-t2f", "_t2f", "_flair"],
];

/// Where the four modalities of a case come from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalitySource {
    /// One single-channel file per modality, in T1, T1Gd, T2, T2-FLAIR order.
    Separate([PathBuf; 4]),
    /// One file whose fourth axis holds the four modalities.
    Stacked(PathBuf),
}

impl ModalitySource {
    /// Find the modality files of a case directory by their name suffix.
    pub fn discover(dir: &Path) -> Result<Self> {
        let entries = std::fs::read_dir(dir).map_err(|source| VolumeError::IoFailure {
            path: dir.to_path_buf(),
            source,
        })?;
        let mut files: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| nifti::is_nifti_path(p))
            .collect();
        files.sort();
        let mut found: [Option<PathBuf>; 4] = Default::default();
        for path in files {
            let stem = nifti::stem(&path).to_ascii_lowercase();
            if let Some(m) = MODALITY_SUFFIXES
                .iter()
                .position(|sfx| sfx.iter().any(|s| stem.ends_with(s)))
            {
                found[m].get_or_insert(path);
            }
        }
        let mut paths: Vec<PathBuf> = Vec::with_capacity(4);
        for (m, p) in found.into_iter().enumerate() {
            match p {
                Some(p) => paths.push(p),
                None => {
                    return Err(VolumeError::MissingModality(format!(
                        "{} (no file ending in {:?} under {})",
                        MODALITY_NAMES[m],
                        MODALITY_SUFFIXES[m],
                        dir.display()
                    )))
                }
            }
        }
        Ok(Self::Separate(paths.try_into().expect("four paths")))
    }

    pub fn paths(&self) -> Vec<&Path> {
        match self {
            Self::Separate(p) => p.iter().map(PathBuf::as_path).collect(),
            Self::Stacked(p) => vec![p.as_path()],
        }
    }
}

/// Load and validate a four-channel scan.
pub fn load_volume(source: &ModalitySource) -> Result<MultimodalVolume> {
    for (m, p) in source.paths().into_iter().enumerate() {
        if !p.is_file() {
            let name = match source {
                ModalitySource::Separate(_) => MODALITY_NAMES[m].to_string(),
                ModalitySource::Stacked(_) => "stack".to_string(),
            };
            return Err(VolumeError::MissingModality(format!(
                "{name}: {} does not exist",
                p.display()
            )));
        }
    }
    match source {
        ModalitySource::Stacked(path) => {
            let img = nifti::read_nifti(path)?;
            if img.volumes != MultimodalVolume::CHANNELS {
                return Err(VolumeError::MissingModality(format!(
                    "{} holds {} volumes, expected 4",
                    path.display(),
                    img.volumes
                )));
            }
            MultimodalVolume::new(Grid::new(img.shape, 4, img.data)?, img.affine)
        }
        ModalitySource::Separate(paths) => {
            let mut data = Vec::new();
            let mut reference: Option<(GridShape, Affine)> = None;
            for (m, path) in paths.iter().enumerate() {
                let img = nifti::read_nifti(path)?;
                if img.volumes != 1 {
                    return Err(VolumeError::Format {
                        path: path.clone(),
                        reason: format!(
                            "{} must be single-channel, found {} volumes",
                            MODALITY_NAMES[m], img.volumes
                        ),
                    });
                }
                match &reference {
                    None => {
                        data.reserve(img.shape.voxel_count() * 4);
                        reference = Some((img.shape, img.affine));
                    }
                    Some((shape, affine)) => {
                        if img.shape != *shape {
                            return Err(VolumeError::ShapeMismatch {
                                expected: *shape,
                                actual: img.shape,
                                context: format!("{} ({})", MODALITY_NAMES[m], path.display()),
                            });
                        }
                        let delta = affine.max_abs_diff(&img.affine);
                        if delta > AFFINE_TOLERANCE {
                            return Err(VolumeError::AffineMismatch {
                                path: path.clone(),
                                max_delta: delta,
                            });
                        }
                    }
                }
                data.extend_from_slice(&img.data);
            }
            let (shape, affine) = reference.expect("four modalities read");
            MultimodalVolume::new(Grid::new(shape, 4, data)?, affine)
        }
    }
}

/// Write a scan as one four-volume float NIfTI.
pub fn save_volume(volume: &MultimodalVolume, path: &Path) -> Result<()> {
    nifti::write_nifti(
        path,
        volume.shape(),
        MultimodalVolume::CHANNELS,
        volume.affine(),
        NiftiData::F32(volume.grid().data()),
    )
}

/// Write labels as unsigned 8-bit NIfTI.
pub fn save_labelmap(map: &LabelMap, path: &Path) -> Result<()> {
    nifti::write_nifti(path, map.shape(), 1, map.affine(), NiftiData::U8(map.data()))
}

/// Read a label file of any supported datatype; values must be integers 0..=3.
pub fn load_labelmap(path: &Path) -> Result<LabelMap> {
    let img = nifti::read_nifti(path)?;
    if img.volumes != 1 {
        return Err(VolumeError::Format {
            path: path.to_path_buf(),
            reason: format!("label map has {} volumes", img.volumes),
        });
    }
    let mut labels = Vec::with_capacity(img.data.len());
    for (i, &v) in img.data.iter().enumerate() {
        if !(v == v.round() && (0.0..=3.0).contains(&v)) {
            return Err(VolumeError::InvalidLabel { index: i, value: v });
        }
        labels.push(v as u8);
    }
    LabelMap::new(img.shape, labels, img.affine)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_modality(dir: &Path, name: &str, shape: GridShape, value: f32, affine: &Affine) -> PathBuf {
        let p = dir.join(name);
        let data = vec![value; shape.voxel_count()];
        nifti::write_nifti(&p, shape, 1, affine, NiftiData::F32(&data)).unwrap();
        p
    }

    fn four(dir: &Path, shapes: [GridShape; 4]) -> ModalitySource {
        let names = ["c-t1n.nii.gz", "c-t1c.nii.gz", "c-t2w.nii.gz", "c-t2f.nii.gz"];
        let paths: Vec<PathBuf> = names
            .iter()
            .zip(shapes)
            .enumerate()
            .map(|(m, (n, s))| write_modality(dir, n, s, m as f32 + 1.0, &Affine::IDENTITY))
            .collect();
        ModalitySource::Separate(paths.try_into().unwrap())
    }

    #[test]
    fn loads_four_modalities_in_channel_order() {
        let dir = tempfile::tempdir().unwrap();
        let s = GridShape::new(6, 5, 4).unwrap();
        let src = four(dir.path(), [s; 4]);
        let vol = load_volume(&src).unwrap();
        assert_eq!(vol.shape(), s);
        for m in 0..4 {
            assert!(vol.channel(m).iter().all(|&v| v == m as f32 + 1.0));
        }
        assert_eq!(ModalitySource::discover(dir.path()).unwrap(), src);
    }

    #[test]
    fn canonical_scan_shape_loads() {
        let dir = tempfile::tempdir().unwrap();
        let s = GridShape::new(240, 240, 155).unwrap();
        let vol = load_volume(&four(dir.path(), [s; 4])).unwrap();
        assert_eq!(vol.shape().dims(), [240, 240, 155]);
        assert_eq!(vol.grid().channels(), 4);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let a = GridShape::new(24, 24, 15).unwrap();
        let b = GridShape::new(24, 24, 14).unwrap();
        assert!(matches!(
            load_volume(&four(dir.path(), [a, a, b, a])),
            Err(VolumeError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn nan_voxel_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let s = GridShape::new(3, 3, 3).unwrap();
        let src = four(dir.path(), [s; 4]);
        let mut data = vec![1.0f32; 27];
        data[13] = f32::NAN;
        nifti::write_nifti(&src.paths()[2].to_path_buf(), s, 1, &Affine::IDENTITY, NiftiData::F32(&data)).unwrap();
        assert!(matches!(
            load_volume(&src),
            Err(VolumeError::NonFiniteVoxel { channel: 2, index: 13 })
        ));
    }

    #[test]
    fn affine_tolerance() {
        let dir = tempfile::tempdir().unwrap();
        let s = GridShape::new(3, 3, 3).unwrap();
        let src = four(dir.path(), [s; 4]);
        let near = Affine::IDENTITY.shifted([0, 0, 0]);
        let mut m = *near.matrix();
        m[0][3] = 5e-5;
        write_modality(dir.path(), "c-t2w.nii.gz", s, 3.0, &Affine::new(m).unwrap());
        assert!(load_volume(&src).is_ok());
        m[0][3] = 1e-3;
        write_modality(dir.path(), "c-t2w.nii.gz", s, 3.0, &Affine::new(m).unwrap());
        assert!(matches!(
            load_volume(&src),
            Err(VolumeError::AffineMismatch { .. })
        ));
    }

    #[test]
    fn missing_modality() {
        let dir = tempfile::tempdir().unwrap();
        let s = GridShape::new(3, 3, 3).unwrap();
        let src = four(dir.path(), [s; 4]);
        std::fs::remove_file(src.paths()[1]).unwrap();
        assert!(matches!(load_volume(&src), Err(VolumeError::MissingModality(_))));
        assert!(matches!(
            ModalitySource::discover(dir.path()),
            Err(VolumeError::MissingModality(_))
        ));
    }

    #[test]
    fn stacked_volume_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = GridShape::new(4, 3, 2).unwrap();
        let data: Vec<f32> = (0..96).map(|v| v as f32).collect();
        let vol = MultimodalVolume::from_data(s, data, Affine::from_spacing([1.0, 1.0, 2.0])).unwrap();
        let p = dir.path().join("stack.nii");
        save_volume(&vol, &p).unwrap();
        assert_eq!(load_volume(&ModalitySource::Stacked(p)).unwrap(), vol);
    }

    #[test]
    fn label_round_trip_preserves_histogram() {
        let dir = tempfile::tempdir().unwrap();
        let s = GridShape::new(7, 5, 3).unwrap();
        let data: Vec<u8> = (0..105).map(|i| ((i * 7) % 4) as u8).collect();
        let affine = Affine::from_spacing([1.0, 1.0, 1.0]).shifted([-120, -120, -77]);
        let map = LabelMap::new(s, data, affine).unwrap();
        let before = map.histogram();
        for name in ["l.nii", "l.nii.gz"] {
            let p = dir.path().join(name);
            save_labelmap(&map, &p).unwrap();
            let back = load_labelmap(&p).unwrap();
            assert_eq!(back.data(), map.data());
            assert_eq!(back.histogram(), before);
            assert!(back.affine().approx_eq(map.affine(), 1e-4));
        }
        let zeros = LabelMap::zeros(s, Affine::IDENTITY);
        let p = dir.path().join("z.nii.gz");
        save_labelmap(&zeros, &p).unwrap();
        assert!(load_labelmap(&p).unwrap().data().iter().all(|&v| v == 0));
    }

    #[test]
    fn label_loader_rejects_fractional_values() {
        let dir = tempfile::tempdir().unwrap();
        let s = GridShape::new(2, 1, 1).unwrap();
        let p = write_modality(dir.path(), "bad.nii", s, 1.5, &Affine::IDENTITY);
        assert!(matches!(load_labelmap(&p), Err(VolumeError::InvalidLabel { .. })));
    }
}
