//! Minimal NIfTI-1 single-file reader and writer.
//!
//! Reads `.nii` and `.nii.gz` (detected by the gzip magic, not the
//! extension) in either byte order. Supported source datatypes are the 8, 16
//! and 32-bit integers and 32/64-bit floats; everything is converted to
//! `f32` with `scl_slope`/`scl_inter` applied. Files are written
//! little-endian with the affine stored in the sform.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{Affine, GridShape, Result, VolumeError};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_INT32: i16 = 8;
pub const DT_FLOAT32: i16 = 16;
pub const DT_FLOAT64: i16 = 64;
pub const DT_INT8: i16 = 256;
pub const DT_UINT16: i16 = 512;
pub const DT_UINT32: i16 = 768;

/// Decoded image: spatial shape, number of volumes along the 4th axis, the
/// affine and all voxel values (x fastest, then y, z, volume).
#[derive(Clone, Debug)]
pub struct NiftiImage {
    pub shape: GridShape,
    pub volumes: usize,
    pub affine: Affine,
    pub datatype: i16,
    pub data: Vec<f32>,
}

impl NiftiImage {
    pub fn volume(&self, v: usize) -> &[f32] {
        let n = self.shape.voxel_count();
        &self.data[v * n..(v + 1) * n]
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> VolumeError {
    VolumeError::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> VolumeError + '_ {
    move |source| VolumeError::IoFailure {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_nifti(path: &Path) -> Result<NiftiImage> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(io_err(path))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        MultiGzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(io_err(path))?;
        raw = out;
    }
    if raw.len() < HEADER_SIZE {
        return Err(format_err(path, "file shorter than a NIfTI-1 header"));
    }
    if LittleEndian::read_i32(&raw[0..4]) == HEADER_SIZE as i32 {
        parse::<LittleEndian>(path, &raw)
    } else if BigEndian::read_i32(&raw[0..4]) == HEADER_SIZE as i32 {
        parse::<BigEndian>(path, &raw)
    } else {
        Err(format_err(path, "sizeof_hdr is not 348"))
    }
}

fn parse<E: ByteOrder>(path: &Path, raw: &[u8]) -> Result<NiftiImage> {
    if &raw[344..347] != b"n+1" {
        return Err(format_err(path, "missing single-file NIfTI-1 magic \"n+1\""));
    }
    let dim: Vec<i64> = (0..8)
        .map(|i| E::read_i16(&raw[40 + 2 * i..]) as i64)
        .collect();
    let ndim = dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(format_err(path, format!("dim[0] = {ndim} out of range")));
    }
    let axis = |i: usize| -> i64 {
        if (i as i64) <= ndim {
            dim[i]
        } else {
            1
        }
    };
    if (1..=ndim as usize).any(|i| dim[i] < 1) {
        return Err(format_err(path, format!("non-positive dimension in {dim:?}")));
    }
    if (5..=ndim as usize).any(|i| dim[i] != 1) {
        return Err(format_err(path, "dimensions beyond the 4th are not supported"));
    }
    let shape = GridShape::new(axis(1) as usize, axis(2) as usize, axis(3) as usize)?;
    let volumes = axis(4) as usize;

    let datatype = E::read_i16(&raw[70..72]);
    let pixdim: Vec<f32> = (0..8).map(|i| E::read_f32(&raw[76 + 4 * i..])).collect();
    let vox_offset = E::read_f32(&raw[108..112]).max(0.0) as usize;
    let slope = E::read_f32(&raw[112..116]);
    let inter = E::read_f32(&raw[116..120]);
    let qform_code = E::read_i16(&raw[252..254]);
    let sform_code = E::read_i16(&raw[254..256]);

    let affine = if sform_code > 0 {
        let mut m = Affine::IDENTITY.matrix().to_owned();
        for (r, row) in m.iter_mut().enumerate().take(3) {
            for (c, v) in row.iter_mut().enumerate() {
                *v = E::read_f32(&raw[280 + 16 * r + 4 * c..]) as f64;
            }
        }
        Affine::new(m).map_err(|_| format_err(path, "non-finite sform"))?
    } else if qform_code > 0 {
        let q: Vec<f64> = (0..6)
            .map(|i| E::read_f32(&raw[256 + 4 * i..]) as f64)
            .collect();
        quatern_to_affine(&q, &pixdim).map_err(|_| format_err(path, "non-finite qform"))?
    } else {
        let sp = |i: usize| {
            let v = pixdim[i] as f64;
            if v > 0.0 && v.is_finite() {
                v
            } else {
                1.0
            }
        };
        Affine::from_spacing([sp(1), sp(2), sp(3)])
    };

    let count = shape.voxel_count() * volumes;
    let width = match datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_UINT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(format_err(path, format!("unsupported datatype {other}"))),
    };
    let start = vox_offset.max(HEADER_SIZE);
    let end = start + count * width;
    if raw.len() < end {
        return Err(format_err(
            path,
            format!("expected {} data bytes, found {}", count * width, raw.len().saturating_sub(start)),
        ));
    }
    let bytes = &raw[start..end];
    let mut data: Vec<f32> = match datatype {
        DT_UINT8 => bytes.iter().map(|&b| b as f32).collect(),
        DT_INT8 => bytes.iter().map(|&b| b as i8 as f32).collect(),
        DT_INT16 => bytes.chunks_exact(2).map(|b| E::read_i16(b) as f32).collect(),
        DT_UINT16 => bytes.chunks_exact(2).map(|b| E::read_u16(b) as f32).collect(),
        DT_INT32 => bytes.chunks_exact(4).map(|b| E::read_i32(b) as f32).collect(),
        DT_UINT32 => bytes.chunks_exact(4).map(|b| E::read_u32(b) as f32).collect(),
        DT_FLOAT32 => bytes.chunks_exact(4).map(E::read_f32).collect(),
        DT_FLOAT64 => bytes.chunks_exact(8).map(|b| E::read_f64(b) as f32).collect(),
        _ => unreachable!(),
    };
    if slope != 0.0 && slope.is_finite() && inter.is_finite() && (slope != 1.0 || inter != 0.0) {
        for v in &mut data {
            *v = *v * slope + inter;
        }
    }
    Ok(NiftiImage {
        shape,
        volumes,
        affine,
        datatype,
        data,
    })
}

fn quatern_to_affine(q: &[f64], pixdim: &[f32]) -> Result<Affine> {
    let (mut b, mut c, mut d) = (q[0], q[1], q[2]);
    let mut a = 1.0 - (b * b + c * c + d * d);
    if a < 1e-7 {
        let n = 1.0 / (b * b + c * c + d * d).sqrt();
        b *= n;
        c *= n;
        d *= n;
        a = 0.0;
    } else {
        a = a.sqrt();
    }
    let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
    let sp = |i: usize| {
        let v = pixdim[i] as f64;
        if v > 0.0 {
            v
        } else {
            1.0
        }
    };
    let (dx, dy, dz) = (sp(1), sp(2), sp(3) * qfac);
    let r = [
        [
            a * a + b * b - c * c - d * d,
            2.0 * (b * c - a * d),
            2.0 * (b * d + a * c),
        ],
        [
            2.0 * (b * c + a * d),
            a * a + c * c - b * b - d * d,
            2.0 * (c * d - a * b),
        ],
        [
            2.0 * (b * d - a * c),
            2.0 * (c * d + a * b),
            a * a + d * d - c * c - b * b,
        ],
    ];
    let mut m = Affine::IDENTITY.matrix().to_owned();
    for i in 0..3 {
        m[i][0] = r[i][0] * dx;
        m[i][1] = r[i][1] * dy;
        m[i][2] = r[i][2] * dz;
        m[i][3] = q[3 + i];
    }
    Affine::new(m)
}

/// Voxel payload for [`write_nifti`].
pub enum NiftiData<'a> {
    U8(&'a [u8]),
    F32(&'a [f32]),
}

impl NiftiData<'_> {
    fn len(&self) -> usize {
        match self {
            NiftiData::U8(d) => d.len(),
            NiftiData::F32(d) => d.len(),
        }
    }
}

fn header_bytes(shape: GridShape, volumes: usize, affine: &Affine, datatype: i16, bitpix: i16) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    LittleEndian::write_i32(&mut h[0..4], HEADER_SIZE as i32);
    h[38] = b'r';
    let ndim: i16 = if volumes > 1 { 4 } else { 3 };
    let dims = [
        ndim,
        shape.nx as i16,
        shape.ny as i16,
        shape.nz as i16,
        volumes as i16,
        1,
        1,
        1,
    ];
    for (i, d) in dims.iter().enumerate() {
        LittleEndian::write_i16(&mut h[40 + 2 * i..], *d);
    }
    LittleEndian::write_i16(&mut h[70..72], datatype);
    LittleEndian::write_i16(&mut h[72..74], bitpix);
    let spacing = affine.spacing();
    let pixdim = [1.0, spacing[0], spacing[1], spacing[2], 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut h[76 + 4 * i..], *p as f32);
    }
    LittleEndian::write_f32(&mut h[108..112], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut h[112..116], 1.0);
    // units: mm
    h[123] = 2;
    let descrip = b"tumorseg";
    h[148..148 + descrip.len()].copy_from_slice(descrip);
    LittleEndian::write_i16(&mut h[254..256], 1);
    for r in 0..3 {
        for c in 0..4 {
            LittleEndian::write_f32(&mut h[280 + 16 * r + 4 * c..], affine.matrix()[r][c] as f32);
        }
    }
    h[344..348].copy_from_slice(b"n+1\0");
    h
}

/// Write a NIfTI-1 file; gzip-compressed when the path ends in `.gz`.
/// The gzip stream carries no timestamp, so identical inputs give identical bytes.
pub fn write_nifti(
    path: &Path,
    shape: GridShape,
    volumes: usize,
    affine: &Affine,
    data: NiftiData<'_>,
) -> Result<()> {
    let expected = shape.voxel_count() * volumes;
    if data.len() != expected {
        return Err(VolumeError::DataLength {
            expected,
            actual: data.len(),
        });
    }
    if shape.dims().iter().chain([&volumes]).any(|&d| d > i16::MAX as usize) {
        return Err(format_err(path, "dimension exceeds NIfTI-1 limit of 32767"));
    }
    let mut bytes = match &data {
        NiftiData::U8(_) => header_bytes(shape, volumes, affine, DT_UINT8, 8),
        NiftiData::F32(_) => header_bytes(shape, volumes, affine, DT_FLOAT32, 32),
    };
    match data {
        NiftiData::U8(d) => bytes.extend_from_slice(d),
        NiftiData::F32(d) => {
            let start = bytes.len();
            bytes.resize(start + d.len() * 4, 0);
            LittleEndian::write_f32_into(d, &mut bytes[start..]);
        }
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    if is_gz(path) {
        let mut enc = GzEncoder::new(w, Compression::default());
        enc.write_all(&bytes).map_err(io_err(path))?;
        w = enc.finish().map_err(io_err(path))?;
    } else {
        w.write_all(&bytes).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

/// File name with any `.nii` / `.nii.gz` suffix removed.
pub fn stem(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    for suffix in [".nii.gz", ".nii"] {
        if let Some(s) = name.strip_suffix(suffix) {
            return s.to_string();
        }
    }
    name
}

pub fn is_nifti_path(path: &Path) -> bool {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default();
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}
