//! Compact binary container for probability maps and other float grids.
//!
//! Layout (little-endian):
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 8    | magic `TSEGGRID`               |
//! | 8      | 4    | format version (`1`)           |
//! | 12     | 12   | nx, ny, nz as `u32`            |
//! | 24     | 4    | channel count                  |
//! | 28     | 4    | dtype code (`1` = `f32`)       |
//! | 32     | 128  | 4x4 affine as row-major `f64`  |
//! | 160    | ...  | voxel data, canonical layout   |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Affine, Grid, GridShape, ProbabilityMap, Result, VolumeError};

pub const MAGIC: &[u8; 8] = b"TSEGGRID";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 1;
pub const HEADER_LEN: usize = 160;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> VolumeError + '_ {
    move |source| VolumeError::IoFailure {
        path: path.to_path_buf(),
        source,
    }
}

fn bad(path: &Path, reason: impl Into<String>) -> VolumeError {
    VolumeError::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn write_grid(path: &Path, grid: &Grid<f32>, affine: &Affine) -> Result<()> {
    let e = io_err(path);
    let mut w = BufWriter::new(File::create(path).map_err(&e)?);
    let shape = grid.shape();
    w.write_all(MAGIC).map_err(&e)?;
    for v in [
        VERSION,
        shape.nx as u32,
        shape.ny as u32,
        shape.nz as u32,
        grid.channels() as u32,
        DTYPE_F32,
    ] {
        w.write_u32::<LittleEndian>(v).map_err(&e)?;
    }
    for v in affine.matrix().iter().flatten() {
        w.write_f64::<LittleEndian>(*v).map_err(&e)?;
    }
    let mut buf = vec![0u8; grid.data().len() * 4];
    LittleEndian::write_f32_into(grid.data(), &mut buf);
    w.write_all(&buf).map_err(&e)?;
    w.flush().map_err(&e)
}

pub fn read_grid(path: &Path) -> Result<(Grid<f32>, Affine)> {
    let e = io_err(path);
    let mut r = BufReader::new(File::open(path).map_err(&e)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(&e)?;
    if &magic != MAGIC {
        return Err(bad(path, "not a tumorseg grid file"));
    }
    let mut header = [0u32; 6];
    r.read_u32_into::<LittleEndian>(&mut header).map_err(&e)?;
    let [version, nx, ny, nz, channels, dtype] = header;
    if version != VERSION {
        return Err(bad(path, format!("unsupported version {version}")));
    }
    if dtype != DTYPE_F32 {
        return Err(bad(path, format!("unsupported dtype code {dtype}")));
    }
    let mut m = [0f64; 16];
    r.read_f64_into::<LittleEndian>(&mut m).map_err(&e)?;
    let affine = Affine::new(std::array::from_fn(|i| std::array::from_fn(|j| m[4 * i + j])))
        .map_err(|_| bad(path, "invalid affine"))?;
    let shape = GridShape::new(nx as usize, ny as usize, nz as usize)?;
    let count = shape.voxel_count() * channels as usize;
    let mut data = vec![0f32; count];
    r.read_f32_into::<LittleEndian>(&mut data)
        .map_err(|_| bad(path, "truncated voxel data"))?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(&e)? != 0 {
        return Err(bad(path, "trailing bytes after voxel data"));
    }
    Ok((Grid::new(shape, channels as usize, data)?, affine))
}

pub fn save_probability_map(path: &Path, map: &ProbabilityMap, affine: &Affine) -> Result<()> {
    write_grid(path, map.grid(), affine)
}

pub fn load_probability_map(path: &Path) -> Result<(ProbabilityMap, Affine)> {
    let (grid, affine) = read_grid(path)?;
    Ok((ProbabilityMap::new(grid)?, affine))
}
