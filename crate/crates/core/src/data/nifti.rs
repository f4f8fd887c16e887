//! Uncompressed single-file NIfTI-1 (`.nii`).
//!
//! Reads either byte order (detected from `sizeof_hdr == 348`) and the
//! datatypes uint8, int16, float32 and float64, applying
//! `value * scl_slope + scl_inter` when the slope is nonzero. Writes
//! little-endian float32 volumes or uint8 masks with the data at byte 352.
//! `.nii.gz` files must be decompressed first.
//!
//! NIfTI stores `x` fastest; voxels are transposed to and from the
//! row-major `[H, W, D]` layout used everywhere else.

use std::path::Path;

use super::{Affine, LabelMask, Volume, IDENTITY_AFFINE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;
pub const DT_FLOAT64: i16 = 64;

/// Byte offsets of the header fields this module touches.
pub mod offset {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const SROW_X: usize = 280;
    pub const MAGIC: usize = 344;
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NiftiError {
    #[error("file shorter than a NIfTI-1 header ({0} bytes)")]
    TruncatedHeader(usize),
    #[error("sizeof_hdr is not 348 in either byte order")]
    BadHeaderSize,
    #[error("bad magic {0:?}, expected \"n+1\"")]
    BadMagic([u8; 4]),
    #[error("unsupported datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("invalid dimensions {0:?}")]
    BadDimensions([i16; 8]),
    #[error("data section truncated: need {needed} bytes, found {found}")]
    TruncatedData { needed: usize, found: usize },
    #[error("mask voxel value {0} is not 0 or 1")]
    NonBinaryMask(f64),
}

impl NiftiError {
    /// Stable numeric code per failure kind.
    pub fn code(&self) -> u8 {
        match self {
            NiftiError::TruncatedHeader(_) => 1,
            NiftiError::BadHeaderSize => 2,
            NiftiError::BadMagic(_) => 3,
            NiftiError::UnsupportedDatatype(_) => 4,
            NiftiError::BadDimensions(_) => 5,
            NiftiError::TruncatedData { .. } => 6,
            NiftiError::NonBinaryMask(_) => 7,
        }
    }
}

/// Decoded image: scaled values in row-major `[H, W, D]` order.
#[derive(Clone, Debug)]
pub struct NiftiImage {
    pub extents: [usize; 3],
    pub spacing: [f64; 3],
    pub affine: Affine,
    pub datatype: i16,
    pub values: Vec<f64>,
}

struct Reader<'a> {
    buf: &'a [u8],
    big: bool,
}

impl Reader<'_> {
    fn bytes<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut b: [u8; N] = self.buf[at..at + N].try_into().expect("in bounds");
        if self.big {
            b.reverse();
        }
        b
    }

    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes(self.bytes(at))
    }

    fn i32(&self, at: usize) -> i32 {
        i32::from_le_bytes(self.bytes(at))
    }

    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.bytes(at))
    }

    fn f64(&self, at: usize) -> f64 {
        f64::from_le_bytes(self.bytes(at))
    }
}

/// Parses a complete `.nii` byte buffer.
pub fn decode(buf: &[u8]) -> std::result::Result<NiftiImage, NiftiError> {
    if buf.len() < HEADER_SIZE {
        return Err(NiftiError::TruncatedHeader(buf.len()));
    }
    let big = match (Reader { buf, big: false }).i32(offset::SIZEOF_HDR) {
        348 => false,
        _ if (Reader { buf, big: true }).i32(offset::SIZEOF_HDR) == 348 => true,
        _ => return Err(NiftiError::BadHeaderSize),
    };
    let r = Reader { buf, big };
    let magic: [u8; 4] = buf[offset::MAGIC..offset::MAGIC + 4].try_into().expect("in bounds");
    if &magic != b"n+1\0" {
        return Err(NiftiError::BadMagic(magic));
    }
    let dim: [i16; 8] = std::array::from_fn(|i| r.i16(offset::DIM + 2 * i));
    let rank = dim[0];
    let valid = (1..=7).contains(&rank)
        && dim[1..=rank as usize].iter().all(|&d| d >= 1)
        && dim[4..=(rank.max(3) as usize)].iter().all(|&d| d == 1);
    if !valid {
        return Err(NiftiError::BadDimensions(dim));
    }
    let ext: [usize; 3] = std::array::from_fn(|i| if (i as i16) < rank { dim[i + 1] as usize } else { 1 });
    let datatype = r.i16(offset::DATATYPE);
    let width = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(NiftiError::UnsupportedDatatype(other)),
    };
    let start = (r.f32(offset::VOX_OFFSET) as usize).max(HEADER_SIZE);
    let n: usize = ext.iter().product();
    let needed = start + n * width;
    if buf.len() < needed {
        return Err(NiftiError::TruncatedData { needed, found: buf.len() });
    }
    let slope = r.f32(offset::SCL_SLOPE) as f64;
    let inter = r.f32(offset::SCL_INTER) as f64;
    // identity scaling is skipped so stored values (including -0.0) come back as written
    let scaled = slope != 0.0 && slope.is_finite() && (slope != 1.0 || inter != 0.0);
    let scale = |v: f64| if scaled { v * slope + inter } else { v };
    let raw = |i: usize| -> f64 {
        let at = start + i * width;
        match datatype {
            DT_UINT8 => buf[at] as f64,
            DT_INT16 => r.i16(at) as f64,
            DT_FLOAT32 => r.f32(at) as f64,
            _ => r.f64(at),
        }
    };
    let mut values = vec![0.0; n];
    for x in 0..ext[0] {
        for y in 0..ext[1] {
            for z in 0..ext[2] {
                values[(x * ext[1] + y) * ext[2] + z] = scale(raw(x + ext[0] * (y + ext[1] * z)));
            }
        }
    }
    let pix: [f64; 3] = std::array::from_fn(|i| {
        let p = r.f32(offset::PIXDIM + 4 * (i + 1)).abs() as f64;
        if p > 0.0 {
            p
        } else {
            1.0
        }
    });
    let affine = if r.i16(offset::SFORM_CODE) > 0 {
        let mut a = IDENTITY_AFFINE;
        for (row, a_row) in a.iter_mut().take(3).enumerate() {
            for (col, v) in a_row.iter_mut().enumerate() {
                *v = r.f32(offset::SROW_X + 16 * row + 4 * col) as f64;
            }
        }
        a
    } else {
        let mut a = IDENTITY_AFFINE;
        (0..3).for_each(|i| a[i][i] = pix[i]);
        a
    };
    Ok(NiftiImage { extents: ext, spacing: pix, affine, datatype, values })
}

/// Little-endian header for a 3D image of the given datatype.
pub fn encode_header(extents: [usize; 3], spacing: [f64; 3], affine: &Affine, datatype: i16) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    let put = |h: &mut Vec<u8>, at: usize, b: &[u8]| h[at..at + b.len()].copy_from_slice(b);
    put(&mut h, offset::SIZEOF_HDR, &(HEADER_SIZE as i32).to_le_bytes());
    let dims = [3, extents[0] as i16, extents[1] as i16, extents[2] as i16, 1, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        put(&mut h, offset::DIM + 2 * i, &d.to_le_bytes());
    }
    let bitpix: i16 = match datatype {
        DT_UINT8 => 8,
        DT_INT16 => 16,
        DT_FLOAT32 => 32,
        _ => 64,
    };
    put(&mut h, offset::DATATYPE, &datatype.to_le_bytes());
    put(&mut h, offset::BITPIX, &bitpix.to_le_bytes());
    let pixdim = [1.0, spacing[0], spacing[1], spacing[2], 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        put(&mut h, offset::PIXDIM + 4 * i, &(*p as f32).to_le_bytes());
    }
    put(&mut h, offset::VOX_OFFSET, &(VOX_OFFSET as f32).to_le_bytes());
    put(&mut h, offset::SCL_SLOPE, &1.0f32.to_le_bytes());
    h[offset::XYZT_UNITS] = 2; // millimetres
    put(&mut h, offset::SFORM_CODE, &1i16.to_le_bytes());
    for (row, vals) in affine.iter().take(3).enumerate() {
        for (col, v) in vals.iter().enumerate() {
            put(&mut h, offset::SROW_X + 16 * row + 4 * col, &(*v as f32).to_le_bytes());
        }
    }
    put(&mut h, offset::MAGIC, b"n+1\0");
    h
}

fn to_file_order<T: Copy>(ext: [usize; 3], values: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(values.len());
    for z in 0..ext[2] {
        for y in 0..ext[1] {
            for x in 0..ext[0] {
                out.push(values[(x * ext[1] + y) * ext[2] + z]);
            }
        }
    }
    out
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<NiftiImage> {
    Ok(decode(&read_bytes(path)?)?)
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let img = read_image(path)?;
    let e = img.extents;
    let voxels = Tensor::new(e.to_vec(), img.values.iter().map(|&v| v as f32).collect())?;
    Ok(Volume { voxels, spacing: img.spacing, affine: img.affine })
}

pub fn read_mask(path: &Path) -> Result<LabelMask> {
    let img = read_image(path)?;
    let voxels = img
        .values
        .iter()
        .map(|&v| match v {
            0.0 => Ok(0),
            1.0 => Ok(1),
            _ => Err(NiftiError::NonBinaryMask(v)),
        })
        .collect::<std::result::Result<Vec<u8>, _>>()?;
    LabelMask::new(img.extents, voxels)
}

/// Writes a float32 image.
pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    let ext = v.extents();
    let mut bytes = encode_header(ext, v.spacing, &v.affine, DT_FLOAT32);
    for x in to_file_order(ext, v.voxels.data()) {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    write_bytes(path, &bytes)
}

/// Writes a uint8 mask with the given geometry.
pub fn write_mask(path: &Path, m: &LabelMask, spacing: [f64; 3], affine: &Affine) -> Result<()> {
    let ext = m.extents();
    let mut bytes = encode_header(ext, spacing, affine, DT_UINT8);
    bytes.extend(to_file_order(ext, m.voxels()));
    write_bytes(path, &bytes)
}
