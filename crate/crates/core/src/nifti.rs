//! Minimal NIfTI-1 reader.
//!
//! Only single-file, uncompressed, little-endian `.nii` volumes with three
//! dimensions are accepted, in u8, i16 or f32. Orientation matrices are
//! ignored; spacing comes from `pixdim[1..=3]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::Volume3D;

const HEADER_SIZE: usize = 348;
const MAGIC: &[u8; 4] = b"n+1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

/// The header fields this reader uses.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    /// `dim[1..=3]`, i.e. (x, y, z) extents.
    pub dim: [usize; 3],
    pub pixdim: [f32; 3],
    pub datatype: i16,
    pub vox_offset: usize,
    pub scl_slope: f32,
    pub scl_inter: f32,
}

fn i16_at(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

pub fn parse_header(bytes: &[u8]) -> Result<NiftiHeader> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::UnsupportedFormat(format!(
            "file has {} bytes, shorter than a NIfTI-1 header",
            bytes.len()
        )));
    }
    let sizeof_hdr = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    if sizeof_hdr != HEADER_SIZE as i32 {
        let hint = if sizeof_hdr.swap_bytes() == HEADER_SIZE as i32 {
            " (big-endian files are not supported)"
        } else {
            ""
        };
        return Err(Error::UnsupportedFormat(format!(
            "sizeof_hdr = {sizeof_hdr}{hint}"
        )));
    }
    if &bytes[344..348] != MAGIC {
        return Err(Error::UnsupportedFormat(format!(
            "magic {:?} is not \"n+1\\0\"",
            String::from_utf8_lossy(&bytes[344..348])
        )));
    }
    let ndim = i16_at(bytes, 40);
    if ndim != 3 {
        return Err(Error::UnsupportedFormat(format!("dim[0] = {ndim}, expected 3")));
    }
    let mut dim = [0usize; 3];
    for (i, d) in dim.iter_mut().enumerate() {
        let v = i16_at(bytes, 42 + 2 * i);
        if v < 1 {
            return Err(Error::CorruptFile(format!("dim[{}] = {v}", i + 1)));
        }
        *d = v as usize;
    }
    let datatype = i16_at(bytes, 70);
    if !matches!(datatype, DT_UINT8 | DT_INT16 | DT_FLOAT32) {
        return Err(Error::UnsupportedDatatype(datatype));
    }
    let pixdim = [0, 1, 2].map(|i| {
        let p = f32_at(bytes, 80 + 4 * i).abs();
        if p == 0.0 || !p.is_finite() {
            1.0
        } else {
            p
        }
    });
    let vox_offset = f32_at(bytes, 108);
    if !(vox_offset.is_finite() && vox_offset >= HEADER_SIZE as f32) {
        return Err(Error::CorruptFile(format!("vox_offset = {vox_offset}")));
    }
    Ok(NiftiHeader {
        dim,
        pixdim,
        datatype,
        vox_offset: vox_offset as usize,
        scl_slope: f32_at(bytes, 112),
        scl_inter: f32_at(bytes, 116),
    })
}

/// Decodes an in-memory `.nii` file.
pub fn decode_nifti(bytes: &[u8]) -> Result<Volume3D> {
    let hdr = parse_header(bytes)?;
    let [nx, ny, nz] = hdr.dim;
    let n = nx * ny * nz;
    let width = match hdr.datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        _ => 4,
    };
    let end = hdr.vox_offset + n * width;
    if bytes.len() < end {
        return Err(Error::CorruptFile(format!(
            "payload truncated: need {end} bytes, file has {}",
            bytes.len()
        )));
    }
    let raw = &bytes[hdr.vox_offset..end];
    let values: Vec<f32> = match hdr.datatype {
        DT_UINT8 => raw.iter().map(|&b| f32::from(b)).collect(),
        DT_INT16 => raw
            .chunks_exact(2)
            .map(|c| f32::from(i16::from_le_bytes([c[0], c[1]])))
            .collect(),
        _ => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    let scaled = if hdr.scl_slope != 0.0 && hdr.scl_slope.is_finite() {
        let inter = if hdr.scl_inter.is_finite() { hdr.scl_inter } else { 0.0 };
        values
            .into_iter()
            .map(|v| hdr.scl_slope * v + inter)
            .collect()
    } else {
        values
    };
    if let Some(i) = scaled.iter().position(|v| !v.is_finite()) {
        return Err(Error::CorruptFile(format!("non-finite voxel value at index {i}")));
    }
    // x varies fastest on disk, so (z, y, x) is C order with depth outermost.
    Volume3D::new([nz, ny, nx], hdr.pixdim, scaled)
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("gz"))
    {
        return Err(Error::UnsupportedFormat(format!(
            "{}: compressed NIfTI is not supported",
            path.display()
        )));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_nifti(&bytes)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Builds a little-endian NIfTI-1 file in memory.
    pub(crate) fn build(dim: [i16; 3], datatype: i16, pixdim: [f32; 3], slope: f32, inter: f32, payload: &[u8]) -> Vec<u8> {
        let mut b = vec![0u8; 352];
        b[0..4].copy_from_slice(&348i32.to_le_bytes());
        b[40..42].copy_from_slice(&3i16.to_le_bytes());
        for i in 0..3 {
            b[42 + 2 * i..44 + 2 * i].copy_from_slice(&dim[i].to_le_bytes());
        }
        b[70..72].copy_from_slice(&datatype.to_le_bytes());
        for i in 0..3 {
            b[80 + 4 * i..84 + 4 * i].copy_from_slice(&pixdim[i].to_le_bytes());
        }
        b[108..112].copy_from_slice(&352f32.to_le_bytes());
        b[112..116].copy_from_slice(&slope.to_le_bytes());
        b[116..120].copy_from_slice(&inter.to_le_bytes());
        b[344..348].copy_from_slice(b"n+1\0");
        b.extend_from_slice(payload);
        b
    }

    #[test]
    fn scaled_i16() {
        let bytes = build([1, 1, 1], DT_INT16, [1.0; 3], 2.0, 1.0, &3i16.to_le_bytes());
        let v = decode_nifti(&bytes).unwrap();
        assert_eq!(v.data(), &[7.0]);
    }

    #[test]
    fn zero_slope_means_unscaled_and_zero_pixdim_is_one() {
        let bytes = build([2, 1, 1], DT_UINT8, [0.0, 2.0, 3.0], 0.0, 5.0, &[4, 9]);
        let v = decode_nifti(&bytes).unwrap();
        assert_eq!(v.data(), &[4.0, 9.0]);
        assert_eq!(v.spacing(), [1.0, 2.0, 3.0]);
        assert_eq!(v.dims(), [1, 1, 2]);
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = build([1, 1, 1], DT_UINT8, [1.0; 3], 0.0, 0.0, &[0]);
        bytes[344..348].copy_from_slice(b"ni1\0");
        assert!(matches!(decode_nifti(&bytes), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn wrong_size_and_datatype() {
        let mut bytes = build([1, 1, 1], DT_UINT8, [1.0; 3], 0.0, 0.0, &[0]);
        bytes[0..4].copy_from_slice(&540i32.to_le_bytes());
        assert!(matches!(decode_nifti(&bytes), Err(Error::UnsupportedFormat(_))));
        let bytes = build([1, 1, 1], 64, [1.0; 3], 0.0, 0.0, &[0; 8]);
        assert!(matches!(decode_nifti(&bytes), Err(Error::UnsupportedDatatype(64))));
    }

    #[test]
    fn truncated_payload() {
        let bytes = build([2, 2, 2], DT_FLOAT32, [1.0; 3], 0.0, 0.0, &[0; 31]);
        assert!(matches!(decode_nifti(&bytes), Err(Error::CorruptFile(_))));
    }

    #[test]
    fn non_finite_payload_is_corrupt() {
        let bytes = build([1, 1, 1], DT_FLOAT32, [1.0; 3], 0.0, 0.0, &f32::NAN.to_le_bytes());
        assert!(matches!(decode_nifti(&bytes), Err(Error::CorruptFile(_))));
    }

    #[test]
    fn gz_rejected_by_extension() {
        assert!(matches!(
            read_nifti("scan.nii.gz"),
            Err(Error::UnsupportedFormat(_))
        ));
    }
}
