//! VXL1 container: a minimal little-endian voxel array format.
//!
//! Layout:
//!
//! | bytes       | content                                            |
//! |-------------|----------------------------------------------------|
//! | 0..4        | magic `VXL1`                                       |
//! | 4           | dtype code: 0 = f32, 1 = u8, 2 = i16               |
//! | 5           | ndim, 3 or 4 (4 means a leading channel axis)      |
//! | 6..8        | reserved, zero                                     |
//! | 8..8+4n     | `ndim` × u32 dims, outermost first                 |
//! | next 12     | 3 × f32 spacing (Δx, Δy, Δz)                       |
//! | rest        | raw C-order payload                                |
//!
//! No padding and no compression.

use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{voxel_count, LabelVolume, MultiChannelVolume, Volume3D};

pub const MAGIC: &[u8; 4] = b"VXL1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    U8 = 1,
    I16 = 2,
}

impl DType {
    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::U8),
            2 => Ok(DType::I16),
            c => Err(Error::UnsupportedFormat(format!("VXL1 dtype code {c}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
            DType::I16 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    U8(Vec<u8>),
    I16(Vec<i16>),
}

impl Payload {
    pub fn dtype(&self) -> DType {
        match self {
            Payload::F32(_) => DType::F32,
            Payload::U8(_) => DType::U8,
            Payload::I16(_) => DType::I16,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::U8(v) => v.len(),
            Payload::I16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A decoded VXL1 array.
#[derive(Debug, Clone)]
pub struct VxlArray {
    pub dims: Vec<usize>,
    pub spacing: [f32; 3],
    pub payload: Payload,
}

impl PartialEq for VxlArray {
    /// Bitwise comparison, so NaN payloads and signed zeros compare exactly.
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self.spacing.map(f32::to_bits) == other.spacing.map(f32::to_bits)
            && match (&self.payload, &other.payload) {
                (Payload::F32(a), Payload::F32(b)) => {
                    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
                }
                (a, b) => a == b,
            }
    }
}

impl VxlArray {
    pub fn new(dims: Vec<usize>, spacing: [f32; 3], payload: Payload) -> Result<Self> {
        if !(dims.len() == 3 || dims.len() == 4) {
            return Err(Error::UnsupportedFormat(format!(
                "VXL1 supports 3 or 4 dims, got {}",
                dims.len()
            )));
        }
        if dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::UnsupportedFormat("dimension exceeds u32".into()));
        }
        let n: usize = dims.iter().product();
        if n != payload.len() {
            return Err(Error::InvalidVolume(format!(
                "payload length {} does not match dims {dims:?}",
                payload.len()
            )));
        }
        Ok(Self {
            dims,
            spacing,
            payload,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let dtype = self.payload.dtype();
        let mut out =
            Vec::with_capacity(8 + 4 * self.dims.len() + 12 + self.payload.len() * dtype.width());
        out.extend_from_slice(MAGIC);
        out.push(dtype as u8);
        out.push(self.dims.len() as u8);
        out.extend_from_slice(&[0, 0]);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for s in self.spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
        match &self.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U8(v) => out.extend_from_slice(v),
            Payload::I16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    /// Decodes one array from the front of `bytes`, returning it with the
    /// number of bytes consumed. Trailing bytes are left to the caller.
    pub fn decode_prefix(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::UnsupportedFormat("missing VXL1 magic".into()));
        }
        let dtype = DType::from_code(bytes[4])?;
        let ndim = bytes[5] as usize;
        if !(ndim == 3 || ndim == 4) {
            return Err(Error::UnsupportedFormat(format!("VXL1 ndim {ndim}")));
        }
        let header_len = 8 + 4 * ndim + 12;
        if bytes.len() < header_len {
            return Err(Error::CorruptFile("truncated VXL1 header".into()));
        }
        let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        let dims: Vec<usize> = (0..ndim).map(|i| u32_at(8 + 4 * i) as usize).collect();
        let sp_off = 8 + 4 * ndim;
        let spacing = [0, 1, 2].map(|i| f32::from_bits(u32_at(sp_off + 4 * i)));
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::CorruptFile("dims overflow".into()))?;
        let payload_len = n
            .checked_mul(dtype.width())
            .ok_or_else(|| Error::CorruptFile("payload size overflow".into()))?;
        let end = header_len + payload_len;
        if bytes.len() < end {
            return Err(Error::CorruptFile(format!(
                "payload truncated: need {payload_len} bytes, have {}",
                bytes.len() - header_len
            )));
        }
        let raw = &bytes[header_len..end];
        let payload = match dtype {
            DType::F32 => Payload::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U8 => Payload::U8(raw.to_vec()),
            DType::I16 => Payload::I16(
                raw.chunks_exact(2)
                    .map(|c| i16::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Ok((
            Self {
                dims,
                spacing,
                payload,
            },
            end,
        ))
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (arr, used) = Self::decode_prefix(bytes)?;
        if used != bytes.len() {
            return Err(Error::CorruptFile(format!(
                "{} trailing bytes after VXL1 payload",
                bytes.len() - used
            )));
        }
        Ok(arr)
    }

    pub fn into_volume(self) -> Result<Volume3D> {
        let dims = self.dims3()?;
        let data = match self.payload {
            Payload::F32(v) => v,
            Payload::U8(v) => v.into_iter().map(f32::from).collect(),
            Payload::I16(v) => v.into_iter().map(f32::from).collect(),
        };
        Volume3D::new(dims, self.spacing, data)
    }

    pub fn into_labels(self) -> Result<LabelVolume> {
        let dims = self.dims3()?;
        match self.payload {
            Payload::U8(v) => LabelVolume::new(dims, self.spacing, v),
            other => {
                let vol = VxlArray {
                    dims: self.dims,
                    spacing: self.spacing,
                    payload: other,
                }
                .into_volume()?;
                LabelVolume::from_volume(&vol)
            }
        }
    }

    pub fn into_channels(self) -> Result<MultiChannelVolume> {
        if self.dims.len() != 4 {
            return Err(Error::Shape(format!(
                "expected a 4-d channel array, got dims {:?}",
                self.dims
            )));
        }
        let dims = [self.dims[1], self.dims[2], self.dims[3]];
        let n = voxel_count(dims);
        let data = match self.payload {
            Payload::F32(v) => v,
            _ => return Err(Error::UnsupportedFormat("channel arrays must be f32".into())),
        };
        let channels = data
            .chunks_exact(n.max(1))
            .map(|c| Volume3D::new(dims, self.spacing, c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        MultiChannelVolume::new(channels)
    }

    fn dims3(&self) -> Result<[usize; 3]> {
        match self.dims.as_slice() {
            [d, h, w] => Ok([*d, *h, *w]),
            [1, d, h, w] => Ok([*d, *h, *w]),
            other => Err(Error::Shape(format!("expected 3-d array, got {other:?}"))),
        }
    }
}

impl From<&Volume3D> for VxlArray {
    fn from(v: &Volume3D) -> Self {
        VxlArray {
            dims: v.dims().to_vec(),
            spacing: v.spacing(),
            payload: Payload::F32(v.data().to_vec()),
        }
    }
}

impl From<&LabelVolume> for VxlArray {
    fn from(v: &LabelVolume) -> Self {
        VxlArray {
            dims: v.dims().to_vec(),
            spacing: v.spacing(),
            payload: Payload::U8(v.labels().to_vec()),
        }
    }
}

impl From<&MultiChannelVolume> for VxlArray {
    fn from(v: &MultiChannelVolume) -> Self {
        let mut dims = vec![v.num_channels()];
        dims.extend_from_slice(&v.dims());
        let data = v
            .channels()
            .iter()
            .flat_map(|c| c.data().iter().copied())
            .collect();
        VxlArray {
            dims,
            spacing: v.spacing(),
            payload: Payload::F32(data),
        }
    }
}

pub fn write_vxl(path: impl AsRef<Path>, array: &VxlArray) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, array.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_vxl(path: impl AsRef<Path>) -> Result<VxlArray> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    VxlArray::decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_payload(n: usize) -> impl Strategy<Value = Payload> {
        prop_oneof![
            proptest::collection::vec(any::<u32>().prop_map(f32::from_bits), n).prop_map(Payload::F32),
            proptest::collection::vec(any::<u8>(), n).prop_map(Payload::U8),
            proptest::collection::vec(any::<i16>(), n).prop_map(Payload::I16),
        ]
    }

    fn arb_array() -> impl Strategy<Value = VxlArray> {
        (
            proptest::collection::vec(1usize..5, 3..=4),
            any::<[u32; 3]>(),
        )
            .prop_flat_map(|(dims, sp)| {
                let n = dims.iter().product();
                arb_payload(n).prop_map(move |payload| VxlArray {
                    dims: dims.clone(),
                    spacing: sp.map(f32::from_bits),
                    payload,
                })
            })
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(arr in arb_array()) {
            let back = VxlArray::decode(&arr.encode()).unwrap();
            prop_assert_eq!(back, arr);
        }
    }

    #[test]
    fn header_layout() {
        let v = Volume3D::new([1, 1, 2], [0.5, 0.5, 2.0], vec![1.0, -2.0]).unwrap();
        let bytes = VxlArray::from(&v).encode();
        assert_eq!(&bytes[..4], b"VXL1");
        assert_eq!(bytes[4], 0);
        assert_eq!(bytes[5], 3);
        assert_eq!(&bytes[6..8], &[0, 0]);
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &2u32.to_le_bytes());
        assert_eq!(&bytes[20..24], &0.5f32.to_le_bytes());
        assert_eq!(&bytes[28..32], &2.0f32.to_le_bytes());
        assert_eq!(&bytes[32..36], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 40);
    }

    #[test]
    fn spacing_survives() {
        let v = Volume3D::filled([2, 2, 2], [0.5, 0.5, 2.0], 3.0).unwrap();
        let back = VxlArray::decode(&VxlArray::from(&v).encode())
            .unwrap()
            .into_volume()
            .unwrap();
        assert_eq!(back.spacing(), [0.5, 0.5, 2.0]);
        assert_eq!(back, v);
    }

    #[test]
    fn wrong_magic_is_unsupported() {
        let v = Volume3D::filled([2, 2, 2], [1.0; 3], 0.0).unwrap();
        let mut bytes = VxlArray::from(&v).encode();
        bytes[3] = b'0';
        assert!(matches!(
            VxlArray::decode(&bytes),
            Err(Error::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn truncated_payload_is_corrupt() {
        let v = Volume3D::filled([2, 2, 2], [1.0; 3], 0.0).unwrap();
        let bytes = VxlArray::from(&v).encode();
        assert!(matches!(
            VxlArray::decode(&bytes[..bytes.len() - 1]),
            Err(Error::CorruptFile(_))
        ));
    }

    #[test]
    fn channels_and_labels_roundtrip() {
        let a = Volume3D::from_fn([2, 3, 4], [1.0, 1.5, 2.0], |d, h, w| (d + h * w) as f32).unwrap();
        let b = Volume3D::filled([2, 3, 4], [1.0, 1.5, 2.0], -1.0).unwrap();
        let mc = MultiChannelVolume::new(vec![a, b]).unwrap();
        let back = VxlArray::decode(&VxlArray::from(&mc).encode())
            .unwrap()
            .into_channels()
            .unwrap();
        assert_eq!(back, mc);

        let labels = LabelVolume::new([1, 2, 2], [1.0; 3], vec![0, 1, 2, 4]).unwrap();
        let back = VxlArray::decode(&VxlArray::from(&labels).encode())
            .unwrap()
            .into_labels()
            .unwrap();
        assert_eq!(back, labels);
    }
}
