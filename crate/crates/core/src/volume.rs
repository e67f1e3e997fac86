//! Voxel-grid data model.
//!
//! All grids are stored in C order with depth outermost: the voxel at
//! `(d, h, w)` lives at `(d * H + h) * W + w`. Spacing is kept in the
//! NIfTI order `(Δx, Δy, Δz)`, where x runs along `w`, y along `h` and z
//! along `d`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(depth, height, width)` voxel counts.
pub type Dims = [usize; 3];

/// The BraTS label alphabet.
pub const BRATS_LABELS: [u8; 4] = [0, 1, 2, 4];

#[inline]
pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub fn linear_index(dims: Dims, d: usize, h: usize, w: usize) -> usize {
    (d * dims[1] + h) * dims[2] + w
}

#[inline]
pub fn unravel(dims: Dims, idx: usize) -> [usize; 3] {
    let w = idx % dims[2];
    let rest = idx / dims[2];
    [rest / dims[1], rest % dims[1], w]
}

fn check_geometry(dims: Dims, spacing: [f32; 3], len: usize) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::InvalidVolume(format!("zero-sized dims {dims:?}")));
    }
    if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::InvalidVolume(format!(
            "spacing must be finite and positive, got {spacing:?}"
        )));
    }
    if len != voxel_count(dims) {
        return Err(Error::InvalidVolume(format!(
            "data length {len} does not match dims {dims:?}"
        )));
    }
    Ok(())
}

/// Dense scalar volume with physical spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: Dims,
    spacing: [f32; 3],
    data: Vec<f32>,
}

impl Volume3D {
    pub fn new(dims: Dims, spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        check_geometry(dims, spacing, data.len())?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume(format!(
                "non-finite value at voxel {i}"
            )));
        }
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    pub fn filled(dims: Dims, spacing: [f32; 3], value: f32) -> Result<Self> {
        Self::new(dims, spacing, vec![value; voxel_count(dims)])
    }

    pub fn from_fn(
        dims: Dims,
        spacing: [f32; 3],
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(voxel_count(dims));
        for d in 0..dims[0] {
            for h in 0..dims[1] {
                for w in 0..dims[2] {
                    data.push(f(d, h, w));
                }
            }
        }
        Self::new(dims, spacing, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> f32 {
        self.data[linear_index(self.dims, d, h, w)]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Per-voxel BraTS labels: 0 background, 1 necrotic core, 2 edema,
/// 4 enhancing tumor.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    dims: Dims,
    spacing: [f32; 3],
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: Dims, spacing: [f32; 3], labels: Vec<u8>) -> Result<Self> {
        check_geometry(dims, spacing, labels.len())?;
        if let Some(bad) = labels.iter().find(|l| !BRATS_LABELS.contains(l)) {
            return Err(Error::InvalidVolume(format!(
                "label {bad} is not one of {BRATS_LABELS:?}"
            )));
        }
        Ok(Self {
            dims,
            spacing,
            labels,
        })
    }

    pub fn zeros(dims: Dims, spacing: [f32; 3]) -> Result<Self> {
        Self::new(dims, spacing, vec![0; voxel_count(dims)])
    }

    /// Converts a scalar volume holding integral label values.
    pub fn from_volume(volume: &Volume3D) -> Result<Self> {
        let labels = volume
            .data()
            .iter()
            .map(|&v| {
                let r = v.round();
                if (v - r).abs() > 1e-3 || !(0.0..=255.0).contains(&r) {
                    Err(Error::InvalidVolume(format!("non-integral label {v}")))
                } else {
                    Ok(r as u8)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(volume.dims(), volume.spacing(), labels)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> u8 {
        self.labels[linear_index(self.dims, d, h, w)]
    }

    /// Binary mask of one evaluation region.
    pub fn region_mask(&self, region: RegionId) -> Mask {
        Mask {
            dims: self.dims,
            bits: self.labels.iter().map(|&l| region.contains(l)).collect(),
        }
    }

    pub fn has_tumor(&self) -> bool {
        self.labels.iter().any(|&l| l != 0)
    }
}

/// Ordered image channels sharing one geometry (canonically Flair, T1ce, T2).
#[derive(Debug, Clone, PartialEq)]
pub struct MultiChannelVolume {
    channels: Vec<Volume3D>,
}

impl MultiChannelVolume {
    pub const CANONICAL: [&'static str; 3] = ["flair", "t1ce", "t2"];

    pub fn new(channels: Vec<Volume3D>) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| Error::InvalidVolume("no channels".into()))?;
        for (i, c) in channels.iter().enumerate().skip(1) {
            if c.dims() != first.dims() || c.spacing() != first.spacing() {
                return Err(Error::InvalidVolume(format!(
                    "channel {i} geometry {:?}/{:?} differs from channel 0 {:?}/{:?}",
                    c.dims(),
                    c.spacing(),
                    first.dims(),
                    first.spacing()
                )));
            }
        }
        Ok(Self { channels })
    }

    pub fn channels(&self) -> &[Volume3D] {
        &self.channels
    }

    pub fn channel(&self, i: usize) -> &Volume3D {
        &self.channels[i]
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn dims(&self) -> Dims {
        self.channels[0].dims()
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.channels[0].spacing()
    }

    pub fn into_channels(self) -> Vec<Volume3D> {
        self.channels
    }
}

/// Nested tumor evaluation regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RegionId {
    /// Whole tumor: labels 1, 2 and 4.
    WT,
    /// Enhancing tumor: label 4.
    ET,
    /// Tumor core: labels 1 and 4.
    TC,
}

impl RegionId {
    pub const ALL: [RegionId; 3] = [RegionId::WT, RegionId::ET, RegionId::TC];

    pub fn contains(self, label: u8) -> bool {
        match self {
            RegionId::WT => matches!(label, 1 | 2 | 4),
            RegionId::TC => matches!(label, 1 | 4),
            RegionId::ET => label == 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RegionId::WT => "WT",
            RegionId::ET => "ET",
            RegionId::TC => "TC",
        }
    }
}

impl std::fmt::Display for RegionId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for RegionId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "WT" => Ok(RegionId::WT),
            "ET" => Ok(RegionId::ET),
            "TC" => Ok(RegionId::TC),
            other => Err(Error::Config(format!("unknown region {other:?}"))),
        }
    }
}

/// Boolean voxel field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub dims: Dims,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn empty(dims: Dims) -> Self {
        Self {
            dims,
            bits: vec![false; voxel_count(dims)],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(voxel_count(dims));
        for d in 0..dims[0] {
            for h in 0..dims[1] {
                for w in 0..dims[2] {
                    bits.push(f(d, h, w));
                }
            }
        }
        Self { dims, bits }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> bool {
        self.bits[linear_index(self.dims, d, h, w)]
    }

    /// Coordinates `(d, h, w)` of every set voxel in C order.
    pub fn coords(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| unravel(self.dims, i))
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.dims == other.dims
            && self
                .bits
                .iter()
                .zip(&other.bits)
                .all(|(&a, &b)| !a || b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_roundtrip() {
        let dims = [3, 4, 5];
        for i in 0..voxel_count(dims) {
            let [d, h, w] = unravel(dims, i);
            assert_eq!(linear_index(dims, d, h, w), i);
        }
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(Volume3D::new([2, 2, 2], [1.0, 0.0, 1.0], vec![0.0; 8]).is_err());
        assert!(Volume3D::new([2, 2, 2], [1.0; 3], vec![0.0; 7]).is_err());
        assert!(Volume3D::new([2, 2, 2], [1.0; 3], vec![f32::NAN; 8]).is_err());
        assert!(LabelVolume::new([1, 1, 2], [1.0; 3], vec![0, 3]).is_err());
    }

    #[test]
    fn empty_labels_give_empty_regions() {
        let labels = LabelVolume::zeros([4, 4, 4], [1.0; 3]).unwrap();
        for r in RegionId::ALL {
            assert!(labels.region_mask(r).is_empty());
        }
    }

    #[test]
    fn label_four_is_in_every_region() {
        let labels = LabelVolume::new([1, 1, 1], [1.0; 3], vec![4]).unwrap();
        for r in RegionId::ALL {
            assert_eq!(labels.region_mask(r).count(), 1);
        }
    }

    #[test]
    fn region_counts_match_enumeration() {
        let mut raw = vec![0u8; 64];
        raw[..10].fill(1);
        raw[10..15].fill(2);
        raw[15..18].fill(4);
        let labels = LabelVolume::new([4, 4, 4], [1.0; 3], raw.clone()).unwrap();
        let count = |set: &[u8]| raw.iter().filter(|l| set.contains(l)).count();
        assert_eq!(labels.region_mask(RegionId::WT).count(), count(&[1, 2, 4]));
        assert_eq!(labels.region_mask(RegionId::TC).count(), count(&[1, 4]));
        assert_eq!(labels.region_mask(RegionId::ET).count(), count(&[4]));
        assert_eq!(labels.region_mask(RegionId::WT).count(), 18);
        assert_eq!(labels.region_mask(RegionId::TC).count(), 13);
        assert_eq!(labels.region_mask(RegionId::ET).count(), 3);
    }

    #[test]
    fn channels_must_share_geometry() {
        let a = Volume3D::filled([2, 2, 2], [1.0; 3], 0.0).unwrap();
        let b = Volume3D::filled([2, 2, 3], [1.0; 3], 0.0).unwrap();
        assert!(MultiChannelVolume::new(vec![a.clone(), b]).is_err());
        assert!(MultiChannelVolume::new(vec![a.clone(), a]).is_ok());
    }

    proptest::proptest! {
        #[test]
        fn regions_are_nested(raw in proptest::collection::vec(proptest::sample::select(BRATS_LABELS.to_vec()), 27)) {
            let labels = LabelVolume::new([3, 3, 3], [1.0; 3], raw).unwrap();
            let wt = labels.region_mask(RegionId::WT);
            let tc = labels.region_mask(RegionId::TC);
            let et = labels.region_mask(RegionId::ET);
            proptest::prop_assert!(et.is_subset_of(&tc));
            proptest::prop_assert!(tc.is_subset_of(&wt));
        }
    }
}
