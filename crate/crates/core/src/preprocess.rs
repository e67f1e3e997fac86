//! Brain isolation, cropping, intensity standardisation, tumor slice-range
//! selection and resizing to the network input cube.
//!
//! The per-case chain is: percentile threshold on the mask channel, largest
//! connected component, PCA-derived box with a standard-deviation margin,
//! crop, masked z-score per channel, slice range from the labels, resize.

use std::collections::VecDeque;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{
    linear_index, voxel_count, Dims, LabelVolume, Mask, MultiChannelVolume, Volume3D,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Connectivity {
    /// Face neighbours only.
    #[serde(rename = "6")]
    Six,
    /// Face, edge and corner neighbours.
    #[serde(rename = "26")]
    #[default]
    TwentySix,
}

impl Connectivity {
    fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dd in -1isize..=1 {
            for dh in -1isize..=1 {
                for dw in -1isize..=1 {
                    let manhattan = dd.abs() + dh.abs() + dw.abs();
                    let keep = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::TwentySix => manhattan > 0,
                    };
                    if keep {
                        out.push([dd, dh, dw]);
                    }
                }
            }
        }
        out
    }
}

impl TryFrom<u32> for Connectivity {
    type Error = Error;

    fn try_from(n: u32) -> Result<Self> {
        match n {
            6 => Ok(Connectivity::Six),
            26 => Ok(Connectivity::TwentySix),
            other => Err(Error::Config(format!("connectivity must be 6 or 26, got {other}"))),
        }
    }
}

/// The retained brain component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BrainMask {
    pub mask: Mask,
    pub component_size: usize,
}

/// Inclusive voxel-index box in `(d, h, w)` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
    /// Margin added on each side along `(d, h, w)` before clamping.
    pub margin: [usize; 3],
}

impl BoundingBox {
    pub fn full(dims: Dims) -> Self {
        Self {
            min: [0; 3],
            max: [dims[0] - 1, dims[1] - 1, dims[2] - 1],
            margin: [0; 3],
        }
    }

    pub fn dims(&self) -> Dims {
        [0, 1, 2].map(|a| self.max[a] - self.min[a] + 1)
    }

    pub fn voxel_count(&self) -> usize {
        voxel_count(self.dims())
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| self.min[a] <= p[a] && p[a] <= self.max[a])
    }

    fn validate(&self, dims: Dims) -> Result<()> {
        if (0..3).any(|a| self.min[a] > self.max[a] || self.max[a] >= dims[a]) {
            return Err(Error::Shape(format!(
                "box {:?}..{:?} does not fit dims {dims:?}",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

/// Principal frame of a voxel coordinate cloud, coordinates in `(d, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaFrame {
    pub mean: [f64; 3],
    pub covariance: [[f64; 3]; 3],
    /// Unit eigenvectors, eigenvalues descending.
    pub axes: [[f64; 3]; 3],
    pub eigenvalues: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxFit {
    pub frame: PcaFrame,
    pub bbox: BoundingBox,
    /// Set when the covariance is rank-deficient and the axis-aligned
    /// fallback was used.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub zero_variance: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceRange {
    pub start: usize,
    pub end: usize,
}

impl SliceRange {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Percentile with linear interpolation between order statistics
/// (the `numpy.percentile` default). `p` is a fraction in `[0, 1]`.
pub fn percentile(values: &[f32], p: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty slice");
    let mut sorted: Vec<f32> = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    f64::from(sorted[lo]) + frac * (f64::from(sorted[hi]) - f64::from(sorted[lo]))
}

/// Marks voxels strictly brighter than the given intensity percentile.
pub fn threshold_mask(volume: &Volume3D, percentile_fraction: f64) -> Result<Mask> {
    if !(percentile_fraction > 0.0 && percentile_fraction < 1.0) {
        return Err(Error::Config(format!(
            "percentile must lie in (0, 1), got {percentile_fraction}"
        )));
    }
    let t = percentile(volume.data(), percentile_fraction);
    let mask = Mask {
        dims: volume.dims(),
        bits: volume.data().iter().map(|&v| f64::from(v) > t).collect(),
    };
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(mask)
}

/// Connected components of a mask. Components are numbered in order of
/// their lowest C-order voxel; the returned sizes are indexed by that order.
pub fn label_components(mask: &Mask, connectivity: Connectivity) -> (Vec<u32>, Vec<usize>) {
    const UNSET: u32 = u32::MAX;
    let dims = mask.dims;
    let offsets = connectivity.offsets();
    let mut labels = vec![UNSET; mask.bits.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for seed in 0..mask.bits.len() {
        if !mask.bits[seed] || labels[seed] != UNSET {
            continue;
        }
        let id = sizes.len() as u32;
        labels[seed] = id;
        queue.push_back(seed);
        let mut size = 0;
        while let Some(idx) = queue.pop_front() {
            size += 1;
            let p = crate::volume::unravel(dims, idx);
            for off in &offsets {
                let q = [0, 1, 2].map(|a| p[a] as isize + off[a]);
                if (0..3).any(|a| q[a] < 0 || q[a] >= dims[a] as isize) {
                    continue;
                }
                let j = linear_index(dims, q[0] as usize, q[1] as usize, q[2] as usize);
                if mask.bits[j] && labels[j] == UNSET {
                    labels[j] = id;
                    queue.push_back(j);
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Keeps only the largest connected component; ties go to the component
/// whose lowest voxel index is smallest.
pub fn largest_component(mask: &Mask, connectivity: Connectivity) -> Result<BrainMask> {
    let (labels, sizes) = label_components(mask, connectivity);
    let mut best: Option<(u32, usize)> = None;
    for (id, &size) in sizes.iter().enumerate() {
        if best.is_none_or(|(_, s)| size > s) {
            best = Some((id as u32, size));
        }
    }
    let (id, size) = best.ok_or(Error::EmptyMask)?;
    Ok(BrainMask {
        mask: Mask {
            dims: mask.dims,
            bits: labels.iter().map(|&l| l == id).collect(),
        },
        component_size: size,
    })
}

fn coordinate_moments(mask: &Mask) -> (usize, Vector3<f64>, Matrix3<f64>) {
    let mut n = 0usize;
    let mut sum = Vector3::zeros();
    for p in mask.coords() {
        n += 1;
        sum += Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64);
    }
    let mean = sum / n.max(1) as f64;
    let mut cov = Matrix3::zeros();
    for p in mask.coords() {
        let x = Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64) - mean;
        cov += x * x.transpose();
    }
    (n, mean, cov / n.max(1) as f64)
}

/// Principal-axis box around a mask, converted to its axis-aligned hull and
/// widened by `ceil(margin_scale * σ_axis)` on each side, where `σ_axis` is
/// the standard deviation of voxel coordinates along that grid axis.
pub fn pca_bounding_box(mask: &Mask, margin_scale: f64) -> Result<BoxFit> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    if !(margin_scale >= 0.0 && margin_scale.is_finite()) {
        return Err(Error::Config(format!("margin scale {margin_scale} must be >= 0")));
    }
    let dims = mask.dims;
    let (_, mean, cov) = coordinate_moments(mask);

    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axes_vec: Vec<Vector3<f64>> = order
        .iter()
        .map(|&i| eig.eigenvectors.column(i).normalize())
        .collect();
    let eigenvalues = order.map(|i| eig.eigenvalues[i].max(0.0));
    let frame = PcaFrame {
        mean: [mean.x, mean.y, mean.z],
        covariance: [0, 1, 2].map(|r| [0, 1, 2].map(|c| cov[(r, c)])),
        axes: [0, 1, 2].map(|j| [axes_vec[j].x, axes_vec[j].y, axes_vec[j].z]),
        eigenvalues,
    };

    let sigma = [0, 1, 2].map(|a| cov[(a, a)].max(0.0).sqrt());
    let margin = sigma.map(|s| (margin_scale * s - 1e-9).ceil().max(0.0) as usize);
    let degenerate = eigenvalues[2] <= 1e-9 * eigenvalues[0].max(1.0);

    let (lo, hi) = if degenerate {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in mask.coords() {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a] as f64);
                hi[a] = hi[a].max(p[a] as f64);
            }
        }
        (lo, hi)
    } else {
        // Extents of the projections onto each principal axis.
        let mut pmin = [f64::INFINITY; 3];
        let mut pmax = [f64::NEG_INFINITY; 3];
        for p in mask.coords() {
            let x = Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64);
            for j in 0..3 {
                let t = x.dot(&axes_vec[j]);
                pmin[j] = pmin[j].min(t);
                pmax[j] = pmax[j].max(t);
            }
        }
        // Axis-aligned hull of the eight oriented-box corners.
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for corner in 0..8 {
            let mut c = Vector3::zeros();
            for j in 0..3 {
                let t = if corner >> j & 1 == 1 { pmax[j] } else { pmin[j] };
                c += axes_vec[j] * t;
            }
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
        (lo, hi)
    };

    let mut bbox = BoundingBox {
        min: [0, 1, 2].map(|a| {
            let v = (lo[a] + 1e-6).floor() - margin[a] as f64;
            v.max(0.0) as usize
        }),
        max: [0, 1, 2].map(|a| {
            let v = (hi[a] - 1e-6).ceil() + margin[a] as f64;
            v.min((dims[a] - 1) as f64).max(0.0) as usize
        }),
        margin,
    };
    // Containment is a hard guarantee; widen if rounding ever left a voxel out.
    for p in mask.coords() {
        for a in 0..3 {
            bbox.min[a] = bbox.min[a].min(p[a]);
            bbox.max[a] = bbox.max[a].max(p[a]);
        }
    }
    Ok(BoxFit {
        frame,
        bbox,
        degenerate,
    })
}

/// Sub-grid extraction with a shared box.
pub trait Crop: Sized {
    fn crop(&self, bbox: &BoundingBox) -> Result<Self>;
}

fn crop_vec<T: Copy>(data: &[T], dims: Dims, bbox: &BoundingBox) -> Result<Vec<T>> {
    bbox.validate(dims)?;
    let out_dims = bbox.dims();
    let mut out = Vec::with_capacity(voxel_count(out_dims));
    for d in bbox.min[0]..=bbox.max[0] {
        for h in bbox.min[1]..=bbox.max[1] {
            let start = linear_index(dims, d, h, bbox.min[2]);
            out.extend_from_slice(&data[start..start + out_dims[2]]);
        }
    }
    Ok(out)
}

impl Crop for Volume3D {
    fn crop(&self, bbox: &BoundingBox) -> Result<Self> {
        Volume3D::new(bbox.dims(), self.spacing(), crop_vec(self.data(), self.dims(), bbox)?)
    }
}

impl Crop for LabelVolume {
    fn crop(&self, bbox: &BoundingBox) -> Result<Self> {
        LabelVolume::new(bbox.dims(), self.spacing(), crop_vec(self.labels(), self.dims(), bbox)?)
    }
}

impl Crop for Mask {
    fn crop(&self, bbox: &BoundingBox) -> Result<Self> {
        Ok(Mask {
            dims: bbox.dims(),
            bits: crop_vec(&self.bits, self.dims, bbox)?,
        })
    }
}

impl Crop for MultiChannelVolume {
    fn crop(&self, bbox: &BoundingBox) -> Result<Self> {
        MultiChannelVolume::new(
            self.channels()
                .iter()
                .map(|c| c.crop(bbox))
                .collect::<Result<_>>()?,
        )
    }
}

/// Standardises a volume with the mean and population standard deviation
/// of the voxels under `mask`. Every voxel is transformed.
pub fn zscore_normalize(volume: &Volume3D, mask: &Mask) -> Result<(Volume3D, NormalizationStats)> {
    if mask.dims != volume.dims() {
        return Err(Error::Shape(format!(
            "mask dims {:?} differ from volume dims {:?}",
            mask.dims,
            volume.dims()
        )));
    }
    let inside = || {
        volume
            .data()
            .iter()
            .zip(&mask.bits)
            .filter(|(_, &b)| b)
            .map(|(&v, _)| f64::from(v))
    };
    let n = inside().count();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let mean = inside().sum::<f64>() / n as f64;
    let var = inside().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    let zero_variance = std < 1e-8;
    let data = if zero_variance {
        vec![0.0; volume.len()]
    } else {
        volume
            .data()
            .iter()
            .map(|&v| ((f64::from(v) - mean) / std) as f32)
            .collect()
    };
    Ok((
        Volume3D::new(volume.dims(), volume.spacing(), data)?,
        NormalizationStats {
            mean,
            std,
            n,
            zero_variance,
        },
    ))
}

/// First and last depth slice containing any nonzero label.
pub fn slice_range(labels: &LabelVolume) -> Result<SliceRange> {
    let [d, h, w] = labels.dims();
    let plane = h * w;
    let has_tumor = |z: usize| labels.labels()[z * plane..(z + 1) * plane].iter().any(|&l| l != 0);
    let start = (0..d).find(|&z| has_tumor(z)).ok_or(Error::NoTumor)?;
    let end = (0..d).rev().find(|&z| has_tumor(z)).ok_or(Error::NoTumor)?;
    Ok(SliceRange { start, end })
}

fn depth_box(dims: Dims, range: SliceRange) -> BoundingBox {
    BoundingBox {
        min: [range.start, 0, 0],
        max: [range.end, dims[1] - 1, dims[2] - 1],
        margin: [0; 3],
    }
}

/// Restricts the depth axis to `range`.
pub fn slice_depth<T: Crop + HasDims>(x: &T, range: SliceRange) -> Result<T> {
    x.crop(&depth_box(x.grid_dims(), range))
}

pub trait HasDims {
    fn grid_dims(&self) -> Dims;
}

impl HasDims for Volume3D {
    fn grid_dims(&self) -> Dims {
        self.dims()
    }
}

impl HasDims for LabelVolume {
    fn grid_dims(&self) -> Dims {
        self.dims()
    }
}

impl HasDims for MultiChannelVolume {
    fn grid_dims(&self) -> Dims {
        self.dims()
    }
}

/// Spacing after resampling so the physical extent is unchanged.
fn rescaled_spacing(spacing: [f32; 3], from: Dims, to: Dims) -> [f32; 3] {
    // spacing is (x, y, z) while dims are (d, h, w) = (z, y, x)
    [
        (f64::from(spacing[0]) * from[2] as f64 / to[2] as f64) as f32,
        (f64::from(spacing[1]) * from[1] as f64 / to[1] as f64) as f32,
        (f64::from(spacing[2]) * from[0] as f64 / to[0] as f64) as f32,
    ]
}

/// Linear-interpolation taps for one axis (half-pixel centres).
fn linear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn nearest_taps(n_in: usize, n_out: usize) -> Vec<usize> {
    (0..n_out)
        .map(|o| ((((o as f64 + 0.5) * n_in as f64) / n_out as f64).floor() as usize).min(n_in - 1))
        .collect()
}

fn check_target(target: Dims) -> Result<()> {
    if target.contains(&0) {
        return Err(Error::Config(format!("resize target {target:?} has a zero axis")));
    }
    Ok(())
}

/// Trilinear resampling of a scalar volume.
pub fn resize_volume(volume: &Volume3D, target: Dims) -> Result<Volume3D> {
    check_target(target)?;
    let dims = volume.dims();
    let [td, th, tw] = [0, 1, 2].map(|a| linear_taps(dims[a], target[a]));
    let src = volume.data();
    let mut out = Vec::with_capacity(voxel_count(target));
    for &(d0, d1, fd) in &td {
        for &(h0, h1, fh) in &th {
            for &(w0, w1, fw) in &tw {
                let at = |d, h, w| f64::from(src[linear_index(dims, d, h, w)]);
                let c00 = at(d0, h0, w0) * (1.0 - fw) + at(d0, h0, w1) * fw;
                let c01 = at(d0, h1, w0) * (1.0 - fw) + at(d0, h1, w1) * fw;
                let c10 = at(d1, h0, w0) * (1.0 - fw) + at(d1, h0, w1) * fw;
                let c11 = at(d1, h1, w0) * (1.0 - fw) + at(d1, h1, w1) * fw;
                let c0 = c00 * (1.0 - fh) + c01 * fh;
                let c1 = c10 * (1.0 - fh) + c11 * fh;
                out.push((c0 * (1.0 - fd) + c1 * fd) as f32);
            }
        }
    }
    Volume3D::new(target, rescaled_spacing(volume.spacing(), dims, target), out)
}

pub fn resize_channels(channels: &MultiChannelVolume, target: Dims) -> Result<MultiChannelVolume> {
    MultiChannelVolume::new(
        channels
            .channels()
            .iter()
            .map(|c| resize_volume(c, target))
            .collect::<Result<_>>()?,
    )
}

/// Nearest-neighbour resampling, so no new label values can appear.
pub fn resize_labels(labels: &LabelVolume, target: Dims) -> Result<LabelVolume> {
    check_target(target)?;
    let dims = labels.dims();
    let [td, th, tw] = [0, 1, 2].map(|a| nearest_taps(dims[a], target[a]));
    let mut out = Vec::with_capacity(voxel_count(target));
    for &d in &td {
        for &h in &th {
            for &w in &tw {
                out.push(labels.get(d, h, w));
            }
        }
    }
    LabelVolume::new(target, rescaled_spacing(labels.spacing(), dims, target), out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub percentile: f64,
    pub connectivity: Connectivity,
    pub margin_scale: f64,
    pub target_dims: Dims,
    /// Channel used for brain isolation (0 = Flair in canonical order).
    pub mask_channel: usize,
    /// Restrict depth to the labelled tumor slices (training-time step).
    pub slice_select: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            percentile: 0.99,
            connectivity: Connectivity::TwentySix,
            margin_scale: 0.25,
            target_dims: [128, 128, 128],
            mask_channel: 0,
            slice_select: true,
        }
    }
}

/// Per-case JSON sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub case_id: String,
    /// `[min, max]` per `(d, h, w)` axis, inclusive.
    pub bbox: [[usize; 2]; 3],
    pub margin: [usize; 3],
    pub brain_voxels: usize,
    pub stats: Vec<NormalizationStats>,
    pub slice_range: Option<[usize; 2]>,
    pub output_dims: Dims,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct PreprocessedCase {
    pub channels: MultiChannelVolume,
    pub labels: LabelVolume,
    pub report: CaseReport,
}

/// Runs the full chain for one case: crop → normalise → slice → resize.
pub fn preprocess_case(
    case_id: &str,
    channels: &MultiChannelVolume,
    labels: &LabelVolume,
    config: &PreprocessConfig,
) -> Result<PreprocessedCase> {
    run_case(channels, labels, config).map_err(|e| e.in_case(case_id)).map(|(c, l, mut r)| {
        r.case_id = case_id.to_string();
        PreprocessedCase {
            channels: c,
            labels: l,
            report: r,
        }
    })
}

fn run_case(
    channels: &MultiChannelVolume,
    labels: &LabelVolume,
    config: &PreprocessConfig,
) -> Result<(MultiChannelVolume, LabelVolume, CaseReport)> {
    if channels.dims() != labels.dims() {
        return Err(Error::Shape(format!(
            "channel dims {:?} differ from label dims {:?}",
            channels.dims(),
            labels.dims()
        )));
    }
    if config.mask_channel >= channels.num_channels() {
        return Err(Error::Config(format!(
            "mask channel {} out of range for {} channels",
            config.mask_channel,
            channels.num_channels()
        )));
    }
    if !labels.has_tumor() {
        return Err(Error::NoTumor);
    }
    let mut flags = Vec::new();

    let raw = threshold_mask(channels.channel(config.mask_channel), config.percentile)?;
    let brain = largest_component(&raw, config.connectivity)?;
    let fit = pca_bounding_box(&brain.mask, config.margin_scale)?;
    if fit.degenerate {
        flags.push("degenerate_frame".to_string());
    }
    let bbox = fit.bbox;

    let cropped = channels.crop(&bbox)?;
    let cropped_labels = labels.crop(&bbox)?;
    let cropped_mask = brain.mask.crop(&bbox)?;
    if cropped_labels.labels().iter().filter(|&&l| l != 0).count()
        < labels.labels().iter().filter(|&&l| l != 0).count()
    {
        flags.push("tumor_clipped_by_crop".to_string());
    }

    let mut stats = Vec::with_capacity(cropped.num_channels());
    let mut normalized = Vec::with_capacity(cropped.num_channels());
    for (i, c) in cropped.channels().iter().enumerate() {
        let (z, s) = zscore_normalize(c, &cropped_mask)?;
        if s.zero_variance {
            flags.push(format!("zero_variance:{i}"));
        }
        stats.push(s);
        normalized.push(z);
    }
    let mut normalized = MultiChannelVolume::new(normalized)?;
    let mut cropped_labels = cropped_labels;

    let mut range_out = None;
    if config.slice_select {
        let range = slice_range(&cropped_labels)?;
        normalized = slice_depth(&normalized, range)?;
        cropped_labels = slice_depth(&cropped_labels, range)?;
        range_out = Some([range.start, range.end]);
    }

    let out_channels = resize_channels(&normalized, config.target_dims)?;
    let out_labels = resize_labels(&cropped_labels, config.target_dims)?;
    let report = CaseReport {
        case_id: String::new(),
        bbox: [0, 1, 2].map(|a| [bbox.min[a], bbox.max[a]]),
        margin: bbox.margin,
        brain_voxels: brain.component_size,
        stats,
        slice_range: range_out,
        output_dims: config.target_dims,
        flags,
    };
    Ok((out_channels, out_labels, report))
}
