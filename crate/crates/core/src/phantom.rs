//! Synthetic brain/tumor volumes with analytically known geometry.
//!
//! A phantom is a bright ellipsoidal "brain" on a dark, noisy background
//! holding a nested spherical tumor: edema (label 2) around a core whose
//! outer shell enhances (label 4) around a necrotic centre (label 1).

use std::path::Path;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::Result;
use crate::volume::{Dims, LabelVolume, Mask, MultiChannelVolume, Volume3D};
use crate::vxl::{write_vxl, VxlArray};

#[derive(Debug, Clone, PartialEq)]
pub struct BrainPhantom {
    pub dims: Dims,
    pub spacing: [f32; 3],
    /// Brain semi-axes in voxels along `(d, h, w)` before rotation.
    pub semi_axes: [f64; 3],
    /// Relative jitter applied to each semi-axis, `0` for none.
    pub axis_jitter: f64,
    pub rotate: bool,
    /// Whole-tumor radius in voxels.
    pub tumor_radius: f64,
    pub background_noise: f32,
    pub tissue_noise: f32,
    /// Isolated bright voxels scattered outside the brain.
    pub specks: usize,
    pub tumor: TumorKind,
}

/// Which tumor compartments a phantom carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TumorKind {
    /// Necrosis (1) inside enhancing shell (4) inside edema (2).
    #[default]
    Full,
    /// The enhancing shell is necrotic too.
    NoEnhancing,
    /// Edema only.
    EdemaOnly,
}

impl BrainPhantom {
    /// 64³ scan whose brain occupies under 1% of the grid.
    pub fn small() -> Self {
        Self {
            dims: [64, 64, 64],
            spacing: [1.0, 1.0, 1.0],
            semi_axes: [10.0, 8.0, 7.0],
            axis_jitter: 0.0,
            rotate: false,
            tumor_radius: 4.0,
            background_noise: 4.0,
            tissue_noise: 1.0,
            specks: 6,
            tumor: TumorKind::Full,
        }
    }

    /// Already cropped 32³ case for direct network training.
    pub fn toy() -> Self {
        Self {
            dims: [32, 32, 32],
            spacing: [1.0, 1.0, 1.0],
            semi_axes: [14.0, 12.0, 11.0],
            axis_jitter: 0.0,
            rotate: false,
            tumor_radius: 7.0,
            background_noise: 2.0,
            tissue_noise: 1.0,
            specks: 0,
            tumor: TumorKind::Full,
        }
    }

    /// 96³ randomly rotated and sized brain with speck artifacts.
    pub fn rotated96() -> Self {
        Self {
            dims: [96, 96, 96],
            spacing: [1.0, 1.0, 1.0],
            semi_axes: [30.0, 24.0, 19.0],
            axis_jitter: 0.15,
            rotate: true,
            tumor_radius: 8.0,
            background_noise: 4.0,
            tissue_noise: 1.0,
            specks: 40,
            tumor: TumorKind::Full,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PhantomCase {
    /// Flair, T1ce, T2.
    pub channels: MultiChannelVolume,
    pub labels: LabelVolume,
    /// Exact brain ellipsoid.
    pub brain: Mask,
    pub tumor_center: [f64; 3],
}

impl PhantomCase {
    /// Channels z-scored over the brain ellipsoid, as the network sees them.
    pub fn normalized_channels(&self) -> Result<MultiChannelVolume> {
        let vols = self
            .channels
            .channels()
            .iter()
            .map(|v| crate::preprocess::zscore_normalize(v, &self.brain).map(|(z, _)| z))
            .collect::<Result<Vec<_>>>()?;
        MultiChannelVolume::new(vols)
    }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]))
        .to_rotation_matrix()
        .into_inner()
}

pub fn brain_case(spec: &BrainPhantom, seed: u64) -> PhantomCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = spec.dims;
    let center = Vector3::from(dims.map(|n| (n as f64 - 1.0) / 2.0));
    let axes = spec
        .semi_axes
        .map(|a| a * (1.0 + spec.axis_jitter * rng.random_range(-1.0..=1.0)));
    let rot = if spec.rotate {
        random_rotation(&mut rng)
    } else {
        Matrix3::identity()
    };
    let inv = rot.transpose();

    // Tumor ball fully inside the inscribed sphere of the brain.
    let reach = (axes.iter().cloned().fold(f64::INFINITY, f64::min) - spec.tumor_radius).max(0.0) * 0.6;
    let offset = loop {
        let v = Vector3::new(
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
        );
        if v.norm() <= 1.0 {
            break v * reach;
        }
    };
    let tumor_center = center + offset;
    let (r_wt, r_tc, r_ncr) = (spec.tumor_radius, spec.tumor_radius * 0.6, spec.tumor_radius * 0.3);

    let bg = Normal::new(0.0f32, spec.background_noise.max(1e-6)).unwrap();
    let tissue = Normal::new(0.0f32, spec.tissue_noise.max(1e-6)).unwrap();
    let n = crate::volume::voxel_count(dims);
    let mut flair = Vec::with_capacity(n);
    let mut t1ce = Vec::with_capacity(n);
    let mut t2 = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut brain = Vec::with_capacity(n);
    for d in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                let p = Vector3::new(d as f64, h as f64, w as f64);
                let local = inv * (p - center);
                let rho2 = (0..3).map(|a| (local[a] / axes[a]).powi(2)).sum::<f64>();
                let inside = rho2 <= 1.0;
                brain.push(inside);
                if !inside {
                    flair.push(bg.sample(&mut rng).abs());
                    t1ce.push(bg.sample(&mut rng).abs());
                    t2.push(bg.sample(&mut rng).abs());
                    labels.push(0);
                    continue;
                }
                let base = 100.0 + 20.0 * (1.0 - rho2 as f32);
                let r = (p - tumor_center).norm();
                let nested = if r <= r_ncr {
                    1u8
                } else if r <= r_tc {
                    4
                } else if r <= r_wt {
                    2
                } else {
                    0
                };
                let label = match (spec.tumor, nested) {
                    (TumorKind::NoEnhancing, 4) => 1,
                    (TumorKind::EdemaOnly, 1 | 4) => 2,
                    (_, l) => l,
                };
                let (df, dt1, dt2) = match label {
                    1 => (10.0, -30.0, 60.0),
                    4 => (20.0, 80.0, 20.0),
                    2 => (50.0, -10.0, 40.0),
                    _ => (0.0, 0.0, 0.0),
                };
                labels.push(label);
                flair.push(base + df + tissue.sample(&mut rng));
                t1ce.push(base * 0.9 + dt1 + tissue.sample(&mut rng));
                t2.push(base * 1.1 + dt2 + tissue.sample(&mut rng));
            }
        }
    }
    for _ in 0..spec.specks {
        let idx = rng.random_range(0..n);
        if !brain[idx] {
            flair[idx] = 200.0;
            t1ce[idx] = 200.0;
            t2[idx] = 200.0;
        }
    }
    let vol = |data| Volume3D::new(dims, spec.spacing, data).expect("phantom volume is valid");
    PhantomCase {
        channels: MultiChannelVolume::new(vec![vol(flair), vol(t1ce), vol(t2)]).expect("shared geometry"),
        labels: LabelVolume::new(dims, spec.spacing, labels).expect("phantom labels are valid"),
        brain: Mask { dims, bits: brain },
        tumor_center: [tumor_center.x, tumor_center.y, tumor_center.z],
    }
}

/// Solid ball of voxels whose centres lie within `radius` of `center`.
pub fn ball(dims: Dims, center: [f64; 3], radius: f64) -> Mask {
    let r2 = radius * radius;
    Mask::from_fn(dims, |d, h, w| {
        let x = [d as f64 - center[0], h as f64 - center[1], w as f64 - center[2]];
        x.iter().map(|v| v * v).sum::<f64>() <= r2
    })
}

/// Axis-aligned solid box `[lo, hi)` per axis.
pub fn cuboid(dims: Dims, lo: [usize; 3], hi: [usize; 3]) -> Mask {
    Mask::from_fn(dims, |d, h, w| {
        let p = [d, h, w];
        (0..3).all(|a| lo[a] <= p[a] && p[a] < hi[a])
    })
}

/// Writes a case as `<dir>/<id>/<id>_{flair,t1ce,t2,seg}.vxl`.
pub fn write_case_dir(dir: &Path, case_id: &str, case: &PhantomCase) -> Result<()> {
    let case_dir = dir.join(case_id);
    std::fs::create_dir_all(&case_dir).map_err(|e| crate::Error::io(&case_dir, e))?;
    for (name, vol) in MultiChannelVolume::CANONICAL.iter().zip(case.channels.channels()) {
        write_vxl(case_dir.join(format!("{case_id}_{name}.vxl")), &VxlArray::from(vol))?;
    }
    write_vxl(case_dir.join(format!("{case_id}_seg.vxl")), &VxlArray::from(&case.labels))
}
