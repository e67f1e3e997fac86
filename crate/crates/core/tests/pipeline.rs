//! Cross-module checks on phantom data: file formats feeding preprocessing,
//! metrics on known label maps and radiomics on the phantom tumor.

use std::path::Path;

use glioseg::metrics::evaluate_case;
use glioseg::nifti::read_nifti;
use glioseg::phantom::{brain_case, write_case_dir, BrainPhantom};
use glioseg::preprocess::{preprocess_case, PreprocessConfig};
use glioseg::radiomics::radiomics_for_case;
use glioseg::vxl::{read_vxl, write_vxl, VxlArray};
use glioseg::{Error, LabelVolume, MultiChannelVolume, RegionId};

#[test]
fn nifti_fixture_reads_in_grid_order() {
    let v = read_nifti(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/ramp4.nii")).unwrap();
    assert_eq!(v.dims(), [4, 4, 4]);
    assert_eq!(v.spacing(), [1.0; 3]);
    assert_eq!(v.get(0, 0, 1), 1.0);
    assert_eq!(v.get(0, 1, 0), 4.0);
    assert_eq!(v.get(1, 0, 0), 16.0);
    assert!(v.data().iter().enumerate().all(|(i, &x)| x == i as f32));
}

#[test]
fn phantom_case_dir_survives_disk_and_preprocesses() {
    let dir = tempfile::tempdir().unwrap();
    let case = brain_case(&BrainPhantom::small(), 11);
    write_case_dir(dir.path(), "p1", &case).unwrap();
    let read = |name: &str| read_vxl(dir.path().join("p1").join(format!("p1_{name}.vxl"))).unwrap();
    let channels =
        MultiChannelVolume::new(["flair", "t1ce", "t2"].map(|n| read(n).into_volume().unwrap()).to_vec()).unwrap();
    let labels = read("seg").into_labels().unwrap();
    assert_eq!(labels, case.labels);
    assert_eq!(channels.channels(), case.channels.channels());

    let cfg = PreprocessConfig {
        target_dims: [32, 32, 32],
        ..Default::default()
    };
    let out = preprocess_case("p1", &channels, &labels, &cfg).unwrap();
    assert_eq!(out.channels.dims(), [32, 32, 32]);
    assert_eq!(out.labels.dims(), [32, 32, 32]);
    assert!(out.report.flags.is_empty(), "{:?}", out.report.flags);
    // the slice range spans exactly the tumor's depth extent
    let [lo, hi] = out.report.slice_range.unwrap();
    let tumor_depths: Vec<usize> = case
        .labels
        .region_mask(RegionId::WT)
        .coords()
        .map(|p| p[0] - out.report.bbox[0][0])
        .collect();
    assert_eq!((lo, hi), (*tumor_depths.iter().min().unwrap(), *tumor_depths.iter().max().unwrap()));
    // the nested regions survive resizing
    let (et, tc, wt) = [RegionId::ET, RegionId::TC, RegionId::WT].map(|r| out.labels.region_mask(r)).into();
    assert!(!et.is_empty() && et.is_subset_of(&tc) && tc.is_subset_of(&wt));

    let path = dir.path().join("out.vxl");
    write_vxl(&path, &VxlArray::from(&out.channels)).unwrap();
    assert_eq!(read_vxl(&path).unwrap().into_channels().unwrap().channels(), out.channels.channels());
}

#[test]
fn tumorless_case_is_rejected_with_its_id() {
    let case = brain_case(&BrainPhantom::small(), 1);
    let blank = LabelVolume::zeros(case.labels.dims(), case.labels.spacing()).unwrap();
    let err = preprocess_case("blank", &case.channels, &blank, &PreprocessConfig::default()).unwrap_err();
    match err {
        Error::Case { case_id, source } => {
            assert_eq!(case_id, "blank");
            assert!(matches!(*source, Error::NoTumor));
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn identical_prediction_scores_one_everywhere() {
    let case = brain_case(&BrainPhantom::toy(), 2);
    let scores = evaluate_case("c", &case.labels, &case.labels).unwrap();
    for r in &scores.regions {
        let v = r.values();
        assert_eq!(v, [1.0; 6], "{:?}", r);
    }
}

#[test]
fn phantom_tumor_radiomics_are_consistent() {
    let case = brain_case(&BrainPhantom::toy(), 4);
    for region in RegionId::ALL {
        let f = radiomics_for_case(&case.labels, region).unwrap();
        let ratio = f.mesh_volume / f.voxel_volume;
        assert!((0.95..=1.05).contains(&ratio), "{region}: {ratio}");
        assert!(f.sphericity > 0.5 && f.sphericity < 1.0);
        assert_eq!(f.fragment_count, 1);
    }
}
