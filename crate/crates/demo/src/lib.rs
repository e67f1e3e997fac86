//! Browser demo: three small operations from the glioseg core exported
//! through wasm-bindgen. Each returns a JSON string so the page needs no
//! generated bindings beyond plain function calls.
//!
//! The plain Rust functions are the tested surface; the `#[wasm_bindgen]`
//! wrappers only serialise.

use glioseg::autodiff::{Graph, Tensor};
use glioseg::phantom::{brain_case, BrainPhantom};
use glioseg::preprocess::{largest_component, pca_bounding_box, threshold_mask, PreprocessConfig};
use glioseg::radiomics::{extract_mesh, mesh_volume, sphericity, surface_area, voxel_volume};
use glioseg::volume::Mask;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Clone, Serialize)]
pub struct Geometry {
    pub grid: usize,
    pub voxels: usize,
    pub mesh_volume: f64,
    pub voxel_volume: f64,
    pub surface_area: f64,
    pub sphericity: f64,
    pub analytic_volume: f64,
    /// Exact for spheres; Thomsen's approximation (within ~1%) otherwise.
    pub analytic_area: f64,
    pub triangles: usize,
}

/// Shape features of a voxelised ellipsoid with semi-axes in voxels.
pub fn ellipsoid_geometry(a: f64, b: f64, c: f64) -> Result<Geometry, String> {
    if !(a >= 0.5 && b >= 0.5 && c >= 0.5 && a.max(b).max(c) <= 40.0) {
        return Err("semi-axes must lie in [0.5, 40]".into());
    }
    let n = 2 * a.max(b).max(c).ceil() as usize + 3;
    let m = (n / 2) as f64;
    let mask = Mask::from_fn([n; 3], |d, h, w| {
        ((w as f64 - m) / a).powi(2) + ((h as f64 - m) / b).powi(2) + ((d as f64 - m) / c).powi(2) <= 1.0
    });
    if mask.is_empty() {
        return Err("ellipsoid contains no voxel centre".into());
    }
    let mesh = extract_mesh(&mask, [1.0; 3]).map_err(|e| e.to_string())?;
    let volume = mesh_volume(&mesh).map_err(|e| e.to_string())?;
    let area = surface_area(&mesh);
    let p = 1.6075;
    let thomsen = 4.0 * std::f64::consts::PI * (((a * b).powf(p) + (a * c).powf(p) + (b * c).powf(p)) / 3.0).powf(1.0 / p);
    Ok(Geometry {
        grid: n,
        voxels: mask.count(),
        mesh_volume: volume,
        voxel_volume: voxel_volume(&mask, [1.0; 3]),
        surface_area: area,
        sphericity: sphericity(volume, area).map_err(|e| e.to_string())?,
        analytic_volume: 4.0 / 3.0 * std::f64::consts::PI * a * b * c,
        analytic_area: thomsen,
        triangles: mesh.faces.len(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct LossPoint {
    pub p: f64,
    pub dice: f64,
    pub focal: f64,
    pub sum: f64,
    pub max: f64,
}

/// Dice and focal loss of a two-class prediction that gives every voxel
/// probability `p` on its true class, over a grid of `p` values. Half the
/// voxels belong to each class.
pub fn loss_curve(gamma: f64, alpha: f64, points: usize) -> Result<Vec<LossPoint>, String> {
    if !(gamma >= 0.0 && alpha > 0.0 && (2..=512).contains(&points)) {
        return Err("need gamma >= 0, alpha > 0 and 2..=512 points".into());
    }
    let y = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).map_err(|e| e.to_string())?;
    (0..points)
        .map(|i| {
            let p = 0.01 + 0.98 * i as f64 / (points - 1) as f64;
            let pred = Tensor::new(vec![1, 2, 2], vec![p, 1.0 - p, 1.0 - p, p]).map_err(|e| e.to_string())?;
            let mut g = Graph::new();
            let v = g.constant(pred);
            let d = g.dice_loss(v, &y, &[1.0, 1.0], 1e-6).map_err(|e| e.to_string())?;
            let f = g.focal_loss(v, &y, &[alpha, alpha], gamma).map_err(|e| e.to_string())?;
            let (dice, focal) = (g.value(d).data()[0], g.value(f).data()[0]);
            Ok(LossPoint {
                p,
                dice,
                focal,
                sum: dice + focal,
                max: dice.max(focal),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct CropView {
    pub dims: [usize; 3],
    /// Inclusive `[min, max]` per `(d, h, w)` axis.
    pub bbox: [[usize; 2]; 3],
    pub kept_fraction: f64,
    pub brain_voxels: usize,
    /// Axial slice through the box centre, 0..=255, row-major `h x w`.
    pub slice: Vec<u8>,
    pub slice_index: usize,
}

/// Generates a rotated 96³ phantom and its PCA crop box.
pub fn phantom_crop(seed: u64) -> Result<CropView, String> {
    let case = brain_case(&BrainPhantom::rotated96(), seed);
    let cfg = PreprocessConfig::default();
    let flair = case.channels.channel(cfg.mask_channel);
    let raw = threshold_mask(flair, cfg.percentile).map_err(|e| e.to_string())?;
    let brain = largest_component(&raw, cfg.connectivity).map_err(|e| e.to_string())?;
    let bbox = pca_bounding_box(&brain.mask, cfg.margin_scale).map_err(|e| e.to_string())?.bbox;
    let [_, h, w] = flair.dims();
    let z = (bbox.min[0] + bbox.max[0]) / 2;
    let plane = &flair.data()[z * h * w..(z + 1) * h * w];
    let (lo, hi) = plane.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    Ok(CropView {
        dims: flair.dims(),
        bbox: [0, 1, 2].map(|a| [bbox.min[a], bbox.max[a]]),
        kept_fraction: bbox.voxel_count() as f64 / flair.len() as f64,
        brain_voxels: brain.component_size,
        slice: plane.iter().map(|&v| ((v - lo) * scale).round() as u8).collect(),
        slice_index: z,
    })
}

fn to_json<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.map(|v| serde_json::to_string(&v).expect("serializable")).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = ellipsoidGeometry)]
pub fn ellipsoid_geometry_js(a: f64, b: f64, c: f64) -> Result<String, JsValue> {
    to_json(ellipsoid_geometry(a, b, c))
}

#[wasm_bindgen(js_name = lossCurve)]
pub fn loss_curve_js(gamma: f64, alpha: f64, points: usize) -> Result<String, JsValue> {
    to_json(loss_curve(gamma, alpha, points))
}

#[wasm_bindgen(js_name = phantomCrop)]
pub fn phantom_crop_js(seed: u32) -> Result<String, JsValue> {
    to_json(phantom_crop(u64::from(seed)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_geometry_is_close_to_analytic() {
        let g = ellipsoid_geometry(10.0, 10.0, 10.0).unwrap();
        assert!((g.mesh_volume / g.analytic_volume - 1.0).abs() < 0.03);
        assert!((g.analytic_area - 400.0 * std::f64::consts::PI).abs() < 1e-9);
        assert!(g.sphericity > 0.85 && g.sphericity <= 1.0);
        assert!(ellipsoid_geometry(0.1, 1.0, 1.0).is_err());
    }

    #[test]
    fn loss_curve_endpoints() {
        let c = loss_curve(2.0, 1.0, 50).unwrap();
        assert_eq!(c.len(), 50);
        // p = 0.5 sits between samples; check monotone decrease instead
        assert!(c.windows(2).all(|w| w[1].dice < w[0].dice && w[1].focal < w[0].focal));
        assert!(c.iter().all(|p| p.max >= p.dice && p.sum >= p.max));
        let mid = loss_curve(2.0, 1.0, 3).unwrap()[1].clone();
        assert!((mid.focal - 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((mid.dice - 0.5).abs() < 1e-6);
    }

    #[test]
    fn crop_view_is_consistent() {
        let v = phantom_crop(3).unwrap();
        assert_eq!(v.slice.len(), v.dims[1] * v.dims[2]);
        assert!(v.kept_fraction > 0.0 && v.kept_fraction < 0.6);
        assert!(v.bbox.iter().zip(v.dims).all(|(b, n)| b[0] <= b[1] && b[1] < n));
    }
}
