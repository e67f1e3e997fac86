//! Shape features of a segmented region from a marching-cubes surface.
//!
//! The case table is generated rather than transcribed: for each of the 256
//! corner configurations, every cube face contributes iso-segments between
//! its crossed edges, the segments are chained into loops and each loop is
//! fan-triangulated. Ambiguous faces (two diagonal inside corners) always
//! cut the inside corners off separately, so neighbouring cubes agree on
//! every shared face and the surface is closed.

use std::collections::HashMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{label_components, Connectivity};
use crate::volume::{LabelVolume, Mask, RegionId};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriangleMesh {
    /// Positions in mm as `(x, y, z)`, x along the fastest grid axis.
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[u32; 3]>,
}

/// Corner `k` of the unit cube sits at `(k & 1, k >> 1 & 1, k >> 2 & 1)`.
fn corner(k: usize) -> [i32; 3] {
    [(k & 1) as i32, (k >> 1 & 1) as i32, (k >> 2 & 1) as i32]
}

/// The twelve cube edges as corner pairs `(a, b)` with `a < b`.
fn edges() -> Vec<(usize, usize)> {
    let mut e = Vec::with_capacity(12);
    for a in 0..8 {
        for axis in 0..3 {
            if a >> axis & 1 == 0 {
                e.push((a, a | 1 << axis));
            }
        }
    }
    e
}

fn edge_index(list: &[(usize, usize)], a: usize, b: usize) -> usize {
    let key = (a.min(b), a.max(b));
    list.iter().position(|&e| e == key).expect("cube edge")
}

fn sub(a: [i32; 3], b: [i32; 3]) -> [i32; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross_i(a: [i32; 3], b: [i32; 3]) -> [i32; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot_i(a: [i32; 3], b: [i32; 3]) -> i32 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Triangles (as edge-index triples) for one corner configuration.
fn triangulate_case(case: usize) -> Vec<[u8; 3]> {
    let list = edges();
    let inside = |k: usize| case >> k & 1 == 1;
    // doubled coordinates keep midpoints integral
    let mid = |e: usize| {
        let (a, b) = list[e];
        let (p, q) = (corner(a), corner(b));
        [p[0] + q[0], p[1] + q[1], p[2] + q[2]]
    };
    let mut next = [usize::MAX; 12];
    for axis in 0..3 {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        for side in 0..2 {
            let at = |i: usize, j: usize| side << axis | i << u | j << v;
            let ring = [at(0, 0), at(1, 0), at(1, 1), at(0, 1)];
            let mut normal = [0; 3];
            normal[axis] = if side == 1 { 1 } else { -1 };
            // segments as (edge, edge, inside corner next to the first edge)
            let mut segs = Vec::new();
            let crossed: Vec<usize> = (0..4).filter(|&i| inside(ring[i]) != inside(ring[(i + 1) % 4])).collect();
            match crossed.len() {
                0 => {}
                2 => {
                    let (i, j) = (crossed[0], crossed[1]);
                    let ei = edge_index(&list, ring[i], ring[(i + 1) % 4]);
                    let ej = edge_index(&list, ring[j], ring[(j + 1) % 4]);
                    let cin = if inside(ring[i]) { ring[i] } else { ring[(i + 1) % 4] };
                    segs.push((ei, ej, cin));
                }
                4 => {
                    for k in 0..4 {
                        if inside(ring[k]) {
                            let e1 = edge_index(&list, ring[(k + 3) % 4], ring[k]);
                            let e2 = edge_index(&list, ring[k], ring[(k + 1) % 4]);
                            segs.push((e1, e2, ring[k]));
                        }
                    }
                }
                _ => unreachable!("a face ring crosses an even number of times"),
            }
            for (a, b, cin) in segs {
                let (pa, pb) = (mid(a), mid(b));
                let c2 = corner(cin).map(|x| 2 * x);
                let s = dot_i(cross_i(sub(pb, pa), sub(c2, pa)), normal);
                let (from, to) = if s < 0 { (a, b) } else { (b, a) };
                debug_assert_eq!(next[from], usize::MAX);
                next[from] = to;
            }
        }
    }
    let mut seen = [false; 12];
    let mut tris = Vec::new();
    for start in 0..12 {
        if next[start] == usize::MAX || seen[start] {
            continue;
        }
        let mut lp = vec![start];
        seen[start] = true;
        let mut e = next[start];
        while e != start {
            seen[e] = true;
            lp.push(e);
            e = next[e];
        }
        // A fan diagonal lying in a cube face could be repeated by the
        // neighbouring cube, so pick an apex whose diagonals all cross the
        // interior.
        let n = lp.len();
        let apex = (0..n)
            .find(|&r| (2..n - 1).all(|k| !share_face(list[lp[r]], list[lp[(r + k) % n]])))
            .expect("every loop has an interior fan");
        for k in 1..n - 1 {
            tris.push([lp[apex] as u8, lp[(apex + k) % n] as u8, lp[(apex + k + 1) % n] as u8]);
        }
    }
    tris
}

fn share_face(a: (usize, usize), b: (usize, usize)) -> bool {
    (0..3).any(|axis| {
        let bits = [a.0, a.1, b.0, b.1].map(|c| c >> axis & 1);
        bits.iter().all(|&x| x == bits[0])
    })
}

fn case_table() -> &'static Vec<Vec<[u8; 3]>> {
    static TABLE: OnceLock<Vec<Vec<[u8; 3]>>> = OnceLock::new();
    TABLE.get_or_init(|| (0..256).map(triangulate_case).collect())
}

/// Marching cubes at iso-level 0.5 on the binary field. Voxel centres are
/// the lattice nodes, so every vertex is an edge midpoint; the mask is
/// treated as surrounded by empty space. `spacing` is `(Δx, Δy, Δz)`.
pub fn extract_mesh(mask: &Mask, spacing: [f32; 3]) -> Result<TriangleMesh> {
    if mask.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let [nd, nh, nw] = mask.dims.map(|n| n as i64);
    let at = |x: i64, y: i64, z: i64| -> bool {
        x >= 0 && y >= 0 && z >= 0 && x < nw && y < nh && z < nd && mask.bits[((z * nh + y) * nw + x) as usize]
    };
    let list = edges();
    let table = case_table();
    let sp = spacing.map(f64::from);
    let mut mesh = TriangleMesh::default();
    let mut ids: HashMap<([i64; 3], usize), u32> = HashMap::new();
    for z in -1..nd {
        for y in -1..nh {
            for x in -1..nw {
                let mut case = 0;
                for k in 0..8 {
                    let c = corner(k);
                    if at(x + i64::from(c[0]), y + i64::from(c[1]), z + i64::from(c[2])) {
                        case |= 1 << k;
                    }
                }
                for tri in &table[case] {
                    let mut f = [0u32; 3];
                    for (slot, &e) in f.iter_mut().zip(tri) {
                        let (a, b) = list[e as usize];
                        let ca = corner(a);
                        let axis = (0..3).find(|&i| (a ^ b) >> i & 1 == 1).expect("edge axis");
                        let origin = [x + i64::from(ca[0]), y + i64::from(ca[1]), z + i64::from(ca[2])];
                        *slot = *ids.entry((origin, axis)).or_insert_with(|| {
                            let mut p = [origin[0] as f64, origin[1] as f64, origin[2] as f64];
                            p[axis] += 0.5;
                            mesh.vertices.push([p[0] * sp[0], p[1] * sp[1], p[2] * sp[2]]);
                            (mesh.vertices.len() - 1) as u32
                        });
                    }
                    mesh.faces.push(f);
                }
            }
        }
    }
    Ok(mesh)
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

impl TriangleMesh {
    /// The unit cube `[0, 1]³` as 12 outward-facing triangles.
    pub fn unit_cube() -> Self {
        let vertices = (0..8).map(|k| corner(k).map(f64::from)).collect();
        let quads = [[0, 2, 3, 1], [4, 5, 7, 6], [0, 1, 5, 4], [2, 6, 7, 3], [0, 4, 6, 2], [1, 3, 7, 5]];
        let faces = quads.iter().flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]]).collect();
        Self { vertices, faces }
    }

    /// Every undirected edge is used by exactly two faces, once in each
    /// direction.
    pub fn check_closed(&self) -> Result<()> {
        let n = self.vertices.len() as u32;
        let mut directed: HashMap<(u32, u32), u32> = HashMap::new();
        for f in &self.faces {
            if f.iter().any(|&i| i >= n) {
                return Err(Error::OpenMesh(format!("face {f:?} indexes past {n} vertices")));
            }
            for k in 0..3 {
                *directed.entry((f[k], f[(k + 1) % 3])).or_default() += 1;
            }
        }
        for (&(a, b), &count) in &directed {
            if count != 1 || directed.get(&(b, a)) != Some(&1) {
                return Err(Error::OpenMesh(format!("edge {a}-{b} is not shared by exactly two faces")));
            }
        }
        Ok(())
    }

    pub fn signed_volume(&self) -> f64 {
        self.faces
            .iter()
            .map(|f| {
                let [a, b, c] = f.map(|i| self.vertices[i as usize]);
                dot3(a, cross3(b, c))
            })
            .sum::<f64>()
            / 6.0
    }
}

/// Enclosed volume `|Σ v₁·(v₂×v₃)| / 6` of a closed mesh.
pub fn mesh_volume(mesh: &TriangleMesh) -> Result<f64> {
    mesh.check_closed()?;
    Ok(mesh.signed_volume().abs())
}

pub fn surface_area(mesh: &TriangleMesh) -> f64 {
    mesh.faces
        .iter()
        .map(|f| {
            let [a, b, c] = f.map(|i| mesh.vertices[i as usize]);
            let n = cross3(sub3(b, a), sub3(c, a));
            dot3(n, n).sqrt() / 2.0
        })
        .sum()
}

pub fn voxel_volume(mask: &Mask, spacing: [f32; 3]) -> f64 {
    mask.count() as f64 * spacing.iter().map(|&s| f64::from(s)).product::<f64>()
}

/// `π^(1/3) (6V)^(2/3) / A`, 1 for a sphere.
pub fn sphericity(volume: f64, area: f64) -> Result<f64> {
    if !(volume > 0.0 && area > 0.0) {
        return Err(Error::InvalidGeometry(format!("volume {volume} and area {area} must be positive")));
    }
    Ok(std::f64::consts::PI.cbrt() * (6.0 * volume).powf(2.0 / 3.0) / area)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadiomicsFeatures {
    pub mesh_volume: f64,
    pub voxel_volume: f64,
    pub surface_area: f64,
    pub sphericity: f64,
    /// 26-connected components in the region; mesh features use the largest.
    pub fragment_count: usize,
}

pub fn features_for_mask(mask: &Mask, spacing: [f32; 3]) -> Result<RadiomicsFeatures> {
    let (labels, sizes) = label_components(mask, Connectivity::TwentySix);
    let largest = sizes
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i as u32)
        .ok_or(Error::EmptyRegion)?;
    let main = Mask {
        dims: mask.dims,
        bits: labels.iter().map(|&l| l == largest).collect(),
    };
    let mesh = extract_mesh(&main, spacing)?;
    let v = mesh_volume(&mesh)?;
    let a = surface_area(&mesh);
    Ok(RadiomicsFeatures {
        mesh_volume: v,
        voxel_volume: voxel_volume(mask, spacing),
        surface_area: a,
        sphericity: sphericity(v, a)?,
        fragment_count: sizes.len(),
    })
}

pub fn radiomics_for_case(labels: &LabelVolume, region: RegionId) -> Result<RadiomicsFeatures> {
    features_for_mask(&labels.region_mask(region), labels.spacing())
}

/// One row of the feature table; `features` is `None` for an empty region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub case_id: String,
    pub region: RegionId,
    pub features: Option<RadiomicsFeatures>,
}

pub fn case_rows(case_id: &str, labels: &LabelVolume) -> Result<Vec<FeatureRow>> {
    RegionId::ALL
        .iter()
        .map(|&region| {
            let features = match radiomics_for_case(labels, region) {
                Ok(f) => Some(f),
                Err(Error::EmptyRegion) => None,
                Err(e) => return Err(e.in_case(case_id)),
            };
            Ok(FeatureRow {
                case_id: case_id.to_string(),
                region,
                features,
            })
        })
        .collect()
}

pub const CSV_HEADER: &str = "case_id,region,mesh_volume,voxel_volume,surface_area,sphericity,fragment_count";

/// Feature table; empty regions leave the feature columns blank.
pub fn rows_to_csv(rows: &[FeatureRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        match &r.features {
            Some(f) => s.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6},{}\n",
                r.case_id, r.region, f.mesh_volume, f.voxel_volume, f.surface_area, f.sphericity, f.fragment_count
            )),
            None => s.push_str(&format!("{},{},,,,,0\n", r.case_id, r.region)),
        }
    }
    s
}

/// Parses a table written by [`rows_to_csv`].
pub fn rows_from_csv(text: &str) -> Result<Vec<FeatureRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::CorruptFile("radiomics table header".into()));
    }
    let bad = |line: &str| Error::CorruptFile(format!("radiomics row {line:?}"));
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 7 {
                return Err(bad(line));
            }
            let region: RegionId = cols[1].parse()?;
            let features = if cols[2].is_empty() {
                None
            } else {
                let num = |i: usize| cols[i].parse::<f64>().map_err(|_| bad(line));
                Some(RadiomicsFeatures {
                    mesh_volume: num(2)?,
                    voxel_volume: num(3)?,
                    surface_area: num(4)?,
                    sphericity: num(5)?,
                    fragment_count: cols[6].parse().map_err(|_| bad(line))?,
                })
            };
            Ok(FeatureRow {
                case_id: cols[0].to_string(),
                region,
                features,
            })
        })
        .collect()
}
