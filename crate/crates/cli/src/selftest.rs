//! Built-in verification: gradient checks, geometry oracles, metric
//! identities and loss values.

use glioseg::autodiff::gradcheck::op_suite;
use glioseg::autodiff::{Graph, OpKind, Tensor};
use glioseg::metrics::{classification_metrics, dsc, jcs, ConfusionCounts};
use glioseg::radiomics::{extract_mesh, mesh_volume, sphericity, surface_area, TriangleMesh};
use glioseg::volume::Mask;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    /// Observed deviation from the oracle.
    pub deviation: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.deviation.is_finite() && self.deviation < self.tolerance
    }
}

fn check(name: impl Into<String>, deviation: f64, tolerance: f64) -> Check {
    Check {
        name: name.into(),
        deviation,
        tolerance,
    }
}

fn scalar_loss(f: impl FnOnce(&mut Graph<f64>, glioseg::autodiff::Var) -> glioseg::Result<glioseg::autodiff::Var>, p: Tensor<f64>) -> f64 {
    let mut g = Graph::new();
    let v = g.constant(p);
    let l = f(&mut g, v).expect("well-formed loss inputs");
    g.value(l).data()[0]
}

pub fn run(seeds: u64, fault: Option<OpKind>) -> glioseg::Result<Vec<Check>> {
    let mut out = Vec::new();
    for op in op_suite(0..seeds, fault)? {
        out.push(check(format!("grad {}", op.op), op.max_rel_error, 1e-4));
    }

    let cube = TriangleMesh::unit_cube();
    out.push(check("cube mesh volume", (mesh_volume(&cube)? - 1.0).abs(), 1e-9));
    out.push(check("cube mesh area", (surface_area(&cube) - 6.0).abs(), 1e-9));
    let closed_form = std::f64::consts::PI.cbrt() * 36f64.cbrt() / 6.0;
    out.push(check("cube sphericity", (sphericity(1.0, 6.0)? - closed_form).abs(), 1e-12));
    let voxel = Mask::from_fn([3, 3, 3], |d, h, w| (d, h, w) == (1, 1, 1));
    let ball = Mask::from_fn([37; 3], |d, h, w| {
        let r2 = [d, h, w].iter().map(|&x| (x as f64 - 18.0).powi(2)).sum::<f64>();
        r2 <= 256.0
    });
    let exact = 4.0 / 3.0 * std::f64::consts::PI * 16f64.powi(3);
    out.push(check("ball r=16 mesh volume (rel)", (mesh_volume(&extract_mesh(&ball, [1.0; 3])?)? / exact - 1.0).abs(), 0.02));
    out.push(check("single voxel octahedron", (mesh_volume(&extract_mesh(&voxel, [1.0; 3])?)? - 1.0 / 6.0).abs(), 1e-12));

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..64);
        let a = Mask::from_fn([1, 1, n], |_, _, _| rng.random_bool(0.5));
        let b = Mask::from_fn([1, 1, n], |_, _, _| rng.random_bool(0.5));
        let (d, j) = (dsc(&a, &b)?.value, jcs(&a, &b)?.value);
        worst = worst.max((j - d / (2.0 - d)).abs()).max((d - dsc(&b, &a)?.value).abs());
    }
    out.push(check("jaccard/dice identity", worst, 1e-12));
    let m = classification_metrics(&ConfusionCounts { tp: 3, fp: 1, tn: 5, fn_: 1 });
    let dev = [m.acc.value - 0.8, m.prec.value - 0.75, m.sen.value - 0.75, m.spe.value - 5.0 / 6.0]
        .iter()
        .fold(0.0f64, |a, v| a.max(v.abs()));
    out.push(check("confusion hand case", dev, 1e-9));

    let onehot = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0])?;
    let y = onehot.clone();
    out.push(check("dice perfect", scalar_loss(|g, v| g.dice_loss(v, &y, &[1.0, 1.0], 1e-6), onehot.clone()), 1e-6));
    out.push(check("focal perfect", scalar_loss(|g, v| g.focal_loss(v, &y, &[1.0, 1.0], 2.0), onehot), 1e-6));
    let half = Tensor::full(&[1, 2, 2], 0.5);
    out.push(check(
        "dice uniform",
        (scalar_loss(|g, v| g.dice_loss(v, &y, &[1.0, 1.0], 1e-6), half.clone()) - 0.5).abs(),
        1e-6,
    ));
    let y1 = Tensor::new(vec![1, 2, 1], vec![1.0, 0.0])?;
    let p1 = Tensor::full(&[1, 2, 1], 0.5);
    out.push(check(
        "focal p_t=0.5",
        (scalar_loss(|g, v| g.focal_loss(v, &y1, &[1.0, 1.0], 2.0), p1) - 0.25 * std::f64::consts::LN_2).abs(),
        1e-12,
    ));
    Ok(out)
}

pub fn table(checks: &[Check]) -> String {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    let mut s = String::new();
    for c in checks {
        s.push_str(&format!(
            "{:<width$}  {:>10.3e}  < {:<8.1e}  {}\n",
            c.name,
            c.deviation,
            c.tolerance,
            if c.passed() { "pass" } else { "FAIL" }
        ));
    }
    s
}
