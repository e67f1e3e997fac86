//! Central finite-difference verification of analytic gradients.

use super::{Graph, OpKind, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// `‖g_analytic − g_fd‖ / (‖g_analytic‖ + ‖g_fd‖)` per input.
    pub rel_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().cloned().fold(0.0, f64::max)
    }
}

/// Norm-wise relative error; exactly zero gradients on both sides count as
/// a perfect match.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic) + norm(numeric);
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Compares the gradient of `build`'s scalar output with respect to every
/// input against central differences with step `eps`.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], eps: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check_gradients_with_fault(inputs, eps, None, build)
}

/// As [`check_gradients`], with an optional corrupted operator.
pub fn check_gradients_with_fault<F>(
    inputs: &[Tensor<f64>],
    eps: f64,
    fault: Option<OpKind>,
    build: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    if let Some(kind) = fault {
        g.inject_fault(kind);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::Shape("gradient check needs a scalar output".into()));
    }
    g.backward(out)?;

    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = g
            .grad(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let mut numeric = vec![0.0; inputs[k].numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = probe[k].data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * eps);
        }
        rel_errors.push(relative_error(&analytic, &numeric));
    }
    Ok(GradCheck { rel_errors })
}

/// Result of checking one operator over several seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub seeds: usize,
    pub max_rel_error: f64,
}

impl OpCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

mod inputs {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::Tensor;

    pub fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Values bounded away from zero, so relu kinks are never crossed.
    pub fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
    }

    /// A shuffled ladder of distinct values 0.01 apart, so no pooling
    /// window has a near-tie.
    pub fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.5).collect();
        for i in (1..n).rev() {
            v.swap(i, rng.random_range(0..=i));
        }
        Tensor::new(shape.to_vec(), v).unwrap()
    }

    /// Random one-hot labels over axis 1 of `(b, c, inner...)`.
    pub fn one_hot(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let (b, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let mut t = Tensor::zeros(shape);
        for n in 0..b {
            for i in 0..inner {
                let k = rng.random_range(0..c);
                t.data_mut()[(n * c + k) * inner + i] = 1.0;
            }
        }
        t
    }
}

/// Reduces `y` to a scalar through a fixed random projection so every
/// output element carries a distinct upstream gradient.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = inputs::rng(seed ^ 0x9e37_79b9);
    let r = g.constant(inputs::uniform(&mut rng, g.shape(y)));
    let m = g.mul(y, r)?;
    Ok(g.sum(m))
}

type Case = (Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>);

/// Operators covered by [`op_suite`].
pub const SUITE_OPS: [&str; 15] = [
    "conv3d",
    "conv3d_dilated",
    "conv_transpose3d",
    "max_pool3d",
    "upsample_trilinear",
    "relu",
    "softmax_channel",
    "add",
    "concat_channel",
    "weighted_sum",
    "dice_loss",
    "focal_loss",
    "max",
    "linear",
    "bce_with_logits",
];

fn suite_case(op: &str, seed: u64) -> Case {
    use super::ConvSpec;
    let mut rng = inputs::rng(seed);
    match op {
        "conv3d" | "conv3d_dilated" => {
            let spec = if op == "conv3d" {
                ConvSpec::cube(2, 3, 3)
            } else {
                ConvSpec::dilated(2, 2, 2)
            };
            let x = inputs::uniform(&mut rng, &[1, 2, 5, 5, 5]);
            let w = inputs::uniform(&mut rng, &spec.weight_shape());
            let b = inputs::uniform(&mut rng, &[spec.out_channels]);
            (
                vec![x, w, b],
                Box::new(move |g, v| {
                    let y = g.conv3d(v[0], v[1], Some(v[2]), &spec)?;
                    project(g, y, seed)
                }),
            )
        }
        "conv_transpose3d" => {
            let spec = if seed.is_multiple_of(2) {
                ConvSpec::cube(2, 3, 2).with_stride(2).with_padding(0)
            } else {
                ConvSpec::cube(2, 2, 3).with_stride(2)
            };
            let x = inputs::uniform(&mut rng, &[1, 2, 3, 3, 3]);
            let w = inputs::uniform(&mut rng, &spec.transposed_weight_shape());
            let b = inputs::uniform(&mut rng, &[spec.out_channels]);
            (
                vec![x, w, b],
                Box::new(move |g, v| {
                    let y = g.conv_transpose3d(v[0], v[1], Some(v[2]), &spec)?;
                    project(g, y, seed)
                }),
            )
        }
        "max_pool3d" => (
            vec![inputs::distinct(&mut rng, &[1, 2, 4, 4, 5])],
            Box::new(move |g, v| {
                let y = g.max_pool3d(v[0], 2, 2)?;
                project(g, y, seed)
            }),
        ),
        "upsample_trilinear" => {
            let scale = 2 + (seed % 2) as usize;
            (
                vec![inputs::uniform(&mut rng, &[1, 2, 3, 2, 3])],
                Box::new(move |g, v| {
                    let y = g.upsample_trilinear(v[0], scale)?;
                    project(g, y, seed)
                }),
            )
        }
        "relu" => (
            vec![inputs::off_kink(&mut rng, &[2, 3, 4])],
            Box::new(move |g, v| {
                let y = g.relu(v[0]);
                project(g, y, seed)
            }),
        ),
        "softmax_channel" => (
            vec![inputs::uniform(&mut rng, &[2, 4, 3, 2, 2])],
            Box::new(move |g, v| {
                let y = g.softmax_channel(v[0])?;
                project(g, y, seed)
            }),
        ),
        "add" => (
            vec![
                inputs::uniform(&mut rng, &[1, 2, 3, 3]),
                inputs::uniform(&mut rng, &[1, 2, 3, 3]),
            ],
            Box::new(move |g, v| {
                let y = g.add(v[0], v[1])?;
                project(g, y, seed)
            }),
        ),
        "concat_channel" => (
            vec![
                inputs::uniform(&mut rng, &[2, 1, 2, 3, 2]),
                inputs::uniform(&mut rng, &[2, 3, 2, 3, 2]),
            ],
            Box::new(move |g, v| {
                let y = g.concat_channel(&[v[0], v[1]])?;
                project(g, y, seed)
            }),
        ),
        "weighted_sum" => (
            vec![
                inputs::uniform(&mut rng, &[1, 2, 3, 3, 3]),
                inputs::uniform(&mut rng, &[1, 2, 3, 3, 3]),
                inputs::uniform(&mut rng, &[1]),
                inputs::uniform(&mut rng, &[1]),
            ],
            Box::new(move |g, v| {
                let y = g.weighted_sum(&[v[0], v[1]], &[v[2], v[3]])?;
                project(g, y, seed)
            }),
        ),
        "dice_loss" | "focal_loss" | "max" => {
            let shape = [2, 4, 3, 3, 2];
            let logits = inputs::uniform(&mut rng, &shape).cast::<f64>();
            let target = inputs::one_hot(&mut rng, &shape);
            let w: Vec<f64> = (0..4).map(|_| rng.random_range(0.2..2.0)).collect();
            let alpha: Vec<f64> = (0..4).map(|_| rng.random_range(0.2..1.0)).collect();
            let op = op.to_string();
            (
                vec![logits.map_scale(3.0)],
                Box::new(move |g, v| {
                    let p = g.softmax_channel(v[0])?;
                    match op.as_str() {
                        "dice_loss" => g.dice_loss(p, &target, &w, 1e-6),
                        "focal_loss" => g.focal_loss(p, &target, &alpha, 2.0),
                        _ => {
                            let d = g.dice_loss(p, &target, &w, 1e-6)?;
                            let f = g.focal_loss(p, &target, &alpha, 2.0)?;
                            g.max2(d, f)
                        }
                    }
                }),
            )
        }
        "linear" => (
            vec![
                inputs::uniform(&mut rng, &[5, 4]),
                inputs::uniform(&mut rng, &[3, 4]),
                inputs::uniform(&mut rng, &[3]),
            ],
            Box::new(move |g, v| {
                let y = g.linear(v[0], v[1], v[2])?;
                project(g, y, seed)
            }),
        ),
        "bce_with_logits" => {
            let t = Tensor::from_fn(&[6, 3], |i| (i * 7 + seed as usize).is_multiple_of(3) as u8 as f64);
            let mask: Vec<bool> = (0..18).map(|i| !(i + seed as usize).is_multiple_of(5)).collect();
            (
                vec![inputs::uniform(&mut rng, &[6, 3]).map_scale(3.0)],
                Box::new(move |g, v| g.bce_with_logits(v[0], &t, Some(&mask))),
            )
        }
        other => panic!("unknown suite op {other}"),
    }
}

use rand::Rng;

impl Tensor<f64> {
    fn map_scale(mut self, c: f64) -> Self {
        self.data_mut().iter_mut().for_each(|v| *v *= c);
        self
    }
}

/// Runs the central-difference check for every operator in
/// [`SUITE_OPS`] over `seeds`, step `1e-4`.
pub fn op_suite(seeds: std::ops::Range<u64>, fault: Option<OpKind>) -> Result<Vec<OpCheck>> {
    SUITE_OPS
        .iter()
        .map(|&op| {
            let mut worst = 0.0f64;
            for seed in seeds.clone() {
                let (xs, build) = suite_case(op, seed);
                let r = check_gradients_with_fault(&xs, 1e-4, fault, build)?;
                worst = worst.max(r.max_rel_error());
            }
            Ok(OpCheck {
                op,
                seeds: seeds.clone().count(),
                max_rel_error: worst,
            })
        })
        .collect()
}
