//! The segmentation network: encoder, dilated context pathway, multi-scale
//! feature fusion (FMFF), decoder with hybrid upsampling and residual
//! integration (HUSR), residual skips (rSkip) and weighted aggregation of
//! per-stage heads.
//!
//! The structure is written once against [`Backend`]; one backend traces
//! shapes and parameters (used for `describe` and initialisation), the
//! other builds an autodiff graph.
//!
//! Channels at level `l` (1-based, full resolution at `l = 1`) are
//! `base · 2^(l−1)`. Encoder stage 1 is a conv at full resolution; every
//! later stage convolves and then max-pools by 2.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ConvSpec, Graph, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::volume::Dims;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Encoder stages `L`.
    pub depth: usize,
    pub base_filters: usize,
    pub in_channels: usize,
    pub classes: usize,
    /// One dilated 3³ conv per rate in the context pathway.
    pub dilation_rates: Vec<usize>,
    /// Number of deepest scales fused by FMFF, counting the context map.
    pub fmff_scales: usize,
    pub fmff: bool,
    pub husr: bool,
    pub rskip: bool,
    pub aggregation: bool,
    pub input_dims: Dims,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::toy()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Base,
    Fmff,
    FmffHusr,
    Full,
}

impl Ablation {
    pub const LATTICE: [Ablation; 4] = [Ablation::Base, Ablation::Fmff, Ablation::FmffHusr, Ablation::Full];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Base => "base",
            Ablation::Fmff => "+fmff",
            Ablation::FmffHusr => "+fmff+husr",
            Ablation::Full => "full",
        }
    }
}

impl NetworkConfig {
    /// Desk-scale preset: 3 stages, 8 base filters, 32³ input.
    pub fn toy() -> Self {
        Self {
            depth: 3,
            base_filters: 8,
            in_channels: 3,
            classes: 4,
            dilation_rates: vec![1, 2, 4],
            fmff_scales: 2,
            fmff: true,
            husr: true,
            rskip: true,
            aggregation: true,
            input_dims: [32, 32, 32],
        }
    }

    /// Full-size preset on 128³ three-channel input.
    pub fn paper() -> Self {
        Self {
            depth: 4,
            base_filters: 16,
            input_dims: [128, 128, 128],
            ..Self::toy()
        }
    }

    pub fn with_ablation(mut self, a: Ablation) -> Self {
        let (fmff, husr, rest) = match a {
            Ablation::Base => (false, false, false),
            Ablation::Fmff => (true, false, false),
            Ablation::FmffHusr => (true, true, false),
            Ablation::Full => (true, true, true),
        };
        self.fmff = fmff;
        self.husr = husr;
        self.rskip = rest;
        self.aggregation = rest;
        self
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_filters << (level - 1)
    }

    /// Finest level taking part in FMFF.
    pub fn fusion_level(&self) -> usize {
        self.depth + 1 - self.fmff_scales
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("depth must be >= 2, got {}", self.depth)));
        }
        if self.base_filters == 0 || self.in_channels == 0 || self.classes < 2 {
            return Err(Error::Config("filters, input channels and classes must be positive (classes >= 2)".into()));
        }
        if self.fmff_scales == 0 || self.fmff_scales > self.depth {
            return Err(Error::Config(format!(
                "fmff_scales must lie in 1..={}, got {}",
                self.depth, self.fmff_scales
            )));
        }
        if self.dilation_rates.contains(&0) {
            return Err(Error::Config("dilation rates must be >= 1".into()));
        }
        self.check_input(self.input_dims)
    }

    pub fn check_input(&self, dims: Dims) -> Result<()> {
        let f = 1 << (self.depth - 1);
        if dims.iter().any(|&n| n == 0 || n % f != 0) {
            return Err(Error::Shape(format!(
                "input dims {dims:?} must be positive multiples of {f} for depth {}",
                self.depth
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// He normal weights, zero bias.
    He,
    /// All zeros.
    Zero,
}

/// Operations the network structure is written against.
pub trait Backend {
    type V: Clone;
    fn conv(&mut self, name: &str, x: &Self::V, spec: ConvSpec, init: Init) -> Result<Self::V>;
    fn conv_t(&mut self, name: &str, x: &Self::V, spec: ConvSpec) -> Result<Self::V>;
    fn relu(&mut self, x: &Self::V) -> Result<Self::V>;
    fn pool(&mut self, x: &Self::V) -> Result<Self::V>;
    fn upsample(&mut self, x: &Self::V, scale: usize) -> Result<Self::V>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mean2(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn concat(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn weighted_sum(&mut self, xs: &[Self::V], gammas: &[String], init: f64) -> Result<Self::V>;
}

pub struct Outputs<V> {
    /// Class logits at full resolution (softmax is applied by the caller).
    pub logits: V,
    /// Per-stage head logits at full resolution; one entry without aggregation.
    pub heads: Vec<V>,
}

fn conv_relu<B: Backend>(b: &mut B, name: &str, x: &B::V, spec: ConvSpec) -> Result<B::V> {
    let y = b.conv(name, x, spec, Init::He)?;
    b.relu(&y)
}

/// The network structure.
pub fn structure<B: Backend>(cfg: &NetworkConfig, b: &mut B, x: &B::V) -> Result<Outputs<B::V>> {
    cfg.validate()?;
    let l_max = cfg.depth;
    let c = |l: usize| cfg.channels(l);

    // encoder
    let mut enc = Vec::with_capacity(l_max);
    enc.push(conv_relu(b, "enc1", x, ConvSpec::cube(cfg.in_channels, c(1), 3))?);
    for l in 2..=l_max {
        let y = conv_relu(b, &format!("enc{l}"), &enc[l - 2], ConvSpec::cube(c(l - 1), c(l), 3))?;
        enc.push(b.pool(&y)?);
    }

    // context pathway at the deepest resolution
    let mut ctx = enc[l_max - 1].clone();
    for (i, &r) in cfg.dilation_rates.iter().enumerate() {
        ctx = conv_relu(b, &format!("ctx{}", i + 1), &ctx, ConvSpec::dilated(c(l_max), c(l_max), r))?;
    }

    // FMFF: align the deepest scales to the finest participating level and sum
    let rf = cfg.fusion_level();
    let fused = if cfg.fmff {
        let mut acc: Option<B::V> = None;
        for l in rf..=l_max {
            let src = if l == l_max { &ctx } else { &enc[l - 1] };
            let aligned = b.conv(&format!("fmff{l}"), src, ConvSpec::cube(c(l), c(rf), 1), Init::He)?;
            let up = b.upsample(&aligned, 1 << (l - rf))?;
            acc = Some(match acc {
                None => up,
                Some(a) => b.add(&a, &up)?,
            });
        }
        acc
    } else {
        None
    };

    let mut dec = match (&fused, rf == l_max) {
        (Some(f), true) => b.add(&ctx, f)?,
        _ => ctx,
    };
    // decoder maps indexed by level, deepest first
    let mut dec_maps: BTreeMap<usize, B::V> = BTreeMap::new();
    dec_maps.insert(l_max, dec.clone());
    for j in (1..l_max).rev() {
        let skip = &enc[j - 1];
        let mut up = if cfg.husr {
            let learned = b.conv_t(
                &format!("up{j}"),
                &dec,
                ConvSpec::cube(c(j + 1), c(j + 1), 2).with_stride(2).with_padding(0),
            )?;
            let interp = b.upsample(&dec, 2)?;
            let hybrid = b.mean2(&learned, &interp)?;
            let proj = b.conv(&format!("proj{j}"), skip, ConvSpec::cube(c(j), c(j + 1), 1), Init::He)?;
            let residual = b.add(&hybrid, &proj)?;
            conv_relu(b, &format!("refine{j}"), &residual, ConvSpec::cube(c(j + 1), c(j), 3))?
        } else {
            b.conv_t(
                &format!("up{j}"),
                &dec,
                ConvSpec::cube(c(j + 1), c(j), 2).with_stride(2).with_padding(0),
            )?
        };
        if let (Some(f), true) = (&fused, j == rf) {
            up = b.add(&up, f)?;
        }
        let cat = b.concat(&up, skip)?;
        let mut d = conv_relu(b, &format!("dec{j}"), &cat, ConvSpec::cube(2 * c(j), c(j), 3))?;
        if cfg.rskip {
            let r = b.conv(&format!("res{j}"), skip, ConvSpec::cube(c(j), c(j), 1), Init::Zero)?;
            let sum = b.add(&d, &r)?;
            d = conv_relu(b, &format!("rskip{j}"), &sum, ConvSpec::cube(c(j), c(j), 3))?;
        }
        dec_maps.insert(j, d.clone());
        dec = d;
    }

    // heads
    if cfg.aggregation {
        let mut heads = Vec::with_capacity(l_max);
        let mut gammas = Vec::with_capacity(l_max);
        for (&l, m) in &dec_maps {
            let h = b.conv(&format!("head{l}"), m, ConvSpec::cube(c(l), cfg.classes, 1), Init::He)?;
            heads.push(b.upsample(&h, 1 << (l - 1))?);
            gammas.push(format!("gamma{l}"));
        }
        let logits = b.weighted_sum(&heads, &gammas, 1.0 / l_max as f64)?;
        Ok(Outputs { logits, heads })
    } else {
        let h = b.conv("head1", &dec_maps[&1], ConvSpec::cube(c(1), cfg.classes, 1), Init::He)?;
        Ok(Outputs {
            logits: h.clone(),
            heads: vec![h],
        })
    }
}

/// One row of [`describe`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub name: String,
    pub op: String,
    /// `(channels, d, h, w)` of the layer output.
    pub output: [usize; 4],
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: ParamInit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamInit {
    /// Normal with std `sqrt(2 / fan_in)`.
    He { fan_in: usize },
    Zero,
    Constant(u64),
}

/// Shape-only backend: records layers and parameter declarations.
#[derive(Debug, Default)]
pub struct Tracer {
    pub layers: Vec<LayerInfo>,
    pub params: Vec<ParamSpec>,
}

type Shape4 = [usize; 4];

impl Tracer {
    fn layer(&mut self, name: &str, op: &str, output: Shape4, params: Vec<ParamSpec>) {
        let n = params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
        self.layers.push(LayerInfo {
            name: name.to_string(),
            op: op.to_string(),
            output,
            params: n,
        });
        self.params.extend(params);
    }

    fn conv_params(name: &str, wshape: Vec<usize>, cout: usize, init: Init, fan_in: usize) -> Vec<ParamSpec> {
        let winit = match init {
            Init::He => ParamInit::He { fan_in },
            Init::Zero => ParamInit::Zero,
        };
        vec![
            ParamSpec {
                name: format!("{name}.w"),
                shape: wshape,
                init: winit,
            },
            ParamSpec {
                name: format!("{name}.b"),
                shape: vec![cout],
                init: ParamInit::Zero,
            },
        ]
    }
}

fn same(a: &Shape4, b: &Shape4, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

impl Backend for Tracer {
    type V = Shape4;

    fn conv(&mut self, name: &str, x: &Shape4, spec: ConvSpec, init: Init) -> Result<Shape4> {
        if x[0] != spec.in_channels {
            return Err(Error::Shape(format!("{name}: {} channels into {spec:?}", x[0])));
        }
        let o = spec.conv_out([x[1], x[2], x[3]])?;
        let out = [spec.out_channels, o[0], o[1], o[2]];
        let p = Self::conv_params(name, spec.weight_shape(), spec.out_channels, init, spec.in_channels * spec.taps());
        self.layer(name, &format!("conv{}^3/r{}", spec.kernel[0], spec.dilation), out, p);
        Ok(out)
    }

    fn conv_t(&mut self, name: &str, x: &Shape4, spec: ConvSpec) -> Result<Shape4> {
        if x[0] != spec.in_channels {
            return Err(Error::Shape(format!("{name}: {} channels into {spec:?}", x[0])));
        }
        let o = spec.transposed_out([x[1], x[2], x[3]])?;
        let out = [spec.out_channels, o[0], o[1], o[2]];
        let p = Self::conv_params(
            name,
            spec.transposed_weight_shape(),
            spec.out_channels,
            Init::He,
            spec.in_channels * spec.taps() / spec.stride.pow(3),
        );
        self.layer(name, &format!("conv_t{}^3/s{}", spec.kernel[0], spec.stride), out, p);
        Ok(out)
    }

    fn relu(&mut self, x: &Shape4) -> Result<Shape4> {
        Ok(*x)
    }

    fn pool(&mut self, x: &Shape4) -> Result<Shape4> {
        let out = [x[0], x[1] / 2, x[2] / 2, x[3] / 2];
        self.layer("pool", "max_pool2", out, Vec::new());
        Ok(out)
    }

    fn upsample(&mut self, x: &Shape4, scale: usize) -> Result<Shape4> {
        Ok([x[0], x[1] * scale, x[2] * scale, x[3] * scale])
    }

    fn add(&mut self, a: &Shape4, b: &Shape4) -> Result<Shape4> {
        same(a, b, "add")?;
        Ok(*a)
    }

    fn mean2(&mut self, a: &Shape4, b: &Shape4) -> Result<Shape4> {
        same(a, b, "mean")?;
        Ok(*a)
    }

    fn concat(&mut self, a: &Shape4, b: &Shape4) -> Result<Shape4> {
        same(&[0, a[1], a[2], a[3]], &[0, b[1], b[2], b[3]], "concat")?;
        Ok([a[0] + b[0], a[1], a[2], a[3]])
    }

    fn weighted_sum(&mut self, xs: &[Shape4], gammas: &[String], init: f64) -> Result<Shape4> {
        for x in &xs[1..] {
            same(&xs[0], x, "weighted_sum")?;
        }
        let p = gammas
            .iter()
            .map(|g| ParamSpec {
                name: g.clone(),
                shape: vec![1],
                init: ParamInit::Constant(init.to_bits()),
            })
            .collect();
        self.layer("aggregate", "weighted_sum", xs[0], p);
        Ok(xs[0])
    }
}

/// Builds the autodiff graph against bound parameters.
pub struct GraphBackend<'a, T> {
    pub g: &'a mut Graph<T>,
    pub params: &'a Bound,
}

impl<T: Real> Backend for GraphBackend<'_, T> {
    type V = Var;

    fn conv(&mut self, name: &str, x: &Var, spec: ConvSpec, _init: Init) -> Result<Var> {
        let w = self.params.get(&format!("{name}.w"))?;
        let b = self.params.get(&format!("{name}.b"))?;
        self.g.conv3d(*x, w, Some(b), &spec)
    }

    fn conv_t(&mut self, name: &str, x: &Var, spec: ConvSpec) -> Result<Var> {
        let w = self.params.get(&format!("{name}.w"))?;
        let b = self.params.get(&format!("{name}.b"))?;
        self.g.conv_transpose3d(*x, w, Some(b), &spec)
    }

    fn relu(&mut self, x: &Var) -> Result<Var> {
        Ok(self.g.relu(*x))
    }

    fn pool(&mut self, x: &Var) -> Result<Var> {
        self.g.max_pool3d(*x, 2, 2)
    }

    fn upsample(&mut self, x: &Var, scale: usize) -> Result<Var> {
        self.g.upsample_trilinear(*x, scale)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.g.add(*a, *b)
    }

    fn mean2(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let s = self.g.add(*a, *b)?;
        Ok(self.g.scale(s, T::of(0.5)))
    }

    fn concat(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.g.concat_channel(&[*a, *b])
    }

    fn weighted_sum(&mut self, xs: &[Var], gammas: &[String], _init: f64) -> Result<Var> {
        let gs = gammas.iter().map(|n| self.params.get(n)).collect::<Result<Vec<_>>>()?;
        self.g.weighted_sum(xs, &gs)
    }
}

/// Per-layer shapes and parameter counts for a configuration.
pub fn describe(cfg: &NetworkConfig) -> Result<Tracer> {
    let mut t = Tracer::default();
    let [d, h, w] = cfg.input_dims;
    let out = structure(cfg, &mut t, &[cfg.in_channels, d, h, w])?;
    t.layers.push(LayerInfo {
        name: "output".into(),
        op: "logits".into(),
        output: out.logits,
        params: 0,
    });
    Ok(t)
}

pub fn param_count(cfg: &NetworkConfig) -> Result<usize> {
    Ok(describe(cfg)?
        .params
        .iter()
        .map(|p| p.shape.iter().product::<usize>())
        .sum())
}

/// Freshly initialised parameters (He normal weights, zero biases, zero
/// residual projections, uniform aggregation weights).
pub fn init_params<T: Real>(cfg: &NetworkConfig, seed: u64) -> Result<ParamStore<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for p in describe(cfg)?.params {
        let n: usize = p.shape.iter().product();
        let data: Vec<T> = match p.init {
            ParamInit::Zero => vec![T::zero(); n],
            ParamInit::Constant(bits) => vec![T::of(f64::from_bits(bits)); n],
            ParamInit::He { fan_in } => {
                let normal = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).expect("finite std");
                (0..n).map(|_| T::of(normal.sample(&mut rng))).collect()
            }
        };
        store.insert(p.name, Tensor::new(p.shape, data)?)?;
    }
    Ok(store)
}

/// Checks that a store has exactly the parameters a configuration needs.
pub fn check_params<T: Real>(cfg: &NetworkConfig, store: &ParamStore<T>) -> Result<()> {
    let specs = describe(cfg)?.params;
    if specs.len() != store.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} parameters, configuration needs {}",
            store.len(),
            specs.len()
        )));
    }
    for p in specs {
        match store.get(&p.name) {
            Some(t) if t.shape() == p.shape.as_slice() => {}
            Some(t) => {
                return Err(Error::Config(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.shape
                )))
            }
            None => return Err(Error::Config(format!("checkpoint lacks parameter {}", p.name))),
        }
    }
    Ok(())
}

/// Runs the network on `x: (b, in_channels, d, h, w)` inside `g`.
pub fn forward<T: Real>(cfg: &NetworkConfig, g: &mut Graph<T>, params: &Bound, x: Var) -> Result<Outputs<Var>> {
    let xs = g.value(x).dims5()?;
    if xs[1] != cfg.in_channels {
        return Err(Error::Shape(format!(
            "network expects {} input channels, got {}",
            cfg.in_channels, xs[1]
        )));
    }
    cfg.check_input([xs[2], xs[3], xs[4]])?;
    let mut b = GraphBackend { g, params };
    structure(cfg, &mut b, &x)
}

/// Softmax class probabilities for a batch, without gradient tracking.
pub fn predict<T: Real>(cfg: &NetworkConfig, params: &ParamStore<T>, x: Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let bound = params.bind_constant(&mut g);
    let xv = g.constant(x);
    let out = forward(cfg, &mut g, &bound, xv)?;
    let p = g.softmax_channel(out.logits)?;
    let heads = out.heads.iter().map(|&h| g.value(h).clone()).collect();
    Ok((g.value(p).clone(), heads))
}

#[cfg(test)]
mod tests;
