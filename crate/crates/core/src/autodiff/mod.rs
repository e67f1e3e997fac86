//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only arena: every operation pushes a node whose
//! parents already exist, so index order is a topological order and
//! [`Graph::backward`] simply walks the arena in reverse. Leaf gradients
//! accumulate across `backward` calls until [`Graph::zero_grad`]; gradients
//! of intermediate nodes are scratch and are discarded after each pass.
//!
//! Spatial tensors use the layout `(batch, channel, d, h, w)`.

pub mod gradcheck;
mod kernels;
mod params;
mod tensor;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use kernels::Geom;
pub use params::{Bound, ParamStore};
pub use tensor::{Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    /// Cubic kernel, stride 1, "same" padding for odd `k`.
    pub fn cube(in_channels: usize, out_channels: usize, k: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: [k; 3],
            stride: 1,
            padding: (k - 1) / 2,
            dilation: 1,
        }
    }

    /// 3³ kernel with rate `r` and padding `r`, which keeps resolution.
    pub fn dilated(in_channels: usize, out_channels: usize, r: usize) -> Self {
        Self {
            padding: r,
            dilation: r,
            ..Self::cube(in_channels, out_channels, 3)
        }
    }

    pub fn with_stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn with_padding(mut self, p: usize) -> Self {
        self.padding = p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.contains(&0) || self.stride == 0 || self.dilation == 0 {
            return Err(Error::Shape(format!("invalid conv spec {self:?}")));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Shape(format!("conv spec with zero channels {self:?}")));
        }
        Ok(())
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// `(out, in, kd, kh, kw)`.
    pub fn weight_shape(&self) -> Vec<usize> {
        let [a, b, c] = self.kernel;
        vec![self.out_channels, self.in_channels, a, b, c]
    }

    /// `(in, out, kd, kh, kw)` for the transposed convolution.
    pub fn transposed_weight_shape(&self) -> Vec<usize> {
        let [a, b, c] = self.kernel;
        vec![self.in_channels, self.out_channels, a, b, c]
    }

    pub fn conv_out(&self, n: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let extent = self.dilation * (self.kernel[a] - 1) + 1;
            let padded = n[a] + 2 * self.padding;
            if padded < extent {
                return Err(Error::Shape(format!(
                    "input extent {} (padded {padded}) smaller than kernel extent {extent}",
                    n[a]
                )));
            }
            out[a] = (padded - extent) / self.stride + 1;
        }
        Ok(out)
    }

    pub fn transposed_out(&self, n: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let full = (n[a] - 1) * self.stride + self.dilation * (self.kernel[a] - 1) + 1;
            if full <= 2 * self.padding {
                return Err(Error::Shape(format!(
                    "transposed conv output is empty for input {n:?}"
                )));
            }
            out[a] = full - 2 * self.padding;
        }
        Ok(out)
    }

    fn geom(&self, big: [usize; 3], small: [usize; 3]) -> Geom {
        Geom {
            big,
            small,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            dilation: self.dilation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv3d,
    ConvTranspose3d,
    MaxPool3d,
    Upsample,
    Relu,
    Softmax,
    Add,
    Concat,
    WeightedSum,
    Scale,
    Mul,
    Sum,
    Max2,
    DiceLoss,
    FocalLoss,
    Linear,
    BceWithLogits,
}

impl OpKind {
    pub const ALL: [OpKind; 18] = [
        OpKind::Leaf,
        OpKind::Conv3d,
        OpKind::ConvTranspose3d,
        OpKind::MaxPool3d,
        OpKind::Upsample,
        OpKind::Relu,
        OpKind::Softmax,
        OpKind::Add,
        OpKind::Concat,
        OpKind::WeightedSum,
        OpKind::Scale,
        OpKind::Mul,
        OpKind::Sum,
        OpKind::Max2,
        OpKind::DiceLoss,
        OpKind::FocalLoss,
        OpKind::Linear,
        OpKind::BceWithLogits,
    ];

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv3d => "conv3d",
            OpKind::ConvTranspose3d => "conv_transpose3d",
            OpKind::MaxPool3d => "max_pool3d",
            OpKind::Upsample => "upsample_trilinear",
            OpKind::Relu => "relu",
            OpKind::Softmax => "softmax_channel",
            OpKind::Add => "add",
            OpKind::Concat => "concat_channel",
            OpKind::WeightedSum => "weighted_sum",
            OpKind::Scale => "scale",
            OpKind::Mul => "mul",
            OpKind::Sum => "sum",
            OpKind::Max2 => "max",
            OpKind::DiceLoss => "dice_loss",
            OpKind::FocalLoss => "focal_loss",
            OpKind::Linear => "linear",
            OpKind::BceWithLogits => "bce_with_logits",
        }
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Geom,
        transposed: bool,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        x: Var,
        scale: usize,
    },
    Relu {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Concat {
        xs: Vec<Var>,
    },
    WeightedSum {
        xs: Vec<Var>,
        gammas: Vec<Var>,
    },
    Scale {
        x: Var,
        c: T,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    Max2 {
        a: Var,
        b: Var,
    },
    Dice {
        pred: Var,
        target: Tensor<T>,
        weights: Vec<T>,
        eps: T,
    },
    Focal {
        pred: Var,
        target: Tensor<T>,
        alpha: Vec<T>,
        gamma: T,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Bce {
        logits: Var,
        targets: Vec<T>,
        mask: Vec<bool>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv {
                transposed: false, ..
            } => OpKind::Conv3d,
            Op::Conv { transposed: true, .. } => OpKind::ConvTranspose3d,
            Op::MaxPool { .. } => OpKind::MaxPool3d,
            Op::Upsample { .. } => OpKind::Upsample,
            Op::Relu { .. } => OpKind::Relu,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Add { .. } => OpKind::Add,
            Op::Concat { .. } => OpKind::Concat,
            Op::WeightedSum { .. } => OpKind::WeightedSum,
            Op::Scale { .. } => OpKind::Scale,
            Op::Mul { .. } => OpKind::Mul,
            Op::Sum { .. } => OpKind::Sum,
            Op::Max2 { .. } => OpKind::Max2,
            Op::Dice { .. } => OpKind::DiceLoss,
            Op::Focal { .. } => OpKind::FocalLoss,
            Op::Linear { .. } => OpKind::Linear,
            Op::Bce { .. } => OpKind::BceWithLogits,
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Focal-loss probability clamp.
pub const FOCAL_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    fault: Option<OpKind>,
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn spatial(d: [usize; 5]) -> [usize; 3] {
    [d[2], d[3], d[4]]
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Deliberately corrupts the backward pass of one operator kind by
    /// scaling its input gradients. Only for exercising check harnesses.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn check_conv_weight(&self, w: Var, expected: Vec<usize>, b: Option<Var>, cout: usize) -> Result<()> {
        if self.shape(w) != expected.as_slice() {
            return Err(Error::Shape(format!(
                "conv weight shape {:?}, expected {expected:?}",
                self.shape(w)
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::Shape(format!(
                    "conv bias shape {:?}, expected [{cout}]",
                    self.shape(b)
                )));
            }
        }
        Ok(())
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        spec.validate()?;
        let xd = self.value(x).dims5()?;
        if xd[1] != spec.in_channels {
            return Err(Error::Shape(format!(
                "conv3d expects {} input channels, got {}",
                spec.in_channels, xd[1]
            )));
        }
        self.check_conv_weight(w, spec.weight_shape(), b, spec.out_channels)?;
        let small = spec.conv_out(spatial(xd))?;
        let geom = spec.geom(spatial(xd), small);
        let (cin, cout, taps) = (spec.in_channels, spec.out_channels, spec.taps());
        let (nb, ns) = (geom.big_len(), geom.small_len());
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        let mut y = vec![T::zero(); xd[0] * cout * ns];
        for n in 0..xd[0] {
            for co in 0..cout {
                let yc = &mut y[(n * cout + co) * ns..][..ns];
                if let Some(bv) = bv {
                    yc.fill(bv[co]);
                }
                for ci in 0..cin {
                    geom.gather(
                        &xv[(n * cin + ci) * nb..][..nb],
                        &wv[(co * cin + ci) * taps..][..taps],
                        yc,
                    );
                }
            }
        }
        let value = Tensor::new(vec![xd[0], cout, small[0], small[1], small[2]], y)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(
            value,
            Op::Conv {
                x,
                w,
                b,
                geom,
                transposed: false,
            },
            &parents,
        ))
    }

    /// Transposed convolution: the adjoint of [`Graph::conv3d`] with the
    /// same spec. Weights are `(in, out, kd, kh, kw)`.
    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        spec.validate()?;
        let xd = self.value(x).dims5()?;
        if xd[1] != spec.in_channels {
            return Err(Error::Shape(format!(
                "conv_transpose3d expects {} input channels, got {}",
                spec.in_channels, xd[1]
            )));
        }
        self.check_conv_weight(w, spec.transposed_weight_shape(), b, spec.out_channels)?;
        let big = spec.transposed_out(spatial(xd))?;
        let geom = spec.geom(big, spatial(xd));
        let (cin, cout, taps) = (spec.in_channels, spec.out_channels, spec.taps());
        let (nb, ns) = (geom.big_len(), geom.small_len());
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        let mut y = vec![T::zero(); xd[0] * cout * nb];
        for n in 0..xd[0] {
            for co in 0..cout {
                let yc = &mut y[(n * cout + co) * nb..][..nb];
                if let Some(bv) = bv {
                    yc.fill(bv[co]);
                }
                for ci in 0..cin {
                    geom.scatter(
                        &xv[(n * cin + ci) * ns..][..ns],
                        &wv[(ci * cout + co) * taps..][..taps],
                        yc,
                    );
                }
            }
        }
        let value = Tensor::new(vec![xd[0], cout, big[0], big[1], big[2]], y)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(
            value,
            Op::Conv {
                x,
                w,
                b,
                geom,
                transposed: true,
            },
            &parents,
        ))
    }

    /// Max pooling with floor semantics; ties go to the lowest index.
    pub fn max_pool3d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let xd = self.value(x).dims5()?;
        if window == 0 || stride == 0 || spatial(xd).iter().any(|&n| n < window) {
            return Err(Error::Shape(format!(
                "max_pool3d window {window} stride {stride} on {xd:?}"
            )));
        }
        let out = spatial(xd).map(|n| (n - window) / stride + 1);
        let [d, h, w] = spatial(xd);
        let nb = d * h * w;
        let ns: usize = out.iter().product();
        let xv = self.value(x).data();
        let planes = xd[0] * xd[1];
        let mut y = Vec::with_capacity(planes * ns);
        let mut argmax = Vec::with_capacity(planes * ns);
        for p in 0..planes {
            let base = p * nb;
            for od in 0..out[0] {
                for oh in 0..out[1] {
                    for ow in 0..out[2] {
                        let mut best = usize::MAX;
                        let mut best_v = T::neg_infinity();
                        for kd in 0..window {
                            for kh in 0..window {
                                for kw in 0..window {
                                    let i = base
                                        + ((od * stride + kd) * h + oh * stride + kh) * w
                                        + ow * stride
                                        + kw;
                                    if best == usize::MAX || xv[i] > best_v {
                                        best = i;
                                        best_v = xv[i];
                                    }
                                }
                            }
                        }
                        y.push(best_v);
                        argmax.push(best);
                    }
                }
            }
        }
        let value = Tensor::new(vec![xd[0], xd[1], out[0], out[1], out[2]], y)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }, &[x]))
    }

    /// Trilinear upsampling by an integer factor, half-pixel centres.
    pub fn upsample_trilinear(&mut self, x: Var, scale: usize) -> Result<Var> {
        let xd = self.value(x).dims5()?;
        if scale == 0 {
            return Err(Error::Shape("upsample scale must be >= 1".into()));
        }
        if scale == 1 {
            return Ok(x);
        }
        let dims = spatial(xd);
        let nb: usize = dims.iter().product();
        let ns = nb * scale.pow(3);
        let xv = self.value(x).data();
        let mut y = vec![T::zero(); xd[0] * xd[1] * ns];
        for p in 0..xd[0] * xd[1] {
            kernels::upsample_forward(&xv[p * nb..][..nb], dims, scale, &mut y[p * ns..][..ns]);
        }
        let [d, h, w] = dims.map(|n| n * scale);
        let value = Tensor::new(vec![xd[0], xd[1], d, h, w], y)?;
        Ok(self.push(value, Op::Upsample { x, scale }, &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor::from_fn(v.shape(), |i| v.data()[i].max(T::zero()));
        self.push(value, Op::Relu { x }, &[x])
    }

    /// Softmax over axis 1.
    pub fn softmax_channel(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::Shape(format!("softmax needs a channel axis, got {shape:?}")));
        }
        let c = shape[1];
        let inner: usize = shape[2..].iter().product();
        let mut y = vec![T::zero(); v.numel()];
        let xv = v.data();
        for n in 0..shape[0] {
            let base = n * c * inner;
            for i in 0..inner {
                let mut m = T::neg_infinity();
                for k in 0..c {
                    m = m.max(xv[base + k * inner + i]);
                }
                let mut s = T::zero();
                for k in 0..c {
                    let e = (xv[base + k * inner + i] - m).exp();
                    y[base + k * inner + i] = e;
                    s += e;
                }
                for k in 0..c {
                    y[base + k * inner + i] = y[base + k * inner + i] / s;
                }
            }
        }
        let value = Tensor::new(shape, y)?;
        Ok(self.push(value, Op::Softmax { x }, &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let (av, bv) = (self.value(a), self.value(b));
        let value = Tensor::from_fn(av.shape(), |i| av.data()[i] + bv.data()[i]);
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let (av, bv) = (self.value(a), self.value(b));
        let value = Tensor::from_fn(av.shape(), |i| av.data()[i] * bv.data()[i]);
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn max2(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "max")?;
        let (av, bv) = (self.value(a), self.value(b));
        let value = Tensor::from_fn(av.shape(), |i| {
            if av.data()[i] >= bv.data()[i] {
                av.data()[i]
            } else {
                bv.data()[i]
            }
        });
        Ok(self.push(value, Op::Max2 { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x);
        let value = Tensor::from_fn(v.shape(), |i| v.data()[i] * c);
        self.push(value, Op::Scale { x, c }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::of(self.value(x).numel() as f64);
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    /// Concatenation along axis 1.
    pub fn concat_channel(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let shape0 = self.shape(*first).to_vec();
        if shape0.len() < 2 {
            return Err(Error::Shape(format!("concat needs a channel axis, got {shape0:?}")));
        }
        let mut channels = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != shape0.len() || s[0] != shape0[0] || s[2..] != shape0[2..] {
                return Err(Error::Shape(format!(
                    "concat: {s:?} incompatible with {shape0:?}"
                )));
            }
            channels += s[1];
        }
        let inner: usize = shape0[2..].iter().product();
        let mut y = Vec::with_capacity(shape0[0] * channels * inner);
        for n in 0..shape0[0] {
            for &x in xs {
                let c = self.shape(x)[1];
                y.extend_from_slice(&self.value(x).data()[n * c * inner..][..c * inner]);
            }
        }
        let mut shape = shape0;
        shape[1] = channels;
        let value = Tensor::new(shape, y)?;
        Ok(self.push(value, Op::Concat { xs: xs.to_vec() }, xs))
    }

    /// `Σ γ_l · x_l` with scalar (shape `[1]`) weights.
    pub fn weighted_sum(&mut self, xs: &[Var], gammas: &[Var]) -> Result<Var> {
        if xs.is_empty() || xs.len() != gammas.len() {
            return Err(Error::Shape(format!(
                "weighted_sum: {} inputs, {} weights",
                xs.len(),
                gammas.len()
            )));
        }
        for &g in gammas {
            if self.value(g).numel() != 1 {
                return Err(Error::Shape("weighted_sum weights must be scalars".into()));
            }
        }
        for &x in &xs[1..] {
            same_shape(self.value(xs[0]), self.value(x), "weighted_sum")?;
        }
        let mut y = vec![T::zero(); self.value(xs[0]).numel()];
        for (&x, &g) in xs.iter().zip(gammas) {
            let gv = self.value(g).data()[0];
            for (o, &v) in y.iter_mut().zip(self.value(x).data()) {
                *o += gv * v;
            }
        }
        let value = Tensor::new(self.shape(xs[0]).to_vec(), y)?;
        let mut parents = xs.to_vec();
        parents.extend_from_slice(gammas);
        Ok(self.push(
            value,
            Op::WeightedSum {
                xs: xs.to_vec(),
                gammas: gammas.to_vec(),
            },
            &parents,
        ))
    }

    fn check_loss_inputs(&self, pred: Var, target: &Tensor<T>, per_class: usize) -> Result<(usize, usize, usize)> {
        let p = self.value(pred);
        same_shape(p, target, "loss")?;
        if p.shape().len() < 2 {
            return Err(Error::Shape(format!("loss needs (b, c, ...), got {:?}", p.shape())));
        }
        let c = p.shape()[1];
        if per_class != c {
            return Err(Error::Shape(format!(
                "{per_class} class coefficients for {c} classes"
            )));
        }
        Ok((p.shape()[0], c, p.shape()[2..].iter().product()))
    }

    /// Weighted soft Dice loss
    /// `1 − (2 Σ w_c y ŷ + ε) / (Σ w_c y + Σ w_c ŷ + ε)`, summed over the
    /// batch, voxels and classes.
    pub fn dice_loss(&mut self, pred: Var, target: &Tensor<T>, weights: &[T], eps: T) -> Result<Var> {
        let (b, c, inner) = self.check_loss_inputs(pred, target, weights.len())?;
        let (num, den) = dice_terms(self.value(pred).data(), target.data(), weights, b, c, inner);
        let loss = T::one() - (T::of(2.0) * num + eps) / (den + eps);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Dice {
                pred,
                target: target.clone(),
                weights: weights.to_vec(),
                eps,
            },
            &[pred],
        ))
    }

    /// Categorical focal loss `mean_v −α_t (1 − p_t)^γ log p_t`, with `p_t`
    /// clamped to `[1e-7, 1 − 1e-7]`.
    pub fn focal_loss(&mut self, pred: Var, target: &Tensor<T>, alpha: &[T], gamma: T) -> Result<Var> {
        let (b, c, inner) = self.check_loss_inputs(pred, target, alpha.len())?;
        let pv = self.value(pred).data();
        let mut total = T::zero();
        for_each_voxel(b, c, inner, |idx| {
            let (pt, at) = p_t(pv, target.data(), alpha, idx);
            let pt = clamp_pt(pt);
            total += -at * (T::one() - pt).powf(gamma) * pt.ln();
        });
        let loss = total / T::of((b * inner) as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Focal {
                pred,
                target: target.clone(),
                alpha: alpha.to_vec(),
                gamma,
            },
            &[pred],
        ))
    }

    /// `x · wᵀ + b` for `x: (n, in)`, `w: (out, in)`, `b: (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || bs != [ws[0]] {
            return Err(Error::Shape(format!("linear: x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut y = Vec::with_capacity(n * fout);
        for r in 0..n {
            for o in 0..fout {
                y.push(bv[o] + kernels::dot(&xv[r * fin..][..fin], &wv[o * fin..][..fin]));
            }
        }
        let value = Tensor::new(vec![n, fout], y)?;
        Ok(self.push(value, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// Mean binary cross-entropy on logits over the entries where `mask`
    /// is set (all entries when `None`).
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>, mask: Option<&[bool]>) -> Result<Var> {
        same_shape(self.value(logits), targets, "bce_with_logits")?;
        let n = targets.numel();
        let mask = mask.map(<[bool]>::to_vec).unwrap_or_else(|| vec![true; n]);
        if mask.len() != n {
            return Err(Error::Shape(format!("mask has {} entries for {n} logits", mask.len())));
        }
        let count = mask.iter().filter(|&&m| m).count();
        let zv = self.value(logits).data();
        let mut total = T::zero();
        for i in (0..n).filter(|&i| mask[i]) {
            let (z, t) = (zv[i], targets.data()[i]);
            total += z.max(T::zero()) - z * t + (T::one() + (-z.abs()).exp()).ln();
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::of(count as f64)
        };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                logits,
                targets: targets.data().to_vec(),
                mask,
            },
            &[logits],
        ))
    }

    /// Back-propagates from a scalar, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &v)| *a += v),
                    slot => *slot = Some(g),
                }
                continue;
            }
            let kind = self.nodes[i].op.kind();
            for (v, mut gv) in self.op_backward(i, &g) {
                if self.fault == Some(kind) {
                    gv.iter_mut().for_each(|x| *x *= T::of(1.5));
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&gv).for_each(|(a, &x)| *a += x),
                    slot => *slot = Some(gv),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn op_backward(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                x,
                w,
                b,
                geom,
                transposed,
            } => {
                let xs = self.shape(*x);
                let (batch, cin) = (xs[0], xs[1]);
                let cout = node.value.shape()[1];
                let taps = geom.taps();
                let (nb, ns) = (geom.big_len(), geom.small_len());
                // conv: x on the big grid, y on the small one; transposed swaps
                let (nx, ny) = if *transposed { (ns, nb) } else { (nb, ns) };
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let widx = |ci: usize, co: usize| {
                    if *transposed {
                        (ci * cout + co) * taps
                    } else {
                        (co * cin + ci) * taps
                    }
                };
                if self.needs(*x) {
                    let mut gx = vec![T::zero(); batch * cin * nx];
                    for n in 0..batch {
                        for co in 0..cout {
                            let gy = &g[(n * cout + co) * ny..][..ny];
                            for ci in 0..cin {
                                let gxc = &mut gx[(n * cin + ci) * nx..][..nx];
                                let wk = &wv[widx(ci, co)..][..taps];
                                if *transposed {
                                    geom.gather(gy, wk, gxc);
                                } else {
                                    geom.scatter(gy, wk, gxc);
                                }
                            }
                        }
                    }
                    out.push((*x, gx));
                }
                if self.needs(*w) {
                    let mut gw = vec![T::zero(); wv.len()];
                    for n in 0..batch {
                        for co in 0..cout {
                            let gy = &g[(n * cout + co) * ny..][..ny];
                            for ci in 0..cin {
                                let xc = &xv[(n * cin + ci) * nx..][..nx];
                                let gwk = &mut gw[widx(ci, co)..][..taps];
                                if *transposed {
                                    geom.correlate(xc, gy, gwk);
                                } else {
                                    geom.correlate(gy, xc, gwk);
                                }
                            }
                        }
                    }
                    out.push((*w, gw));
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let mut gb = vec![T::zero(); cout];
                    for n in 0..batch {
                        for (co, gbc) in gb.iter_mut().enumerate() {
                            *gbc += g[(n * cout + co) * ny..][..ny].iter().copied().sum();
                        }
                    }
                    out.push((b, gb));
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                for (&a, &gv) in argmax.iter().zip(g) {
                    gx[a] += gv;
                }
                out.push((*x, gx));
            }
            Op::Upsample { x, scale } => {
                let xd = self.value(*x).dims5().expect("validated in forward");
                let dims = spatial(xd);
                let nb: usize = dims.iter().product();
                let ns = nb * scale.pow(3);
                let mut gx = vec![T::zero(); xd[0] * xd[1] * nb];
                for p in 0..xd[0] * xd[1] {
                    kernels::upsample_backward(&g[p * ns..][..ns], dims, *scale, &mut gx[p * nb..][..nb]);
                }
                out.push((*x, gx));
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let gx = g
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                out.push((*x, gx));
            }
            Op::Softmax { x } => {
                let shape = node.value.shape();
                let (c, inner) = (shape[1], shape[2..].iter().product::<usize>());
                let y = node.value.data();
                let mut gx = vec![T::zero(); y.len()];
                for n in 0..shape[0] {
                    let base = n * c * inner;
                    for i in 0..inner {
                        let mut dotp = T::zero();
                        for k in 0..c {
                            let j = base + k * inner + i;
                            dotp += g[j] * y[j];
                        }
                        for k in 0..c {
                            let j = base + k * inner + i;
                            gx[j] = y[j] * (g[j] - dotp);
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.needs(*b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    out.push((*a, g.iter().zip(bv).map(|(&x, &y)| x * y).collect()));
                }
                if self.needs(*b) {
                    out.push((*b, g.iter().zip(av).map(|(&x, &y)| x * y).collect()));
                }
            }
            Op::Max2 { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let pick_a: Vec<bool> = av.iter().zip(bv).map(|(x, y)| x >= y).collect();
                let route = |to_a: bool| -> Vec<T> {
                    g.iter()
                        .zip(&pick_a)
                        .map(|(&gv, &pa)| if pa == to_a { gv } else { T::zero() })
                        .collect()
                };
                if self.needs(*a) {
                    out.push((*a, route(true)));
                }
                if self.needs(*b) {
                    out.push((*b, route(false)));
                }
            }
            Op::Scale { x, c } => {
                out.push((*x, g.iter().map(|&v| v * *c).collect()));
            }
            Op::Sum { x } => {
                out.push((*x, vec![g[0]; self.value(*x).numel()]));
            }
            Op::Concat { xs } => {
                let shape = node.value.shape();
                let inner: usize = shape[2..].iter().product();
                let total_c = shape[1];
                let mut c0 = 0;
                for &x in xs {
                    let c = self.shape(x)[1];
                    if self.needs(x) {
                        let mut gx = Vec::with_capacity(shape[0] * c * inner);
                        for n in 0..shape[0] {
                            gx.extend_from_slice(&g[(n * total_c + c0) * inner..][..c * inner]);
                        }
                        out.push((x, gx));
                    }
                    c0 += c;
                }
            }
            Op::WeightedSum { xs, gammas } => {
                for (&x, &gm) in xs.iter().zip(gammas) {
                    let gv = self.value(gm).data()[0];
                    if self.needs(x) {
                        out.push((x, g.iter().map(|&v| v * gv).collect()));
                    }
                    if self.needs(gm) {
                        let s = kernels::dot(g, self.value(x).data());
                        out.push((gm, vec![s]));
                    }
                }
            }
            Op::Dice {
                pred,
                target,
                weights,
                eps,
            } => {
                let ps = self.shape(*pred);
                let (b, c, inner) = (ps[0], ps[1], ps[2..].iter().product::<usize>());
                let pv = self.value(*pred).data();
                let yv = target.data();
                let (num, den) = dice_terms(pv, yv, weights, b, c, inner);
                let two = T::of(2.0);
                let top = two * num + *eps;
                let bot = den + *eps;
                let mut gx = vec![T::zero(); pv.len()];
                for n in 0..b {
                    for k in 0..c {
                        let wk = weights[k];
                        for i in 0..inner {
                            let j = (n * c + k) * inner + i;
                            // d/dŷ of −top/bot
                            let d = -(two * wk * yv[j] * bot - top * wk) / (bot * bot);
                            gx[j] = g[0] * d;
                        }
                    }
                }
                out.push((*pred, gx));
            }
            Op::Focal {
                pred,
                target,
                alpha,
                gamma,
            } => {
                let ps = self.shape(*pred);
                let (b, c, inner) = (ps[0], ps[1], ps[2..].iter().product::<usize>());
                let pv = self.value(*pred).data();
                let yv = target.data();
                let scale = g[0] / T::of((b * inner) as f64);
                let lo = T::of(FOCAL_CLAMP);
                let hi = T::one() - lo;
                let mut gx = vec![T::zero(); pv.len()];
                for_each_voxel(b, c, inner, |idx| {
                    let (pt, at) = p_t(pv, yv, alpha, idx);
                    if pt < lo || pt > hi {
                        return;
                    }
                    let one_m = T::one() - pt;
                    let mut dl = -at * one_m.powf(*gamma) / pt;
                    if *gamma != T::zero() {
                        dl += at * *gamma * one_m.powf(*gamma - T::one()) * pt.ln();
                    }
                    for &j in idx {
                        gx[j] += scale * dl * yv[j];
                    }
                });
                out.push((*pred, gx));
            }
            Op::Linear { x, w, b } => {
                let (n, fin) = (self.shape(*x)[0], self.shape(*x)[1]);
                let fout = self.shape(*w)[0];
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                if self.needs(*x) {
                    let mut gx = vec![T::zero(); n * fin];
                    for r in 0..n {
                        for o in 0..fout {
                            let gv = g[r * fout + o];
                            for k in 0..fin {
                                gx[r * fin + k] += gv * wv[o * fin + k];
                            }
                        }
                    }
                    out.push((*x, gx));
                }
                if self.needs(*w) {
                    let mut gw = vec![T::zero(); fout * fin];
                    for r in 0..n {
                        for o in 0..fout {
                            let gv = g[r * fout + o];
                            for k in 0..fin {
                                gw[o * fin + k] += gv * xv[r * fin + k];
                            }
                        }
                    }
                    out.push((*w, gw));
                }
                if self.needs(*b) {
                    let mut gb = vec![T::zero(); fout];
                    for r in 0..n {
                        for o in 0..fout {
                            gb[o] += g[r * fout + o];
                        }
                    }
                    out.push((*b, gb));
                }
            }
            Op::Bce {
                logits,
                targets,
                mask,
            } => {
                let count = mask.iter().filter(|&&m| m).count();
                let zv = self.value(*logits).data();
                let mut gz = vec![T::zero(); zv.len()];
                if count > 0 {
                    let s = g[0] / T::of(count as f64);
                    for i in (0..zv.len()).filter(|&i| mask[i]) {
                        gz[i] = s * (sigmoid(zv[i]) - targets[i]);
                    }
                }
                out.push((*logits, gz));
            }
        }
        out
    }
}

pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn dice_terms<T: Real>(p: &[T], y: &[T], w: &[T], b: usize, c: usize, inner: usize) -> (T, T) {
    let mut num = T::zero();
    let mut den = T::zero();
    for n in 0..b {
        for (k, &wk) in w.iter().enumerate().take(c) {
            let off = (n * c + k) * inner;
            let (ps, ys) = (&p[off..off + inner], &y[off..off + inner]);
            num += wk * kernels::dot(ps, ys);
            den += wk * (ys.iter().copied().sum::<T>() + ps.iter().copied().sum::<T>());
        }
    }
    (num, den)
}

/// Calls `f` with the flat indices of the `c` class entries of every voxel.
fn for_each_voxel(b: usize, c: usize, inner: usize, mut f: impl FnMut(&[usize])) {
    let mut idx = Vec::with_capacity(c);
    for n in 0..b {
        for i in 0..inner {
            idx.clear();
            idx.extend((0..c).map(|k| (n * c + k) * inner + i));
            f(&idx);
        }
    }
}

fn p_t<T: Real>(p: &[T], y: &[T], alpha: &[T], idx: &[usize]) -> (T, T) {
    let mut pt = T::zero();
    let mut at = T::zero();
    for (k, &j) in idx.iter().enumerate() {
        pt += y[j] * p[j];
        at += y[j] * alpha[k];
    }
    (pt, at)
}

fn clamp_pt<T: Real>(pt: T) -> T {
    let lo = T::of(FOCAL_CLAMP);
    pt.max(lo).min(T::one() - lo)
}

#[cfg(test)]
mod tests;
