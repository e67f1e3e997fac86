//! Losses, class weighting, optimizers and the training loop.

use std::ops::ControlFlow;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::network::{self, NetworkConfig};
use crate::volume::{LabelVolume, MultiChannelVolume, BRATS_LABELS};

/// Number of segmentation classes (background plus three tumor labels).
pub const NUM_CLASSES: usize = 4;

/// Maps a label value (0, 1, 2, 4) to its class index.
pub fn class_of(label: u8) -> Option<usize> {
    BRATS_LABELS.iter().position(|&l| l == label)
}

/// Inverse of [`class_of`].
pub fn label_of(class: usize) -> u8 {
    BRATS_LABELS[class]
}

/// One-hot target `(NUM_CLASSES, d, h, w)`.
pub fn one_hot<T: Real>(labels: &LabelVolume) -> Result<Tensor<T>> {
    let n = labels.labels().len();
    let mut data = vec![T::zero(); NUM_CLASSES * n];
    for (i, &l) in labels.labels().iter().enumerate() {
        let c = class_of(l).ok_or_else(|| Error::InvalidVolume(format!("label {l} is not one of {BRATS_LABELS:?}")))?;
        data[c * n + i] = T::one();
    }
    let [d, h, w] = labels.dims();
    Tensor::new(vec![NUM_CLASSES, d, h, w], data)
}

/// Channels stacked into `(c, d, h, w)`.
pub fn image_tensor<T: Real>(channels: &MultiChannelVolume) -> Result<Tensor<T>> {
    let [d, h, w] = channels.dims();
    let data = channels
        .channels()
        .iter()
        .flat_map(|v| v.data().iter().map(|&x| T::of(f64::from(x))))
        .collect();
    Tensor::new(vec![channels.num_channels(), d, h, w], data)
}

/// Hard labels from class probabilities `(NUM_CLASSES, d, h, w)`; ties
/// resolve to the lower class.
pub fn argmax_labels<T: Real>(probs: &[T], dims: [usize; 3], spacing: [f32; 3]) -> Result<LabelVolume> {
    let n = dims.iter().product::<usize>();
    if probs.len() != NUM_CLASSES * n {
        return Err(Error::shape(format!("{} probabilities for {n} voxels", probs.len())));
    }
    let labels = (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..NUM_CLASSES {
                if probs[c * n + i] > probs[best * n + i] {
                    best = c;
                }
            }
            label_of(best)
        })
        .collect();
    LabelVolume::new(dims, spacing, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMode {
    /// Dice plus focal.
    #[serde(rename = "D&F", alias = "sum")]
    Sum,
    /// The larger of dice and focal.
    #[serde(rename = "D/F", alias = "max")]
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub mode: LossMode,
    pub class_weights: Vec<f64>,
    pub alpha: Vec<f64>,
    pub gamma: f64,
    pub eps: f64,
}

impl LossConfig {
    pub fn uniform(mode: LossMode) -> Self {
        Self {
            mode,
            class_weights: vec![1.0; NUM_CLASSES],
            alpha: vec![1.0; NUM_CLASSES],
            gamma: 2.0,
            eps: 1e-6,
        }
    }

    pub fn from_weights(mode: LossMode, w: &ClassWeights) -> Self {
        Self {
            class_weights: w.weights.clone(),
            alpha: w.alpha.clone(),
            ..Self::uniform(mode)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_weights.len() != self.alpha.len() {
            return Err(Error::Config("class weights and alpha differ in length".into()));
        }
        if !self.class_weights.iter().all(|&w| w > 0.0 && w.is_finite()) {
            return Err(Error::Config("class weights must be positive".into()));
        }
        if !self.alpha.iter().all(|&a| a > 0.0 && a <= 1.0) {
            return Err(Error::Config("focal alpha must lie in (0, 1]".into()));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config("focal gamma must be >= 0".into()));
        }
        if self.eps.is_nan() || self.eps < 0.0 {
            return Err(Error::Config("dice smoothing must be >= 0".into()));
        }
        Ok(())
    }
}

pub struct LossVars {
    pub total: Var,
    pub dice: Var,
    pub focal: Var,
}

/// Combined loss on class probabilities `pred: (b, classes, ...)`.
pub fn total_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: &Tensor<T>, cfg: &LossConfig) -> Result<LossVars> {
    let w: Vec<T> = cfg.class_weights.iter().map(|&v| T::of(v)).collect();
    let a: Vec<T> = cfg.alpha.iter().map(|&v| T::of(v)).collect();
    let dice = g.dice_loss(pred, target, &w, T::of(cfg.eps))?;
    let focal = g.focal_loss(pred, target, &a, T::of(cfg.gamma))?;
    let total = match cfg.mode {
        LossMode::Sum => g.add(dice, focal)?,
        LossMode::Max => g.max2(dice, focal)?,
    };
    Ok(LossVars { total, dice, focal })
}

/// Unit-weight soft dice accuracy `1 − dice_loss`.
pub fn dice_accuracy<T: Real>(probs: &[T], target: &[T], eps: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (&p, &y) in probs.iter().zip(target) {
        num += p.to64() * y.to64();
        den += p.to64() + y.to64();
    }
    (2.0 * num + eps) / (den + eps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    pub alpha: Vec<f64>,
    pub counts: Vec<u64>,
    /// Classes with no voxels; their count was replaced by 1.
    pub absent: Vec<usize>,
}

/// Inverse-frequency class weights, normalised to mean 1; `alpha` is the
/// same vector rescaled to max 1.
pub fn class_weights_from_counts(counts: &[u64]) -> Result<ClassWeights> {
    if counts.is_empty() || counts.iter().all(|&c| c == 0) {
        return Err(Error::EmptyDataset);
    }
    let absent: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] == 0).collect();
    let inv: Vec<f64> = counts.iter().map(|&c| 1.0 / c.max(1) as f64).collect();
    let mean = inv.iter().sum::<f64>() / inv.len() as f64;
    let weights: Vec<f64> = inv.iter().map(|v| v / mean).collect();
    let max = weights.iter().cloned().fold(0.0, f64::max);
    Ok(ClassWeights {
        alpha: weights.iter().map(|w| w / max).collect(),
        weights,
        counts: counts.to_vec(),
        absent,
    })
}

pub fn class_weights_from_frequency<'a>(labels: impl IntoIterator<Item = &'a LabelVolume>) -> Result<ClassWeights> {
    let mut counts = vec![0u64; NUM_CLASSES];
    for v in labels {
        for &l in v.labels() {
            let c = class_of(l).ok_or_else(|| Error::InvalidVolume(format!("label {l} is not one of {BRATS_LABELS:?}")))?;
            counts[c] += 1;
        }
    }
    if counts.iter().all(|&c| c == 0) {
        return Err(Error::EmptyDataset);
    }
    class_weights_from_counts(&counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    pub config: OptimizerConfig,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(config: OptimizerConfig, params: &ParamStore<T>) -> Result<Self> {
        if !(config.lr >= 0.0 && config.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", config.lr)));
        }
        let zeros = || params.tensors().iter().map(|t| vec![T::zero(); t.numel()]).collect();
        Ok(Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        })
    }

    pub fn apply(&mut self, params: &mut ParamStore<T>, grads: &[Vec<T>]) {
        self.step += 1;
        let c = &self.config;
        let lr = T::of(c.lr);
        match c.kind {
            OptimizerKind::Sgd => {
                for (t, g) in params.tensors_mut().iter_mut().zip(grads) {
                    for (p, &g) in t.data_mut().iter_mut().zip(g) {
                        *p -= lr * g;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
                let bc1 = T::of(1.0 - c.beta1.powi(self.step as i32));
                let bc2 = T::of(1.0 - c.beta2.powi(self.step as i32));
                let eps = T::of(c.eps);
                let one = T::one();
                for (k, (t, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    for (i, (p, &g)) in t.data_mut().iter_mut().zip(g).enumerate() {
                        m[i] = b1 * m[i] + (one - b1) * g;
                        v[i] = b2 * v[i] + (one - b2) * g * g;
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        *p -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// How class weights are chosen for the training loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Uniform,
    InverseFrequency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Stops after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub loss_mode: LossMode,
    pub weighting: Weighting,
    pub gamma: f64,
    pub dice_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 1,
            max_steps: None,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            loss_mode: LossMode::Sum,
            weighting: Weighting::InverseFrequency,
            gamma: 2.0,
            dice_eps: 1e-6,
        }
    }
}

impl TrainConfig {
    /// Adam at lr 1e-4, batch 2, dice plus focal, 100 epochs.
    pub fn paper() -> Self {
        Self {
            epochs: 100,
            batch_size: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.optimizer.lr >= 0.0 && self.optimizer.lr.is_finite()) {
            return Err(Error::Config("learning rate must be >= 0".into()));
        }
        if self.gamma.is_nan() || self.gamma < 0.0 {
            return Err(Error::Config("gamma must be >= 0".into()));
        }
        Ok(())
    }
}

/// One training or validation example.
#[derive(Debug, Clone)]
pub struct Sample<T> {
    pub id: String,
    /// `(in_channels, d, h, w)`.
    pub image: Tensor<T>,
    /// One-hot `(NUM_CLASSES, d, h, w)`.
    pub target: Tensor<T>,
}

impl<T: Real> Sample<T> {
    pub fn new(id: impl Into<String>, channels: &MultiChannelVolume, labels: &LabelVolume) -> Result<Self> {
        if channels.dims() != labels.dims() {
            return Err(Error::shape(format!(
                "image dims {:?} differ from label dims {:?}",
                channels.dims(),
                labels.dims()
            )));
        }
        Ok(Self {
            id: id.into(),
            image: image_tensor(channels)?,
            target: one_hot(labels)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub steps: usize,
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub class_weights: ClassWeights,
}

pub struct TrainOutcome<T> {
    pub run: TrainRun,
    pub last: ParamStore<T>,
    /// Parameters at the epoch with the lowest validation loss (training
    /// loss when there is no validation set).
    pub best: ParamStore<T>,
}

fn stack<T: Real>(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let shape = items[0].shape().to_vec();
    let mut data = Vec::with_capacity(items.len() * items[0].numel());
    for t in items {
        if t.shape() != shape.as_slice() {
            return Err(Error::shape(format!("batch mixes shapes {:?} and {:?}", shape, t.shape())));
        }
        data.extend_from_slice(t.data());
    }
    let mut full = vec![items.len()];
    full.extend(shape);
    Tensor::new(full, data)
}

fn check_dataset<T: Real>(net: &NetworkConfig, samples: &[Sample<T>]) -> Result<()> {
    for s in samples {
        let sh = s.image.shape();
        if sh.len() != 4 || sh[0] != net.in_channels {
            return Err(Error::shape(format!(
                "{}: image shape {sh:?} does not fit {} input channels",
                s.id, net.in_channels
            )));
        }
        if s.target.shape()[0] != net.classes || s.target.shape()[1..] != sh[1..] {
            return Err(Error::shape(format!("{}: target shape {:?}", s.id, s.target.shape())));
        }
        net.check_input([sh[1], sh[2], sh[3]])?;
    }
    Ok(())
}

/// Loss and dice accuracy of `params` on a batch, without updating anything.
pub fn evaluate_batch<T: Real>(
    net: &NetworkConfig,
    params: &ParamStore<T>,
    batch: &[&Sample<T>],
    loss: &LossConfig,
) -> Result<(f64, f64)> {
    let x = stack(&batch.iter().map(|s| &s.image).collect::<Vec<_>>())?;
    let y = stack(&batch.iter().map(|s| &s.target).collect::<Vec<_>>())?;
    let mut g = Graph::new();
    let bound = params.bind_constant(&mut g);
    let xv = g.constant(x);
    let out = network::forward(net, &mut g, &bound, xv)?;
    let p = g.softmax_channel(out.logits)?;
    let l = total_loss(&mut g, p, &y, loss)?;
    Ok((g.value(l.total).data()[0].to64(), dice_accuracy(g.value(p).data(), y.data(), loss.eps)))
}

fn mean_over<T: Real>(
    net: &NetworkConfig,
    params: &ParamStore<T>,
    samples: &[Sample<T>],
    batch_size: usize,
    loss: &LossConfig,
) -> Result<(f64, f64)> {
    let (mut l, mut a, mut n) = (0.0, 0.0, 0.0);
    for chunk in samples.chunks(batch_size) {
        let refs: Vec<_> = chunk.iter().collect();
        let (bl, ba) = evaluate_batch(net, params, &refs, loss)?;
        let k = chunk.len() as f64;
        l += bl * k;
        a += ba * k;
        n += k;
    }
    Ok((l / n, a / n))
}

/// Trains `params` in place of a copy and returns the run log together with
/// the final and best parameters. `on_epoch` sees every record as it is made
/// and may end the run early by returning `ControlFlow::Break`.
pub fn train<T: Real>(
    net: &NetworkConfig,
    params: ParamStore<T>,
    train_set: &[Sample<T>],
    val_set: &[Sample<T>],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> ControlFlow<()>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    net.validate()?;
    network::check_params(net, &params)?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_dataset(net, train_set)?;
    check_dataset(net, val_set)?;

    let mut counts = vec![0u64; NUM_CLASSES];
    for s in train_set {
        let n = s.target.numel() / NUM_CLASSES;
        for (c, count) in counts.iter_mut().enumerate() {
            *count += s.target.data()[c * n..(c + 1) * n].iter().filter(|&&v| v > T::zero()).count() as u64;
        }
    }
    let weights = class_weights_from_counts(&counts)?;
    let mut loss_cfg = match cfg.weighting {
        Weighting::Uniform => LossConfig::uniform(cfg.loss_mode),
        Weighting::InverseFrequency => LossConfig::from_weights(cfg.loss_mode, &weights),
    };
    loss_cfg.gamma = cfg.gamma;
    loss_cfg.eps = cfg.dice_eps;
    loss_cfg.validate()?;

    let mut params = params;
    let mut opt = Optimizer::new(cfg.optimizer.clone(), &params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::INFINITY, params.clone(), 0);
    let mut step = 0usize;

    'epochs: for epoch in 1..=cfg.epochs {
        if cfg.max_steps.is_some_and(|m| step >= m) {
            break;
        }
        let started = Instant::now();
        order.shuffle(&mut rng);
        let (mut sum_loss, mut sum_acc, mut seen) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let batch: Vec<&Sample<T>> = chunk.iter().map(|&i| &train_set[i]).collect();
            let x = stack(&batch.iter().map(|s| &s.image).collect::<Vec<_>>())?;
            let y = stack(&batch.iter().map(|s| &s.target).collect::<Vec<_>>())?;
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let xv = g.constant(x);
            let out = network::forward(net, &mut g, &bound, xv)?;
            let p = g.softmax_channel(out.logits)?;
            let l = total_loss(&mut g, p, &y, &loss_cfg)?;
            let value = g.value(l.total).data()[0].to64();
            if !value.is_finite() {
                return Err(Error::Divergence { step, loss: value });
            }
            let k = chunk.len() as f64;
            sum_loss += value * k;
            sum_acc += dice_accuracy(g.value(p).data(), y.data(), loss_cfg.eps) * k;
            seen += k;
            g.backward(l.total)?;
            let grads = params.grads(&g, &bound);
            opt.apply(&mut params, &grads);
            step += 1;
        }
        if seen == 0.0 {
            break 'epochs;
        }
        let (val_loss, val_acc) = if val_set.is_empty() {
            (None, None)
        } else {
            let (l, a) = mean_over(net, &params, val_set, cfg.batch_size, &loss_cfg)?;
            (Some(l), Some(a))
        };
        let record = EpochRecord {
            epoch,
            train_loss: sum_loss / seen,
            train_acc: sum_acc / seen,
            val_loss,
            val_acc,
            seconds: started.elapsed().as_secs_f64(),
        };
        let score = val_loss.unwrap_or(record.train_loss);
        if score < best.0 {
            best = (score, params.clone(), epoch);
        }
        let flow = on_epoch(&record);
        records.push(record);
        if flow.is_break() {
            break;
        }
    }

    Ok(TrainOutcome {
        run: TrainRun {
            epochs: records.len(),
            batch_size: cfg.batch_size,
            seed: cfg.seed,
            steps: step,
            records,
            best_epoch: best.2,
            class_weights: weights,
        },
        last: params,
        best: best.1,
    })
}

/// Epoch log as CSV. With `mask_time` the seconds column is written as 0 so
/// that logs from identical runs compare byte for byte.
pub fn epoch_csv(records: &[EpochRecord], mask_time: bool) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.10}")).unwrap_or_default();
    let mut s = String::from("epoch,train_loss,train_acc,val_loss,val_acc,seconds\n");
    for r in records {
        s.push_str(&format!(
            "{},{:.10},{:.10},{},{},{:.3}\n",
            r.epoch,
            r.train_loss,
            r.train_acc,
            opt(r.val_loss),
            opt(r.val_acc),
            if mask_time { 0.0 } else { r.seconds }
        ));
    }
    s
}

#[cfg(test)]
mod tests;
