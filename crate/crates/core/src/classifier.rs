//! Fused segmentation/radiomics features and the region-presence classifier.
//!
//! Each row describes one predicted region of one case: the network's head
//! maps pooled (mean and max per channel) over the region, plus its four
//! shape features. The head predicts, for every row, which of WT/ET/TC are
//! present in the ground truth.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, ParamStore, Real, Tensor};
use crate::error::{Error, Result};
use crate::metrics::{classification_metrics, ConfusionCounts, Score};
use crate::radiomics::RadiomicsFeatures;
use crate::training::{Optimizer, OptimizerConfig};
use crate::volume::{Mask, RegionId};

/// Region-pooled head activations: `[mean, max]` per head channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegFeatures {
    pub values: Vec<f64>,
    /// The region was empty and `values` is all zeros.
    pub empty: bool,
}

/// Pools every channel of every head over `region`. Heads are
/// `(channels, d, h, w)` or `(1, channels, d, h, w)`.
pub fn extract_seg_features<T: Real>(heads: &[Tensor<T>], region: &Mask) -> Result<SegFeatures> {
    let n = region.bits.len();
    let mut values = Vec::new();
    let count = region.count();
    for h in heads {
        let s = h.shape();
        let spatial: Vec<usize> = s[s.len() - 3..].to_vec();
        if spatial != region.dims || !(s.len() == 4 || (s.len() == 5 && s[0] == 1)) {
            return Err(Error::shape(format!("head shape {s:?} against region dims {:?}", region.dims)));
        }
        let channels = s[s.len() - 4];
        for c in 0..channels {
            let plane = &h.data()[c * n..(c + 1) * n];
            if count == 0 {
                values.extend([0.0, 0.0]);
                continue;
            }
            let (mut sum, mut max) = (0.0, f64::NEG_INFINITY);
            for (&v, _) in plane.iter().zip(&region.bits).filter(|(_, &b)| b) {
                let v = v.to64();
                sum += v;
                max = max.max(v);
            }
            values.extend([sum / count as f64, max]);
        }
    }
    Ok(SegFeatures { values, empty: count == 0 })
}

pub fn radiomics_vector(f: Option<&RadiomicsFeatures>) -> Vec<f64> {
    match f {
        Some(f) => vec![f.mesh_volume, f.voxel_volume, f.surface_area, f.sphericity],
        None => vec![0.0; 4],
    }
}

/// Per-column z-score with training-set statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Constant columns; they map to 0.
    pub zero_variance: Vec<usize>,
}

impl Normalizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::InsufficientData(format!("normalization needs >= 2 rows, got {}", rows.len())));
        }
        let dim = rows[0].len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::shape("feature rows differ in length"));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in std.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        std.iter_mut().for_each(|s| *s = s.sqrt());
        let zero_variance = (0..dim).filter(|&i| std[i] <= 1e-12 * mean[i].abs().max(1.0)).collect();
        Ok(Self { mean, std, zero_variance })
    }

    pub fn apply(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.mean.len() {
            return Err(Error::shape(format!("row of {} features, normalizer has {}", row.len(), self.mean.len())));
        }
        Ok(row
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if self.zero_variance.contains(&i) {
                    0.0
                } else {
                    (v - self.mean[i]) / self.std[i]
                }
            })
            .collect())
    }
}

/// `α·seg + β·rad`, the shorter vector zero-padded.
pub fn fuse_features(seg: &[f64], rad: &[f64], alpha: f64, beta: f64) -> Vec<f64> {
    (0..seg.len().max(rad.len()))
        .map(|i| alpha * seg.get(i).copied().unwrap_or(0.0) + beta * rad.get(i).copied().unwrap_or(0.0))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierRow {
    pub case_id: String,
    /// The predicted region the features were pooled over.
    pub region: RegionId,
    pub seg: Vec<f64>,
    pub rad: Vec<f64>,
    /// Ground-truth presence of WT, ET, TC.
    pub labels: [bool; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            epochs: 300,
            lr: 1e-2,
            seed: 0,
            alpha: 0.5,
            beta: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub config: ClassifierConfig,
    pub seg_norm: Normalizer,
    pub rad_norm: Normalizer,
    pub params: ParamStore<f64>,
    /// Outputs whose training labels were all one class; never trained.
    pub degenerate: Vec<RegionId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub region: RegionId,
    pub counts: ConfusionCounts,
    pub acc: Score,
    pub prec: Score,
    pub sen: Score,
    pub spe: Score,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub rows: usize,
    pub regions: Vec<RegionReport>,
    /// Means over regions of `[acc, prec, sen, spe]`.
    pub average: [f64; 4],
}

const PINNED_LOGIT: f64 = 20.0;

fn init_head(dim: usize, hidden: usize, seed: u64) -> Result<ParamStore<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut he = |fan_in: usize, shape: Vec<usize>| {
        let normal = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).expect("finite std");
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| normal.sample(&mut rng)).collect())
    };
    let mut s = ParamStore::new();
    s.insert("fc1.w", he(dim, vec![hidden, dim])?)?;
    s.insert("fc1.b", Tensor::zeros(&[hidden]))?;
    s.insert("fc2.w", he(hidden, vec![3, hidden])?)?;
    s.insert("fc2.b", Tensor::zeros(&[3]))?;
    Ok(s)
}

fn logits(g: &mut Graph<f64>, params: &crate::autodiff::Bound, x: Tensor<f64>) -> Result<crate::autodiff::Var> {
    let xv = g.constant(x);
    let h = g.linear(xv, params.get("fc1.w")?, params.get("fc1.b")?)?;
    let h = g.relu(h);
    g.linear(h, params.get("fc2.w")?, params.get("fc2.b")?)
}

impl Classifier {
    fn design(&self, rows: &[ClassifierRow]) -> Result<Tensor<f64>> {
        let mut data = Vec::new();
        let mut dim = 0;
        for r in rows {
            let f = fuse_features(
                &self.seg_norm.apply(&r.seg)?,
                &self.rad_norm.apply(&r.rad)?,
                self.config.alpha,
                self.config.beta,
            );
            dim = f.len();
            data.extend(f);
        }
        Tensor::new(vec![rows.len(), dim], data)
    }

    pub fn input_dim(&self) -> usize {
        self.seg_norm.mean.len().max(self.rad_norm.mean.len())
    }

    pub fn train(rows: &[ClassifierRow], config: &ClassifierConfig) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::InsufficientData(format!("classifier needs >= 2 rows, got {}", rows.len())));
        }
        if config.hidden == 0 {
            return Err(Error::Config("hidden width must be >= 1".into()));
        }
        let seg_norm = Normalizer::fit(&rows.iter().map(|r| r.seg.clone()).collect::<Vec<_>>())?;
        let rad_norm = Normalizer::fit(&rows.iter().map(|r| r.rad.clone()).collect::<Vec<_>>())?;
        let dim = seg_norm.mean.len().max(rad_norm.mean.len());
        let degenerate: Vec<RegionId> = (0..3)
            .filter(|&k| rows.iter().all(|r| r.labels[k] == rows[0].labels[k]))
            .map(|k| RegionId::ALL[k])
            .collect();
        let mut clf = Self {
            config: config.clone(),
            seg_norm,
            rad_norm,
            params: init_head(dim, config.hidden, config.seed)?,
            degenerate,
        };
        let x = clf.design(rows)?;
        let y = Tensor::new(
            vec![rows.len(), 3],
            rows.iter().flat_map(|r| r.labels.map(|b| if b { 1.0 } else { 0.0 })).collect(),
        )?;
        let mask: Vec<bool> = rows
            .iter()
            .flat_map(|_| (0..3).map(|k| !clf.degenerate.contains(&RegionId::ALL[k])))
            .collect();
        if clf.degenerate.len() < 3 {
            clf.fit(&x, &y, &mask)?;
        }
        // A constant column has nothing to learn; pin its output to the
        // observed class.
        let hidden = config.hidden;
        for k in (0..3).filter(|&k| clf.degenerate.contains(&RegionId::ALL[k])) {
            clf.params.get_mut("fc2.w").expect("head weight").data_mut()[k * hidden..(k + 1) * hidden].fill(0.0);
            clf.params.get_mut("fc2.b").expect("head bias").data_mut()[k] = if rows[0].labels[k] { PINNED_LOGIT } else { -PINNED_LOGIT };
        }
        Ok(clf)
    }

    fn fit(&mut self, x: &Tensor<f64>, y: &Tensor<f64>, mask: &[bool]) -> Result<()> {
        let (lr, epochs) = (self.config.lr, self.config.epochs);
        let clf = self;
        let mut opt = Optimizer::new(
            OptimizerConfig {
                lr,
                ..OptimizerConfig::default()
            },
            &clf.params,
        )?;
        for epoch in 0..epochs {
            let mut g = Graph::new();
            let bound = clf.params.bind(&mut g);
            let z = logits(&mut g, &bound, x.clone())?;
            let loss = g.bce_with_logits(z, y, Some(mask))?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Divergence { step: epoch, loss: value });
            }
            g.backward(loss)?;
            let grads = clf.params.grads(&g, &bound);
            opt.apply(&mut clf.params, &grads);
        }
        Ok(())
    }

    /// Presence probabilities for WT, ET, TC per row.
    pub fn predict_proba(&self, rows: &[ClassifierRow]) -> Result<Vec<[f64; 3]>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.design(rows)?;
        let mut g = Graph::new();
        let bound = self.params.bind_constant(&mut g);
        let z = logits(&mut g, &bound, x)?;
        Ok(g.value(z).data().chunks(3).map(|c| [sigmoid(c[0]), sigmoid(c[1]), sigmoid(c[2])]).collect())
    }

    pub fn predict(&self, rows: &[ClassifierRow]) -> Result<Vec<[bool; 3]>> {
        Ok(self.predict_proba(rows)?.iter().map(|p| p.map(|v| v > 0.5)).collect())
    }

    pub fn evaluate(&self, rows: &[ClassifierRow]) -> Result<ClassificationReport> {
        let pred = self.predict(rows)?;
        let mut regions = Vec::with_capacity(3);
        let mut average = [0.0; 4];
        for (k, &region) in RegionId::ALL.iter().enumerate() {
            let mut c = ConfusionCounts::default();
            for (p, r) in pred.iter().zip(rows) {
                match (p[k], r.labels[k]) {
                    (true, true) => c.tp += 1,
                    (true, false) => c.fp += 1,
                    (false, true) => c.fn_ += 1,
                    (false, false) => c.tn += 1,
                }
            }
            let m = classification_metrics(&c);
            for (a, s) in average.iter_mut().zip([m.acc, m.prec, m.sen, m.spe]) {
                *a += s.value / 3.0;
            }
            regions.push(RegionReport {
                region,
                counts: c,
                acc: m.acc,
                prec: m.prec,
                sen: m.sen,
                spe: m.spe,
                degenerate: self.degenerate.contains(&region),
            });
        }
        Ok(ClassificationReport {
            rows: rows.len(),
            regions,
            average,
        })
    }

    fn meta(&self) -> serde_json::Value {
        serde_json::json!({
            "config": self.config,
            "seg_norm": self.seg_norm,
            "rad_norm": self.rad_norm,
            "degenerate": self.degenerate,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.params.save(path, self.meta())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let (params, meta) = ParamStore::load(path)?;
        fn field<V: serde::de::DeserializeOwned>(meta: &serde_json::Value, k: &str) -> Result<V> {
            serde_json::from_value(meta[k].clone()).map_err(|e| Error::CorruptFile(format!("classifier {k}: {e}")))
        }
        Ok(Self {
            config: field(&meta, "config")?,
            seg_norm: field(&meta, "seg_norm")?,
            rad_norm: field(&meta, "rad_norm")?,
            degenerate: field(&meta, "degenerate")?,
            params,
        })
    }
}

/// Feature matrix CSV: identifiers, labels, then `seg_*` and `rad_*` columns.
pub fn rows_to_csv(rows: &[ClassifierRow]) -> String {
    let (ns, nr) = rows.first().map_or((0, 0), |r| (r.seg.len(), r.rad.len()));
    let mut s = String::from("case_id,region,wt,et,tc");
    (0..ns).for_each(|i| s.push_str(&format!(",seg_{i}")));
    (0..nr).for_each(|i| s.push_str(&format!(",rad_{i}")));
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{}", r.case_id, r.region));
        for b in r.labels {
            s.push_str(if b { ",1" } else { ",0" });
        }
        for v in r.seg.iter().chain(&r.rad) {
            s.push_str(&format!(",{v:.9e}"));
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Rows whose label k shifts seg feature k and shape feature k by ±3σ,
    /// so the two classes sit 6σ apart in both blocks.
    fn separable(n: usize, seed: u64) -> Vec<ClassifierRow> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        (0..n)
            .map(|i| {
                let labels = [rng.random_bool(0.5), rng.random_bool(0.5), rng.random_bool(0.5)];
                let mut seg: Vec<f64> = (0..6).map(|_| noise.sample(&mut rng)).collect();
                for k in 0..3 {
                    seg[k] += if labels[k] { 3.0 } else { -3.0 };
                }
                let mut rad: Vec<f64> = (0..4).map(|_| 100.0 + 10.0 * noise.sample(&mut rng)).collect();
                for k in 0..3 {
                    rad[k] += if labels[k] { 30.0 } else { -30.0 };
                }
                ClassifierRow {
                    case_id: format!("c{i}"),
                    region: RegionId::ALL[i % 3],
                    seg,
                    rad,
                    labels,
                }
            })
            .collect()
    }

    #[test]
    fn pooling_matches_enumeration() {
        let dims = [2, 2, 2];
        let head = Tensor::from_fn(&[1, 2, 2, 2, 2], |i| i as f64 * 0.5 - 1.0);
        let region = Mask::from_fn(dims, |d, _, w| d == 1 || w == 0);
        let f = extract_seg_features(std::slice::from_ref(&head), &region).unwrap();
        let idx: Vec<usize> = (0..8).filter(|&i| region.bits[i]).collect();
        for c in 0..2 {
            let vals: Vec<f64> = idx.iter().map(|&i| head.data()[c * 8 + i]).collect();
            assert_eq!(f.values[2 * c], vals.iter().sum::<f64>() / vals.len() as f64);
            assert_eq!(f.values[2 * c + 1], vals.iter().cloned().fold(f64::MIN, f64::max));
        }
        let e = extract_seg_features(&[head], &Mask::empty(dims)).unwrap();
        assert!(e.empty && e.values.iter().all(|&v| v == 0.0));
        let constant = Tensor::full(&[3, 2, 2, 2], 2.5);
        let c = extract_seg_features(&[constant], &region).unwrap();
        assert!(c.values.iter().all(|&v| v == 2.5));
    }

    #[test]
    fn normalizer_contract() {
        let n = Normalizer::fit(&[vec![1.0, 5.0], vec![3.0, 5.0]]).unwrap();
        assert_eq!(n.apply(&[1.0, 5.0]).unwrap(), vec![-1.0, 0.0]);
        assert_eq!(n.apply(&[3.0, 9.0]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(n.zero_variance, vec![1]);
        // unseen rows use the fitted stats
        assert_eq!(n.apply(&[5.0, 0.0]).unwrap(), vec![3.0, 0.0]);
        assert!(matches!(Normalizer::fit(&[vec![1.0]]), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn fusion_arithmetic() {
        let seg = [1.0, 2.0, 3.0];
        let rad = [10.0];
        assert_eq!(fuse_features(&seg, &rad, 1.0, 0.0), vec![1.0, 2.0, 3.0]);
        assert_eq!(fuse_features(&seg, &rad, 0.0, 0.0), vec![0.0; 3]);
        assert_eq!(fuse_features(&[0.0; 3], &rad, 0.5, 0.5), vec![5.0, 0.0, 0.0]);
        let a = fuse_features(&[1.0, -2.0], &[4.0], 0.3, 0.7);
        let b = fuse_features(&[0.5, 1.0], &[-1.0, 2.0], 0.3, 0.7);
        let ab = fuse_features(&[1.5, -1.0], &[3.0, 2.0], 0.3, 0.7);
        for i in 0..2 {
            assert!((a[i] + b[i] - ab[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn separable_rows_are_learned_and_scale_invariant() {
        let rows = separable(200, 1);
        let clf = Classifier::train(&rows, &ClassifierConfig::default()).unwrap();
        let rep = clf.evaluate(&rows).unwrap();
        for r in &rep.regions {
            assert!(r.acc.value >= 0.99, "{r:?}");
            let m = classification_metrics(&r.counts);
            assert_eq!(m.acc, r.acc);
        }
        let scaled: Vec<_> = rows
            .iter()
            .map(|r| ClassifierRow {
                seg: r.seg.iter().map(|v| v * 7.5).collect(),
                rad: r.rad.iter().map(|v| v * 0.01).collect(),
                ..r.clone()
            })
            .collect();
        let clf2 = Classifier::train(&scaled, &ClassifierConfig::default()).unwrap();
        assert_eq!(clf.predict(&rows).unwrap(), clf2.predict(&scaled).unwrap());
    }

    #[test]
    fn degenerate_outputs_are_pinned() {
        let mut rows = separable(20, 2);
        rows.iter_mut().for_each(|r| r.labels[1] = true);
        let cfg = ClassifierConfig {
            epochs: 0,
            ..Default::default()
        };
        let clf = Classifier::train(&rows, &cfg).unwrap();
        assert_eq!(clf.degenerate, vec![RegionId::ET]);
        for p in clf.predict_proba(&rows).unwrap() {
            assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
            assert!(p[1] > 0.999);
        }
        let trained = Classifier::train(&rows, &ClassifierConfig::default()).unwrap();
        assert!(trained.evaluate(&rows).unwrap().regions[1].degenerate);
    }

    #[test]
    fn deterministic_and_persistent() {
        let rows = separable(30, 3);
        let a = Classifier::train(&rows, &ClassifierConfig::default()).unwrap();
        let b = Classifier::train(&rows, &ClassifierConfig::default()).unwrap();
        assert_eq!(a.params, b.params);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("clf.bin");
        a.save(&p).unwrap();
        let back = Classifier::load(&p).unwrap();
        assert_eq!(back.predict(&rows).unwrap(), a.predict(&rows).unwrap());
        assert_eq!(rows_to_csv(&rows).lines().count(), 31);
    }
}
