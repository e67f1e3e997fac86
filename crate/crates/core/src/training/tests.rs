use super::*;
use std::ops::ControlFlow;
use crate::autodiff::gradcheck::check_gradients;
use crate::phantom::{brain_case, BrainPhantom};
use proptest::prelude::*;

fn tiny_net() -> NetworkConfig {
    NetworkConfig {
        base_filters: 2,
        input_dims: [8, 8, 8],
        ..NetworkConfig::toy()
    }
}

/// An 8³ crop around the toy phantom's tumor.
fn tiny_sample<T: Real>(seed: u64) -> Sample<T> {
    let case = brain_case(&BrainPhantom::toy(), seed);
    let ch = case.normalized_channels().unwrap();
    let c = case.tumor_center.map(|v| v.round() as usize - 4);
    let bbox = crate::preprocess::BoundingBox {
        min: c,
        max: [c[0] + 7, c[1] + 7, c[2] + 7],
        margin: [0; 3],
    };
    use crate::preprocess::Crop;
    Sample::new(format!("t{seed}"), &ch.crop(&bbox).unwrap(), &case.labels.crop(&bbox).unwrap()).unwrap()
}

#[test]
fn label_class_mapping() {
    for (c, l) in [0u8, 1, 2, 4].iter().enumerate() {
        assert_eq!(class_of(*l), Some(c));
        assert_eq!(label_of(c), *l);
    }
    assert_eq!(class_of(3), None);
    let v = LabelVolume::new([1, 1, 4], [1.0; 3], vec![0, 4, 2, 1]).unwrap();
    let t = one_hot::<f64>(&v).unwrap();
    assert_eq!(t.shape(), &[4, 1, 1, 4]);
    let back = argmax_labels(t.data(), [1, 1, 4], [1.0; 3]).unwrap();
    assert_eq!(back, v);
    assert!(LabelVolume::new([1, 1, 1], [1.0; 3], vec![3]).is_err());
}

#[test]
fn inverse_frequency_weights() {
    let w = class_weights_from_counts(&[900, 100]).unwrap();
    assert!((w.weights[1] / w.weights[0] - 9.0).abs() < 1e-12);
    assert!((w.weights.iter().sum::<f64>() / 2.0 - 1.0).abs() < 1e-12);
    assert_eq!(w.alpha[1], 1.0);
    let u = class_weights_from_counts(&[5, 5, 5, 5]).unwrap();
    assert!(u.weights.iter().all(|&x| (x - 1.0).abs() < 1e-12));
    let a = class_weights_from_counts(&[100, 0, 10, 10]).unwrap();
    assert_eq!(a.absent, vec![1]);
    assert!(a.weights.iter().all(|w| w.is_finite()));
    assert!(matches!(class_weights_from_counts(&[0, 0]), Err(Error::EmptyDataset)));
    let none: [&LabelVolume; 0] = [];
    assert!(matches!(class_weights_from_frequency(none), Err(Error::EmptyDataset)));
}

fn probs(b: usize, n: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = vec![0.0; b * 4 * n];
    let mut y = vec![0.0; b * 4 * n];
    for bi in 0..b {
        for i in 0..n {
            let raw: Vec<f64> = (0..4).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            for c in 0..4 {
                p[(bi * 4 + c) * n + i] = raw[c] / s;
            }
            y[(bi * 4 + rng.random_range(0..4)) * n + i] = 1.0;
        }
    }
    (Tensor::new(vec![b, 4, n], p).unwrap(), Tensor::new(vec![b, 4, n], y).unwrap())
}

#[test]
fn loss_modes_combine_components() {
    let (p, y) = probs(1, 10, 1);
    for mode in [LossMode::Sum, LossMode::Max] {
        let mut g = Graph::new();
        let pv = g.constant(p.clone());
        let l = total_loss(&mut g, pv, &y, &LossConfig::uniform(mode)).unwrap();
        let [d, f, t] = [l.dice, l.focal, l.total].map(|v| g.value(v).data()[0]);
        assert!(f >= 0.0 && (0.0..=1.0).contains(&d));
        let expect = if mode == LossMode::Sum { d + f } else { d.max(f) };
        assert_eq!(t, expect);
    }
    // perfect prediction
    let mut g = Graph::new();
    let yv = g.constant(y.clone());
    let l = total_loss(&mut g, yv, &y, &LossConfig::uniform(LossMode::Sum)).unwrap();
    assert!(g.value(l.total).data()[0] < 1e-6);
}

#[test]
fn max_mode_gradient_matches_differences() {
    let (p, y) = probs(1, 6, 2);
    let cfg = LossConfig::uniform(LossMode::Max);
    let check = check_gradients(&[p], 1e-6, |g, v| {
        let s = g.softmax_channel(v[0])?;
        Ok(total_loss(g, s, &y, &cfg)?.total)
    })
    .unwrap();
    assert!(check.max_rel_error() < 1e-4, "{check:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn dice_is_permutation_equivariant_and_weight_homogeneous(seed in any::<u64>(), k in 0.1f64..10.0) {
        let (p, y) = probs(1, 12, seed);
        let perm: Vec<usize> = (0..12).rev().collect();
        let permute = |t: &Tensor<f64>| {
            Tensor::from_fn(&[1, 4, 12], |i| t.data()[i / 12 * 12 + perm[i % 12]])
        };
        let w = [0.5, 1.0, 2.0, 3.0];
        let dice = |p: &Tensor<f64>, y: &Tensor<f64>, w: &[f64]| {
            let mut g = Graph::new();
            let v = g.constant(p.clone());
            let d = g.dice_loss(v, y, w, 0.0).unwrap();
            g.value(d).data()[0]
        };
        let base = dice(&p, &y, &w);
        prop_assert!((dice(&permute(&p), &permute(&y), &w) - base).abs() < 1e-12);
        let scaled: Vec<f64> = w.iter().map(|v| v * k).collect();
        prop_assert!((dice(&p, &y, &scaled) - base).abs() < 1e-12);
    }
}

#[test]
fn adam_ignores_zero_gradient() {
    let mut s = ParamStore::<f64>::new();
    s.insert("a", Tensor::from_fn(&[5], |i| i as f64)).unwrap();
    let before = s.clone();
    let mut opt = Optimizer::new(OptimizerConfig::default(), &s).unwrap();
    opt.apply(&mut s, &[vec![0.0; 5]]);
    assert_eq!(s, before);
    // the first real step moves every coordinate by lr
    let mut fresh = Optimizer::new(OptimizerConfig::default(), &s).unwrap();
    fresh.apply(&mut s, &[vec![1.0; 5]]);
    assert!(s.tensors()[0].data().iter().zip(before.tensors()[0].data()).all(|(a, b)| (b - a - 1e-4).abs() < 1e-9));
    let mut sgd = Optimizer::new(
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr: 0.5,
            ..Default::default()
        },
        &s,
    )
    .unwrap();
    let x = s.tensors()[0].data()[0];
    sgd.apply(&mut s, &[vec![2.0; 5]]);
    assert_eq!(s.tensors()[0].data()[0], x - 1.0);
}

#[test]
fn zero_learning_rate_is_a_null_update() {
    let net = tiny_net();
    let params = network::init_params::<f64>(&net, 0).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        optimizer: OptimizerConfig {
            lr: 0.0,
            ..Default::default()
        },
        ..Default::default()
    };
    let out = train(&net, params.clone(), &[tiny_sample(0)], &[], &cfg, |_| ControlFlow::Continue(())).unwrap();
    assert_eq!(out.last, params);
    assert_eq!(out.run.records.len(), 1);
}

#[test]
fn training_is_deterministic_and_logs_epochs() {
    let net = tiny_net();
    let data = [tiny_sample(1), tiny_sample(2), tiny_sample(3)];
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 2,
        seed: 5,
        optimizer: OptimizerConfig {
            lr: 1e-3,
            ..Default::default()
        },
        ..Default::default()
    };
    let run = || {
        let mut seen = 0;
        let out = train(&net, network::init_params::<f64>(&net, 1).unwrap(), &data, &data[..1], &cfg, |_| {
            seen += 1;
            ControlFlow::Continue(())
        }).unwrap();
        assert_eq!(seen, 3);
        out
    };
    let (a, b) = (run(), run());
    assert_eq!(a.run.steps, 6);
    assert_eq!(epoch_csv(&a.run.records, true), epoch_csv(&b.run.records, true));
    assert_eq!(a.last, b.last);
    let csv = epoch_csv(&a.run.records, true);
    assert!(csv.starts_with("epoch,train_loss,train_acc,val_loss,val_acc,seconds\n"));
    assert_eq!(csv.lines().count(), 4);
    assert!(a.run.records.iter().all(|r| r.val_loss.is_some()));
    assert!((1..=3).contains(&a.run.best_epoch));
}

#[test]
fn max_steps_stops_mid_epoch() {
    let net = tiny_net();
    let data = [tiny_sample(1), tiny_sample(2)];
    let cfg = TrainConfig {
        epochs: 5,
        max_steps: Some(3),
        ..Default::default()
    };
    let out = train(&net, network::init_params::<f32>(&net, 1).unwrap(), &data, &[], &cfg, |_| ControlFlow::Continue(())).unwrap();
    assert_eq!(out.run.steps, 3);
    assert_eq!(out.run.records.len(), 2);
}

#[test]
fn failures_are_typed() {
    let net = tiny_net();
    let params = network::init_params::<f64>(&net, 0).unwrap();
    let mut poisoned = params.clone();
    poisoned.get_mut("head1.b").unwrap().data_mut()[0] = f64::NAN;
    let err = train(&net, poisoned, &[tiny_sample(0)], &[], &TrainConfig::default(), |_| ControlFlow::Continue(())).err().unwrap();
    assert!(matches!(err, Error::Divergence { step: 0, .. }), "{err}");
    let mut wide = tiny_sample::<f64>(0);
    wide.image = Tensor::zeros(&[2, 8, 8, 8]);
    let err = train(&net, params.clone(), &[wide], &[], &TrainConfig::default(), |_| ControlFlow::Continue(())).err().unwrap();
    assert!(matches!(err, Error::Shape(_)));
    assert!(matches!(
        train::<f64>(&net, params, &[], &[], &TrainConfig::default(), |_| ControlFlow::Continue(())),
        Err(Error::EmptyDataset)
    ));
}

#[test]
fn paper_preset() {
    let p = TrainConfig::paper();
    assert_eq!((p.optimizer.kind, p.optimizer.lr, p.batch_size, p.loss_mode), (OptimizerKind::Adam, 1e-4, 2, LossMode::Sum));
    let json = serde_json::to_string(&p).unwrap();
    assert!(json.contains("\"D&F\""));
    let back: TrainConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, p);
    let alias: LossMode = serde_json::from_str("\"max\"").unwrap();
    assert_eq!(alias, LossMode::Max);
}

#[test]
fn callback_can_stop_the_run() {
    let net = tiny_net();
    let cfg = TrainConfig {
        epochs: 10,
        ..Default::default()
    };
    let out = train(&net, network::init_params::<f32>(&net, 1).unwrap(), &[tiny_sample(1)], &[], &cfg, |r| {
        if r.epoch == 2 {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    })
    .unwrap();
    assert_eq!((out.run.steps, out.run.records.len()), (2, 2));
}
