use super::*;

fn input(cfg: &NetworkConfig, seed: u64) -> Tensor<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [d, h, w] = cfg.input_dims;
    Tensor::from_fn(&[1, cfg.in_channels, d, h, w], |_| rng.random_range(-1.0..1.0))
}

fn small() -> NetworkConfig {
    NetworkConfig {
        base_filters: 2,
        input_dims: [8, 8, 8],
        ..NetworkConfig::toy()
    }
}

fn layer<'a>(t: &'a Tracer, name: &str) -> &'a LayerInfo {
    t.layers.iter().find(|l| l.name == name).unwrap()
}

#[test]
fn encoder_stage_shapes() {
    let t = describe(&NetworkConfig::toy()).unwrap();
    assert_eq!(layer(&t, "enc1").output, [8, 32, 32, 32]);
    let pools: Vec<_> = t.layers.iter().filter(|l| l.name == "pool").map(|l| l.output).collect();
    assert_eq!(pools, vec![[16, 16, 16, 16], [32, 8, 8, 8]]);
    assert_eq!(layer(&t, "ctx3").output, [32, 8, 8, 8]);
    assert_eq!(t.layers.last().unwrap().output, [4, 32, 32, 32]);
}

#[test]
fn paper_preset_shapes_without_forward() {
    let cfg = NetworkConfig::paper();
    let t = describe(&cfg).unwrap();
    assert_eq!(layer(&t, "enc1").output, [16, 128, 128, 128]);
    assert_eq!(layer(&t, "ctx1").output, [128, 16, 16, 16]);
    assert_eq!(t.layers.last().unwrap().output, [4, 128, 128, 128]);
    assert!(param_count(&cfg).unwrap() > param_count(&NetworkConfig::toy()).unwrap());
}

#[test]
fn ablation_counts_strictly_increase() {
    for base in [NetworkConfig::toy(), NetworkConfig::paper()] {
        let counts: Vec<usize> = Ablation::LATTICE
            .iter()
            .map(|&a| param_count(&base.clone().with_ablation(a)).unwrap())
            .collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]), "{counts:?}");
    }
}

#[test]
fn invalid_configs_rejected() {
    let mut c = NetworkConfig::toy();
    c.input_dims = [30, 32, 32];
    assert!(matches!(c.validate(), Err(Error::Shape(_))));
    let mut c = NetworkConfig::toy();
    c.fmff_scales = 4;
    assert!(c.validate().is_err());
    let mut c = NetworkConfig::toy();
    c.depth = 1;
    assert!(c.validate().is_err());
}

#[test]
fn init_is_seeded_and_matches_description() {
    let cfg = small();
    let a = init_params::<f32>(&cfg, 3).unwrap();
    let b = init_params::<f32>(&cfg, 3).unwrap();
    let c = init_params::<f32>(&cfg, 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.count(), param_count(&cfg).unwrap());
    check_params(&cfg, &a).unwrap();
    assert!(a.get("res1.w").unwrap().data().iter().all(|&v| v == 0.0));
    assert_eq!(a.get("gamma1").unwrap().data(), &[1.0 / 3.0]);
    assert!(check_params(&cfg.clone().with_ablation(Ablation::Base), &a).is_err());
}

#[test]
fn forward_shape_law_for_every_preset() {
    let base = NetworkConfig {
        base_filters: 2,
        ..NetworkConfig::toy()
    };
    for a in Ablation::LATTICE {
        let cfg = base.clone().with_ablation(a);
        let params = init_params::<f32>(&cfg, 0).unwrap();
        let (p, heads) = predict(&cfg, &params, input(&cfg, 1).cast()).unwrap();
        assert_eq!(p.shape(), &[1, 4, 32, 32, 32], "{a:?}");
        assert_eq!(heads.len(), if cfg.aggregation { 3 } else { 1 });
        for h in &heads {
            assert_eq!(h.shape(), &[1, 4, 32, 32, 32]);
        }
    }
}

#[test]
fn zero_weights_give_uniform_probabilities() {
    let cfg = small();
    let mut params = init_params::<f64>(&cfg, 0).unwrap();
    for t in params.tensors_mut() {
        if t.numel() > 1 {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let (p, heads) = predict(&cfg, &params, input(&cfg, 2)).unwrap();
    assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    assert!(heads.iter().all(|h| h.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn probabilities_sum_to_one() {
    let cfg = small();
    let params = init_params::<f64>(&cfg, 5).unwrap();
    let (p, _) = predict(&cfg, &params, input(&cfg, 6)).unwrap();
    let n = 8 * 8 * 8;
    for i in 0..n {
        let s: f64 = (0..4).map(|c| p.data()[c * n + i]).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn wrong_input_rejected() {
    let cfg = small();
    let params = init_params::<f32>(&cfg, 0).unwrap();
    let bad = Tensor::zeros(&[1, 2, 8, 8, 8]);
    assert!(matches!(predict(&cfg, &params, bad), Err(Error::Shape(_))));
    let odd = Tensor::zeros(&[1, 3, 8, 8, 6]);
    assert!(matches!(predict(&cfg, &params, odd), Err(Error::Shape(_))));
}

#[test]
fn forward_is_deterministic() {
    let cfg = small();
    let params = init_params::<f32>(&cfg, 9).unwrap();
    let x = input(&cfg, 1).cast();
    let a = predict(&cfg, &params, x.clone()).unwrap().0;
    let b = predict(&cfg, &params, x).unwrap().0;
    assert_eq!(a, b);
}

/// Every parameter of the full model receives a gradient; before training,
/// the zero-initialised residual projection is the only one whose gradient
/// can vanish (it does not: its input is a nonzero encoder map).
#[test]
fn gradient_reaches_every_parameter() {
    let cfg = small();
    let params = init_params::<f64>(&cfg, 11).unwrap();
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let x = g.constant(input(&cfg, 12));
    let out = forward(&cfg, &mut g, &bound, x).unwrap();
    let p = g.softmax_channel(out.logits).unwrap();
    let sq = g.mul(p, p).unwrap();
    let loss = g.sum(sq);
    g.backward(loss).unwrap();
    for (name, grad) in params.names().iter().zip(params.grads(&g, &bound)) {
        assert!(grad.iter().any(|&v| v != 0.0), "{name} has no gradient");
    }
}

#[test]
fn residual_projection_starts_inert() {
    // with res{j} zero, the rSkip branch is relu(conv(D')) regardless of skip content
    let cfg = small();
    let params = init_params::<f64>(&cfg, 13).unwrap();
    let x = input(&cfg, 14);
    let base = predict(&cfg, &params, x.clone()).unwrap().0;
    let mut moved = params.clone();
    moved.get_mut("res1.b").unwrap().data_mut()[0] = 0.5;
    let shifted = predict(&cfg, &moved, x).unwrap().0;
    assert_ne!(base, shifted);
}

#[test]
fn aggregation_weights_scale_heads() {
    let cfg = small();
    let mut params = init_params::<f64>(&cfg, 15).unwrap();
    let x = input(&cfg, 16);
    for l in 1..=3 {
        params.get_mut(&format!("gamma{l}")).unwrap().data_mut()[0] = if l == 2 { 1.0 } else { 0.0 };
    }
    let mut g = Graph::new();
    let bound = params.bind_constant(&mut g);
    let xv = g.constant(x);
    let out = forward(&cfg, &mut g, &bound, xv).unwrap();
    assert_eq!(g.value(out.logits), g.value(out.heads[1]));
}

#[test]
fn context_receptive_field_grows_with_rates() {
    // impulse at the bottleneck centre: rates [1, 2, 4] reach 7 voxels out
    let mut t = Graph::<f64>::new();
    let c = 1;
    let mut x = Tensor::zeros(&[1, c, 16, 16, 16]);
    x.data_mut()[8 * 256 + 8 * 16 + 8] = 1.0;
    let mut v = t.constant(x);
    for r in [1, 2, 4] {
        let w = t.constant(Tensor::full(&[c, c, 3, 3, 3], 1.0));
        v = t.conv3d(v, w, None, &ConvSpec::dilated(c, c, r)).unwrap();
    }
    let out = t.value(v).data();
    let reach = |d: usize| out[8 * 256 + 8 * 16 + d] != 0.0;
    assert!(reach(15) && !reach(0) && reach(1));
}
