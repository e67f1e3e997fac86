use super::gradcheck::{check_gradients, op_suite};
use super::*;

fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn ramp(shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| ((i * 37 % 101) as f64 / 101.0 - 0.5) * scale)
}

#[test]
fn identity_conv() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(ramp(&[1, 1, 3, 4, 5], 2.0));
    let w = g.param(t(&[1, 1, 1, 1, 1], vec![1.0]));
    let b = g.param(t(&[1], vec![0.0]));
    let y = g.conv3d(x, w, Some(b), &ConvSpec::cube(1, 1, 1)).unwrap();
    assert_eq!(g.value(y), g.value(x));
}

#[test]
fn conv_output_shapes() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(ramp(&[1, 1, 5, 5, 5], 1.0));
    let spec = ConvSpec::cube(1, 4, 3);
    let w = g.param(Tensor::zeros(&spec.weight_shape()));
    let y = g.conv3d(x, w, None, &spec).unwrap();
    assert_eq!(g.shape(y), [1, 4, 5, 5, 5]);

    let spec = ConvSpec::dilated(1, 1, 2);
    let w = g.param(Tensor::zeros(&spec.weight_shape()));
    let y = g.conv3d(x, w, None, &spec).unwrap();
    assert_eq!(g.shape(y), [1, 1, 5, 5, 5]);

    let spec = ConvSpec::cube(1, 1, 2).with_stride(2).with_padding(0);
    let small = g.constant(ramp(&[1, 1, 4, 4, 4], 1.0));
    let w = g.param(Tensor::zeros(&spec.transposed_weight_shape()));
    let y = g.conv_transpose3d(small, w, None, &spec).unwrap();
    assert_eq!(g.shape(y), [1, 1, 8, 8, 8]);

    let bad = ConvSpec::cube(2, 1, 3);
    let w = g.param(Tensor::zeros(&bad.weight_shape()));
    assert!(matches!(g.conv3d(x, w, None, &bad), Err(Error::Shape(_))));
}

#[test]
fn transposed_conv_is_conv_backward_input() {
    // forward of the transposed conv equals the input-gradient of the conv
    // with the same weights and upstream gradient x
    for (spec, n) in [
        (ConvSpec::cube(2, 3, 3), 5),
        (ConvSpec::cube(2, 3, 2).with_stride(2).with_padding(0), 8),
        (ConvSpec::dilated(3, 2, 2), 6),
    ] {
        let big = ramp(&[1, spec.in_channels, n, n, n], 1.0);
        let w = Tensor::from_fn(&spec.weight_shape(), |i| ((i * 13 % 17) as f64 - 8.0) / 9.0);
        let small_dims = spec.conv_out([n; 3]).unwrap();
        let y = Tensor::from_fn(
            &[1, spec.out_channels, small_dims[0], small_dims[1], small_dims[2]],
            |i| ((i * 7 % 23) as f64 - 11.0) / 5.0,
        );

        let mut g = Graph::<f64>::new();
        let xv = g.param(big.clone());
        let wv = g.constant(w.clone());
        let conv = g.conv3d(xv, wv, None, &spec).unwrap();
        let yv = g.constant(y.clone());
        let m = g.mul(conv, yv).unwrap();
        let s = g.sum(m);
        g.backward(s).unwrap();
        let backward_input = g.grad(xv).unwrap().to_vec();

        // conv weights (out, in, k) read as transposed weights (in', out', k)
        let tspec = ConvSpec {
            in_channels: spec.out_channels,
            out_channels: spec.in_channels,
            ..spec
        };
        let mut g2 = Graph::<f64>::new();
        let yv = g2.constant(y);
        let wv = g2.constant(w);
        let tr = g2.conv_transpose3d(yv, wv, None, &tspec).unwrap();
        // the conv may not reach every trailing input voxel when strided
        assert_eq!(&g2.shape(tr)[2..], &spec.transposed_out(small_dims).unwrap());
        let tr_dims = spec.transposed_out(small_dims).unwrap();
        let tv = g2.value(tr).data();
        let mut max_diff = 0.0f64;
        for c in 0..spec.in_channels {
            for d in 0..n {
                for h in 0..n {
                    for ww in 0..n {
                        let bi = ((c * n + d) * n + h) * n + ww;
                        let inside = d < tr_dims[0] && h < tr_dims[1] && ww < tr_dims[2];
                        let tval = if inside {
                            tv[((c * tr_dims[0] + d) * tr_dims[1] + h) * tr_dims[2] + ww]
                        } else {
                            0.0
                        };
                        max_diff = max_diff.max((tval - backward_input[bi]).abs());
                    }
                }
            }
        }
        assert!(max_diff < 1e-12, "{spec:?}: {max_diff}");
    }
}

#[test]
fn adjoint_inner_product_identity() {
    let spec = ConvSpec::cube(2, 2, 3);
    let x = ramp(&[1, 2, 4, 4, 4], 1.5);
    let y = Tensor::from_fn(&[1, 2, 4, 4, 4], |i| ((i * 11 % 19) as f64 - 9.0) / 7.0);
    let w = Tensor::from_fn(&spec.weight_shape(), |i| ((i * 5 % 29) as f64 - 14.0) / 10.0);
    let mut g = Graph::<f64>::new();
    let (xv, yv, wv) = (g.constant(x.clone()), g.constant(y.clone()), g.constant(w));
    let cx = g.conv3d(xv, wv, None, &spec).unwrap();
    let ty = g.conv_transpose3d(yv, wv, None, &spec).unwrap();
    let lhs: f64 = g.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = x.data().iter().zip(g.value(ty).data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-9);
}

#[test]
fn maxpool_ties_and_monotone() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::full(&[1, 1, 2, 2, 2], 3.0));
    let y = g.max_pool3d(x, 2, 2).unwrap();
    assert_eq!(g.value(y).data(), &[3.0]);
    let s = g.sum(y);
    g.backward(s).unwrap();
    let grad = g.grad(x).unwrap();
    assert_eq!(grad[0], 1.0);
    assert_eq!(grad.iter().sum::<f64>(), 1.0);

    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_fn(&[1, 1, 4, 4, 4], |i| i as f64));
    let y = g.max_pool3d(x, 2, 2).unwrap();
    // the last corner of each window: (2od+1, 2oh+1, 2ow+1)
    let expect: Vec<f64> = (0..8)
        .map(|k| {
            let (od, oh, ow) = (k / 4, k / 2 % 2, k % 2);
            (((2 * od + 1) * 4 + 2 * oh + 1) * 4 + 2 * ow + 1) as f64
        })
        .collect();
    assert_eq!(g.value(y).data(), expect.as_slice());
}

#[test]
fn upsample_constant_and_shape() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full(&[1, 2, 4, 4, 4], 0.7));
    let y = g.upsample_trilinear(x, 2).unwrap();
    assert_eq!(g.shape(y), [1, 2, 8, 8, 8]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.7));
}

#[test]
fn relu_and_softmax_values() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[2], vec![-1.0, 2.0]));
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 2.0]);

    let z = g.constant(Tensor::full(&[1, 4, 2, 2, 2], 1.3));
    let p = g.softmax_channel(z).unwrap();
    assert!(g.value(p).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

    let z = g.constant(ramp(&[2, 4, 3, 3, 3], 40.0));
    let p = g.softmax_channel(z).unwrap();
    let pv = g.value(p).data();
    for n in 0..2 {
        for i in 0..27 {
            let s: f64 = (0..4).map(|k| pv[(n * 4 + k) * 27 + i]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
    assert!(pv.iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn combine_identities() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(ramp(&[1, 2, 2, 2, 2], 1.0));
    let one = g.constant(t(&[1], vec![1.0]));
    let y = g.weighted_sum(&[x], &[one]).unwrap();
    assert_eq!(g.value(y), g.value(x));
    let zero = g.constant(Tensor::zeros(&[1, 2, 2, 2, 2]));
    let y = g.add(x, zero).unwrap();
    assert_eq!(g.value(y), g.value(x));
    let a = g.constant(Tensor::zeros(&[1, 2, 2, 2, 3]));
    assert!(g.add(x, a).is_err());
    assert!(g.concat_channel(&[x, a]).is_err());
}

#[test]
fn weighted_sum_gamma_gradient() {
    let x = ramp(&[1, 2, 3, 3, 3], 1.0);
    let up = Tensor::from_fn(&[1, 2, 3, 3, 3], |i| (i % 5) as f64 - 2.0);
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x.clone());
    let gm = g.param(t(&[1], vec![0.3]));
    let y = g.weighted_sum(&[xv], &[gm]).unwrap();
    let u = g.constant(up.clone());
    let m = g.mul(y, u).unwrap();
    let s = g.sum(m);
    g.backward(s).unwrap();
    let expect: f64 = x.data().iter().zip(up.data()).map(|(a, b)| a * b).sum();
    assert!((g.grad(gm).unwrap()[0] - expect).abs() < 1e-12);
}

#[test]
fn backward_basics() {
    let mut g = Graph::<f64>::new();
    let x = g.param(ramp(&[3, 4], 1.0));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0));

    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[1], vec![3.0]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[6.0]);
    // a second pass accumulates
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[12.0]);
    g.zero_grad();
    assert!(g.grad(x).is_none());

    let v = g.param(t(&[2], vec![1.0, 2.0]));
    assert!(matches!(g.backward(v), Err(Error::Shape(_))));
}

#[test]
fn random_chain_matches_finite_differences() {
    let x = ramp(&[1, 2, 4, 4, 4], 1.0);
    let w = Tensor::from_fn(&[3, 2, 3, 3, 3], |i| ((i * 17 % 31) as f64 - 15.0) / 20.0);
    let r = check_gradients(&[x, w], 1e-4, |g, v| {
        let c = g.conv3d(v[0], v[1], None, &ConvSpec::cube(2, 3, 3))?;
        let p = g.softmax_channel(c)?;
        let sq = g.mul(p, p)?;
        Ok(g.sum(sq))
    })
    .unwrap();
    assert!(r.max_rel_error() < 1e-4, "{r:?}");
}

#[test]
fn op_suite_passes_on_a_few_seeds() {
    for check in op_suite(0..3, None).unwrap() {
        assert!(check.passed(1e-4), "{check:?}");
    }
}

#[test]
fn injected_fault_is_detected() {
    let checks = op_suite(0..1, Some(OpKind::Conv3d)).unwrap();
    let conv = checks.iter().find(|c| c.op == "conv3d").unwrap();
    assert!(!conv.passed(1e-4));
    let relu = checks.iter().find(|c| c.op == "relu").unwrap();
    assert!(relu.passed(1e-4));
}

#[test]
fn focal_scalar_oracle() {
    let mut g = Graph::<f64>::new();
    let p = g.constant(t(&[1, 2, 1], vec![0.5, 0.5]));
    let y = t(&[1, 2, 1], vec![1.0, 0.0]);
    let l = g.focal_loss(p, &y, &[1.0, 1.0], 2.0).unwrap();
    assert!((g.value(l).data()[0] - 0.25 * 2f64.ln()).abs() < 1e-12);
}

#[test]
fn dice_hand_case() {
    // two voxels, one per class, prediction uniform 0.5
    let mut g = Graph::<f64>::new();
    let p = g.constant(Tensor::full(&[1, 2, 2], 0.5));
    let y = t(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]);
    let l = g.dice_loss(p, &y, &[1.0, 1.0], 0.0).unwrap();
    assert!((g.value(l).data()[0] - 0.5).abs() < 1e-12);
}
