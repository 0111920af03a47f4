use latpfn_autodiff::{gradcheck, AdError, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const RTOL: f64 = 1e-4;
const EPS: f64 = 1e-4;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

/// Random weights for the reduction so every output coordinate matters.
fn weighted_sum(g: &mut Graph<f64>, y: Var, rng: &mut ChaCha8Rng) -> latpfn_autodiff::Result<Var> {
    let w = randn(rng, g.shape(y));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn check<F>(name: &str, shapes: &[Vec<Vec<usize>>], f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> latpfn_autodiff::Result<Var>,
{
    assert!(shapes.len() >= 5, "{name}: need at least 5 shape cases");
    for (case, case_shapes) in shapes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(case as u64 + 17);
        let inputs: Vec<Tensor<f64>> = case_shapes.iter().map(|s| randn(&mut rng, s)).collect();
        let seed = case as u64 + 1000;
        let err = gradcheck(
            |g, xs| {
                let y = f(g, xs)?;
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                weighted_sum(g, y, &mut r)
            },
            &inputs,
            EPS,
        )
        .unwrap();
        assert!(err < RTOL, "{name} case {case} {case_shapes:?}: rel err {err:e}");
    }
}

fn s(v: &[&[usize]]) -> Vec<Vec<usize>> {
    v.iter().map(|x| x.to_vec()).collect()
}

#[test]
fn gradcheck_elementwise_binary_with_broadcast() {
    let cases = vec![
        s(&[&[3], &[3]]),
        s(&[&[2, 3], &[3]]),
        s(&[&[2, 1, 4], &[3, 1]]),
        s(&[&[4, 5], &[4, 1]]),
        s(&[&[], &[2, 2]]),
        s(&[&[1, 3, 2], &[2, 3, 2]]),
    ];
    check("add", &cases, |g, x| g.add(x[0], x[1]));
    check("sub", &cases, |g, x| g.sub(x[0], x[1]));
    check("mul", &cases, |g, x| g.mul(x[0], x[1]));
    check("div", &cases, |g, x| {
        // keep the denominator away from zero
        let sq = g.square(x[1]);
        let d = g.add_scalar(sq, 0.5);
        g.div(x[0], d)
    });
}

#[test]
fn gradcheck_unary() {
    let cases = vec![
        s(&[&[4]]),
        s(&[&[2, 3]]),
        s(&[&[3, 1, 2]]),
        s(&[&[1]]),
        s(&[&[2, 2, 2, 2]]),
    ];
    check("relu", &cases, |g, x| Ok(g.relu(x[0])));
    check("gelu", &cases, |g, x| Ok(g.gelu(x[0])));
    check("square", &cases, |g, x| Ok(g.square(x[0])));
    check("exp", &cases, |g, x| Ok(g.exp(x[0])));
    check("scale", &cases, |g, x| Ok(g.scale(x[0], -1.7)));
    check("ln", &cases, |g, x| {
        let sq = g.square(x[0]);
        let p = g.add_scalar(sq, 1.0);
        Ok(g.ln(p))
    });
}

#[test]
fn gradcheck_matmul_and_bmm() {
    let mm = vec![
        s(&[&[2, 3], &[3, 2]]),
        s(&[&[4, 5, 3], &[3, 6]]),
        s(&[&[1, 1], &[1, 4]]),
        s(&[&[2, 2, 2, 3], &[3, 1]]),
        s(&[&[7, 2], &[2, 7]]),
    ];
    check("matmul", &mm, |g, x| g.matmul(x[0], x[1]));
    let bmm = vec![
        s(&[&[2, 3, 4], &[2, 4, 5]]),
        s(&[&[1, 2, 2], &[1, 2, 2]]),
        s(&[&[3, 2, 1, 4], &[3, 2, 4, 2]]),
        s(&[&[4, 1, 3], &[4, 3, 1]]),
        s(&[&[2, 5, 2], &[2, 2, 5]]),
    ];
    check("bmm", &bmm, |g, x| g.bmm(x[0], x[1], false));
    let bmm_t = vec![
        s(&[&[2, 3, 4], &[2, 5, 4]]),
        s(&[&[1, 2, 2], &[1, 2, 2]]),
        s(&[&[3, 2, 1, 4], &[3, 2, 2, 4]]),
        s(&[&[4, 1, 3], &[4, 1, 3]]),
        s(&[&[2, 5, 2], &[2, 5, 2]]),
    ];
    check("bmm_nt", &bmm_t, |g, x| g.bmm(x[0], x[1], true));
}

#[test]
fn gradcheck_shape_ops() {
    let cases = vec![
        s(&[&[2, 3, 4]]),
        s(&[&[4, 2, 3]]),
        s(&[&[3, 3, 3]]),
        s(&[&[1, 5, 2]]),
        s(&[&[2, 2, 6]]),
    ];
    check("permute", &cases, |g, x| g.permute(x[0], &[2, 0, 1]));
    check("transpose", &cases, |g, x| g.transpose(x[0]));
    check("reshape", &cases, |g, x| {
        let n = g.value(x[0]).len();
        g.reshape(x[0], &[n])
    });
    check("narrow", &cases, |g, x| {
        let len = g.shape(x[0])[1];
        g.narrow(x[0], 1, len / 2, len - len / 2)
    });
    check("index_select", &cases, |g, x| {
        let len = g.shape(x[0])[1];
        g.index_select(x[0], 1, &[len - 1, 0, len - 1])
    });
    check("concat", &cases, |g, x| {
        let sq = g.square(x[0]);
        g.concat(&[x[0], sq, x[0]], 1)
    });
}

#[test]
fn gradcheck_reductions_and_normalisation() {
    let cases = vec![
        s(&[&[2, 3, 4]]),
        s(&[&[5, 2]]),
        s(&[&[3, 3, 3]]),
        s(&[&[1, 6, 2]]),
        s(&[&[2, 1, 5]]),
    ];
    for axis in [0, 1] {
        check("sum_axis", &cases, move |g, x| g.sum_axis(x[0], axis, axis == 0));
        check("mean_axis", &cases, move |g, x| g.mean_axis(x[0], axis, false));
        check("softmax", &cases, move |g, x| g.softmax(x[0], axis));
        check("log_softmax", &cases, move |g, x| g.log_softmax(x[0], axis));
        check("layer_norm", &cases, move |g, x| g.layer_norm(x[0], axis, 1e-5));
    }
    check("mean", &cases, |g, x| Ok(g.mean(x[0])));
}

#[test]
fn gradcheck_depthwise_conv() {
    let cases = vec![
        s(&[&[1, 6, 2], &[2, 2]]),
        s(&[&[2, 8, 3], &[3, 3]]),
        s(&[&[1, 5, 1], &[4, 1]]),
        s(&[&[3, 4, 2], &[1, 2]]),
        s(&[&[2, 9, 4], &[2, 4]]),
    ];
    for dilation in [1, 2, 4] {
        check("depthwise_conv1d", &cases, move |g, x| {
            g.depthwise_conv1d(x[0], x[1], dilation)
        });
    }
}

#[test]
fn gradcheck_attention_block() {
    let cases = vec![
        s(&[&[1, 3, 4], &[1, 5, 4], &[1, 5, 2]]),
        s(&[&[2, 2, 3], &[2, 2, 3], &[2, 2, 3]]),
        s(&[&[2, 1, 2], &[2, 4, 2], &[2, 4, 5]]),
        s(&[&[1, 6, 3], &[1, 6, 3], &[1, 6, 1]]),
        s(&[&[3, 2, 2], &[3, 3, 2], &[3, 3, 2]]),
    ];
    check("attention", &cases, |g, x| {
        g.scaled_dot_attention(x[0], x[1], x[2], None)
    });
}

#[test]
fn gradcheck_linear_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = vec![
        randn(&mut rng, &[3, 4]),
        randn(&mut rng, &[4, 2]),
        randn(&mut rng, &[2]),
    ];
    let err = gradcheck(
        |g, x| {
            let y = g.linear(x[0], x[1], Some(x[2]))?;
            Ok(g.sum(y))
        },
        &inputs[..],
        EPS,
    );
    // linear in x; bilinear in (x, w) still exact for central differences
    assert!(err.unwrap() < 1e-10);
}

#[test]
fn layer_norm_near_constant_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..5 {
        let base: f64 = rng.random_range(-2.0..2.0);
        let x = Tensor::from_fn(&[2, 6], |_| base + 1e-2 * rng.sample::<f64, _>(StandardNormal));
        let seed = case;
        let err = gradcheck(
            |g, xs| {
                let y = g.layer_norm(xs[0], 1, 1e-5)?;
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                weighted_sum(g, y, &mut r)
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-3, "near-constant layer_norm rel err {err:e}");
    }
}

#[test]
fn cross_entropy_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = randn(&mut rng, &[3, 2, 7]);
    let targets = [0, 6, 3, 3, 1, 5];
    let err = gradcheck(|g, x| g.cross_entropy_smoothed(x[0], &targets, 0.01), &[logits], EPS).unwrap();
    assert!(err < RTOL);
}

#[test]
fn conv_identity_kernel_passes_input_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for dilation in [1, 2, 8] {
        let x = randn(&mut rng, &[2, 10, 3]);
        let mut w = Tensor::zeros(&[3, 3]);
        w.data_mut()[..3].copy_from_slice(&[1.0; 3]);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w);
        let y = g.depthwise_conv1d(xv, wv, dilation).unwrap();
        assert_eq!(g.value(y), &x);
    }
}

#[test]
fn conv_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = randn(&mut rng, &[1, 12, 2]);
    let w = randn(&mut rng, &[3, 2]);
    let run = |x: Tensor<f64>| {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let wv = g.constant(w.clone());
        let y = g.depthwise_conv1d(xv, wv, 2).unwrap();
        g.value(y).clone()
    };
    let base = run(x.clone());
    let mut x2 = x;
    x2.data_mut()[8 * 2] += 5.0; // step 8, channel 0
    let moved = run(x2);
    assert_eq!(&base.data()[..8 * 2], &moved.data()[..8 * 2]);
    assert_ne!(base.data()[8 * 2], moved.data()[8 * 2]);
}

#[test]
fn softmax_sums_to_one_on_every_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = randn(&mut rng, &[3, 4, 5]);
    for axis in 0..3 {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = g.softmax(xv, axis).unwrap();
        let s = g.sum_axis(y, axis, false).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn matmul_hand_fixture() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
    let b = g.constant(Tensor::new(&[3, 2], vec![7., 8., 9., 10., 11., 12.]).unwrap());
    let c = g.matmul(a, b).unwrap();
    // [1 2 3; 4 5 6] [7 8; 9 10; 11 12] = [58 64; 139 154]
    assert_eq!(g.value(c).data(), &[58., 64., 139., 154.]);
}

#[test]
fn sum_loss_gives_ones() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::from_fn(&[2, 3], |i| i as f32));
    let l = g.sum(x);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(x).unwrap(), Tensor::ones(&[2, 3]));
}

#[test]
fn stop_gradient_freezes_factor() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::new(&[3], vec![1.0, -2.0, 3.0]).unwrap());
    let frozen = g.stop_gradient(x);
    assert_eq!(g.value(frozen), g.value(x));
    let p = g.mul(frozen, x).unwrap();
    let l = g.sum(p);
    let grads = g.backward(l).unwrap();
    // d/dx [sg(x) * x] = x, not 2x
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, -2.0, 3.0]);
    assert!(!grads.is_reached(frozen));
}

#[test]
fn loss_through_stop_gradient_only_is_exact_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::new(&[2], vec![0.3, 0.7]).unwrap());
    let frozen = g.stop_gradient(x);
    let sq = g.square(frozen);
    let l = g.sum(sq);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get_or_zeros(x).data(), &[0.0, 0.0]);
}

#[test]
fn gradients_accumulate_over_shared_uses() {
    let x0 = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
    // k = 3 uses of x, compared with the single-use graph 3 * x
    let mut g = Graph::<f64>::new();
    let x = g.param(x0.clone());
    let sq = g.square(x);
    let a = g.add(sq, x).unwrap();
    let b = g.add(a, x).unwrap();
    let c = g.add(b, x).unwrap();
    let l = g.sum(c);
    let multi = g.backward(l).unwrap().get(x).unwrap();

    let mut h = Graph::<f64>::new();
    let y = h.param(x0);
    let sq = h.square(y);
    let three = h.scale(y, 3.0);
    let s = h.add(sq, three).unwrap();
    let l = h.sum(s);
    let single = h.backward(l).unwrap().get(y).unwrap();
    assert!(multi.max_abs_diff(&single) < 1e-12);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::zeros(&[2]));
    assert!(matches!(g.backward(x), Err(AdError::NonScalarLoss(_))));
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 2]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    let msg = g.add(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::from_fn(&[4, 8], |_| rng.sample::<f32, _>(StandardNormal)));
        let w = g.param(Tensor::from_fn(&[8, 8], |_| rng.sample::<f32, _>(StandardNormal)));
        let h = g.matmul(x, w).unwrap();
        let h = g.gelu(h);
        let h = g.layer_norm(h, 1, 1e-5).unwrap();
        let l = g.mean(h);
        let sq = g.square(l);
        let grads = g.backward(sq).unwrap();
        (grads.get(x).unwrap(), grads.get(w).unwrap())
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    assert_eq!(a1.data(), a2.data());
    assert_eq!(b1.data(), b2.data());
}
