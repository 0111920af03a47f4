use latpfn_autodiff::{Graph, Tensor};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-3.0f64..3.0, n).prop_map(move |d| Tensor::new(&shape, d).unwrap())
}

fn shape3() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..5, 3)
}

proptest! {
    #[test]
    fn softmax_is_shift_invariant(x in shape3().prop_flat_map(tensor), shift in -10.0f64..10.0) {
        let mut g = Graph::new();
        let a = g.constant(x.clone());
        let b = g.add_scalar(a, shift);
        let sa = g.softmax(a, 2).unwrap();
        let sb = g.softmax(b, 2).unwrap();
        prop_assert!(g.value(sa).max_abs_diff(g.value(sb)) < 1e-12);
    }

    #[test]
    fn add_commutes_under_broadcast(
        (x, y) in shape3().prop_flat_map(|s| {
            let last = vec![s[2]];
            (tensor(s), tensor(last))
        })
    ) {
        let mut g = Graph::new();
        let a = g.constant(x);
        let b = g.constant(y);
        let ab = g.add(a, b).unwrap();
        let ba = g.add(b, a).unwrap();
        prop_assert_eq!(g.value(ab), g.value(ba));
    }

    #[test]
    fn permute_round_trips(x in shape3().prop_flat_map(tensor)) {
        let mut g = Graph::new();
        let a = g.constant(x.clone());
        let p = g.permute(a, &[1, 2, 0]).unwrap();
        let back = g.permute(p, &[2, 0, 1]).unwrap();
        prop_assert_eq!(g.value(back), &x);
    }

    #[test]
    fn layer_norm_output_is_standardised(x in prop::collection::vec(-5.0f64..5.0, 8)) {
        let spread = x.iter().cloned().fold(f64::MIN, f64::max) - x.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 0.5);
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(&[1, 8], x).unwrap());
        let y = g.layer_norm(a, 1, 1e-9).unwrap();
        let v = g.value(y).data();
        let mean: f64 = v.iter().sum::<f64>() / 8.0;
        let var: f64 = v.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / 8.0;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn sum_gradient_is_ones(x in shape3().prop_flat_map(tensor)) {
        let mut g = Graph::new();
        let a = g.param(x.clone());
        let l = g.sum(a);
        let grads = g.backward(l).unwrap();
        prop_assert_eq!(grads.get(a).unwrap(), Tensor::ones(x.shape()));
    }
}
