use latpfn::container::{batches_to_container, container_to_batches, Container};
use latpfn::data::{normalize_time_axis, znorm_2std, BinSpec};
use latpfn::eval::{ablate_context_size, crrmse, mse, naive_baselines, patch_boundaries};
use latpfn::model::{Model, ModelConfig};
use latpfn::prior::{generate_context_batch, map_log_uniform, unmap_log_uniform, BatchShape, HyperPrior};
use latpfn::rng::stream_rng;
use proptest::prelude::*;

fn tiny_model() -> Model {
    let cfg = ModelConfig {
        width: 8,
        embed_layers: 3,
        predictor_layers: 1,
        decoder_layers: 2,
        heads: 2,
        ..ModelConfig::default()
    };
    Model::new(cfg, 4).unwrap()
}

proptest! {
    #[test]
    fn axis_endpoints_are_exact(h in 1usize..80, hist in 2usize..300) {
        let a = normalize_time_axis(hist + h, h).unwrap();
        prop_assert_eq!(a.tau[0], -3.0);
        prop_assert_eq!(a.tau[hist - 1], 0.0);
        prop_assert_eq!(*a.tau.last().unwrap(), 1.0);
        prop_assert!(a.tau.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn bin_centres_round_trip(v in -3.5f64..3.5) {
        let b = BinSpec::default();
        let i = b.index(v).unwrap();
        prop_assert!((b.center(i) - v).abs() <= b.width() / 2.0 + 1e-12);
        prop_assert_eq!(b.index(b.center(i)).unwrap(), i);
    }

    #[test]
    fn out_of_range_values_clamp(v in 3.5f64..1e6) {
        let b = BinSpec::default();
        prop_assert_eq!(b.index(v).unwrap(), b.count - 1);
        prop_assert_eq!(b.index(-v).unwrap(), 0);
    }

    #[test]
    fn log_map_round_trips(x in 0.0f64..10.0, kappa in 0.1f64..100.0) {
        let y = map_log_uniform(x, kappa).unwrap();
        prop_assert!((unmap_log_uniform(y, kappa).unwrap() - x).abs() <= 1e-9 * (1.0 + x));
    }

    #[test]
    fn metrics_are_symmetric_and_zero_on_identity(
        pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..40)
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        prop_assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
        prop_assert_eq!(mse(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(crrmse(&a, &a).unwrap(), 0.0);
        prop_assert!(crrmse(&a, &b).unwrap() >= 0.0);
    }

    #[test]
    fn znorm_history_is_standardized(values in prop::collection::vec(-100.0f64..100.0, 12..60)) {
        let hl = values.len() - 4;
        let (z, stats) = znorm_2std(&values, hl).unwrap();
        for (v, x) in values.iter().zip(&z) {
            prop_assert!((stats.invert(*x) - v).abs() <= 1e-9 * (1.0 + v.abs()));
        }
    }

    #[test]
    fn patches_partition_the_window(
        steps in prop::collection::vec(prop::collection::vec(-2.0f32..2.0, 3), 2..50),
        c in 0.0f64..5.0,
    ) {
        let starts = patch_boundaries(&steps, c).unwrap();
        prop_assert_eq!(starts[0], 0);
        prop_assert!(starts.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(*starts.last().unwrap() < steps.len());
    }

    #[test]
    fn baselines_have_the_horizon_length(history in prop::collection::vec(-3.0f64..3.0, 8..60), h in 1usize..20) {
        let f = naive_baselines(&history, h, None).unwrap();
        prop_assert_eq!(f.last_value.len(), h);
        prop_assert_eq!(f.climatology.len(), h);
        prop_assert_eq!(f.seasonal.len(), h);
        prop_assert!(f.last_value.iter().all(|&v| v == *history.last().unwrap()));
    }
}

#[test]
fn constant_embeddings_form_one_patch() {
    let e = vec![vec![0.5f32, -1.0]; 20];
    assert_eq!(patch_boundaries(&e, 2.0).unwrap(), vec![0]);
}

#[test]
fn synthetic_batches_survive_the_container() {
    let hp = HyperPrior::default();
    let shape = BatchShape {
        n: 3,
        n_h: 2,
        s: 40,
        h: 10,
    };
    let mut rng = stream_rng(3, 0);
    let batches: Vec<_> = (0..4)
        .map(|_| generate_context_batch(&hp, shape, 9, &mut rng).unwrap().batch)
        .collect();
    let bytes = batches_to_container(&batches, serde_json::json!({}))
        .unwrap()
        .to_bytes()
        .unwrap();
    let back = container_to_batches(&Container::from_bytes(&bytes, "mem").unwrap()).unwrap();
    assert_eq!(back, batches);
}

#[test]
fn ablation_is_deterministic_and_full_size_matches_plain_evaluation() {
    let model = tiny_model();
    let hp = HyperPrior::default();
    let shape = BatchShape {
        n: 6,
        n_h: 2,
        s: 40,
        h: 10,
    };
    let mut rng = stream_rng(8, 0);
    let batches: Vec<_> = (0..3)
        .map(|_| generate_context_batch(&hp, shape, 9, &mut rng).unwrap().batch)
        .collect();
    let a = ablate_context_size(&model, &batches, &[1, 3, 6], 2, 5, 2).unwrap();
    let b = ablate_context_size(&model, &batches, &[1, 3, 6], 2, 5, 2).unwrap();
    assert_eq!(a, b);
    let full = ablate_context_size(&model, &batches, &[6], 1, 5, 2).unwrap();
    let plain = latpfn::eval::evaluate(&model, &batches, 2).unwrap();
    assert_eq!(full[0].mean, plain.mse.mean);
    assert!(ablate_context_size(&model, &batches, &[7], 1, 5, 2).is_err());
}
