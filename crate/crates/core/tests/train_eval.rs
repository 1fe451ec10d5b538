mod common;

use common::{naive_sp_rmse, random_samples, rng, tiny_samples, tiny_world, uniform, BoxBlur};
use gridcast::experiment::{evaluate, lookup, registry, Regime, RunOptions, Scale};
use gridcast::metrics::{
    masked_rmse, sp_rmse, variance, variance_diagnostic, NearestFill, Persistence, SpRmseOptions,
};
use gridcast::models::{Model, ModelConfig};
use gridcast::params::{Init, ParamStore};
use gridcast::report::{EvalReport, REPORT_FILE};
use gridcast::train::{fit, train, Optimizer, OptimizerKind, Sample, TrainConfig};
use gridcast::{Error, Tape, Tensor};
use proptest::prelude::*;

fn small_config(c: usize, j: usize) -> ModelConfig {
    let mut cfg = ModelConfig::convlstm_interp((4, 4), c);
    cfg.j = j;
    cfg.channels = vec![8];
    cfg
}

fn quick(steps: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.01,
        batch_size: 4,
        steps,
        l2_beta: 0.0,
        dropout: 0.0,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn model(config: ModelConfig) -> Model<f32> {
    Model::new(config, &mut Init::seeded(9)).unwrap()
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = tiny_world(1);
    let samples = tiny_samples(&data, 3, 1, 8);
    for optimizer in [OptimizerKind::Sgd, OptimizerKind::default()] {
        let mut m = model(small_config(data.channels(), 3));
        let before = m.params.tensors().to_vec();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            init_output_bias: false,
            dropout: 0.5,
            optimizer,
            ..quick(5)
        };
        let curve = train(&mut m, &samples, &cfg).unwrap();
        assert_eq!(curve.loss.len(), 5);
        assert_eq!(m.params.tensors(), before.as_slice());
    }
}

#[test]
fn same_seed_gives_identical_runs() {
    let data = tiny_world(1);
    let samples = tiny_samples(&data, 3, 1, 8);
    let cfg = TrainConfig { dropout: 0.3, ..quick(6) };
    let run = || {
        let mut m = model(small_config(data.channels(), 3));
        let curve = train(&mut m, &samples, &cfg).unwrap();
        (curve, m.params.tensors().to_vec())
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    let mut m = model(small_config(data.channels(), 3));
    let other = train(&mut m, &samples, &TrainConfig { seed: 6, ..cfg }).unwrap();
    assert_ne!(a.loss, other.loss);
}

#[test]
fn loss_curve_csv_has_step_loss_header() {
    let data = tiny_world(1);
    let samples = tiny_samples(&data, 3, 1, 4);
    let mut m = model(small_config(data.channels(), 3));
    let curve = train(&mut m, &samples, &quick(3)).unwrap();
    let csv = curve.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,loss"));
    assert_eq!(lines.count(), 3);
}

#[test]
fn zero_gradient_steps_leave_parameters_unchanged() {
    let mut store = ParamStore::<f32>::new();
    let mut r = rng(3);
    store.add("w", uniform(&mut r, &[3, 4], -1.0, 1.0).cast(), true);
    store.add("b", uniform(&mut r, &[4], -1.0, 1.0).cast(), false);
    let zeros: Vec<Tensor<f32>> = store.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
    for kind in [OptimizerKind::Sgd, OptimizerKind::default()] {
        let mut p = store.clone();
        let mut opt = Optimizer::new(kind, 0.1, &p);
        for _ in 0..3 {
            opt.step(&mut p, &zeros);
        }
        assert_eq!(p.tensors(), store.tensors(), "{kind:?}");
    }
}

#[test]
fn l2_term_is_zero_at_zero_weights() {
    let m = Model::<f32>::new(small_config(19, 3), &mut Init::Zeros).unwrap();
    let mut tape = Tape::new();
    let bound = m.params.bind(&mut tape);
    let l2 = m.params.l2_penalty(&mut tape, &bound).unwrap().unwrap();
    assert_eq!(tape.value(l2).item().unwrap(), 0.0);
}

#[test]
fn objective_is_data_loss_plus_l2() {
    let data = tiny_world(1);
    let samples = tiny_samples(&data, 3, 1, 4);
    let fresh = model(small_config(data.channels(), 3));
    let plain = TrainConfig { init_output_bias: false, ..quick(1) };
    let mut m = fresh.clone();
    let curve = train(&mut m, &samples, &plain).unwrap();
    assert_eq!(curve.loss[0], curve.data_loss[0]);

    let beta = 0.01;
    let sum_sq: f64 = fresh
        .params
        .ids()
        .filter(|&id| fresh.params.decays(id))
        .flat_map(|id| fresh.params.get(id).data().to_vec())
        .map(|v| (v as f64) * (v as f64))
        .sum();
    let mut m = fresh.clone();
    let with = train(&mut m, &samples, &TrainConfig { l2_beta: beta, ..plain }).unwrap();
    assert!(sum_sq > 0.0);
    assert_eq!(with.data_loss[0], curve.data_loss[0]);
    let l2 = with.loss[0] - with.data_loss[0];
    assert!((l2 - beta * sum_sq).abs() <= 1e-9 * beta * sum_sq, "{l2} vs {}", beta * sum_sq);
}

#[test]
fn non_finite_input_aborts_with_location() {
    let data = tiny_world(1);
    let mut samples = tiny_samples(&data, 3, 1, 4);
    samples[2].inputs[1].set(&[0, 1, 1], f32::NAN);
    let mut m = model(small_config(data.channels(), 3));
    let cfg = TrainConfig { batch_size: 4, ..quick(3) };
    match train(&mut m, &samples, &cfg) {
        Err(Error::NonFinite(msg)) => {
            assert!(msg.contains("step 0"), "{msg}");
            assert!(msg.contains("input frame 1 of window 2"), "{msg}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn diverging_weights_abort_naming_a_parameter() {
    let data = tiny_world(1);
    let samples = tiny_samples(&data, 3, 1, 4);
    let mut m = model(small_config(data.channels(), 3));
    let id = m.params.ids().next().unwrap();
    m.params.get_mut(id).data_mut()[0] = f32::INFINITY;
    match train(&mut m, &samples, &quick(2)) {
        Err(Error::NonFinite(msg)) => {
            assert!(msg.contains("step 0"), "{msg}");
            assert!(msg.contains('`'), "{msg}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn dal_needs_pretraining_before_fine_tuning() {
    let data = tiny_world(1);
    let samples = tiny_samples(&data, 3, 1, 4);
    let mut cfg = ModelConfig::dal((4, 4), data.channels(), 1);
    cfg.j = 3;
    cfg.hidden = 8;
    cfg.pretrain_epochs = 1;
    let mut m = model(cfg);
    assert!(matches!(train(&mut m, &samples, &quick(1)), Err(Error::State(_))));
    let curve = fit(&mut m, &samples, &quick(2)).unwrap();
    assert!(m.pretrained);
    assert_eq!(curve.loss.len(), 2);
}

fn t(shape: &[usize], v: Vec<f32>) -> Tensor<f32> {
    Tensor::new(shape.to_vec(), v).unwrap()
}

#[test]
fn masked_rmse_hand_values_and_scale() {
    let z = t(&[1, 2, 2], vec![0.0; 4]);
    let p = t(&[1, 2, 2], vec![3.0, 4.0, 100.0, -7.0]);
    let mask = t(&[1, 2, 2], vec![1.0, 1.0, 0.0, 0.0]);
    assert!((masked_rmse(&p, &z, &mask, 1.0).unwrap() - 3.535_533_905_932_737_5).abs() < 1e-12);
    assert!((masked_rmse(&p, &z, &mask, 10.0).unwrap() - 35.355_339_059_327_375).abs() < 1e-9);
    assert!(matches!(masked_rmse(&p, &z, &z, 1.0), Err(Error::Contract(_))));
    assert!(matches!(
        masked_rmse(&p, &t(&[1, 1, 4], vec![0.0; 4]), &mask, 1.0),
        Err(Error::Dimension { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn masked_rmse_is_symmetric_and_permutation_invariant(
        seed in 0u64..10_000,
        k in 1usize..4,
        m in 1usize..6,
        n in 1usize..6,
        perm_seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let mut r = rng(seed);
        let len = k * m * n;
        let a: Tensor<f32> = uniform(&mut r, &[k, m, n], -2.0, 2.0).cast();
        let b: Tensor<f32> = uniform(&mut r, &[k, m, n], -2.0, 2.0).cast();
        let mut mask: Tensor<f32> = uniform(&mut r, &[k, m, n], 0.0, 1.0).cast().map(|v| if v < 0.5 { 1.0 } else { 0.0 });
        mask.data_mut()[0] = 1.0;
        let ab = masked_rmse(&a, &b, &mask, 3.0).unwrap();
        let ba = masked_rmse(&b, &a, &mask, 3.0).unwrap();
        prop_assert_eq!(ab, ba);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng(perm_seed));
        let permute = |x: &Tensor<f32>| t(&[k, m, n], order.iter().map(|&i| x.data()[i]).collect());
        let pab = masked_rmse(&permute(&a), &permute(&b), &permute(&mask), 3.0).unwrap();
        prop_assert!((pab - ab).abs() <= 1e-9 * ab.max(1.0), "{} vs {}", pab, ab);
    }

    #[test]
    fn sp_rmse_equals_naive_station_loop(
        seed in 0u64..10_000,
        m in 1usize..=8,
        n in 1usize..=8,
        windows in 1usize..5,
        last_only in any::<bool>(),
    ) {
        let samples = random_samples(seed, windows, 3, 2, m, n);
        let opts = SpRmseOptions { last_frame_only: last_only, channel: 0 };
        let got = sp_rmse(&BoxBlur, &samples, opts, 7.0).unwrap();
        let want = naive_sp_rmse(&BoxBlur, &samples, 0, last_only, 7.0);
        prop_assert!((got.mean - want).abs() <= 1e-6 * want.abs().max(1.0), "{} vs {}", got.mean, want);
    }
}

#[test]
fn sp_rmse_of_copy_stub_is_station_magnitude() {
    // The copy stub reads back the zeroed pixel, so each station's error is
    // the RMS of its own target values.
    let samples = random_samples(4, 6, 2, 2, 5, 5);
    let got = sp_rmse(&Persistence { k: 1 }, &samples, SpRmseOptions::default(), 2.0).unwrap();
    let mut per = Vec::new();
    for c in 0..25 {
        let vals: Vec<f64> = samples
            .iter()
            .filter(|s| s.mask.data()[c] > 0.5)
            .map(|s| s.target.data()[c] as f64)
            .collect();
        if !vals.is_empty() {
            per.push(2.0 * (vals.iter().map(|v| v * v).sum::<f64>() / vals.len() as f64).sqrt());
        }
    }
    let want = per.iter().sum::<f64>() / per.len() as f64;
    assert_eq!(got.stations.len(), per.len());
    assert!((got.mean - want).abs() < 1e-6, "{} vs {want}", got.mean);
}

#[test]
fn sp_rmse_of_nearest_fill_on_flat_field_is_zero() {
    let (m, n) = (4, 5);
    let plane = |v: f32| t(&[2, m, n], (0..2 * m * n).map(|i| if i < m * n { v } else { 0.3 }).collect());
    let mut mask = vec![0.0; m * n];
    for c in [0, 7, 13, 19] {
        mask[c] = 1.0;
    }
    let samples: Vec<Sample> = [0.4f32, 0.7]
        .iter()
        .map(|&v| Sample {
            inputs: vec![plane(v), plane(v)],
            target: t(&[1, m, n], vec![v; m * n]),
            mask: t(&[1, m, n], mask.clone()),
        })
        .collect();
    let got = sp_rmse(&NearestFill, &samples, SpRmseOptions::default(), 50.0).unwrap();
    assert_eq!(got.stations.len(), 4);
    assert!(got.mean.abs() < 1e-9, "{}", got.mean);
}

#[test]
fn sp_rmse_zeroes_only_the_pollutant_channel() {
    let samples = random_samples(8, 3, 2, 2, 3, 3);
    let opts = SpRmseOptions::default();
    let cell = (0..9).find(|&c| samples.iter().any(|s| s.mask.data()[c] > 0.5)).unwrap();
    let blanked = gridcast::metrics::blank_station(&samples[0].inputs, cell / 3, cell % 3, opts);
    for (x, y) in samples[0].inputs.iter().zip(&blanked) {
        assert_eq!(y.get(&[0, cell / 3, cell % 3]), 0.0);
        assert_eq!(y.get(&[1, cell / 3, cell % 3]), x.get(&[1, cell / 3, cell % 3]));
    }
    let last = gridcast::metrics::blank_station(
        &samples[0].inputs,
        cell / 3,
        cell % 3,
        SpRmseOptions { last_frame_only: true, ..opts },
    );
    assert_eq!(last[0], samples[0].inputs[0]);
    assert_eq!(last[1].get(&[0, cell / 3, cell % 3]), 0.0);
}

#[test]
fn variance_examples() {
    assert_eq!(variance(&[5.0; 7]), 0.0);
    assert_eq!(variance(&[0.0, 2.0]), 1.0);
    assert!((variance(&[1.0, 2.0, 3.0]) - 2.0 / 3.0).abs() < 1e-15);
    let f = |v: Vec<f64>| Tensor::new(vec![1, v.len()], v).unwrap();
    let pred = vec![f(vec![4.0, 4.0, 4.0]); 3];
    let actual = vec![f(vec![1.0, 2.0, 3.0]); 3];
    let mask = vec![f(vec![1.0, 1.0, 1.0]); 3];
    let series = variance_diagnostic(&pred, &actual, &mask, 10).unwrap();
    assert!(series.truncated);
    assert_eq!(series.points.len(), 3);
    assert!(series.points.iter().all(|p| p.var_pred == 0.0));
    assert!((series.points[0].var_actual - 2.0 / 3.0).abs() < 1e-15);
    assert!(!variance_diagnostic(&pred, &actual, &mask, 2).unwrap().truncated);
}

#[test]
fn registry_regimes_and_unknown_names() {
    let names: Vec<String> = registry().into_iter().map(|s| s.name).collect();
    assert_eq!(names.len(), 16);
    let base = lookup("interp_base").unwrap();
    assert_eq!(base.regime, Regime::Interpolation);
    assert_eq!(base.model_config((16, 16), 19, Scale::Paper).k, 1);
    assert_eq!(lookup("forecast_base").unwrap().model_config((16, 16), 19, Scale::Paper).k, 12);
    match lookup("interp_everything") {
        Err(Error::UnknownExperiment { available, .. }) => assert_eq!(available, names),
        other => panic!("{other:?}"),
    }
}

#[test]
fn eval_report_round_trips_through_json() {
    let data = tiny_world(2);
    let mut config = ModelConfig::convlstm_interp((4, 4), data.channels());
    config.channels = vec![8];
    let m = model(config);
    let report = evaluate(&m, &data, &RunOptions::default()).unwrap();
    assert!(report.sp_rmse.is_some());
    assert!(!report.variance_series.is_empty());
    report.validate().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(REPORT_FILE);
    report.save(&path).unwrap();
    assert_eq!(EvalReport::load(&path).unwrap(), report);

    let mut value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    value["version"] = 99.into();
    std::fs::write(&path, value.to_string()).unwrap();
    assert!(matches!(EvalReport::load(&path), Err(Error::Integrity(_))));
    value["version"] = 1.into();
    value["surprise"] = true.into();
    std::fs::write(&path, value.to_string()).unwrap();
    assert!(EvalReport::load(&path).is_err());
}
