use super::*;
use approx::assert_relative_eq;

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        n_train: 400,
        n_test: 100,
        dim: 8,
        classes: 10,
        separation: 1.5,
    }
}

fn config(q: Precision, n: usize, rounds: usize) -> SimConfig<f64> {
    SimConfig {
        n_devices: n,
        h_steps: 2,
        rounds,
        batch: 16,
        lr: 0.05,
        l2: 0.0,
        q_per_device: vec![q; n],
        seed: 11,
        data: DataSpec::Synthetic(small_spec()),
        label_skew: 4,
        model: ModelKind::Logistic,
        energy: None,
    }
}

#[test]
fn aggregate_examples() {
    let w = aggregate(&[vec![1.0], vec![3.0]], &[0.5, 0.5]).unwrap();
    assert_eq!(w, vec![2.0]);
    let w = aggregate(&[vec![0.0], vec![10.0]], &[0.9, 0.1]).unwrap();
    assert_relative_eq!(w[0], 1.0, max_relative = 1e-15);
    assert_eq!(aggregate(&[vec![4.0, -1.0]], &[1.0]).unwrap(), vec![4.0, -1.0]);
    assert!(matches!(
        aggregate(&[vec![1.0], vec![1.0, 2.0]], &[0.5, 0.5]),
        Err(FwqError::DimensionMismatch { .. })
    ));
}

#[test]
fn partition_four_of_ten() {
    let (train, _) = synthetic_dataset::<f64>(&SyntheticSpec::default(), 3);
    let (shards, pis) = partition_data(&train, 5, 4, 3).unwrap();
    let len = shards[0].len();
    for (i, s) in shards.iter().enumerate() {
        assert_eq!(s.len(), len);
        let mut cls: Vec<usize> = s.labels.clone();
        cls.sort_unstable();
        cls.dedup();
        let want: Vec<usize> = {
            let mut v: Vec<usize> = (0..4).map(|j| (i * 4 + j) % 10).collect();
            v.sort_unstable();
            v
        };
        assert_eq!(cls, want);
    }
    for p in pis {
        assert_relative_eq!(p, 0.2, max_relative = 1e-15);
    }
}

#[test]
fn partition_rejects_tiny_data() {
    let (train, _) = synthetic_dataset::<f64>(&small_spec(), 3);
    assert!(matches!(partition_data(&train, 500, 4, 0), Err(FwqError::Partition(_))));
    assert!(matches!(partition_data(&train, 2, 11, 0), Err(FwqError::Partition(_))));
}

#[test]
fn gradient_matches_finite_differences() {
    let (train, _) = synthetic_dataset::<f64>(&small_spec(), 5);
    for kind in [ModelKind::Logistic, ModelKind::Mlp { hidden: 6 }] {
        let model = TinyModel::<f64>::new(kind, train.dim, train.classes, &mut seeded(1));
        let idx: Vec<usize> = (0..40).collect();
        let mut g = vec![0.0; model.weights.len()];
        model.loss_grad(&model.weights, &train, &idx, 0.01, Some(&mut g));
        let h = 1e-6;
        for k in (0..model.weights.len()).step_by(7) {
            let mut wp = model.weights.clone();
            let mut wm = model.weights.clone();
            wp[k] += h;
            wm[k] -= h;
            let fd = (model.loss_grad(&wp, &train, &idx, 0.01, None) - model.loss_grad(&wm, &train, &idx, 0.01, None))
                / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6, "{kind:?} coord {k}: fd {fd} vs {}", g[k]);
        }
    }
}

#[test]
fn q32_step_stays_within_grid_of_bypass() {
    let (train, _) = synthetic_dataset::<f64>(&small_spec(), 2);
    let model = TinyModel::<f64>::new(ModelKind::Logistic, train.dim, train.classes, &mut seeded(2));
    let run = |p| {
        local_round(&model, &model.weights, &train, 1, 16, 0.1, 0.0, p, &mut seeded(9), &mut seeded(10)).unwrap()
    };
    let plain = run(Precision::Full);
    let quant = run(Precision::Bits(32));
    for r in model.tensor_ranges() {
        let s = plain[r.clone()].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let bound = s / (2f64.powi(31) - 1.0);
        for i in r {
            assert!((plain[i] - quant[i]).abs() <= bound * (1.0 + 1e-9));
        }
    }
}

#[test]
fn coarse_bits_keep_weights_on_grid() {
    let (train, _) = synthetic_dataset::<f64>(&small_spec(), 2);
    let model = TinyModel::<f64>::new(ModelKind::Logistic, train.dim, train.classes, &mut seeded(2));
    let w = local_round(&model, &model.weights, &train, 3, 16, 0.5, 0.0, Precision::Bits(2), &mut seeded(1), &mut seeded(2))
        .unwrap();
    for r in model.tensor_ranges() {
        let s = w[r.clone()].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for &v in &w[r] {
            // with one positive level every entry is 0 or +-s
            assert!(v == 0.0 || (v.abs() - s).abs() <= 1e-15 * s, "{v} off grid {s}");
        }
    }
}

#[test]
fn bypass_single_device_is_plain_sgd() {
    let mut cfg = config(Precision::Full, 1, 3);
    cfg.h_steps = 1;
    cfg.label_skew = 10;
    let trace = run_fwq_fl(&cfg).unwrap();

    let (train, _) = synthetic_dataset::<f64>(&small_spec(), cfg.seed);
    let (shards, _) = partition_data(&train, 1, 10, cfg.seed).unwrap();
    let mut init = substream(cfg.seed, "init", 0);
    let model = TinyModel::<f64>::new(cfg.model, train.dim, train.classes, &mut init);
    let mut w = model.weights.clone();
    let mut g = vec![0.0; w.len()];
    for round in 0..3 {
        let (mut brng, _) = device_streams(cfg.seed, round, 0);
        let idx = sample(&mut brng, shards[0].len(), cfg.batch).into_vec();
        model.loss_grad(&w, &shards[0], &idx, 0.0, Some(&mut g));
        w.iter_mut().zip(&g).for_each(|(w, g)| *w -= cfg.lr * g);
    }
    assert_eq!(trace.final_weights, w);
}

#[test]
fn zero_rounds_give_empty_trace() {
    let trace = run_fwq_fl(&config(Precision::Bits(8), 2, 0)).unwrap();
    assert!(trace.records.is_empty());
    assert_eq!(trace.to_csv(), "round,loss,grad_norm_sq,accuracy,energy_j\n");
    let (train, _) = synthetic_dataset::<f64>(&small_spec(), 11);
    let model = TinyModel::<f64>::new(ModelKind::Logistic, train.dim, train.classes, &mut substream(11, "init", 0));
    assert_eq!(trace.final_weights, model.weights);
}

#[test]
fn runs_are_deterministic() {
    let cfg = config(Precision::Bits(6), 3, 4);
    assert_eq!(run_fwq_fl(&cfg).unwrap(), run_fwq_fl(&cfg).unwrap());
}

#[test]
fn learning_happens() {
    let trace = run_fwq_fl(&config(Precision::Bits(16), 2, 30)).unwrap();
    let last = trace.records.last().unwrap();
    assert!(last.loss < trace.initial_loss);
    assert!(last.accuracy > 0.3);
}

#[test]
fn divergence_reports_round() {
    let mut cfg = config(Precision::Full, 2, 5);
    cfg.lr = 1e6;
    cfg.model = ModelKind::Mlp { hidden: 4 };
    match run_fwq_fl(&cfg) {
        Err(FwqError::Divergence { round, .. }) => assert!(round < 5),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn precision_serde() {
    let v: Vec<Precision> = serde_json::from_str(r#"[8, "full", 32]"#).unwrap();
    assert_eq!(v, vec![Precision::Bits(8), Precision::Full, Precision::Bits(32)]);
    assert!(serde_json::from_str::<Precision>("1").is_err());
    assert!(serde_json::from_str::<Precision>(r#""half""#).is_err());
    assert_eq!(serde_json::to_string(&Precision::Full).unwrap(), r#""full""#);
}

#[test]
fn idx_round_trip() {
    let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 2];
    img.extend_from_slice(&[0, 255, 51, 102]);
    let lab = vec![0, 0, 8, 1, 0, 0, 0, 2, 3, 7];
    let (n, dim, px) = parse_idx_images(&img).unwrap();
    assert_eq!((n, dim, px), (2, 2, vec![0, 255, 51, 102]));
    assert_eq!(parse_idx_labels(&lab).unwrap(), vec![3, 7]);
    assert!(parse_idx_images(&lab).is_err());
    assert!(parse_idx_images(&img[..18]).is_err());
}
