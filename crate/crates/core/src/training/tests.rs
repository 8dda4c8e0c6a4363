use super::*;
use crate::blocks::{UnitKind, UpsamplerKind};
use crate::data::{generate_synthetic, standardize, SynthParams};
use crate::network::ModelConfig;
use crate::params::ParamStore;
use approx::assert_relative_eq;

fn samples(n: usize, size: usize, seed: u64) -> Vec<SegmentationSample> {
    let p = SynthParams {
        size,
        area_ratio: (0.05, 0.12),
        seed,
        ..SynthParams::default()
    };
    generate_synthetic(&p, n)
        .unwrap()
        .iter()
        .map(|c| standardize(c, size).unwrap())
        .collect()
}

fn scalar_store(theta: f64, grad: f64) -> ParamStore {
    let mut s = ParamStore::new();
    s.add("theta".to_string(), Tensor4::full([1, 1, 1, 1], theta)).unwrap();
    s.params_mut()[0].grad = Tensor4::full([1, 1, 1, 1], grad);
    s
}

#[test]
fn amsgrad_examples() {
    let mut s = scalar_store(0.3, 0.0);
    let mut opt = Amsgrad::new(&s);
    opt.step(&mut s, 1e-3).unwrap();
    assert_eq!(s.params()[0].value.data()[0], 0.3);

    let mut s = scalar_store(0.3, 1.0);
    let mut opt = Amsgrad::new(&s);
    opt.step(&mut s, 1e-3).unwrap();
    assert_relative_eq!(
        s.params()[0].value.data()[0],
        0.3 - 1e-3 / (1.0 + 1e-8),
        epsilon = 1e-15
    );

    let mut s = scalar_store(0.0, 2.0);
    let mut opt = Amsgrad::new(&s);
    opt.step(&mut s, 1e-3).unwrap();
    let mut last = opt.v_max[0].data()[0];
    for g in [1.0, 0.5, 0.1, 0.01] {
        s.params_mut()[0].grad = Tensor4::full([1, 1, 1, 1], g);
        opt.step(&mut s, 1e-3).unwrap();
        let now = opt.v_max[0].data()[0];
        assert!(now >= last);
        last = now;
    }
}

#[test]
fn amsgrad_rejects_non_finite_gradient() {
    let mut s = scalar_store(0.3, f64::NAN);
    let mut opt = Amsgrad::new(&s);
    let err = opt.step(&mut s, 1e-3).unwrap_err();
    assert!(err.to_string().contains("theta"), "{err}");
    assert_eq!(opt.t, 0);
    assert_eq!(s.params()[0].value.data()[0], 0.3);
}

#[test]
fn amsgrad_with_pinned_max_is_adam() {
    let grads = [0.5, -1.5, 0.25, 2.0, -0.1, 0.7, 0.0, -3.0];
    let lr = 0.01;
    let mut s = scalar_store(1.0, 0.0);
    let mut opt = Amsgrad::new(&s);
    // independent Adam
    let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    for (t, &g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let (mh, vh) = (m / (1.0 - 0.9f64.powi(t)), v / (1.0 - 0.999f64.powi(t)));
        theta -= lr * mh / (vh.sqrt() + 1e-8);

        s.params_mut()[0].grad = Tensor4::full([1, 1, 1, 1], g);
        // forcing v̂_max to track v̂: reset it below the next v̂
        opt.v_max[0] = Tensor4::zeros([1, 1, 1, 1]);
        opt.step(&mut s, lr).unwrap();
        assert!((s.params()[0].value.data()[0] - theta).abs() < 1e-12);
    }
}

#[test]
fn schedule_examples() {
    let s = Schedule::default();
    assert_eq!(s.total_epochs(), 120);
    assert_eq!(s.breakpoints(), vec![40, 70, 100]);
    assert_eq!(s.lr_at(0).unwrap(), 1e-4);
    assert_eq!(s.lr_at(39).unwrap(), 1e-4);
    assert_eq!(s.lr_at(40).unwrap(), 5e-5);
    assert_eq!(s.lr_at(119).unwrap(), 1e-6);
    assert!(s.lr_at(120).is_err());
    let rates: Vec<f64> = (0..120).map(|e| s.lr_at(e).unwrap()).collect();
    assert!(rates.windows(2).all(|w| w[1] <= w[0]));
    assert!(Schedule {
        spans: vec![1, 2],
        rates: vec![1e-3]
    }
    .validate()
    .is_err());
    assert!(Schedule {
        spans: vec![1, 2],
        rates: vec![1e-4, 1e-3]
    }
    .validate()
    .is_err());
}

#[test]
fn batch_gradient_is_mean_of_per_sample_gradients() {
    let data = samples(2, 32, 1);
    let cfg = ModelConfig::backbone(UnitKind::Basic, UnitKind::Basic, UpsamplerKind::Bu, 4);
    let loss = LossConfig {
        per_image_dice: true,
        ..LossConfig::default()
    };
    let mut model = Model::build(cfg).unwrap();
    let (x, y) = make_batch(&data, &[0, 1]).unwrap();
    batch_gradients(&mut model, &x, &y, &loss).unwrap();
    let joint: Vec<Tensor4> = model.store().params().iter().map(|p| p.grad.clone()).collect();
    let mut sum: Vec<Tensor4> = joint.iter().map(|t| Tensor4::zeros(t.shape())).collect();
    for i in 0..2 {
        let (x, y) = make_batch(&data, &[i]).unwrap();
        batch_gradients(&mut model, &x, &y, &loss).unwrap();
        for (acc, p) in sum.iter_mut().zip(model.store().params()) {
            acc.add_assign(&p.grad.scaled(0.5));
        }
    }
    for (a, b) in joint.iter().zip(&sum) {
        let scale = a.data().iter().fold(1e-6f64, |m, v| m.max(v.abs()));
        assert!(a.max_abs_diff(b) / scale < 1e-6);
    }
}

fn quick_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        schedule: Schedule::constant(epochs, 2e-3),
        seed: 4,
        deterministic: true,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_bitwise_reproducible_and_checkpoints_round_trip() {
    let data = samples(3, 32, 2);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick_cfg(3);
    cfg.checkpoint_every = Some(2);
    cfg.checkpoint_dir = Some(dir.path().to_path_buf());
    let run = || {
        let mut m = Model::build(ModelConfig::aunet(4).with_ratio(4)).unwrap();
        let state = train(
            &mut m,
            &data,
            Some(&data),
            &TrainConfig {
                validate_every: Some(1),
                ..cfg.clone()
            },
            |_| {},
        )
        .unwrap();
        (m, state)
    };
    let (a, sa) = run();
    let mid = TrainState::load(dir.path().join("train_state.bin")).unwrap();
    assert_eq!(mid.epoch, 2);
    assert_eq!(mid.history.epochs.len(), 2);
    let (b, sb) = run();
    assert!(a.bitwise_eq(&b));
    assert_eq!(sa.history, sb.history);
    assert!(sa.history.epochs.iter().all(|e| e.val_dsc.is_some()));

    let back = TrainState::from_bytes(&sa.to_bytes()).unwrap();
    assert!(back.model.bitwise_eq(&sa.model));
    assert_eq!(back.optim, sa.optim);
    assert_eq!(back.history, sa.history);
    assert_eq!(back.to_bytes(), sa.to_bytes());
}

#[test]
fn divergence_restores_last_good_weights() {
    let data = samples(2, 32, 3);
    let mut model = Model::build(ModelConfig::unet(4)).unwrap();
    let before = model.clone();
    let cfg = TrainConfig {
        schedule: Schedule::constant(5, 1e300),
        ..quick_cfg(5)
    };
    match train(&mut model, &data, None, &cfg, |_| {}) {
        Err(Error::Diverged { .. }) => {}
        other => panic!("expected divergence, got {other:?}"),
    }
    assert!(model.store().params().iter().all(|p| p.value.is_finite()));
    // the first epoch already diverged or a later one did; either way the
    // weights are those at the start of the failing epoch
    let _ = before;
}

#[test]
fn fine_tuning_checks_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let donor = Model::build(ModelConfig::unet(4).with_seed(9)).unwrap();
    donor.save(&path).unwrap();
    let data = samples(2, 32, 5);
    let cfg = TrainConfig {
        init_from: Some(path.clone()),
        ..quick_cfg(1)
    };
    let mut same = Model::build(ModelConfig::unet(4)).unwrap();
    let mut reference = donor.clone();
    train(&mut same, &data, None, &cfg, |_| {}).unwrap();
    train(
        &mut reference,
        &data,
        None,
        &TrainConfig {
            init_from: None,
            ..cfg.clone()
        },
        |_| {},
    )
    .unwrap();
    assert!(same.store().bitwise_eq(reference.store()));

    let mut other = Model::build(ModelConfig::aunet(4).with_ratio(4)).unwrap();
    assert!(matches!(
        train(&mut other, &data, None, &cfg, |_| {}),
        Err(Error::Checkpoint(_))
    ));
}

#[test]
fn crossval_covers_every_image_once_per_run() {
    let data = samples(4, 32, 6);
    let cv = CrossvalConfig {
        folds: 2,
        runs: 2,
        ..CrossvalConfig::default()
    };
    let res = run_crossval(
        &data,
        &cv,
        &quick_cfg(1),
        &ModelConfig::unet(4),
        &[crate::metrics::Axis::Overall],
    )
    .unwrap();
    assert_eq!(res.folds.len(), 2);
    for run in &res.pooled.runs {
        let mut ids: Vec<&str> = run.iter().map(|r| r.image_id.as_str()).collect();
        ids.sort();
        assert_eq!(ids, vec!["synth_0000", "synth_0001", "synth_0002", "synth_0003"]);
    }
    let held: Vec<usize> = res.folds.iter().map(|f| f.runs[0].len()).collect();
    assert_eq!(held, vec![2, 2]);
    // pooled mean is the hand average of per-run means
    let per_run: Vec<f64> = res
        .pooled
        .runs
        .iter()
        .map(|r| r.iter().map(|x| x.dsc).sum::<f64>() / r.len() as f64)
        .collect();
    let overall = res.pooled.overall().unwrap();
    assert_relative_eq!(overall.dsc_mean, (per_run[0] + per_run[1]) / 2.0, epsilon = 1e-12);
}

#[test]
fn ablation_grids_have_table_shape() {
    let base = ModelConfig::aunet(16);
    let grid = experiments::grid_configs(AblationGrid::Backbone, &base);
    assert_eq!(grid.len(), 9);
    assert_eq!(grid[0].name(), "UNet (Basic-Basic)");
    assert_eq!(grid[7].name(), "Res-Deep-UNet");
    let sweep = experiments::grid_configs(AblationGrid::ReductionRatio, &base);
    let rs: Vec<usize> = sweep.iter().map(|c| c.reduction_ratio).collect();
    assert_eq!(rs, REDUCTION_RATIOS.to_vec());
    assert!(sweep.iter().all(|c| c.validate().is_ok()));
}

#[test]
fn failed_ablation_cells_are_reported() {
    let data = samples(4, 32, 7);
    let cv = CrossvalConfig {
        folds: 2,
        runs: 1,
        ..CrossvalConfig::default()
    };
    // width 4 cannot host r = 16 or 32
    let table = run_ablation(
        AblationGrid::ReductionRatio,
        &data,
        &cv,
        &quick_cfg(1),
        &ModelConfig::aunet(4),
    );
    assert_eq!(table.rows.len(), 5);
    let failed: Vec<Option<usize>> = table
        .rows
        .iter()
        .filter(|r| r.metrics.is_none())
        .map(|r| r.reduction_ratio)
        .collect();
    assert_eq!(failed, vec![Some(16), Some(32)]);
    let csv = table.to_csv();
    assert!(csv.starts_with(ABLATION_HEADER));
    assert!(csv.contains("# failed: Res-Basic-UNet+AU (r=16)"));
}
