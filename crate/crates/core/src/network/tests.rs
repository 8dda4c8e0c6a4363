use super::*;
use crate::substrate::Shape4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn input(shape: [usize; 4], seed: u64) -> Tensor4 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::uniform(shape, 0.0, 1.0, &mut rng)
}

/// Independent layer inventory: (cin, cout, kernel, has_bn) per conv plus
/// attention FC layers, summed directly.
fn inventory_count(cfg: &ModelConfig) -> usize {
    let mut layers: Vec<(usize, usize, usize, bool)> = Vec::new();
    let w = |l: usize| cfg.base_width * 2usize.pow(l as u32);
    let unit = |layers: &mut Vec<_>, kind: UnitKind, cin, cout| {
        let n = match kind {
            UnitKind::Basic => 2,
            _ => 3,
        };
        for i in 0..n {
            layers.push((if i == 0 { cin } else { cout }, cout, 3, cfg.unit_batch_norm));
        }
    };
    unit(&mut layers, cfg.encoder_unit, 3, w(0));
    for l in 1..5 {
        unit(&mut layers, cfg.encoder_unit, w(l - 1), w(l));
    }
    for l in 0..4 {
        let (n, high) = (w(l), w(l + 1));
        match cfg.upsampler {
            UpsamplerKind::Bu => layers.push((high, n, 3, false)),
            UpsamplerKind::Au => {
                layers.push((high, 4 * n, 3, true));
                layers.push((high, n, 3, true));
                layers.push((n, n, 3, true));
                let hidden = 2 * n / cfg.reduction_ratio;
                layers.push((2 * n, hidden, 1, false));
                layers.push((hidden, 2 * n, 1, false));
            }
        }
        unit(&mut layers, cfg.decoder_unit, 2 * n, n);
    }
    layers.push((w(0), 1, 1, false));
    layers
        .iter()
        .map(|&(cin, cout, k, bn)| cin * cout * k * k + cout + if bn { 2 * cout } else { 0 })
        .sum()
}

#[test]
fn same_seed_builds_identical_parameters() {
    let a = Model::build(ModelConfig::aunet(4).with_seed(3).with_ratio(4)).unwrap();
    let b = Model::build(ModelConfig::aunet(4).with_seed(3).with_ratio(4)).unwrap();
    assert!(a.bitwise_eq(&b));
    let c = Model::build(ModelConfig::aunet(4).with_seed(4).with_ratio(4)).unwrap();
    assert!(!a.bitwise_eq(&c));
}

#[test]
fn names() {
    assert_eq!(ModelConfig::unet(8).name(), "UNet (Basic-Basic)");
    assert_eq!(ModelConfig::aunet(8).name(), "Res-Basic-UNet+AU");
    let cfg = ModelConfig::backbone(UnitKind::Basic, UnitKind::Deep, UpsamplerKind::Bu, 8);
    assert_eq!(cfg.name(), "Basic-Deep-UNet");
}

#[test]
fn parameter_counts_match_closed_form() {
    for enc in UnitKind::ALL {
        for dec in UnitKind::ALL {
            for up in [UpsamplerKind::Bu, UpsamplerKind::Au] {
                for bn in [false, true] {
                    let mut cfg = ModelConfig::backbone(enc, dec, up, 4).with_ratio(4);
                    cfg.unit_batch_norm = bn;
                    let model = Model::build(cfg.clone()).unwrap();
                    assert_eq!(model.count_params(), cfg.param_count(), "{}", cfg.name());
                    assert_eq!(cfg.param_count(), inventory_count(&cfg), "{}", cfg.name());
                }
            }
        }
    }
}

#[test]
fn full_width_unet_is_near_published_size() {
    let count = ModelConfig::unet(DEFAULT_BASE_WIDTH).param_count() as f64;
    assert!((count / 34.5e6 - 1.0).abs() < 0.05, "{count}");
}

#[test]
fn forward_shapes_and_range() {
    let model = Model::build(ModelConfig::aunet(8).with_seed(0)).unwrap();
    let y = model.predict(&input([1, 3, 64, 64], 1)).unwrap();
    assert_eq!(y.shape(), Shape4::new(1, 1, 64, 64));
    assert!(y.data().iter().all(|&p| p > 0.0 && p < 1.0));
    let mean = y.mean();
    assert!(mean > 0.2 && mean < 0.8, "{mean}");
}

#[test]
fn forward_at_published_resolution() {
    let model = Model::build(ModelConfig::aunet(DESK_BASE_WIDTH)).unwrap();
    let y = model.predict(&input([2, 3, 256, 256], 2)).unwrap();
    assert_eq!(y.shape(), Shape4::new(2, 1, 256, 256));
    assert!(y.data().iter().all(|&p| p > 0.0 && p < 1.0));
}

#[test]
fn indivisible_input_is_rejected_before_compute() {
    let model = Model::build(ModelConfig::unet(4)).unwrap();
    let err = model.predict(&input([1, 3, 40, 48], 3)).unwrap_err();
    assert!(matches!(err, Error::Shape { op: "forward", .. }), "{err}");
    assert!(model.predict(&input([1, 1, 32, 32], 3)).is_err());
}

#[test]
fn bottleneck_is_one_sixteenth() {
    let mut model = Model::build(ModelConfig::aunet(4).with_ratio(4)).unwrap();
    let mut g = Graph::new();
    let x = g.constant(input([1, 3, 64, 96], 4));
    let vars = model.store.bind(&mut g);
    let mut ctx = Ctx::train(&mut g, &vars, model.store.stats_mut());
    let (_, feats) = model.network.forward_features(&mut ctx, x).unwrap();
    let last = g.value(feats[4]).shape();
    assert_eq!((last.h(), last.w()), (4, 6));
}

#[test]
fn upsampler_swap_keeps_encoder() {
    let bu = Model::build(ModelConfig::backbone(
        UnitKind::Res,
        UnitKind::Basic,
        UpsamplerKind::Bu,
        8,
    ))
    .unwrap();
    let au = Model::build(ModelConfig::aunet(8)).unwrap();
    let enc = |m: &Model| -> Vec<(String, Tensor4)> {
        m.store()
            .params()
            .iter()
            .filter(|p| p.name.starts_with("enc"))
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    };
    let (a, b) = (enc(&bu), enc(&au));
    assert_eq!(a.len(), b.len());
    for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
        assert_eq!(na, nb);
        assert!(ta.bitwise_eq(tb));
    }
    let dec_names = |m: &Model| -> Vec<String> {
        m.store()
            .params()
            .iter()
            .filter(|p| p.name.starts_with("dec"))
            .map(|p| p.name.clone())
            .collect()
    };
    assert_ne!(dec_names(&bu), dec_names(&au));
}

#[test]
fn eval_forward_is_bitwise_repeatable() {
    let model = Model::build(ModelConfig::aunet(8)).unwrap();
    let x = input([2, 3, 32, 32], 5);
    assert!(model.predict(&x).unwrap().bitwise_eq(&model.predict(&x).unwrap()));
}

#[test]
fn invalid_ratio_is_config_error() {
    let cfg = ModelConfig::aunet(8).with_ratio(32);
    assert!(matches!(Model::build(cfg), Err(Error::Config(_))));
    let mut cfg = ModelConfig::unet(8);
    cfg.base_width = 0;
    assert!(Model::build(cfg).is_err());
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let mut model = Model::build(ModelConfig::aunet(4).with_ratio(2).with_seed(9)).unwrap();
    // perturb running stats so they are part of the comparison
    model.store.stats_mut()[0].stats.mean[0] = 0.25;
    let bytes = model.to_bytes();
    let back = Model::from_bytes(&bytes).unwrap();
    assert!(back.bitwise_eq(&model));
    assert_eq!(back.to_bytes(), bytes);

    let mut bad = bytes.clone();
    bad[200] ^= 1;
    assert!(matches!(Model::from_bytes(&bad), Err(Error::Checkpoint(m)) if m.contains("checksum")));

    let mut old = bytes.clone();
    old[8] = 9;
    assert!(matches!(Model::from_bytes(&old), Err(Error::Checkpoint(m)) if m.contains("version")));

    assert!(Model::from_bytes(&bytes[..bytes.len() / 2]).is_err());
    assert!(Model::from_bytes(b"not a checkpoint at all, definitely not").is_err());
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = Model::build(ModelConfig::unet(4)).unwrap();
    model.save(&path).unwrap();
    assert!(Model::load(&path).unwrap().bitwise_eq(&model));
    assert!(matches!(Model::load(dir.path().join("missing")), Err(Error::Io { .. })));
}
