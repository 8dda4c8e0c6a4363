use approx::assert_abs_diff_eq;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::substrate::{Shape4, Tensor4};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn zero_all(store: &mut ParamStore) {
    for p in store.params_mut() {
        p.value = Tensor4::zeros(p.value.shape());
    }
}

/// Runs `f` in train mode on a fresh graph, returning the output value.
fn run<F>(store: &ParamStore, inputs: &[Tensor4], f: F) -> Tensor4
where
    F: FnOnce(&mut Ctx<'_>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let params = store.bind(&mut g);
    let xs: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let mut stats = store.stats().to_vec();
    let mut ctx = Ctx::train(&mut g, &params, &mut stats);
    let out = f(&mut ctx, &xs).unwrap();
    g.value(out).clone()
}

#[test]
fn unit_kind_strings_round_trip() {
    for k in UnitKind::ALL {
        assert_eq!(k.as_str().parse::<UnitKind>().unwrap(), k);
        assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.as_str()));
    }
    assert!("resnet".parse::<UnitKind>().is_err());
    assert_eq!("au".parse::<UpsamplerKind>().unwrap(), UpsamplerKind::Au);
}

#[test]
fn zero_units_give_zero_output() {
    for kind in UnitKind::ALL {
        let mut store = ParamStore::new();
        let unit = Unit::new(&mut store, &mut rng(1), "u", kind, 3, 4, false).unwrap();
        zero_all(&mut store);
        let x = Tensor4::randn([1, 3, 8, 8], 1.0, &mut rng(2));
        let y = run(&store, &[x], |ctx, xs| unit.forward(ctx, xs[0]));
        assert!(y.data().iter().all(|&v| v == 0.0), "{kind}");
    }
}

#[test]
fn unit_shape_contract() {
    for kind in UnitKind::ALL {
        let mut store = ParamStore::new();
        let unit = Unit::new(&mut store, &mut rng(3), "u", kind, 8, 16, false).unwrap();
        let x = Tensor4::randn([2, 8, 32, 32], 1.0, &mut rng(4));
        let y = run(&store, &[x], |ctx, xs| unit.forward(ctx, xs[0]));
        assert_eq!(y.shape(), Shape4::new(2, 16, 32, 32));
    }
}

#[test]
fn unit_parameter_counts() {
    // (cin·9 + 1)·cout for the first conv, (cout·9 + 1)·cout for the rest
    let (cin, cout) = (5, 7);
    let first = (cin * 9 + 1) * cout;
    let rest = (cout * 9 + 1) * cout;
    for (kind, expect) in [
        (UnitKind::Basic, first + rest),
        (UnitKind::Deep, first + 2 * rest),
        (UnitKind::Res, first + 2 * rest),
    ] {
        let mut store = ParamStore::new();
        let unit = Unit::new(&mut store, &mut rng(5), "u", kind, cin, cout, false).unwrap();
        assert_eq!(unit.convs.len(), kind.conv_count());
        assert_eq!(store.count(), expect, "{kind}");
    }
}

#[test]
fn unit_channel_mismatch_is_error() {
    let mut store = ParamStore::new();
    let unit = Unit::new(&mut store, &mut rng(6), "u", UnitKind::Basic, 3, 4, false).unwrap();
    let mut g = Graph::new();
    let params = store.bind(&mut g);
    let x = g.leaf(Tensor4::zeros([1, 5, 4, 4]));
    let mut stats = store.stats().to_vec();
    let mut ctx = Ctx::train(&mut g, &params, &mut stats);
    assert!(matches!(unit.forward(&mut ctx, x), Err(Error::Shape { .. })));
}

#[test]
fn res_unit_degenerate_case_is_relu_of_first_conv() {
    let mut store = ParamStore::new();
    let unit = Unit::new(&mut store, &mut rng(7), "u", UnitKind::Res, 3, 4, false).unwrap();
    let mut r = rng(8);
    store
        .set("u.conv1.bias", Tensor4::randn([1, 4, 1, 1], 0.5, &mut r))
        .unwrap();
    for name in ["u.conv2.weight", "u.conv3.weight", "u.conv2.bias", "u.conv3.bias"] {
        let shape = store.by_name(name).unwrap().value.shape();
        store.set(name, Tensor4::zeros(shape)).unwrap();
    }
    let x = Tensor4::randn([2, 3, 6, 6], 1.0, &mut r);
    let y = run(&store, std::slice::from_ref(&x), |ctx, xs| unit.forward(ctx, xs[0]));
    let w1 = store.by_name("u.conv1.weight").unwrap().value.clone();
    let b1 = store.by_name("u.conv1.bias").unwrap().value.clone();
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.leaf(x), g.leaf(w1), g.leaf(b1));
    let c = crate::substrate::conv2d(&mut g, xv, wv, Some(bv), 1, 1).unwrap();
    let expect = relu(&mut g, c).unwrap();
    assert!(y.max_abs_diff(g.value(expect)) < 1e-12);
}

#[test]
fn duc_rearranges_and_conserves() {
    // 1×1 identity-like conv isolates the rearrangement
    let mut g = Graph::new();
    let x = g.leaf(Tensor4::from_vec([1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let mut w = Tensor4::zeros([4, 4, 1, 1]);
    for c in 0..4 {
        w.set(c, c, 0, 0, 1.0);
    }
    let w = g.leaf(w);
    let b = g.leaf(Tensor4::zeros([1, 4, 1, 1]));
    let y = duc_up2(&mut g, x, w, b).unwrap();
    assert_eq!(g.value(y).shape(), Shape4::new(1, 1, 2, 2));
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

    let mut g = Graph::new();
    let x = g.leaf(Tensor4::randn([1, 3, 4, 4], 1.0, &mut rng(9)));
    let w = g.leaf(Tensor4::zeros([8, 3, 3, 3]));
    let b = g.leaf(Tensor4::zeros([1, 8, 1, 1]));
    let y = duc_up2(&mut g, x, w, b).unwrap();
    assert_eq!(g.value(y).shape(), Shape4::new(1, 2, 8, 8));
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let mut g = Graph::new();
    let x = g.leaf(Tensor4::zeros([1, 3, 4, 4]));
    let w = g.leaf(Tensor4::zeros([6, 3, 3, 3]));
    let b = g.leaf(Tensor4::zeros([1, 6, 1, 1]));
    assert!(duc_up2(&mut g, x, w, b).is_err());
}

#[test]
fn duc_multiset_preserved() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor4::randn([2, 3, 4, 4], 1.0, &mut rng(10)));
    let w = g.leaf(Tensor4::randn([12, 3, 3, 3], 0.3, &mut rng(11)));
    let b = g.leaf(Tensor4::randn([1, 12, 1, 1], 0.3, &mut rng(12)));
    let pre = crate::substrate::conv2d(&mut g, x, w, Some(b), 1, 1).unwrap();
    let post = duc_up2(&mut g, x, w, b).unwrap();
    let mut a: Vec<u64> = g.value(pre).data().iter().map(|v| v.to_bits()).collect();
    let mut z: Vec<u64> = g.value(post).data().iter().map(|v| v.to_bits()).collect();
    a.sort_unstable();
    z.sort_unstable();
    assert_eq!(a, z);
}

#[test]
fn attention_zero_params_halves_input() {
    let mut store = ParamStore::new();
    let att = ChannelAttention::new(&mut store, &mut rng(13), "att", 8, 4).unwrap();
    zero_all(&mut store);
    let x = Tensor4::randn([2, 8, 4, 4], 1.0, &mut rng(14));
    let y = run(&store, std::slice::from_ref(&x), |ctx, xs| att.forward(ctx, xs[0]));
    for (a, b) in y.data().iter().zip(x.data()) {
        assert_eq!(*a, 0.5 * b);
    }
}

#[test]
fn attention_saturated_gate_is_identity() {
    let mut store = ParamStore::new();
    let att = ChannelAttention::new(&mut store, &mut rng(15), "att", 8, 2).unwrap();
    store.set("att.fc2.bias", Tensor4::full([1, 8, 1, 1], 50.0)).unwrap();
    store.set("att.fc2.weight", Tensor4::zeros([8, 4, 1, 1])).unwrap();
    let x = Tensor4::randn([1, 8, 4, 4], 1.0, &mut rng(16));
    let y = run(&store, std::slice::from_ref(&x), |ctx, xs| att.forward(ctx, xs[0]));
    assert!(y.max_abs_diff(&x) < 1e-6);
}

#[test]
fn attention_two_channel_hand_evaluation() {
    // Z = [2, −2]; hidden = relu(0.5·2 + 0.25·(−2) + 0.1) = 0.6
    // S = σ([1·0.6 − 0.2, −2·0.6 + 0.3]) = σ([0.4, −0.9])
    let mut store = ParamStore::new();
    let att = ChannelAttention::new(&mut store, &mut rng(17), "att", 2, 2).unwrap();
    store
        .set(
            "att.fc1.weight",
            Tensor4::from_vec([1, 2, 1, 1], vec![0.5, 0.25]).unwrap(),
        )
        .unwrap();
    store
        .set("att.fc1.bias", Tensor4::from_vec([1, 1, 1, 1], vec![0.1]).unwrap())
        .unwrap();
    store
        .set(
            "att.fc2.weight",
            Tensor4::from_vec([2, 1, 1, 1], vec![1.0, -2.0]).unwrap(),
        )
        .unwrap();
    store
        .set(
            "att.fc2.bias",
            Tensor4::from_vec([1, 2, 1, 1], vec![-0.2, 0.3]).unwrap(),
        )
        .unwrap();
    let mut x = Tensor4::zeros([1, 2, 3, 3]);
    for i in 0..3 {
        for j in 0..3 {
            x.set(0, 0, i, j, 2.0);
            x.set(0, 1, i, j, -2.0);
        }
    }
    let y = run(&store, &[x], |ctx, xs| att.forward(ctx, xs[0]));
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let (s0, s1) = (sig(0.4), sig(-0.9));
    assert_abs_diff_eq!(y.at(0, 0, 1, 1), 2.0 * s0, epsilon = 1e-14);
    assert_abs_diff_eq!(y.at(0, 1, 2, 0), -2.0 * s1, epsilon = 1e-14);
}

#[test]
fn attention_ratio_must_divide() {
    let mut store = ParamStore::new();
    assert!(ChannelAttention::new(&mut store, &mut rng(18), "att", 16, 32).is_err());
    assert!(ChannelAttention::new(&mut store, &mut rng(18), "att", 12, 8).is_err());
}

#[test]
fn bu_block_shape_and_concat_order() {
    let mut store = ParamStore::new();
    let bu = BuBlock::new(&mut store, &mut rng(19), "bu", 16, 8).unwrap();
    let high = Tensor4::randn([1, 16, 8, 8], 1.0, &mut rng(20));
    let low = Tensor4::randn([1, 8, 16, 16], 1.0, &mut rng(21));
    let y = run(&store, &[high, low.clone()], |ctx, xs| bu.forward(ctx, xs[0], xs[1]));
    assert_eq!(y.shape(), Shape4::new(1, 16, 16, 16));

    // zero high features: conv path is zero, F_low comes second
    let y = run(&store, &[Tensor4::zeros([1, 16, 8, 8]), low.clone()], |ctx, xs| {
        bu.forward(ctx, xs[0], xs[1])
    });
    let plane = 16 * 16;
    assert!(y.data()[..8 * plane].iter().all(|&v| v == 0.0));
    assert_eq!(&y.data()[8 * plane..], low.data());
}

#[test]
fn bu_block_resolution_mismatch() {
    let mut store = ParamStore::new();
    let bu = BuBlock::new(&mut store, &mut rng(22), "bu", 16, 8).unwrap();
    let mut g = Graph::new();
    let params = store.bind(&mut g);
    let high = g.leaf(Tensor4::zeros([1, 16, 8, 8]));
    let low = g.leaf(Tensor4::zeros([1, 8, 8, 8]));
    let mut stats = store.stats().to_vec();
    let mut ctx = Ctx::train(&mut g, &params, &mut stats);
    assert!(bu.forward(&mut ctx, high, low).is_err());
}

#[test]
fn au_block_shape() {
    let mut store = ParamStore::new();
    let au = AuBlock::new(&mut store, &mut rng(23), "au", 32, 16, 16, UnitKind::Basic, false).unwrap();
    let high = Tensor4::randn([2, 32, 8, 8], 1.0, &mut rng(24));
    let low = Tensor4::randn([2, 16, 16, 16], 1.0, &mut rng(25));
    let y = run(&store, &[high, low], |ctx, xs| au.forward(ctx, xs[0], xs[1]));
    assert_eq!(y.shape(), Shape4::new(2, 16, 16, 16));
    assert!(y.is_finite());
}

#[test]
fn au_block_zero_cascade() {
    let mut store = ParamStore::new();
    let au = AuBlock::new(&mut store, &mut rng(26), "au", 8, 4, 2, UnitKind::Basic, false).unwrap();
    // zero every conv and attention weight/bias; leave BN γ=1, β=0
    let names: Vec<String> = store
        .params()
        .iter()
        .map(|p| p.name.clone())
        .filter(|n| !n.contains(".bn."))
        .collect();
    for n in names {
        let shape = store.by_name(&n).unwrap().value.shape();
        store.set(&n, Tensor4::zeros(shape)).unwrap();
    }
    let high = Tensor4::randn([2, 8, 4, 4], 1.0, &mut rng(27));
    let low = Tensor4::randn([2, 4, 8, 8], 1.0, &mut rng(28));
    let y = run(&store, &[high, low], |ctx, xs| au.forward(ctx, xs[0], xs[1]));
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn au_block_reports_stage_on_mismatch() {
    let mut store = ParamStore::new();
    let au = AuBlock::new(&mut store, &mut rng(29), "au", 8, 4, 2, UnitKind::Basic, false).unwrap();
    let mut g = Graph::new();
    let params = store.bind(&mut g);
    // right resolution and low channels, wrong high channels
    let high = g.leaf(Tensor4::zeros([2, 6, 4, 4]));
    let low = g.leaf(Tensor4::zeros([2, 4, 8, 8]));
    let mut stats = store.stats().to_vec();
    let mut ctx = Ctx::train(&mut g, &params, &mut stats);
    let msg = au.forward(&mut ctx, high, low).unwrap_err().to_string();
    assert!(msg.contains("duc conv"), "{msg}");
}
