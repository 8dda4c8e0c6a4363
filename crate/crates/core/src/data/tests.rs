use super::*;
use proptest::prelude::{prop_assert, prop_assert_eq, prop_assume, proptest};

fn case(h: usize, w: usize, f: impl Fn(usize, usize) -> f64, m: impl Fn(usize, usize) -> bool) -> RawCase {
    let data = (0..h * w).map(|i| f(i / w, i % w)).collect();
    let bits = (0..h * w).map(|i| m(i / w, i % w)).collect();
    RawCase::new(
        "c",
        Image::new(h, w, data).unwrap(),
        Mask::new(h, w, bits).unwrap(),
        Tags::default(),
    )
    .unwrap()
}

#[test]
fn crop_examples() {
    let c = case(6, 8, |_, _| 0.9, |r, c| r == 2 && c == 3);
    let out = crop_background(&c, DEFAULT_TAU).unwrap();
    assert_eq!(out.case, c);
    assert!(!out.clipped_to_mask);

    let c = case(
        6,
        20,
        |r, c| if c >= 10 { 0.0 } else { 0.2 + 0.01 * (r + c) as f64 },
        |r, c| r == 1 && c == 1,
    );
    let out = crop_background(&c, DEFAULT_TAU).unwrap();
    assert_eq!(
        out.crop,
        CropBox {
            top: 0,
            bottom: 6,
            left: 0,
            right: 10
        }
    );
    assert_eq!((out.case.image.h, out.case.image.w), (6, 10));

    assert!(crop_background(&case(3, 3, |_, _| 0.0, |_, _| false), 0.05).is_err());
    assert!(crop_background(&c, 1.0).is_err());
}

#[test]
fn faint_border_matches_scan_oracle() {
    // 2 faint rows on top, 3 faint columns on the right
    let c = case(
        12,
        14,
        |r, c| {
            if r < 2 || c >= 11 {
                0.03
            } else {
                0.5 + 0.5 * ((r * c) % 3) as f64 / 2.0
            }
        },
        |r, c| r == 5 && c == 5,
    );
    let out = crop_background(&c, 0.05).unwrap();
    let gmax = c.image.data.iter().copied().fold(0.0, f64::max);
    let rows: Vec<usize> = (0..12)
        .filter(|&r| (0..14).any(|cc| c.image.get(r, cc) >= 0.05 * gmax))
        .collect();
    let cols: Vec<usize> = (0..14)
        .filter(|&cc| (0..12).any(|r| c.image.get(r, cc) >= 0.05 * gmax))
        .collect();
    assert_eq!(out.crop.top, rows[0]);
    assert_eq!(out.crop.bottom, rows.last().unwrap() + 1);
    assert_eq!(out.crop.left, cols[0]);
    assert_eq!(out.crop.right, cols.last().unwrap() + 1);
    assert_eq!(
        out.crop,
        CropBox {
            top: 2,
            bottom: 12,
            left: 0,
            right: 11
        }
    );
}

#[test]
fn crop_never_cuts_the_mask() {
    let c = case(8, 8, |_, c| if c >= 6 { 0.0 } else { 0.8 }, |r, c| r == 3 && c == 7);
    let out = crop_background(&c, 0.05).unwrap();
    assert!(out.clipped_to_mask);
    assert_eq!(out.crop.right, 8);
    assert_eq!(out.case.mask.area(), 1);
}

#[test]
fn standardize_examples() {
    let c = case(16, 16, |r, c| ((r * 16 + c) % 11) as f64 / 10.0, |r, _| r < 4);
    let s = standardize(&c, 16).unwrap();
    assert_eq!(s.image.shape(), crate::substrate::Shape4::new(1, 3, 16, 16));
    for ch in 0..3 {
        for r in 0..16 {
            for col in 0..16 {
                assert_eq!(s.image.at(0, ch, r, col), c.image.get(r, col));
            }
        }
    }
    assert_eq!(s.mask.sum(), 64.0);

    let c = case(16, 16, |r, c| 10.0 + ((r + c) % 11) as f64, |_, _| true);
    let s = standardize(&c, 16).unwrap();
    let i = (0..256).find(|&i| c.image.data[i] == 15.0).unwrap();
    assert_eq!(s.image.data()[i], 0.5);

    let s = standardize(&case(5, 5, |_, _| 0.4, |_, _| false), 16).unwrap();
    assert!(s.constant_image);
    assert_eq!(s.image.sum(), 0.0);

    assert!(standardize(&c, 24).is_err());
}

#[test]
fn tiny_mask_vanishes_with_warning_flag() {
    let c = case(64, 64, |r, c| (r + c) as f64, |r, c| r == 1 && c == 2);
    let s = standardize(&c, 16).unwrap();
    assert!(s.mask_vanished);
}

#[test]
fn patch_examples() {
    let c = case(
        200,
        200,
        |_, _| 0.5,
        |r, c| (50..60).contains(&r) && (40..140).contains(&c),
    );
    let (p, b) = extract_mass_patch(&c).unwrap();
    assert_eq!(b.width(), 110);
    assert_eq!(b.height(), 11);
    assert_eq!(p.mask.area(), 1000);

    let c = case(40, 40, |_, _| 0.5, |r, c| r < 10 && c < 10);
    let (p, b) = extract_mass_patch(&c).unwrap();
    assert_eq!((b.top, b.left), (0, 0));
    assert_eq!(p.mask.area(), 100);

    let c = case(40, 40, |_, _| 0.5, |r, c| r == 20 && c == 20);
    let (_, b) = extract_mass_patch(&c).unwrap();
    assert_eq!((b.height(), b.width()), (MIN_PATCH, MIN_PATCH));

    assert!(extract_mass_patch(&case(8, 8, |_, _| 0.5, |_, _| false)).is_err());
}

#[test]
fn fold_examples() {
    let ids: Vec<String> = (0..107).map(|i| format!("id{i}")).collect();
    let folds = split_folds(&ids, 5, 1).unwrap();
    let mut sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    assert_eq!(sizes, vec![22, 22, 21, 21, 21]);
    let mut all: Vec<String> = folds.concat();
    all.sort();
    let mut expect = ids.clone();
    expect.sort();
    assert_eq!(all, expect);
    assert_eq!(split_folds(&ids, 5, 1).unwrap(), folds);
    assert_ne!(split_folds(&ids, 5, 2).unwrap(), folds);

    let ten: Vec<String> = (0..10).map(|i| i.to_string()).collect();
    assert!(split_folds(&ten, 5, 0).unwrap().iter().all(|f| f.len() == 2));
    assert!(split_folds(&ten, 1, 0).is_err());
}

#[test]
fn synthetic_is_deterministic_and_in_range() {
    let params = SynthParams {
        area_ratio: (0.005, 0.01),
        seed: 11,
        ..SynthParams::default()
    };
    let a = generate_synthetic(&params, 9).unwrap();
    assert_eq!(a, generate_synthetic(&params, 9).unwrap());
    for c in &a {
        let ratio = c.mask.area() as f64 / (64.0 * 64.0);
        assert!((0.005..=0.01).contains(&ratio), "{ratio}");
        assert!(c.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let shapes: Vec<_> = a.iter().map(|c| c.tags.shape.clone().unwrap()).collect();
    assert_eq!(&shapes[..3], &["oval", "lobulated", "irregular"]);
}

#[test]
fn zero_contrast_hides_the_mass() {
    let p = SynthParams {
        contrast: 0.0,
        texture: 0.0,
        seed: 3,
        ..SynthParams::default()
    };
    let c = &generate_synthetic(&p, 1).unwrap()[0];
    assert!(!c.mask.is_empty());
    let inside: Vec<f64> = c.mask.points().map(|(r, col)| c.image.get(r, col)).collect();
    let mean_in = inside.iter().sum::<f64>() / inside.len() as f64;
    let mean_all = c.image.data.iter().sum::<f64>() / c.image.data.len() as f64;
    assert!((mean_in - mean_all).abs() < 0.01);
}

#[test]
fn synthetic_rejects_bad_ranges() {
    for ratio in [(0.0, 0.1), (0.2, 0.1), (0.1, 0.3)] {
        let p = SynthParams {
            area_ratio: ratio,
            ..SynthParams::default()
        };
        assert!(generate_synthetic(&p, 1).is_err());
    }
    let p = SynthParams {
        size: 16,
        area_ratio: (0.001, 0.002),
        ..SynthParams::default()
    };
    assert!(generate_synthetic(&p, 1).is_err());
}

#[test]
fn directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let params = SynthParams {
        border: 6,
        seed: 5,
        ..SynthParams::default()
    };
    let cases = generate_synthetic(&params, 3).unwrap();
    write_directory(dir.path(), &cases).unwrap();
    let back = load_directory(dir.path()).unwrap();
    assert_eq!(back.len(), 3);
    for (a, b) in cases.iter().zip(&back) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.tags, b.tags);
        let err = a
            .image
            .data
            .iter()
            .zip(&b.image.data)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(err <= 0.5 / 65535.0 + 1e-12);
    }
    // the black border is cropped away again
    let cropped = crop_background(&back[0], DEFAULT_TAU).unwrap();
    assert_eq!(cropped.crop.left, 6);

    std::fs::remove_file(dir.path().join("masks").join("synth_0001.png")).unwrap();
    assert!(matches!(load_directory(dir.path()), Err(Error::Io { .. })));
    assert!(load_directory(&dir.path().join("nowhere")).is_err());
}

proptest! {
    #[test]
    fn patch_is_enlarged_superset(seed in 0u64..1000) {
        let p = SynthParams { size: 96, area_ratio: (0.005, 0.05), seed, ..SynthParams::default() };
        let c = &generate_synthetic(&p, 1).unwrap()[0];
        let tight = mask_bbox(&c.mask).unwrap();
        let (patch, b) = extract_mass_patch(c).unwrap();
        prop_assert_eq!(patch.mask.area(), c.mask.area());
        let clamped = b.top == 0 || b.left == 0 || b.bottom == 96 || b.right == 96;
        if !clamped {
            // each side is the exact √1.2 scaling rounded, or the minimum
            for (side, len) in [(b.height(), tight.height()), (b.width(), tight.width())] {
                let exact = len as f64 * 1.2f64.sqrt();
                prop_assert!(side == MIN_PATCH || (side as f64 - exact).abs() <= 0.5 + 1e-9);
            }
            // rounding moves the area ratio at most ±(1/min side) per side
            if tight.height().min(tight.width()) >= 30 {
                let ratio = b.area() as f64 / tight.area() as f64;
                prop_assert!((1.15..=1.25).contains(&ratio), "{}", ratio);
            }
        }
    }

    #[test]
    fn resized_mask_stays_binary(h in 8usize..40, w in 8usize..40, seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bits: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.3)).collect();
        let data: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        let c = RawCase::new("p", Image::new(h, w, data).unwrap(), Mask::new(h, w, bits).unwrap(), Tags::default()).unwrap();
        let s = standardize(&c, 32).unwrap();
        prop_assert!(s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn folds_partition_ids(n in 2usize..60, k in 2usize..6, seed in 0u64..50) {
        prop_assume!(n >= k);
        let ids: Vec<String> = (0..n).map(|i| format!("x{i}")).collect();
        let folds = split_folds(&ids, k, seed).unwrap();
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut seen = std::collections::BTreeSet::new();
        for id in folds.concat() {
            prop_assert!(seen.insert(id));
        }
        prop_assert_eq!(seen.len(), n);
    }
}
