//! Dataset generation contracts: seeded determinism, bias assignment at
//! full and zero confounder strength, shared test foregrounds, debiasing
//! statistics, IDX parsing, and the on-disk shard layout.

use exdistill_core::biasdata::{self, BiasKind, BiasSpec, Split, SplitCounts};
use exdistill_core::tensor::{Real, Tensor};
use exdistill_core::Error;

fn small_counts() -> SplitCounts {
    SplitCounts {
        train_per_class: 6,
        val_per_class: 3,
        test_per_class: 4,
    }
}

fn colored(seed: u64, strength: Real) -> biasdata::BiasedDataset {
    let mut spec = BiasSpec::colored_glyphs(seed);
    spec.confounder_strength = strength;
    biasdata::gen_colored_glyphs(&spec, &small_counts()).unwrap()
}

/// Foreground intensity of a colored sample: hues are fully saturated, so
/// the max channel recovers the grayscale glyph exactly.
fn gray_of(x: &Tensor) -> Vec<Real> {
    let hw = x.shape()[1] * x.shape()[2];
    (0..hw)
        .map(|p| {
            (0..3)
                .map(|c| x.data()[c * hw + p])
                .fold(0.0 as Real, Real::max)
        })
        .collect()
}

#[test]
fn regeneration_from_the_same_seed_is_bitwise_identical() {
    let a = colored(5, 1.0);
    let b = colored(5, 1.0);
    for split in Split::ALL {
        let (ra, rb) = (a.split(split), b.split(split));
        assert_eq!(ra.len(), rb.len());
        for (x, y) in ra.iter().zip(rb) {
            assert_eq!(x.x, y.x);
            assert_eq!(x.label, y.label);
        }
    }
    // a different seed produces different pixels
    let c = colored(6, 1.0);
    assert_ne!(a.split(Split::Train)[0].x, c.split(Split::Train)[0].x);
}

#[test]
fn full_strength_makes_color_a_function_of_the_label() {
    let ds = colored(7, 1.0);
    let c = ds.class_count;
    for r in ds.split(Split::Train) {
        // every colored pixel must be proportional to the class hue's RGB
        let hue = r.label as Real / c as Real;
        let rgb = hue_rgb(hue);
        let hw = r.x.shape()[1] * r.x.shape()[2];
        let gray = gray_of(&r.x);
        for p in 0..hw {
            for ch in 0..3 {
                let want = gray[p] * rgb[ch];
                assert!(
                    (r.x.data()[ch * hw + p] - want).abs() < 1e-9,
                    "label {} pixel {p} channel {ch}",
                    r.label
                );
            }
        }
    }
}

// mirror of the generator's palette (hue wheel, full saturation)
fn hue_rgb(h: Real) -> [Real; 3] {
    let h6 = (h.fract() + 1.0).fract() * 6.0;
    let x = 1.0 - (h6 % 2.0 - 1.0).abs();
    match h6 as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

#[test]
fn shift_split_wears_the_permuted_class_color() {
    // default permutation is rotation by one: class 3 wears class 4's color
    let ds = colored(8, 1.0);
    let c = ds.class_count;
    for r in ds.split(Split::TestShift) {
        if r.label != 3 {
            continue;
        }
        let rgb = hue_rgb(4 as Real / c as Real);
        let gray = gray_of(&r.x);
        let hw = r.x.shape()[1] * r.x.shape()[2];
        for p in 0..hw {
            for ch in 0..3 {
                assert!((r.x.data()[ch * hw + p] - gray[p] * rgb[ch]).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn zero_strength_randomizes_colors() {
    let ds = colored(9, 0.0);
    let c = ds.class_count;
    // at least one training sample must deviate from its class color
    let mut deviations = 0;
    for r in ds.split(Split::Train) {
        let rgb = hue_rgb(r.label as Real / c as Real);
        let gray = gray_of(&r.x);
        let hw = r.x.shape()[1] * r.x.shape()[2];
        let matches_class_color = (0..hw).all(|p| {
            (0..3).all(|ch| (r.x.data()[ch * hw + p] - gray[p] * rgb[ch]).abs() < 1e-9)
        });
        if !matches_class_color {
            deviations += 1;
        }
    }
    assert!(
        deviations > ds.split(Split::Train).len() / 2,
        "only {deviations} samples deviate from the class color"
    );
}

#[test]
fn test_splits_share_identical_foregrounds() {
    let ds = colored(10, 1.0);
    let iid = ds.split(Split::TestIid);
    let ood = ds.split(Split::TestOod);
    let shift = ds.split(Split::TestShift);
    assert_eq!(iid.len(), ood.len());
    assert_eq!(iid.len(), shift.len());
    for i in 0..iid.len() {
        assert_eq!(iid[i].label, ood[i].label);
        assert_eq!(gray_of(&iid[i].x), gray_of(&ood[i].x));
        assert_eq!(gray_of(&iid[i].x), gray_of(&shift[i].x));
    }
}

#[test]
fn labels_are_balanced_in_every_split() {
    let ds = colored(11, 1.0);
    for split in Split::ALL {
        let records = ds.split(split);
        let mut counts = vec![0usize; ds.class_count];
        for r in records {
            counts[r.label] += 1;
        }
        let min = counts.iter().min().unwrap();
        let max = counts.iter().max().unwrap();
        assert!(max - min <= 1, "{split:?}: unbalanced counts {counts:?}");
    }
}

#[test]
fn fixed_point_shift_permutation_is_rejected() {
    let mut spec = BiasSpec::colored_glyphs(0);
    spec.shift_permutation = Some((0..10).collect()); // identity
    assert!(matches!(
        biasdata::gen_colored_glyphs(&spec, &small_counts()),
        Err(Error::Contract(_))
    ));
}

#[test]
fn background_bias_masks_and_variants() {
    let mut spec = BiasSpec::background_texture(12);
    spec.class_count = 4;
    let counts = SplitCounts {
        train_per_class: 4,
        val_per_class: 2,
        test_per_class: 3,
    };
    let ds = biasdata::gen_background_bias(&spec, &counts).unwrap();
    let iid = ds.split(Split::TestIid);
    let ood = ds.split(Split::TestOod);
    let shift = ds.split(Split::TestShift);
    for i in 0..iid.len() {
        let mask = iid[i].mask.as_ref().unwrap();
        assert_eq!(mask, ood[i].mask.as_ref().unwrap());
        assert_eq!(mask, shift[i].mask.as_ref().unwrap());
        let hw = mask.numel();
        let mut fg = 0;
        for p in 0..hw {
            if mask.data()[p] == 1.0 {
                fg += 1;
                for ch in 0..3 {
                    let a = iid[i].x.data()[ch * hw + p];
                    assert_eq!(a, ood[i].x.data()[ch * hw + p]);
                    assert_eq!(a, shift[i].x.data()[ch * hw + p]);
                }
            }
        }
        assert!(fg > 0, "empty foreground mask");
        // backgrounds differ between variants
        assert_ne!(iid[i].x, ood[i].x);
        assert_ne!(iid[i].x, shift[i].x);
    }
}

#[test]
fn debias_background_contracts() {
    use rand_chacha::rand_core::SeedableRng;
    let x = Tensor::from_fn(&[3, 10, 10], |i| (i % 13) as Real / 13.0);

    // all-foreground mask: nothing changes
    let all_fg = Tensor::full(&[10, 10], 1.0);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    assert_eq!(biasdata::debias_background(&x, &all_fg, &mut rng).unwrap(), x);

    // all-background: every pixel replaced
    let all_bg = Tensor::zeros(&[10, 10]);
    let noised = biasdata::debias_background(&x, &all_bg, &mut rng).unwrap();
    let same = noised
        .data()
        .iter()
        .zip(x.data())
        .filter(|(a, b)| a == b)
        .count();
    assert!(same < 3, "{same} pixels kept under an all-background mask");

    // mismatched mask is a dimension error
    let bad = Tensor::zeros(&[9, 10]);
    assert!(matches!(
        biasdata::debias_background(&x, &bad, &mut rng),
        Err(Error::Dimension(_))
    ));

    // debiased twin differs only at background positions
    let mut spec = BiasSpec::background_texture(13);
    spec.class_count = 3;
    let ds = biasdata::gen_background_bias(
        &spec,
        &SplitCounts {
            train_per_class: 2,
            val_per_class: 1,
            test_per_class: 1,
        },
    )
    .unwrap();
    for r in ds.split(Split::Train) {
        let mask = r.mask.as_ref().unwrap();
        let xd = r.x_debiased.as_ref().unwrap();
        let hw = mask.numel();
        for p in 0..hw {
            if mask.data()[p] == 1.0 {
                for ch in 0..3 {
                    assert_eq!(r.x.data()[ch * hw + p], xd.data()[ch * hw + p]);
                }
            }
        }
    }
}

#[test]
fn debias_noise_is_uniform_by_ks_test() {
    use rand_chacha::rand_core::SeedableRng;
    let x = Tensor::zeros(&[3, 60, 60]);
    let mask = Tensor::zeros(&[60, 60]);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
    let noised = biasdata::debias_background(&x, &mask, &mut rng).unwrap();
    let mut v: Vec<f64> = noised.data().iter().map(|&p| p as f64).collect();
    v.truncate(10_000);
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    let mut d_stat: f64 = 0.0;
    for (i, &u) in v.iter().enumerate() {
        d_stat = d_stat
            .max((u - i as f64 / n as f64).abs())
            .max(((i + 1) as f64 / n as f64 - u).abs());
    }
    let critical = 1.358 / (n as f64).sqrt();
    assert!(d_stat < critical, "KS {d_stat} >= {critical}");
}

// ---- IDX ----------------------------------------------------------------------

fn idx_fixture(count: u32, rows: u32, cols: u32) -> (Vec<u8>, Vec<u8>) {
    let mut images = Vec::new();
    images.extend(0x0000_0803u32.to_be_bytes());
    images.extend(count.to_be_bytes());
    images.extend(rows.to_be_bytes());
    images.extend(cols.to_be_bytes());
    for i in 0..count * rows * cols {
        images.push((i % 251) as u8);
    }
    let mut labels = Vec::new();
    labels.extend(0x0000_0801u32.to_be_bytes());
    labels.extend(count.to_be_bytes());
    for i in 0..count {
        labels.push((i % 10) as u8);
    }
    (images, labels)
}

#[test]
fn idx_parser_accepts_wellformed_files() {
    let tmp = tempfile::tempdir().unwrap();
    let (images, labels) = idx_fixture(3, 4, 5);
    let ip = tmp.path().join("imgs");
    let lp = tmp.path().join("lbls");
    std::fs::write(&ip, &images).unwrap();
    std::fs::write(&lp, &labels).unwrap();

    let data = biasdata::load_mnist_idx(&ip, &lp).unwrap();
    assert_eq!(data.images.len(), 3);
    assert_eq!(data.labels, vec![0, 1, 2]);
    assert_eq!(data.images[0].shape(), &[4, 5]);

    // first image against manual offset arithmetic: payload starts at
    // byte 16, pixel (r, c) of image i sits at 16 + i·rows·cols + r·cols + c
    for r in 0..4 {
        for c in 0..5 {
            let want = images[16 + r * 5 + c] as Real / 255.0;
            assert_eq!(data.images[0].at(&[r, c]), want);
        }
    }
    // second image offset check too
    let want = images[16 + 20 + 7] as Real / 255.0;
    assert_eq!(data.images[1].at(&[1, 2]), want);
}

#[test]
fn idx_parser_rejects_bad_magic_and_truncation() {
    let tmp = tempfile::tempdir().unwrap();
    let (mut images, labels) = idx_fixture(2, 3, 3);
    let lp = tmp.path().join("lbls");
    std::fs::write(&lp, &labels).unwrap();

    // wrong magic
    images[3] = 0x99;
    let ip = tmp.path().join("bad-magic");
    std::fs::write(&ip, &images).unwrap();
    assert!(matches!(
        biasdata::load_mnist_idx(&ip, &lp),
        Err(Error::Format(_))
    ));

    // truncated payload
    let (images, _) = idx_fixture(2, 3, 3);
    let ip = tmp.path().join("truncated");
    std::fs::write(&ip, &images[..images.len() - 4]).unwrap();
    assert!(matches!(
        biasdata::load_mnist_idx(&ip, &lp),
        Err(Error::Format(_))
    ));

    // label/image count mismatch
    let (images, _) = idx_fixture(2, 3, 3);
    let (_, labels3) = idx_fixture(3, 3, 3);
    let ip = tmp.path().join("ok");
    let lp3 = tmp.path().join("lbls3");
    std::fs::write(&ip, &images).unwrap();
    std::fs::write(&lp3, &labels3).unwrap();
    assert!(matches!(
        biasdata::load_mnist_idx(&ip, &lp3),
        Err(Error::Format(_))
    ));
}

#[test]
fn mnist_source_feeds_the_colored_generator() {
    // synthetic IDX with enough per-class images
    let tmp = tempfile::tempdir().unwrap();
    let count = 10 * 13; // 13 per class via round-robin labels
    let (images, labels) = idx_fixture(count, 28, 28);
    let ip = tmp.path().join("imgs");
    let lp = tmp.path().join("lbls");
    std::fs::write(&ip, &images).unwrap();
    std::fs::write(&lp, &labels).unwrap();
    let mnist = biasdata::load_mnist_idx(&ip, &lp).unwrap();
    let pairs = mnist.pairs();

    let spec = BiasSpec::colored_glyphs(3);
    let ds = biasdata::gen_colored_glyphs_from(
        &spec,
        &SplitCounts {
            train_per_class: 8,
            val_per_class: 2,
            test_per_class: 3,
        },
        &biasdata::GlyphSource::Images(&pairs),
    )
    .unwrap();
    assert_eq!(ds.split(Split::Train).len(), 80);

    // too few source images per class is rejected
    let err = biasdata::gen_colored_glyphs_from(
        &spec,
        &SplitCounts {
            train_per_class: 50,
            val_per_class: 2,
            test_per_class: 3,
        },
        &biasdata::GlyphSource::Images(&pairs),
    );
    assert!(matches!(err, Err(Error::Contract(_))));
}

#[test]
fn dataset_save_load_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let mut spec = BiasSpec::background_texture(21);
    spec.class_count = 3;
    let ds = biasdata::gen_background_bias(
        &spec,
        &SplitCounts {
            train_per_class: 3,
            val_per_class: 2,
            test_per_class: 2,
        },
    )
    .unwrap();
    let dir1 = tmp.path().join("ds1");
    let dir2 = tmp.path().join("ds2");
    biasdata::save_dataset(&ds, BiasKind::BackgroundTexture, &dir1).unwrap();
    let loaded = biasdata::load_dataset(&dir1).unwrap();
    assert_eq!(loaded.class_count, 3);
    assert_eq!(loaded.image_shape, vec![3, 64, 64]);
    for split in Split::ALL {
        assert_eq!(loaded.split(split).len(), ds.split(split).len());
        for (a, b) in loaded.split(split).iter().zip(ds.split(split)) {
            assert_eq!(a.label, b.label);
            assert!(a.mask.is_some() && a.x_debiased.is_some());
        }
    }
    // a second save of the loaded dataset reproduces the files exactly
    biasdata::save_dataset(&loaded, BiasKind::BackgroundTexture, &dir2).unwrap();
    for split in Split::ALL {
        for file in ["images.xtsr", "labels.xtsr", "masks.xtsr", "debiased.xtsr"] {
            let a = std::fs::read(dir1.join(split.dir_name()).join(file)).unwrap();
            let b = std::fs::read(dir2.join(split.dir_name()).join(file)).unwrap();
            assert_eq!(a, b, "{split:?}/{file} differs");
        }
    }
}

#[test]
fn splits_use_distinct_foreground_instances() {
    let ds = colored(30, 1.0);
    // train and test glyphs of the same class come from different jitter
    // draws; identical pixels would mean instance leakage
    let train0 = gray_of(&ds.split(Split::Train)[0].x);
    for r in ds.split(Split::TestIid).iter().take(4) {
        if r.label == ds.split(Split::Train)[0].label {
            assert_ne!(train0, gray_of(&r.x));
        }
    }
}
