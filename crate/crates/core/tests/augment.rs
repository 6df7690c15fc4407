use proptest::prelude::*;
use secl::augment::{apply_transform, resample_channel, sample_transform, AugmentRanges, TransformSpec};
use secl::data::{generate_phantom, LabelMap, PhantomConfig, Volume};

fn phantom(seed: u64) -> (Volume, LabelMap) {
    generate_phantom(seed, &PhantomConfig::default()).unwrap()
}

/// Argmax over per-class one-hot channels pushed through the image pipeline.
fn interpolated_labels(label: &LabelMap, spec: &TransformSpec) -> Vec<u8> {
    let channels: Vec<Vec<f32>> = (0..label.classes as u8)
        .map(|c| {
            let onehot: Vec<f32> = label.data.iter().map(|&v| (v == c) as u8 as f32).collect();
            resample_channel(&onehot, label.extents, spec, (c == 0) as u8 as f32)
        })
        .collect();
    (0..label.data.len())
        .map(|i| {
            (0..channels.len())
                .max_by(|&a, &b| channels[a][i].total_cmp(&channels[b][i]))
                .unwrap() as u8
        })
        .collect()
}

#[test]
fn identity_spec_returns_input() {
    let (v, l) = phantom(0);
    let (v2, l2) = apply_transform(&v, Some(&l), &TransformSpec::identity());
    assert_eq!(l2.unwrap(), l);
    assert!(v.data.iter().zip(&v2.data).all(|(a, b)| (a - b).abs() <= 1e-6));
    let spec = sample_transform(3, &AugmentRanges::identity());
    assert!(spec.is_geometric_identity() && spec.intensity_shift == 0.0);
}

#[test]
fn double_flip_restores_the_volume() {
    let (v, l) = phantom(1);
    for axis in 0..3 {
        let mut spec = TransformSpec::identity();
        spec.flips[axis] = true;
        let (once, lo) = apply_transform(&v, Some(&l), &spec);
        assert_ne!(once.data, v.data);
        let (twice, lt) = apply_transform(&once, lo.as_ref(), &spec);
        assert_eq!(lt.unwrap(), l);
        assert!(v.data.iter().zip(&twice.data).all(|(a, b)| (a - b).abs() <= 1e-6));
    }
}

#[test]
fn intensity_shift_moves_the_mean_only() {
    let (v, l) = phantom(2);
    for delta in [-0.1f32, -0.03, 0.07] {
        let spec = TransformSpec {
            intensity_shift: delta,
            ..TransformSpec::identity()
        };
        let (out, lo) = apply_transform(&v, Some(&l), &spec);
        assert!((out.mean() - v.mean() - delta as f64).abs() <= 1e-5);
        assert_eq!(lo.unwrap(), l);
    }
}

#[test]
fn sampled_scales_stay_in_range() {
    let r = AugmentRanges::default();
    for seed in 0..1000 {
        let s = sample_transform(seed, &r);
        assert!(s.scale >= r.scale.0 && s.scale <= r.scale.1);
        assert!(s.rotation_deg.abs() <= r.rotation_deg);
        assert!(s.intensity_shift.abs() <= r.intensity_shift);
        assert_eq!(s, sample_transform(seed, &r));
    }
}

#[test]
fn label_transform_agrees_with_interpolated_one_hot() {
    let (v, l) = phantom(4);
    let r = AugmentRanges::default();
    for seed in 0..30 {
        let spec = sample_transform(seed, &r);
        let (_, nn) = apply_transform(&v, Some(&l), &spec);
        let nn = nn.unwrap();
        let interp = interpolated_labels(&l, &spec);
        let agree = nn.data.iter().zip(&interp).filter(|(a, b)| a == b).count();
        let frac = agree as f64 / interp.len() as f64;
        assert!(frac >= 0.99, "seed {seed}: agreement {frac}");
    }
}

#[test]
fn default_transforms_keep_every_large_class() {
    let r = AugmentRanges::default();
    for seed in 0..100 {
        let (v, l) = phantom(seed);
        let (_, out) = apply_transform(&v, Some(&l), &sample_transform(1000 + seed, &r));
        let out = out.unwrap();
        for c in 0..l.classes as u8 {
            if l.count(c) >= 100 {
                assert!(out.count(c) >= 1, "seed {seed}: class {c} vanished");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn transforms_are_pure(seed in any::<u64>()) {
        let (v, l) = phantom(seed % 7);
        let spec = sample_transform(seed, &AugmentRanges::default());
        let a = apply_transform(&v, Some(&l), &spec);
        let b = apply_transform(&v, Some(&l), &spec);
        prop_assert_eq!(a, b);
    }
}
