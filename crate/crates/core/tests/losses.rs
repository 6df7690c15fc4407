mod common;

use common::{aacs_pairs, nce, racs_pairs, rotating_batch, single_pair, uniform};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use secl::data::LabelMap;
use secl::losses::{
    combined_objective, consistency_mse, info_nce, rampup_lambda, supervised_loss, LossError, PairSets, RampUpSchedule,
};
use secl_autodiff::{Graph, Tensor};

#[test]
fn equal_similarities_give_log_one_plus_n() {
    for n in [1usize, 14, 30] {
        let z = Tensor::from_vec(&[n + 2, 3], [0.3, -1.2, 0.7].repeat(n + 2));
        let loss = nce(&z, &single_pair(n), 0.1);
        assert!((loss - (1.0 + n as f64).ln()).abs() < 1e-6, "n={n}: {loss}");
    }
    // Full AACS structure with K = 8: 14 negatives per anchor.
    let z = Tensor::from_vec(&[16, 2], [1.0, 2.0].repeat(16));
    assert!((nce(&z, &aacs_pairs(8), 0.1) - 15f64.ln()).abs() < 1e-4);
}

#[test]
fn one_negative_at_unit_temperature() {
    // sim(pos) = 1, sim(neg) = 0 for both anchors.
    let z = Tensor::from_vec(&[3, 2], vec![1.0, 0.0, 2.0, 0.0, 0.0, 1.0]);
    let loss = nce(&z, &single_pair(1), 1.0);
    assert!((loss - (1.0 + (-1f64).exp()).ln()).abs() < 1e-4);
}

#[test]
fn invalid_batches_are_rejected() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
    let no_neg = PairSets {
        positives: vec![vec![1], vec![0]],
        negatives: vec![vec![], vec![]],
    };
    assert!(matches!(info_nce(&mut g, z, &no_neg, 0.1), Err(LossError::EmptyNegatives { .. })));
    let asym = PairSets {
        positives: vec![vec![1], vec![]],
        negatives: vec![vec![], vec![0]],
    };
    assert!(matches!(info_nce(&mut g, z, &asym, 0.1), Err(LossError::AsymmetricPositive { .. })));
    assert!(matches!(
        info_nce(&mut g, z, &single_pair(0), 0.0),
        Err(LossError::InvalidTemperature(_))
    ));
}

#[test]
fn positive_similarity_monotonicity_on_1000_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let n = rng.random_range(1..12);
        let batch = rotating_batch(&mut rng, n, 6);
        let pairs = single_pair(n);
        let wide: f64 = rng.random_range(0.1..std::f64::consts::PI);
        let narrow = wide * rng.random_range(0.0..0.95);
        let tau = rng.random_range(0.05..1.0);
        assert!(nce(&batch(narrow), &pairs, tau) < nce(&batch(wide), &pairs, tau));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn anchor_rescaling_leaves_loss_unchanged(seed in 0u64..10_000, scale in 0.01f64..100.0, k in 2usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = uniform(&mut rng, &[2 * k, 5]);
        let pairs = aacs_pairs(k);
        let mut scaled = z.to_vec();
        for v in &mut scaled[..5 * k] {
            *v *= scale;
        }
        let a = nce(&z, &pairs, 0.1);
        let b = nce(&Tensor::from_vec(&[2 * k, 5], scaled), &pairs, 0.1);
        prop_assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn loss_is_positive(seed in 0u64..10_000, k in 2usize..9, tau in 0.05f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = uniform(&mut rng, &[2 * k, 4]);
        prop_assert!(nce(&z, &aacs_pairs(k), tau) > 0.0);
        let tags: Vec<usize> = (0..2 * k).map(|i| i % 2).collect();
        prop_assert!(nce(&z, &racs_pairs(&tags), tau) > 0.0);
    }

    #[test]
    fn sharper_temperature_lowers_loss_when_positive_dominates(seed in 0u64..10_000, n in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = rotating_batch(&mut rng, n, 5);
        // A positive within 0.1 rad of the anchor direction beats every negative.
        let z = batch(rng.random_range(0.0..0.1));
        let pairs = single_pair(n);
        let sims = |a: usize| -> Vec<f64> {
            let row = |i: usize| &z.data()[i * 5..(i + 1) * 5];
            let cos = |x: &[f64], y: &[f64]| {
                let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                dot / (x.iter().map(|v| v * v).sum::<f64>().sqrt() * y.iter().map(|v| v * v).sum::<f64>().sqrt())
            };
            (0..n + 2).map(|j| cos(row(a), row(j))).collect()
        };
        let dominated = (0..2).all(|a| {
            let s = sims(a);
            (2..n + 2).all(|l| s[1 - a] > s[l])
        });
        prop_assume!(dominated);
        prop_assert!(nce(&z, &pairs, 0.1) < nce(&z, &pairs, 0.5));
    }

    #[test]
    fn rampup_is_monotone(a in 0.0f64..1.0, b in 0.0f64..1.0, t_max in 1.0f64..1000.0) {
        prop_assume!(a != b);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let s = RampUpSchedule::new(t_max);
        prop_assert!(rampup_lambda(lo * t_max, &s).unwrap() < rampup_lambda(hi * t_max, &s).unwrap());
    }
}

#[test]
fn rampup_reference_values() {
    let s = RampUpSchedule::new(300.0);
    assert!((rampup_lambda(0.0, &s).unwrap() - 6.7379e-4).abs() < 1e-8);
    assert!((rampup_lambda(150.0, &s).unwrap() - 2.8650e-2).abs() < 1e-6);
    assert_eq!(rampup_lambda(300.0, &s).unwrap(), 0.1);
    let grid: Vec<f64> = (0..1000).map(|i| rampup_lambda(300.0 * i as f64 / 999.0, &s).unwrap()).collect();
    assert!(grid.windows(2).all(|w| w[0] < w[1]));
    assert!(grid.iter().all(|&l| l > 0.0 && l <= 0.1));
    assert!(rampup_lambda(-1.0, &s).is_err());
    assert!(rampup_lambda(301.0, &s).is_err());
}

fn scalar(g: &mut Graph<f64>, v: f64) -> secl_autodiff::NodeId {
    g.constant(Tensor::scalar(v))
}

#[test]
fn combined_objective_arithmetic() {
    let mut g = Graph::new();
    let sup = [scalar(&mut g, 0.5), scalar(&mut g, 1.5)];
    let con = [scalar(&mut g, 1.0), scalar(&mut g, 3.0)];
    let l = combined_objective(&mut g, &sup, &con, 0.1);
    assert!((g.value(l).item() - 1.2).abs() < 1e-12);
    let l0 = combined_objective(&mut g, &sup, &con, 0.0);
    assert_eq!(g.value(l0).item(), 1.0);
    let empty = combined_objective(&mut g, &sup, &[], 0.1);
    assert_eq!(g.value(empty).item(), 1.0);
}

#[test]
fn cross_entropy_reference_values() {
    let labels = LabelMap::new([1, 2, 2], 3, vec![0, 1, 2, 1]).unwrap();
    let mut g = Graph::<f64>::new();
    let zeros = g.constant(Tensor::zeros(&[3, 1, 2, 2]));
    let l = supervised_loss(&mut g, zeros, &labels);
    assert!((g.value(l).item() - 3f64.ln()).abs() < 1e-4);

    let perfect: Vec<f64> = (0..3)
        .flat_map(|c| labels.data.iter().map(move |&y| if y as usize == c { 10.0 } else { -10.0 }))
        .collect();
    let p = g.param(Tensor::from_vec(&[3, 1, 2, 2], perfect));
    let l = supervised_loss(&mut g, p, &labels);
    assert!(g.value(l).item() < 1e-4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn cross_entropy_gradient_sums_to_zero_per_voxel(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = LabelMap::new([2, 2, 2], 4, (0..8).map(|_| rng.random_range(0..4u8)).collect()).unwrap();
        let mut g = Graph::new();
        let x = g.param(uniform(&mut rng, &[4, 2, 2, 2]));
        let l = supervised_loss(&mut g, x, &labels);
        let grad = g.backward(l).unwrap().get(x);
        for v in 0..8 {
            let s: f64 = (0..4).map(|c| grad.data()[c * 8 + v]).sum();
            prop_assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn consistency_mse_is_symmetric(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (uniform(&mut rng, &[2, 3, 3]), uniform(&mut rng, &[2, 3, 3]));
        let mut g = Graph::new();
        let (x, y) = (g.constant(a), g.constant(b));
        let ab = consistency_mse(&mut g, x, y);
        let ba = consistency_mse(&mut g, y, x);
        let aa = consistency_mse(&mut g, x, x);
        prop_assert_eq!(g.value(ab).item(), g.value(ba).item());
        prop_assert_eq!(g.value(aa).item(), 0.0);
    }
}

#[test]
fn consistency_mse_of_opposite_one_hots_is_one() {
    let mut g = Graph::new();
    let p = g.constant(Tensor::from_vec(&[2, 3], vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]));
    let q = g.constant(Tensor::from_vec(&[2, 3], vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]));
    let l = consistency_mse(&mut g, p, q);
    assert_eq!(g.value(l).item(), 1.0);
}
