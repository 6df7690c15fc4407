//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use secl::augment::AugmentRanges;
use secl::data::{make_split, Dataset, DatasetSplit, LabelMap, PhantomConfig};
use secl::losses::{combined_objective, consistency_mse, info_nce, softmax, supervised_loss, PairSets};
use secl::model::{decoder_forward, encoder_forward, init_params, projector_forward, volume_tensor, ArchConfig, Bound};
use secl::config::{Mode, RunConfig};
use secl::sampling::{aacs_batch, AacsConfig, RacsConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use secl_autodiff::{grad_check, GradCheckReport, Graph, NodeId, Tensor};

pub const FD_STEP: f64 = 1e-3;

/// Two-level network on 8³ inputs, small enough for finite differences.
pub fn tiny_arch() -> ArchConfig {
    ArchConfig {
        extents: [8, 8, 8],
        levels: 2,
        base_channels: 2,
        hidden_dim: 6,
        emb_dim: 4,
        classes: 3,
    }
}

pub fn tiny_phantoms() -> PhantomConfig {
    PhantomConfig {
        jitter: 0.5,
        ..PhantomConfig::with_classes([8, 8, 8], 3)
    }
}

/// Small 16³ corpus for trainer tests: 2 labeled, 2 unlabeled, 2 test.
pub fn small_corpus() -> (Dataset, DatasetSplit) {
    let cfg = PhantomConfig {
        jitter: 1.0,
        ..PhantomConfig::with_classes([16, 16, 16], 3)
    };
    let data = Dataset::generate(6, 11, &cfg).unwrap();
    let split = make_split(6, 2, 2, 2, 3).unwrap();
    (data, split)
}

/// Two-epoch run on [`small_corpus`] with a 16³ network.
pub fn small_config(mode: Mode) -> RunConfig {
    RunConfig {
        mode,
        arch: ArchConfig {
            extents: [16, 16, 16],
            levels: 3,
            base_channels: 4,
            hidden_dim: 16,
            emb_dim: 8,
            classes: 3,
        },
        aacs: AacsConfig { k: 4, cube: 8, classes: 3 },
        racs: RacsConfig { partitions: 4, subjects: 2 },
        labeled_batch: 1,
        epochs: 2,
        seed: 5,
        ..RunConfig::default()
    }
}

/// Splits trainable leaves, in `ModelParams::tensors` order, into a `Bound`.
pub fn bound_from(ids: &[NodeId], arch: &ArchConfig) -> Bound {
    let (e, p) = (arch.encoder_shapes().len(), arch.projector_shapes().len());
    Bound {
        encoder: ids[..e].to_vec(),
        projector: ids[e..e + p].to_vec(),
        decoder: Some(ids[e + p..].to_vec()),
    }
}

/// Finite-difference check of the complete training objective: cross-entropy
/// on one labeled 8³ phantom plus λ times InfoNCE over an AACS batch whose
/// teacher views are embedded by a fixed EMA network.
pub fn full_objective_check(seed: u64, lambda: f64) -> GradCheckReport {
    full_objective_check_h(seed, lambda, FD_STEP, true)
}

pub fn full_objective_check_h(seed: u64, lambda: f64, h: f64, uniform: bool) -> GradCheckReport {
    let arch = tiny_arch();
    let phantoms = tiny_phantoms();
    let data = Dataset::generate(2, seed, &phantoms).unwrap();
    let labeled = data.get("subject_000").unwrap().clone();
    let unlabeled = data.get("subject_001").unwrap().clone();
    let mut student = init_params::<f64>(&arch, seed);
    if uniform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in student.tensors_mut() {
            *t = Tensor::from_vec(t.shape(), (0..t.numel()).map(|_| rng.random_range(-1.0..1.0)).collect());
        }
    }
    let teacher = init_params::<f64>(&arch, seed + 1).teacher_copy();
    let aacs = AacsConfig { k: 4, cube: 4, classes: 3 };
    let batch = aacs_batch(&[&unlabeled.image], &[&unlabeled.label], &aacs, &AugmentRanges::default(), seed).unwrap();
    let teacher_rows: Vec<Option<Vec<f64>>> = batch
        .views
        .iter()
        .zip(&batch.teacher)
        .map(|(v, &t)| t.then(|| teacher.embed(v)))
        .collect();
    let point: Vec<Tensor<f64>> = student.tensors().cloned().collect();
    let f = |g: &mut Graph<f64>, ids: &[NodeId]| {
        let p = bound_from(ids, &arch);
        let x = g.constant(volume_tensor(&labeled.image));
        let enc = encoder_forward(g, &p, x);
        let logits = decoder_forward(g, &p, &enc);
        let sup = supervised_loss(g, logits, &labeled.label);
        let rows: Vec<NodeId> = batch
            .views
            .iter()
            .zip(&teacher_rows)
            .map(|(v, t)| {
                let z = match t {
                    Some(z) => g.constant(Tensor::from_vec(&[z.len()], z.clone())),
                    None => {
                        let x = g.constant(volume_tensor(v));
                        let e = encoder_forward(g, &p, x);
                        projector_forward(g, &p, e.bottleneck)
                    }
                };
                let d = g.shape(z)[0];
                g.reshape(z, &[1, d])
            })
            .collect();
        let z = g.concat(&rows, 0);
        let con = info_nce(g, z, &batch.pairs, 0.1).unwrap();
        combined_objective(g, &[sup], &[con], lambda)
    };
    grad_check(f, &point, h).unwrap()
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Pair structure of an AACS batch with `k` cubes: views `a` and `a + k` match.
pub fn aacs_pairs(k: usize) -> PairSets {
    let n = 2 * k;
    PairSets {
        positives: (0..n).map(|a| vec![(a + k) % n]).collect(),
        negatives: (0..n)
            .map(|a| (0..n).filter(|&j| j != a && j != (a + k) % n).collect())
            .collect(),
    }
}

/// Pair structure of a RACS batch: views with equal `tags` are positives.
pub fn racs_pairs(tags: &[usize]) -> PairSets {
    let n = tags.len();
    PairSets {
        positives: (0..n).map(|a| (0..n).filter(|&j| j != a && tags[j] == tags[a]).collect()).collect(),
        negatives: (0..n).map(|a| (0..n).filter(|&j| tags[j] != tags[a]).collect()).collect(),
    }
}

/// Finite-difference checks of each loss with respect to its inputs:
/// cross-entropy wrt logits, InfoNCE wrt embeddings (AACS and RACS pair
/// structures) and the consistency MSE wrt both logit tensors.
pub fn loss_checks(seed: u64, h: f64) -> Vec<(&'static str, GradCheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = uniform(&mut rng, &[3, 4, 4, 4]);
    let labels = LabelMap::new([4, 4, 4], 3, (0..64).map(|_| rng.random_range(0..3u8)).collect()).unwrap();
    let ce = grad_check(|g, x| supervised_loss(g, x[0], &labels), &[logits], h).unwrap();

    let z = uniform(&mut rng, &[16, 8]);
    let aacs = aacs_pairs(8);
    let nce_aacs = grad_check(|g, x| info_nce(g, x[0], &aacs, 0.1).unwrap(), &[z.clone()], h).unwrap();
    let tags: Vec<usize> = (0..16).map(|i| i / 4).collect();
    let racs = racs_pairs(&tags);
    let nce_racs = grad_check(|g, x| info_nce(g, x[0], &racs, 0.1).unwrap(), &[z], h).unwrap();

    let a = uniform(&mut rng, &[3, 4, 4, 4]);
    let b = uniform(&mut rng, &[3, 4, 4, 4]);
    let mse = grad_check(
        |g, x| {
            let p = softmax(g, x[0], 0);
            let q = softmax(g, x[1], 0);
            consistency_mse(g, p, q)
        },
        &[a, b],
        h,
    )
    .unwrap();
    vec![
        ("cross-entropy", ce),
        ("infonce-aacs", nce_aacs),
        ("infonce-racs", nce_racs),
        ("consistency-mse", mse),
    ]
}

pub fn nce(z: &Tensor<f64>, pairs: &PairSets, tau: f64) -> f64 {
    let mut g = Graph::new();
    let x = g.constant(z.clone());
    let l = info_nce(&mut g, x, pairs, tau).unwrap();
    g.value(l).item()
}

/// Anchor 0 and view 1 are mutual positives; views `2..2+n` are negatives of both.
pub fn single_pair(n: usize) -> PairSets {
    let negs: Vec<usize> = (2..2 + n).collect();
    let mut positives = vec![vec![1], vec![0]];
    let mut negatives = vec![negs.clone(), negs];
    positives.extend((0..n).map(|_| vec![]));
    negatives.extend((0..n).map(|_| vec![]));
    PairSets { positives, negatives }
}

/// Anchor, positive and `n` negatives where the negatives live in dims `2..`
/// and the anchor/positive carry components in dims 0 and 1. Rotating the
/// positive within dims 0/1 changes only `sim(anchor, positive)`.
pub fn rotating_batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> impl Fn(f64) -> Tensor<f64> {
    let rest = |rng: &mut ChaCha8Rng| -> Vec<f64> { (2..d).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let (u0, u1) = (rest(rng), rest(rng));
    let negs: Vec<Vec<f64>> = (0..n).map(|_| rest(rng)).collect();
    let (a0, a1) = (rng.random_range(0.2..2.0), rng.random_range(0.2..2.0));
    move |theta: f64| {
        let mut rows = vec![a0, 0.0];
        rows.extend(&u0);
        rows.extend([a1 * theta.cos(), a1 * theta.sin()]);
        rows.extend(&u1);
        for v in &negs {
            rows.extend([0.0, 0.0]);
            rows.extend(v);
        }
        Tensor::from_vec(&[n + 2, d], rows)
    }
}
