//! Contrastive batch construction: anatomical-aware cubes around pseudo-label
//! class centres (AACS) and region-aware z-partitions across subjects (RACS).

use rand::Rng;
use secl_autodiff::Scalar;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{apply_transform, sample_view, AugmentRanges};
use crate::data::{Extents, LabelMap, Volume};
use crate::losses::PairSets;
use crate::model::ModelParams;
use crate::rng::rng_for;

#[derive(Debug, Error, PartialEq)]
pub enum SamplingError {
    #[error("pseudo-labels contain no foreground voxel")]
    DegeneratePseudoLabels,
    #[error("invalid sampling configuration: {0}")]
    InvalidConfig(String),
}

/// Argmax segmentation of `volume` by the student.
pub fn compute_pseudo_labels<T: Scalar>(student: &ModelParams<T>, volume: &Volume) -> LabelMap {
    student.predict(volume)
}

/// Rounded centre of mass of every class; `None` for absent classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnatomicalCenters {
    pub centers: Vec<Option<[usize; 3]>>,
}

pub fn anatomical_centers(labels: &LabelMap, classes: usize) -> AnatomicalCenters {
    let mut sums = vec![[0u64; 3]; classes];
    let mut counts = vec![0u64; classes];
    let [d, h, w] = labels.extents;
    let mut i = 0;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let c = labels.data[i] as usize;
                i += 1;
                assert!(c < classes, "anatomical_centers: label {c} not below {classes}");
                counts[c] += 1;
                sums[c][0] += z as u64;
                sums[c][1] += y as u64;
                sums[c][2] += x as u64;
            }
        }
    }
    let centers = (0..classes)
        .map(|c| {
            (counts[c] > 0).then(|| std::array::from_fn(|a| (sums[c][a] as f64 / counts[c] as f64).round() as usize))
        })
        .collect();
    AnatomicalCenters { centers }
}

/// Views to embed plus their pair structure.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch {
    pub views: Vec<Volume>,
    /// `true` where the teacher embeds the view.
    pub teacher: Vec<bool>,
    pub pairs: PairSets,
    /// Class of the cube centre (AACS) or partition index (RACS), per view.
    pub tags: Vec<usize>,
}

impl ContrastiveBatch {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AacsConfig {
    /// Cubes per image.
    pub k: usize,
    pub cube: usize,
    pub classes: usize,
}

impl Default for AacsConfig {
    fn default() -> Self {
        Self { k: 8, cube: 12, classes: 4 }
    }
}

impl AacsConfig {
    pub fn validate(&self, extents: Extents) -> Result<(), SamplingError> {
        if self.k < self.classes {
            return Err(SamplingError::InvalidConfig(format!(
                "K = {} is below the class count {}",
                self.k, self.classes
            )));
        }
        if self.cube == 0 || extents.iter().any(|&e| e < self.cube) {
            return Err(SamplingError::InvalidConfig(format!(
                "cube edge {} does not fit {extents:?}",
                self.cube
            )));
        }
        Ok(())
    }
}

fn cube_origin(center: [usize; 3], edge: usize, ext: Extents) -> Extents {
    std::array::from_fn(|a| center[a].saturating_sub(edge / 2).min(ext[a] - edge))
}

/// Cube centres for one image: one per present class, the rest at random
/// foreground voxels. Returns `(centre, tag)` pairs.
pub fn aacs_centers(
    pseudo: &LabelMap,
    cfg: &AacsConfig,
    rng: &mut impl Rng,
) -> Result<Vec<([usize; 3], usize)>, SamplingError> {
    let foreground: Vec<usize> = (0..pseudo.data.len()).filter(|&i| pseudo.data[i] != 0).collect();
    if foreground.is_empty() {
        return Err(SamplingError::DegeneratePseudoLabels);
    }
    let [_, h, w] = pseudo.extents;
    let mut out: Vec<([usize; 3], usize)> = anatomical_centers(pseudo, cfg.classes)
        .centers
        .into_iter()
        .enumerate()
        .filter_map(|(c, p)| p.map(|p| (p, c)))
        .collect();
    while out.len() < cfg.k {
        let i = foreground[rng.random_range(0..foreground.len())];
        out.push(([i / (h * w), (i / w) % h, i % w], pseudo.data[i] as usize));
    }
    Ok(out)
}

/// AACS batch over one or more images: `K` cubes per image, two views per
/// cube. Views `0..n` are student views, `n..2n` the matching teacher views.
pub fn aacs_batch(
    volumes: &[&Volume],
    pseudo: &[&LabelMap],
    cfg: &AacsConfig,
    ranges: &AugmentRanges,
    seed: u64,
) -> Result<ContrastiveBatch, SamplingError> {
    assert_eq!(volumes.len(), pseudo.len(), "aacs_batch: one pseudo-label map per volume");
    assert!(!volumes.is_empty(), "aacs_batch: no volumes");
    let mut rng = rng_for(seed, &[]);
    let mut cubes = Vec::new();
    let mut tags = Vec::new();
    for (v, l) in volumes.iter().zip(pseudo) {
        assert_eq!(v.extents, l.extents, "aacs_batch: volume and pseudo-label extents differ");
        cfg.validate(v.extents)?;
        for (center, tag) in aacs_centers(l, cfg, &mut rng)? {
            let origin = cube_origin(center, cfg.cube, v.extents);
            cubes.push(v.crop(origin, [cfg.cube; 3]));
            tags.push(tag);
        }
    }
    let n = cubes.len();
    let mut views = Vec::with_capacity(2 * n);
    for side in 0..2u64 {
        for (i, c) in cubes.iter().enumerate() {
            views.push(apply_transform(c, None, &sample_view(seed, i as u64, side, ranges)).0);
        }
    }
    let mut positives = Vec::with_capacity(2 * n);
    let mut negatives = Vec::with_capacity(2 * n);
    for a in 0..2 * n {
        let p = (a + n) % (2 * n);
        positives.push(vec![p]);
        negatives.push((0..2 * n).filter(|&j| j != a && j != p).collect());
    }
    Ok(ContrastiveBatch {
        views,
        teacher: (0..2 * n).map(|a| a >= n).collect(),
        pairs: PairSets { positives, negatives },
        tags: tags.iter().chain(&tags).copied().collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RacsConfig {
    /// Partitions along z.
    pub partitions: usize,
    pub subjects: usize,
}

impl Default for RacsConfig {
    fn default() -> Self {
        Self { partitions: 4, subjects: 2 }
    }
}

impl RacsConfig {
    pub fn validate(&self, extents: Extents) -> Result<(), SamplingError> {
        if self.partitions < 2 || self.subjects < 2 {
            return Err(SamplingError::InvalidConfig(format!(
                "need S >= 2 and at least 2 subjects, got S = {} and {} subjects",
                self.partitions, self.subjects
            )));
        }
        if extents[0] % self.partitions != 0 {
            return Err(SamplingError::InvalidConfig(format!(
                "depth {} not divisible by S = {}",
                extents[0], self.partitions
            )));
        }
        Ok(())
    }
}

/// RACS batch: every subject split into `S` z-slabs, two views per slab.
/// Views are ordered (partition, subject, side); two views are positives iff
/// they share the partition.
pub fn racs_batch(
    volumes: &[&Volume],
    cfg: &RacsConfig,
    ranges: &AugmentRanges,
    seed: u64,
) -> Result<ContrastiveBatch, SamplingError> {
    assert!(!volumes.is_empty(), "racs_batch: no volumes");
    let ext = volumes[0].extents;
    assert!(
        volumes.iter().all(|v| v.extents == ext),
        "racs_batch: subjects have misaligned extents"
    );
    if volumes.len() != cfg.subjects {
        return Err(SamplingError::InvalidConfig(format!(
            "{} subjects given, {} configured",
            volumes.len(),
            cfg.subjects
        )));
    }
    cfg.validate(ext)?;
    let s = cfg.partitions;
    let depth = ext[0] / s;
    let per = 2 * volumes.len();
    let mut views = Vec::with_capacity(s * per);
    let mut teacher = Vec::with_capacity(s * per);
    let mut tags = Vec::with_capacity(s * per);
    for part in 0..s {
        for (i, v) in volumes.iter().enumerate() {
            let slab = v.crop([part * depth, 0, 0], [depth, ext[1], ext[2]]);
            for side in 0..2 {
                let id = (part * volumes.len() + i) as u64;
                views.push(apply_transform(&slab, None, &sample_view(seed, id, side, ranges)).0);
                teacher.push(side == 1);
                tags.push(part);
            }
        }
    }
    let n = views.len();
    let positives = (0..n)
        .map(|a| (0..n).filter(|&j| j != a && tags[j] == tags[a]).collect())
        .collect();
    let negatives = (0..n).map(|a| (0..n).filter(|&j| tags[j] != tags[a]).collect()).collect();
    Ok(ContrastiveBatch {
        views,
        teacher,
        pairs: PairSets { positives, negatives },
        tags,
    })
}
