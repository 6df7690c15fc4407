//! Embedding export for external visualization, with a silhouette score.

use std::fmt::Write as _;

use secl_autodiff::Scalar;
use thiserror::Error;

use crate::augment::{apply_transform, sample_view, AugmentRanges};
use crate::data::{DataError, Dataset};
use crate::model::ModelParams;
use crate::rng::{derive_seed, stream};
use crate::sampling::anatomical_centers;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("no subject has any foreground class")]
    NoForeground,
    #[error("cube edge {cube} does not fit extents {extents:?}")]
    Cube { cube: usize, extents: [usize; 3] },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingExport {
    /// `(class, embedding)` per cube.
    pub rows: Vec<(u8, Vec<f64>)>,
    pub silhouette: f64,
}

impl EmbeddingExport {
    pub fn to_csv(&self) -> String {
        let d = self.rows.first().map_or(0, |r| r.1.len());
        let mut s = String::from("class");
        for i in 0..d {
            let _ = write!(s, ",e{i}");
        }
        s.push('\n');
        for (c, v) in &self.rows {
            let _ = write!(s, "{c}");
            for x in v {
                let _ = write!(s, ",{x}");
            }
            s.push('\n');
        }
        let _ = writeln!(s, "# silhouette={}", self.silhouette);
        s
    }
}

/// `count` augmented cubes centred on ground-truth class centres of the
/// given subjects, cycling over (subject, foreground class), embedded by the
/// student encoder and projector.
pub fn export_embeddings<T: Scalar>(
    student: &ModelParams<T>,
    data: &Dataset,
    ids: &[String],
    count: usize,
    cube: usize,
    ranges: &AugmentRanges,
    seed: u64,
) -> Result<EmbeddingExport, EmbedError> {
    let classes = student.arch.classes;
    let mut sites = Vec::new();
    for id in ids {
        let s = data.get(id)?;
        let ext = s.image.extents;
        if ext.iter().any(|&e| e < cube) {
            return Err(EmbedError::Cube { cube, extents: ext });
        }
        for (c, center) in anatomical_centers(&s.label, classes).centers.into_iter().enumerate().skip(1) {
            if let Some(center) = center {
                let origin: [usize; 3] = std::array::from_fn(|a| center[a].saturating_sub(cube / 2).min(ext[a] - cube));
                sites.push((id, c as u8, origin));
            }
        }
    }
    if sites.is_empty() {
        return Err(EmbedError::NoForeground);
    }
    let run_seed = derive_seed(seed, &[stream::EMBED]);
    let rows: Vec<(u8, Vec<f64>)> = (0..count)
        .map(|i| {
            let (id, c, origin) = sites[i % sites.len()];
            let crop = data.get(id)?.image.crop(origin, [cube; 3]);
            let (view, _) = apply_transform(&crop, None, &sample_view(run_seed, i as u64, 0, ranges));
            Ok((c, student.embed(&view).into_iter().map(|v| v.as_f64()).collect()))
        })
        .collect::<Result<_, DataError>>()?;
    let normalized: Vec<Vec<f64>> = rows
        .iter()
        .map(|(_, v)| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter().map(|x| x / n).collect()
        })
        .collect();
    let labels: Vec<u8> = rows.iter().map(|r| r.0).collect();
    let silhouette = silhouette(&normalized, &labels);
    Ok(EmbeddingExport { rows, silhouette })
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean silhouette coefficient under Euclidean distance. Points alone in
/// their class score 0; with fewer than two classes the score is 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[u8]) -> f64 {
    assert_eq!(points.len(), labels.len(), "silhouette: one label per point");
    let mut classes: Vec<u8> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return 0.0;
    }
    let n = points.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut sum = vec![0.0; classes.len()];
        let mut cnt = vec![0usize; classes.len()];
        for j in 0..n {
            if i == j {
                continue;
            }
            let k = classes.binary_search(&labels[j]).unwrap();
            sum[k] += euclid(&points[i], &points[j]);
            cnt[k] += 1;
        }
        let own = classes.binary_search(&labels[i]).unwrap();
        if cnt[own] == 0 {
            continue;
        }
        let a = sum[own] / cnt[own] as f64;
        let b = (0..classes.len())
            .filter(|&k| k != own && cnt[k] > 0)
            .map(|k| sum[k] / cnt[k] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    total / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_clusters_score_near_one() {
        let pts = vec![vec![0.0, 0.0], vec![0.0, 0.1], vec![10.0, 0.0], vec![10.0, 0.1]];
        let s = silhouette(&pts, &[1, 1, 2, 2]);
        assert!(s > 0.98 && s <= 1.0);
    }

    #[test]
    fn swapped_labels_score_negative() {
        let pts = vec![vec![0.0, 0.0], vec![0.0, 0.1], vec![10.0, 0.0], vec![10.0, 0.1]];
        assert!(silhouette(&pts, &[1, 2, 1, 2]) < 0.0);
    }

    #[test]
    fn single_class_is_zero() {
        assert_eq!(silhouette(&[vec![0.0], vec![1.0]], &[3, 3]), 0.0);
    }
}
