//! Dice, Jaccard and Hausdorff distance with weighted aggregation.

use std::fmt::Write as _;

use thiserror::Error;

use crate::data::{Extents, LabelMap};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("Hausdorff distance undefined: empty foreground")]
    EmptyForeground,
}

fn counts(pred: &LabelMap, gt: &LabelMap, class: u8) -> (usize, usize, usize) {
    assert_eq!(pred.extents, gt.extents, "metric: extents differ");
    let (mut p, mut g, mut both) = (0, 0, 0);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        let (ia, ib) = (a == class, b == class);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    (p, g, both)
}

/// `2|P∩G| / (|P|+|G|)`, 1 when both are empty.
pub fn dice(pred: &LabelMap, gt: &LabelMap, class: u8) -> f64 {
    let (p, g, both) = counts(pred, gt, class);
    if p + g == 0 {
        1.0
    } else {
        2.0 * both as f64 / (p + g) as f64
    }
}

/// `|P∩G| / |P∪G|`, 1 when both are empty.
pub fn jaccard(pred: &LabelMap, gt: &LabelMap, class: u8) -> f64 {
    let (p, g, both) = counts(pred, gt, class);
    let union = p + g - both;
    if union == 0 {
        1.0
    } else {
        both as f64 / union as f64
    }
}

pub fn class_mask(labels: &LabelMap, class: u8) -> Vec<bool> {
    labels.data.iter().map(|&v| v == class).collect()
}

/// Foreground voxels with at least one background 6-neighbour; neighbours
/// outside the volume count as background.
pub fn boundary(mask: &[bool], ext: Extents) -> Vec<bool> {
    let [d, h, w] = ext;
    let mut out = vec![false; mask.len()];
    let at = |z: usize, y: usize, x: usize| mask[(z * h + y) * w + x];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !at(z, y, x) {
                    continue;
                }
                let edge = z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w;
                out[(z * h + y) * w + x] = edge
                    || !at(z - 1, y, x)
                    || !at(z + 1, y, x)
                    || !at(z, y - 1, x)
                    || !at(z, y + 1, x)
                    || !at(z, y, x - 1)
                    || !at(z, y, x + 1);
            }
        }
    }
    out
}

const FAR: f64 = f64::INFINITY;

/// One-dimensional squared distance transform (lower envelope of parabolas)
/// over `f`, written into `out`. Infinite entries are not sites.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut Vec<usize>, zs: &mut Vec<f64>) {
    v.clear();
    zs.clear();
    for (q, &fq) in f.iter().enumerate() {
        if fq == FAR {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    zs.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = ((fq + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
                    if s <= *zs.last().unwrap() {
                        v.pop();
                        zs.pop();
                    } else {
                        v.push(q);
                        zs.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.fill(FAR);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && zs[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *o = dq * dq + f[p];
    }
}

/// Exact squared Euclidean distance from every voxel to the nearest site.
pub fn squared_distance_map(sites: &[bool], ext: Extents) -> Vec<f64> {
    let [d, h, w] = ext;
    let mut dist: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { FAR }).collect();
    let (mut v, mut zs) = (Vec::new(), Vec::new());
    let n = d.max(h).max(w);
    let (mut line, mut res) = (vec![0.0; n], vec![0.0; n]);
    // x, then y, then z.
    let axes: [(usize, usize, Box<dyn Fn(usize, usize) -> usize>); 3] = [
        (w, d * h, Box::new(move |o, i| o * w + i)),
        (h, d * w, Box::new(move |o, i| ((o / w) * h + i) * w + o % w)),
        (d, h * w, Box::new(move |o, i| i * h * w + o)),
    ];
    for (len, lines, index) in axes.iter() {
        for o in 0..*lines {
            for i in 0..*len {
                line[i] = dist[index(o, i)];
            }
            edt_1d(&line[..*len], &mut res[..*len], &mut v, &mut zs);
            for i in 0..*len {
                dist[index(o, i)] = res[i];
            }
        }
    }
    dist
}

/// Symmetric Hausdorff distance between the boundaries of two masks.
pub fn hausdorff_masks(a: &[bool], b: &[bool], ext: Extents) -> Result<f64, MetricError> {
    if !a.iter().any(|&v| v) || !b.iter().any(|&v| v) {
        return Err(MetricError::EmptyForeground);
    }
    let (ba, bb) = (boundary(a, ext), boundary(b, ext));
    let (da, db) = (squared_distance_map(&ba, ext), squared_distance_map(&bb, ext));
    let directed = |from: &[bool], to_dist: &[f64]| {
        from.iter()
            .zip(to_dist)
            .filter(|(&f, _)| f)
            .map(|(_, &d)| d)
            .fold(0.0f64, f64::max)
    };
    Ok(directed(&ba, &db).max(directed(&bb, &da)).sqrt())
}

pub fn hausdorff(pred: &LabelMap, gt: &LabelMap, class: u8) -> Result<f64, MetricError> {
    assert_eq!(pred.extents, gt.extents, "hausdorff: extents differ");
    hausdorff_masks(&class_mask(pred, class), &class_mask(gt, class), gt.extents)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub subject: String,
    pub class: u8,
    pub dice: f64,
    pub jaccard: f64,
    /// `None` where either foreground is empty.
    pub hd: Option<f64>,
    pub gt_voxels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub dice: f64,
    pub jaccard: f64,
    pub hd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
    pub aggregate: AggregateRow,
}

/// Rows for every foreground class of one subject.
pub fn subject_rows(subject: &str, pred: &LabelMap, gt: &LabelMap) -> Vec<MetricRow> {
    (1..gt.classes as u8)
        .map(|c| MetricRow {
            subject: subject.to_string(),
            class: c,
            dice: dice(pred, gt, c),
            jaccard: jaccard(pred, gt, c),
            hd: hausdorff(pred, gt, c).ok(),
            gt_voxels: gt.count(c),
        })
        .collect()
}

/// Dice/Jaccard weighted by ground-truth voxel counts; HD is the maximum over
/// subjects of each subject's mean HD over classes with a defined value.
pub fn aggregate(rows: &[MetricRow]) -> AggregateRow {
    let total: usize = rows.iter().map(|r| r.gt_voxels).sum();
    let weighted = |f: fn(&MetricRow) -> f64| {
        if total == 0 {
            rows.iter().map(f).sum::<f64>() / rows.len().max(1) as f64
        } else {
            rows.iter().map(|r| f(r) * r.gt_voxels as f64).sum::<f64>() / total as f64
        }
    };
    let mut subjects: Vec<&str> = rows.iter().map(|r| r.subject.as_str()).collect();
    subjects.dedup();
    let hd = subjects
        .iter()
        .filter_map(|s| {
            let hds: Vec<f64> = rows.iter().filter(|r| r.subject == *s).filter_map(|r| r.hd).collect();
            (!hds.is_empty()).then(|| hds.iter().sum::<f64>() / hds.len() as f64)
        })
        .reduce(f64::max);
    AggregateRow {
        dice: weighted(|r| r.dice),
        jaccard: weighted(|r| r.jaccard),
        hd,
    }
}

impl MetricTable {
    pub fn from_rows(rows: Vec<MetricRow>) -> Self {
        let aggregate = aggregate(&rows);
        Self { rows, aggregate }
    }

    pub fn to_csv(&self) -> String {
        let fmt_hd = |h: Option<f64>| h.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
        let mut s = String::from("subject,class,dice,jaccard,hd\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{}",
                r.subject,
                r.class,
                r.dice,
                r.jaccard,
                fmt_hd(r.hd)
            );
        }
        let a = &self.aggregate;
        let _ = writeln!(s, "aggregate,all,{:.6},{:.6},{}", a.dice, a.jaccard, fmt_hd(a.hd));
        s
    }
}
