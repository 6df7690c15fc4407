//! Random intensity shift, elastic deformation, flip, scale and rotation.
//!
//! The geometric part is applied as a backward map: each output voxel is
//! traced back through flip, elastic displacement, rotation and scale to a
//! source position, which is sampled trilinearly (image) or by nearest
//! neighbour (labels). Positions outside the volume read 0.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{voxel_count, voxel_index, Extents, LabelMap, Volume};
use crate::rng::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentRanges {
    /// Intensity shift drawn from `[-max, max]`.
    pub intensity_shift: f32,
    /// Control points per axis of the elastic grid.
    pub elastic_grid: usize,
    /// Standard deviation of control-point displacements, in voxels.
    pub elastic_sigma: f64,
    pub flip_prob: f64,
    pub scale: (f64, f64),
    /// Rotation angle drawn from `[-max, max]` degrees.
    pub rotation_deg: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self {
            intensity_shift: 0.1,
            elastic_grid: 4,
            elastic_sigma: 2.0,
            flip_prob: 0.5,
            scale: (0.9, 1.1),
            rotation_deg: 15.0,
        }
    }
}

impl AugmentRanges {
    pub fn identity() -> Self {
        Self {
            intensity_shift: 0.0,
            elastic_grid: 4,
            elastic_sigma: 0.0,
            flip_prob: 0.0,
            scale: (1.0, 1.0),
            rotation_deg: 0.0,
        }
    }

    /// Geometry fixed at identity; only the intensity shift varies.
    pub fn intensity_only(&self) -> Self {
        Self {
            intensity_shift: self.intensity_shift,
            ..Self::identity()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let (lo, hi) = self.scale;
        if !(lo > 0.0 && lo <= hi) {
            return Err(format!("scale range ({lo}, {hi}) invalid"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(format!("flip probability {} outside [0, 1]", self.flip_prob));
        }
        if self.elastic_grid < 2 {
            return Err("elastic grid needs at least 2 control points per axis".into());
        }
        if self.elastic_sigma < 0.0 || self.rotation_deg < 0.0 || self.intensity_shift < 0.0 {
            return Err("range magnitudes must be non-negative".into());
        }
        Ok(())
    }
}

/// A fully drawn augmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformSpec {
    pub intensity_shift: f32,
    pub elastic_grid: usize,
    /// `grid³` control-point displacements (z, y, x), z-major.
    pub elastic: Vec<[f64; 3]>,
    pub flips: [bool; 3],
    pub scale: f64,
    pub rotation_axis: usize,
    pub rotation_deg: f64,
    pub seed: u64,
}

impl TransformSpec {
    pub fn identity() -> Self {
        Self {
            intensity_shift: 0.0,
            elastic_grid: 2,
            elastic: vec![[0.0; 3]; 8],
            flips: [false; 3],
            scale: 1.0,
            rotation_axis: 0,
            rotation_deg: 0.0,
            seed: 0,
        }
    }

    pub fn is_geometric_identity(&self) -> bool {
        self.scale == 1.0
            && self.rotation_deg == 0.0
            && !self.flips.iter().any(|&f| f)
            && self.elastic.iter().all(|d| d.iter().all(|&v| v == 0.0))
    }
}

pub fn sample_transform(seed: u64, ranges: &AugmentRanges) -> TransformSpec {
    let mut rng = crate::rng::rng_for(seed, &[]);
    let g = ranges.elastic_grid;
    let intensity_shift = if ranges.intensity_shift > 0.0 {
        rng.random_range(-ranges.intensity_shift..=ranges.intensity_shift)
    } else {
        0.0
    };
    let normal = Normal::new(0.0, ranges.elastic_sigma).expect("non-negative sigma");
    let elastic = (0..g * g * g)
        .map(|_| {
            if ranges.elastic_sigma > 0.0 {
                std::array::from_fn(|_| normal.sample(&mut rng))
            } else {
                [0.0; 3]
            }
        })
        .collect();
    let flips = std::array::from_fn(|_| rng.random_bool(ranges.flip_prob));
    let (lo, hi) = ranges.scale;
    let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let rotation_axis = rng.random_range(0..3);
    let rotation_deg = if ranges.rotation_deg > 0.0 {
        rng.random_range(-ranges.rotation_deg..=ranges.rotation_deg)
    } else {
        0.0
    };
    TransformSpec {
        intensity_shift,
        elastic_grid: g,
        elastic,
        flips,
        scale,
        rotation_axis,
        rotation_deg,
        seed,
    }
}

/// Spec for view `view` of sample `sample` under a run seed.
pub fn sample_view(run_seed: u64, sample: u64, view: u64, ranges: &AugmentRanges) -> TransformSpec {
    sample_transform(derive_seed(run_seed, &[sample, view]), ranges)
}

fn elastic_displacement(spec: &TransformSpec, ext: Extents, p: [f64; 3]) -> [f64; 3] {
    let g = spec.elastic_grid;
    let mut base = [0usize; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let step = (ext[a].max(2) - 1) as f64 / (g - 1) as f64;
        let u = (p[a] / step).clamp(0.0, (g - 1) as f64);
        let i = (u.floor() as usize).min(g - 2);
        base[a] = i;
        frac[a] = u - i as f64;
    }
    let mut out = [0.0; 3];
    for corner in 0..8 {
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let bit = (corner >> (2 - a)) & 1;
            idx[a] = base[a] + bit;
            w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
        }
        let d = spec.elastic[(idx[0] * g + idx[1]) * g + idx[2]];
        for a in 0..3 {
            out[a] += w * d[a];
        }
    }
    out
}

/// Source position for every output voxel, z-major.
pub fn source_positions(spec: &TransformSpec, ext: Extents) -> Vec<[f64; 3]> {
    let c: [f64; 3] = std::array::from_fn(|a| (ext[a] as f64 - 1.0) / 2.0);
    let theta = -spec.rotation_deg.to_radians();
    let (s, co) = theta.sin_cos();
    // The two axes spanning the rotation plane.
    let (p0, p1) = match spec.rotation_axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let mut out = Vec::with_capacity(voxel_count(ext));
    for z in 0..ext[0] {
        for y in 0..ext[1] {
            for x in 0..ext[2] {
                let mut p = [z as f64, y as f64, x as f64];
                for a in 0..3 {
                    if spec.flips[a] {
                        p[a] = (ext[a] - 1) as f64 - p[a];
                    }
                }
                let d = elastic_displacement(spec, ext, p);
                for a in 0..3 {
                    p[a] -= d[a];
                }
                let (u, v) = (p[p0] - c[p0], p[p1] - c[p1]);
                p[p0] = c[p0] + co * u - s * v;
                p[p1] = c[p1] + s * u + co * v;
                for a in 0..3 {
                    p[a] = c[a] + (p[a] - c[a]) / spec.scale;
                }
                out.push(p);
            }
        }
    }
    out
}

/// Trilinear sample; corners outside the volume read `fill`.
pub fn trilinear(data: &[f32], ext: Extents, p: [f64; 3], fill: f32) -> f32 {
    let f: [f64; 3] = std::array::from_fn(|a| p[a].floor());
    let t: [f64; 3] = std::array::from_fn(|a| p[a] - f[a]);
    let mut acc = 0.0f64;
    for corner in 0..8 {
        let mut w = 1.0;
        let mut idx = [0i64; 3];
        for a in 0..3 {
            let bit = (corner >> (2 - a)) & 1;
            idx[a] = f[a] as i64 + bit as i64;
            w *= if bit == 1 { t[a] } else { 1.0 - t[a] };
        }
        if w == 0.0 {
            continue;
        }
        let inside = (0..3).all(|a| idx[a] >= 0 && (idx[a] as usize) < ext[a]);
        let v = if inside {
            data[voxel_index(ext, idx[0] as usize, idx[1] as usize, idx[2] as usize)]
        } else {
            fill
        };
        acc += w * v as f64;
    }
    acc as f32
}

/// Nearest-neighbour sample; positions outside the volume read `fill`.
pub fn nearest<V: Copy>(data: &[V], ext: Extents, p: [f64; 3], fill: V) -> V {
    let r: [f64; 3] = std::array::from_fn(|a| p[a].round());
    if (0..3).all(|a| r[a] >= 0.0 && (r[a] as usize) < ext[a]) {
        data[voxel_index(ext, r[0] as usize, r[1] as usize, r[2] as usize)]
    } else {
        fill
    }
}

/// Resamples one channel of floats with the spec's geometry (no intensity shift).
pub fn resample_channel(data: &[f32], ext: Extents, spec: &TransformSpec, fill: f32) -> Vec<f32> {
    if spec.is_geometric_identity() {
        return data.to_vec();
    }
    source_positions(spec, ext)
        .into_iter()
        .map(|p| trilinear(data, ext, p, fill))
        .collect()
}

pub fn apply_transform(volume: &Volume, label: Option<&LabelMap>, spec: &TransformSpec) -> (Volume, Option<LabelMap>) {
    let ext = volume.extents;
    if let Some(l) = label {
        assert_eq!(l.extents, ext, "apply_transform: label extents differ from volume");
    }
    let (img, lab) = if spec.is_geometric_identity() {
        (volume.data.clone(), label.map(|l| l.data.clone()))
    } else {
        let src = source_positions(spec, ext);
        let img = src.iter().map(|&p| trilinear(&volume.data, ext, p, 0.0)).collect();
        let lab = label.map(|l| src.iter().map(|&p| nearest(&l.data, ext, p, 0u8)).collect());
        (img, lab)
    };
    let shift = spec.intensity_shift;
    let img: Vec<f32> = if shift != 0.0 {
        img.into_iter().map(|v| v + shift).collect()
    } else {
        img
    };
    (
        Volume { extents: ext, data: img },
        label.zip(lab).map(|(l, data)| LabelMap {
            extents: ext,
            classes: l.classes,
            data,
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(ext: Extents) -> Volume {
        Volume::new(ext, (0..voxel_count(ext)).map(|i| (i % 17) as f32 / 17.0).collect()).unwrap()
    }

    #[test]
    fn same_seed_same_spec() {
        let r = AugmentRanges::default();
        assert_eq!(sample_transform(3, &r), sample_transform(3, &r));
        assert_ne!(sample_transform(3, &r), sample_transform(4, &r));
    }

    #[test]
    fn collapsed_ranges_give_identity() {
        let spec = sample_transform(9, &AugmentRanges::identity());
        assert!(spec.is_geometric_identity());
        assert_eq!(spec.intensity_shift, 0.0);
        let v = ramp([5, 6, 7]);
        let l = LabelMap::new([5, 6, 7], 3, (0..210).map(|i| (i % 3) as u8).collect()).unwrap();
        let (v2, l2) = apply_transform(&v, Some(&l), &spec);
        assert_eq!(v2, v);
        assert_eq!(l2.unwrap(), l);
    }

    #[test]
    fn double_flip_is_identity() {
        let v = ramp([4, 5, 6]);
        let mut spec = TransformSpec::identity();
        spec.flips = [false, true, false];
        let (once, _) = apply_transform(&v, None, &spec);
        assert_ne!(once, v);
        let (twice, _) = apply_transform(&once, None, &spec);
        assert_eq!(twice, v);
    }

    #[test]
    fn shift_moves_mean() {
        let v = ramp([6, 6, 6]);
        let mut spec = TransformSpec::identity();
        spec.intensity_shift = 0.07;
        let (out, _) = apply_transform(&v, None, &spec);
        assert!((out.mean() - v.mean() - 0.07).abs() < 1e-5);
    }

    #[test]
    fn scales_stay_in_range() {
        let r = AugmentRanges::default();
        for s in 0..1000 {
            let t = sample_transform(s, &r);
            assert!((0.9..=1.1).contains(&t.scale));
            assert!(t.rotation_deg.abs() <= 15.0);
            assert!(t.intensity_shift.abs() <= 0.1);
        }
    }

    #[test]
    fn trilinear_at_lattice_points_is_exact() {
        let v = ramp([3, 4, 5]);
        for z in 0..3 {
            for y in 0..4 {
                for x in 0..5 {
                    let p = [z as f64, y as f64, x as f64];
                    assert_eq!(trilinear(&v.data, v.extents, p, 0.0), v.at(z, y, x));
                }
            }
        }
    }
}
