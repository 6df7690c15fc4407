//! Volumes, label maps, the synthetic phantom generator, raw volume files and
//! dataset splits.
//!
//! On disk each subject lives in `<root>/<id>/` as `image.raw` + `image.json`
//! and `label.raw` + `label.json`. Payloads are little-endian, z-major
//! (x fastest); the JSON sidecar carries extents, dtype and class count.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{rng_for, stream};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },

    #[error("{path}: corrupt header: {reason}")]
    CorruptHeader { path: PathBuf, reason: String },

    #[error("{path}: truncated payload, expected {expected} bytes, found {actual}")]
    Truncated { path: PathBuf, expected: usize, actual: usize },

    #[error("{context}: extents {found:?} do not match {expected:?}")]
    ExtentMismatch { context: String, expected: Vec<usize>, found: Vec<usize> },

    #[error("label value {value} is not below class count {classes}")]
    InvalidLabel { value: u8, classes: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("split needs {needed} subjects but only {available} exist")]
    InsufficientSubjects { needed: usize, available: usize },

    #[error("unknown subject {0}")]
    UnknownSubject(String),

    #[error("{path}: malformed split manifest: {reason}")]
    Manifest { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Spatial extents `[depth, height, width]` (z, y, x).
pub type Extents = [usize; 3];

pub fn voxel_count(e: Extents) -> usize {
    e[0] * e[1] * e[2]
}

#[inline]
pub fn voxel_index(e: Extents, z: usize, y: usize, x: usize) -> usize {
    (z * e[1] + y) * e[2] + x
}

/// A single-channel 3-D image.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub extents: Extents,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(extents: Extents, data: Vec<f32>) -> Result<Self> {
        if data.len() != voxel_count(extents) || extents.contains(&0) {
            return Err(DataError::ExtentMismatch {
                context: "volume data".into(),
                expected: extents.to_vec(),
                found: vec![data.len()],
            });
        }
        Ok(Self { extents, data })
    }

    pub fn zeros(extents: Extents) -> Self {
        Self {
            extents,
            data: vec![0.0; voxel_count(extents)],
        }
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[voxel_index(self.extents, z, y, x)]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Sub-block starting at `origin` with the given extents.
    pub fn crop(&self, origin: Extents, size: Extents) -> Volume {
        Volume {
            extents: size,
            data: crop_slice(&self.data, self.extents, origin, size),
        }
    }
}

/// Per-voxel class assignment in `[0, classes)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub extents: Extents,
    pub classes: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(extents: Extents, classes: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != voxel_count(extents) || extents.contains(&0) {
            return Err(DataError::ExtentMismatch {
                context: "label data".into(),
                expected: extents.to_vec(),
                found: vec![data.len()],
            });
        }
        if let Some(&bad) = data.iter().find(|&&v| v as usize >= classes) {
            return Err(DataError::InvalidLabel { value: bad, classes });
        }
        Ok(Self { extents, classes, data })
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> u8 {
        self.data[voxel_index(self.extents, z, y, x)]
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }

    pub fn crop(&self, origin: Extents, size: Extents) -> LabelMap {
        LabelMap {
            extents: size,
            classes: self.classes,
            data: crop_slice(&self.data, self.extents, origin, size),
        }
    }
}

fn crop_slice<T: Copy>(data: &[T], ext: Extents, origin: Extents, size: Extents) -> Vec<T> {
    assert!(
        (0..3).all(|a| origin[a] + size[a] <= ext[a]),
        "crop {origin:?}+{size:?} outside {ext:?}"
    );
    let mut out = Vec::with_capacity(voxel_count(size));
    for z in 0..size[0] {
        for y in 0..size[1] {
            let start = voxel_index(ext, origin[0] + z, origin[1] + y, origin[2]);
            out.extend_from_slice(&data[start..start + size[2]]);
        }
    }
    out
}

// ── phantoms ────────────────────────────────────────────────────────────────

/// Parameters of the synthetic phantom family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub extents: Extents,
    /// Background plus `classes - 1` ellipsoids.
    pub classes: usize,
    /// Base intensity per class, background first.
    pub base_intensity: Vec<f32>,
    /// Per-axis bound on the displacement of each structure centre, in voxels.
    pub jitter: f64,
    /// Relative bound on per-subject radius changes.
    pub radius_jitter: f64,
    /// Bound on the per-subject global intensity offset.
    pub intensity_jitter: f32,
    /// Per-voxel Gaussian noise.
    pub noise_sigma: f32,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self::with_classes([32, 32, 32], 4)
    }
}

impl PhantomConfig {
    /// Defaults for `classes` classes; the last foreground class is the
    /// low-contrast one.
    pub fn with_classes(extents: Extents, classes: usize) -> Self {
        let fg = classes.saturating_sub(1).max(1);
        let mut base = vec![0.1f32];
        for c in 0..fg {
            if c + 1 == fg && fg > 1 {
                base.push(0.3);
            } else {
                base.push(0.9 - 0.3 * c as f32 / fg as f32);
            }
        }
        Self {
            extents,
            classes,
            base_intensity: base,
            jitter: 1.5,
            radius_jitter: 0.15,
            intensity_jitter: 0.1,
            noise_sigma: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::InvalidConfig(m));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.base_intensity.len() != self.classes {
            return bad(format!(
                "{} base intensities for {} classes",
                self.base_intensity.len(),
                self.classes
            ));
        }
        if self.extents.iter().any(|&e| e < 8) {
            return bad(format!("extents {:?} too small", self.extents));
        }
        // Structures must stay inside their home z band.
        let band = self.extents[0] as f64 / self.classes as f64;
        if self.jitter + self.radii(1)[0] * (1.0 + self.radius_jitter) > band {
            return bad(format!("jitter {} lets structures leave their z band", self.jitter));
        }
        Ok(())
    }

    /// Canonical centre of foreground class `c` (z, y, x).
    pub fn canonical_center(&self, c: usize) -> [f64; 3] {
        let [d, h, w] = self.extents.map(|e| e as f64);
        let t = c as f64 / self.classes as f64;
        let lateral = if c % 2 == 1 { 0.38 } else { 0.62 };
        let golden = (c as f64 * 0.618_034).fract();
        [d * t, h * lateral, w * (0.35 + 0.3 * golden)]
    }

    /// Canonical semi-axes (z, y, x) of every foreground structure.
    pub fn radii(&self, _c: usize) -> [f64; 3] {
        let [d, h, w] = self.extents.map(|e| e as f64);
        [0.42 * d / self.classes as f64, 0.17 * h, 0.17 * w]
    }

    /// Upper bound on the centre-of-mass distance of one class between any two subjects.
    pub fn alignment_bound(&self) -> f64 {
        // Each centre moves at most `jitter` per axis; voxelization adds under a voxel.
        2.0 * self.jitter * 3f64.sqrt() + 1.0
    }
}

/// Generates one subject. Deterministic in `(seed, cfg)`.
pub fn generate_phantom(seed: u64, cfg: &PhantomConfig) -> Result<(Volume, LabelMap)> {
    cfg.validate()?;
    let mut rng = rng_for(seed, &[stream::PHANTOM]);
    let ext = cfg.extents;
    let mut labels = vec![0u8; voxel_count(ext)];

    for c in 1..cfg.classes {
        let canon = cfg.canonical_center(c);
        let center: [f64; 3] = std::array::from_fn(|a| canon[a] + rng.random_range(-cfg.jitter..=cfg.jitter));
        let base = cfg.radii(c);
        let radii: [f64; 3] =
            std::array::from_fn(|a| base[a] * (1.0 + rng.random_range(-cfg.radius_jitter..=cfg.radius_jitter)));
        // Random in-plane orientation keeps each structure inside its z band.
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (s, co) = theta.sin_cos();
        let lo: [usize; 3] = std::array::from_fn(|a| {
            let r = radii.iter().cloned().fold(0.0, f64::max);
            (center[a] - r - 1.0).floor().max(0.0) as usize
        });
        let hi: [usize; 3] = std::array::from_fn(|a| {
            let r = radii.iter().cloned().fold(0.0, f64::max);
            ((center[a] + r + 1.0).ceil() as usize).min(ext[a] - 1)
        });
        for z in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for x in lo[2]..=hi[2] {
                    let dz = z as f64 - center[0];
                    let dy = y as f64 - center[1];
                    let dx = x as f64 - center[2];
                    let u = co * dy + s * dx;
                    let v = -s * dy + co * dx;
                    let q = (dz / radii[0]).powi(2) + (u / radii[1]).powi(2) + (v / radii[2]).powi(2);
                    if q <= 1.0 {
                        labels[voxel_index(ext, z, y, x)] = c as u8;
                    }
                }
            }
        }
    }

    let offset = if cfg.intensity_jitter > 0.0 {
        rng.random_range(-cfg.intensity_jitter..=cfg.intensity_jitter)
    } else {
        0.0
    };
    let noise = Normal::new(0.0f32, cfg.noise_sigma.max(0.0))
        .map_err(|e| DataError::InvalidConfig(format!("noise sigma: {e}")))?;
    let data = labels
        .iter()
        .map(|&l| cfg.base_intensity[l as usize] + offset + noise.sample(&mut rng))
        .collect();

    Ok((
        Volume { extents: ext, data },
        LabelMap {
            extents: ext,
            classes: cfg.classes,
            data: labels,
        },
    ))
}

// ── raw volume files ────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    extents: Vec<usize>,
    dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    classes: Option<usize>,
    order: String,
}

/// Something storable as a raw payload plus JSON sidecar.
pub trait RawVolume: Sized {
    const DTYPE: &'static str;
    const ELEM_BYTES: usize;

    fn extents(&self) -> Extents;
    fn classes(&self) -> Option<usize>;
    fn encode(&self) -> Vec<u8>;
    fn decode(extents: Extents, classes: Option<usize>, bytes: &[u8]) -> Result<Self>;
}

impl RawVolume for Volume {
    const DTYPE: &'static str = "f32";
    const ELEM_BYTES: usize = 4;

    fn extents(&self) -> Extents {
        self.extents
    }

    fn classes(&self) -> Option<usize> {
        None
    }

    fn encode(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn decode(extents: Extents, _classes: Option<usize>, bytes: &[u8]) -> Result<Self> {
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Volume::new(extents, data)
    }
}

impl RawVolume for LabelMap {
    const DTYPE: &'static str = "u8";
    const ELEM_BYTES: usize = 1;

    fn extents(&self) -> Extents {
        self.extents
    }

    fn classes(&self) -> Option<usize> {
        Some(self.classes)
    }

    fn encode(&self) -> Vec<u8> {
        self.data.clone()
    }

    fn decode(extents: Extents, classes: Option<usize>, bytes: &[u8]) -> Result<Self> {
        let classes = classes.unwrap_or(256);
        LabelMap::new(extents, classes, bytes.to_vec())
    }
}

/// Sidecar path for a raw payload path (`image.raw` → `image.json`).
pub fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("json")
}

pub fn write_volume<V: RawVolume>(raw_path: &Path, v: &V) -> Result<()> {
    let header = Header {
        extents: v.extents().to_vec(),
        dtype: V::DTYPE.into(),
        classes: v.classes(),
        order: "z-major".into(),
    };
    let json = serde_json::to_string_pretty(&header).expect("header serializes");
    let side = sidecar_path(raw_path);
    fs::write(&side, json).map_err(io_err(&side))?;
    fs::write(raw_path, v.encode()).map_err(io_err(raw_path))
}

pub fn read_volume<V: RawVolume>(raw_path: &Path) -> Result<V> {
    let side = sidecar_path(raw_path);
    let text = fs::read_to_string(&side).map_err(io_err(&side))?;
    let corrupt = |reason: String| DataError::CorruptHeader {
        path: side.clone(),
        reason,
    };
    let header: Header = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
    if header.dtype != V::DTYPE {
        return Err(corrupt(format!("dtype {} where {} expected", header.dtype, V::DTYPE)));
    }
    if header.order != "z-major" {
        return Err(corrupt(format!("unsupported order {}", header.order)));
    }
    let extents: Extents = header
        .extents
        .as_slice()
        .try_into()
        .map_err(|_| corrupt(format!("expected 3 extents, got {:?}", header.extents)))?;
    if extents.contains(&0) {
        return Err(corrupt(format!("zero extent in {extents:?}")));
    }
    let bytes = fs::read(raw_path).map_err(io_err(raw_path))?;
    let expected = voxel_count(extents) * V::ELEM_BYTES;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            path: raw_path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(DataError::ExtentMismatch {
            context: format!("{} payload", raw_path.display()),
            expected: extents.to_vec(),
            found: vec![bytes.len() / V::ELEM_BYTES],
        });
    }
    V::decode(extents, header.classes, &bytes)
}

// ── splits and datasets ─────────────────────────────────────────────────────

/// Disjoint labeled / unlabeled / test subject ids.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct DatasetSplit {
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    pub test: Vec<String>,
}

pub fn subject_id(index: usize) -> String {
    format!("subject_{index:03}")
}

/// Deterministic disjoint split of subjects `0..num_subjects`.
pub fn make_split(num_subjects: usize, labeled: usize, unlabeled: usize, test: usize, seed: u64) -> Result<DatasetSplit> {
    let needed = labeled + unlabeled + test;
    if needed > num_subjects {
        return Err(DataError::InsufficientSubjects {
            needed,
            available: num_subjects,
        });
    }
    if labeled == 0 {
        return Err(DataError::InvalidConfig("at least one labeled subject is required".into()));
    }
    let mut ids: Vec<usize> = (0..num_subjects).collect();
    ids.shuffle(&mut rng_for(seed, &[stream::SPLIT]));
    let names = |r: &[usize]| {
        let mut v: Vec<String> = r.iter().map(|&i| subject_id(i)).collect();
        v.sort();
        v
    };
    Ok(DatasetSplit {
        labeled: names(&ids[..labeled]),
        unlabeled: names(&ids[labeled..labeled + unlabeled]),
        test: names(&ids[labeled + unlabeled..needed]),
    })
}

const SECTIONS: [&str; 3] = ["labeled", "unlabeled", "test"];

impl DatasetSplit {
    pub fn section(&self, name: &str) -> Option<&[String]> {
        match name {
            "labeled" => Some(&self.labeled),
            "unlabeled" => Some(&self.unlabeled),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    pub fn to_manifest(&self) -> String {
        let mut s = String::new();
        for name in SECTIONS {
            s.push_str(&format!("[{name}]\n"));
            for id in self.section(name).unwrap() {
                s.push_str(id);
                s.push('\n');
            }
        }
        s
    }

    pub fn parse_manifest(text: &str, path: &Path) -> Result<Self> {
        let bad = |reason: String| DataError::Manifest {
            path: path.to_path_buf(),
            reason,
        };
        let mut split = DatasetSplit::default();
        let mut current: Option<&mut Vec<String>> = None;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                current = Some(match name {
                    "labeled" => &mut split.labeled,
                    "unlabeled" => &mut split.unlabeled,
                    "test" => &mut split.test,
                    other => return Err(bad(format!("line {}: unknown section {other}", n + 1))),
                });
                continue;
            }
            match current.as_deref_mut() {
                Some(v) => v.push(line.to_string()),
                None => return Err(bad(format!("line {}: id outside a section", n + 1))),
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for id in split.labeled.iter().chain(&split.unlabeled).chain(&split.test) {
            if !seen.insert(id) {
                return Err(bad(format!("subject {id} listed twice")));
            }
        }
        Ok(split)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_manifest()).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse_manifest(&text, path)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub image: Volume,
    pub label: LabelMap,
}

/// In-memory collection of subjects keyed by id.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub subjects: BTreeMap<String, Subject>,
}

pub const SPLIT_FILE: &str = "split.txt";

impl Dataset {
    /// `count` phantoms; subject `i` uses seed derived from `(seed, i)`.
    pub fn generate(count: usize, seed: u64, cfg: &PhantomConfig) -> Result<Self> {
        let mut subjects = BTreeMap::new();
        for i in 0..count {
            let (image, label) = generate_phantom(crate::rng::derive_seed(seed, &[i as u64]), cfg)?;
            subjects.insert(subject_id(i), Subject { image, label });
        }
        Ok(Self { subjects })
    }

    pub fn get(&self, id: &str) -> Result<&Subject> {
        self.subjects
            .get(id)
            .ok_or_else(|| DataError::UnknownSubject(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        for (id, s) in &self.subjects {
            let dir = root.join(id);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            write_volume(&dir.join("image.raw"), &s.image)?;
            write_volume(&dir.join("label.raw"), &s.label)?;
        }
        Ok(())
    }

    /// Loads every subdirectory of `root` holding an `image.raw`.
    pub fn load(root: &Path) -> Result<Self> {
        let mut subjects = BTreeMap::new();
        let entries = fs::read_dir(root).map_err(io_err(root))?;
        for entry in entries {
            let entry = entry.map_err(io_err(root))?;
            let dir = entry.path();
            if !dir.join("image.raw").is_file() {
                continue;
            }
            let image: Volume = read_volume(&dir.join("image.raw"))?;
            let label: LabelMap = read_volume(&dir.join("label.raw"))?;
            if image.extents != label.extents {
                return Err(DataError::ExtentMismatch {
                    context: format!("{} image vs label", dir.display()),
                    expected: image.extents.to_vec(),
                    found: label.extents.to_vec(),
                });
            }
            let id = entry.file_name().to_string_lossy().into_owned();
            subjects.insert(id, Subject { image, label });
        }
        Ok(Self { subjects })
    }

    /// Checks that every id in the split exists.
    pub fn check_split(&self, split: &DatasetSplit) -> Result<()> {
        for id in split.labeled.iter().chain(&split.unlabeled).chain(&split.test) {
            self.get(id)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantom_is_deterministic() {
        let cfg = PhantomConfig::default();
        assert_eq!(generate_phantom(5, &cfg).unwrap(), generate_phantom(5, &cfg).unwrap());
        assert_ne!(generate_phantom(5, &cfg).unwrap().0, generate_phantom(6, &cfg).unwrap().0);
    }

    #[test]
    fn default_config_is_valid_and_hard_class_is_last() {
        let cfg = PhantomConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.base_intensity.len(), 4);
        let bg = cfg.base_intensity[0];
        let contrasts: Vec<f32> = cfg.base_intensity[1..].iter().map(|v| v - bg).collect();
        assert!(contrasts[2] < contrasts[0] && contrasts[2] < contrasts[1]);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = PhantomConfig::default();
        cfg.classes = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = PhantomConfig::default();
        cfg.jitter = 10.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn split_sizes_and_errors() {
        let s = make_split(30, 4, 16, 10, 1).unwrap();
        assert_eq!((s.labeled.len(), s.unlabeled.len(), s.test.len()), (4, 16, 10));
        assert_eq!(s, make_split(30, 4, 16, 10, 1).unwrap());
        assert!(matches!(make_split(10, 4, 16, 10, 1), Err(DataError::InsufficientSubjects { .. })));
        assert!(make_split(10, 0, 1, 1, 1).is_err());
    }

    #[test]
    fn manifest_round_trip_and_duplicates() {
        let s = make_split(12, 2, 5, 3, 4).unwrap();
        let p = Path::new("m.txt");
        assert_eq!(DatasetSplit::parse_manifest(&s.to_manifest(), p).unwrap(), s);
        assert!(DatasetSplit::parse_manifest("[labeled]\na\n[test]\na\n", p).is_err());
        assert!(DatasetSplit::parse_manifest("a\n", p).is_err());
    }

    #[test]
    fn crop_extracts_block() {
        let v = Volume::new([2, 3, 4], (0..24).map(|i| i as f32).collect()).unwrap();
        let c = v.crop([1, 1, 2], [1, 2, 2]);
        assert_eq!(c.data, vec![18.0, 19.0, 22.0, 23.0]);
    }

    #[test]
    fn label_values_checked() {
        assert!(matches!(
            LabelMap::new([1, 1, 2], 2, vec![0, 2]),
            Err(DataError::InvalidLabel { value: 2, classes: 2 })
        ));
    }
}
