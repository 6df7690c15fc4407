//! Toy volumetric U-Net: encoder `f`, projector `p`, decoder `g`.
//!
//! Encoder level `i` is a 3³ convolution + ReLU with `base << i` channels;
//! levels are separated by 2× max pooling. The decoder mirrors it with
//! nearest-neighbour upsampling and skip concatenation, ending in a 1³
//! convolution to `classes` logits. The projector global-average-pools the
//! bottleneck and applies affine → ReLU → affine.

use rand_distr::{Distribution, Normal};
use secl_autodiff::{Graph, NodeId, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{Extents, LabelMap, Volume};
use crate::rng::{rng_for, stream};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub extents: Extents,
    pub levels: usize,
    pub base_channels: usize,
    pub hidden_dim: usize,
    pub emb_dim: usize,
    pub classes: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            extents: [32, 32, 32],
            levels: 4,
            base_channels: 8,
            hidden_dim: 128,
            emb_dim: 64,
            classes: 4,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.levels == 0 {
            return Err("levels must be at least 1".into());
        }
        let f = 1usize << (self.levels - 1);
        if self.extents.iter().any(|&e| e == 0 || e % f != 0) {
            return Err(format!(
                "extents {:?} not divisible by 2^(levels-1) = {f}",
                self.extents
            ));
        }
        if self.classes < 2 || self.classes > 255 {
            return Err(format!("class count {} outside [2, 255]", self.classes));
        }
        if self.emb_dim < 2 {
            return Err(format!("embedding dimension {} below 2", self.emb_dim));
        }
        if self.base_channels == 0 || self.hidden_dim == 0 {
            return Err("channel widths must be positive".into());
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.channels(self.levels - 1)
    }

    /// Smallest edge the encoder accepts (every pooling input needs extent ≥ 2).
    pub fn min_encoder_extent(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn encoder_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut v = Vec::new();
        let mut cin = 1;
        for i in 0..self.levels {
            let c = self.channels(i);
            v.push((format!("enc.{i}.w"), vec![c, cin, 3, 3, 3]));
            v.push((format!("enc.{i}.b"), vec![c]));
            cin = c;
        }
        v
    }

    pub fn projector_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let b = self.bottleneck_channels();
        vec![
            ("proj.0.w".into(), vec![b, self.hidden_dim]),
            ("proj.0.b".into(), vec![1, self.hidden_dim]),
            ("proj.1.w".into(), vec![self.hidden_dim, self.emb_dim]),
            ("proj.1.b".into(), vec![1, self.emb_dim]),
        ]
    }

    /// Decoder level `i` (from the bottleneck upward) fuses the upsampled
    /// features with skip `levels - 2 - i`.
    pub fn decoder_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut v = Vec::new();
        let mut cin = self.bottleneck_channels();
        for lvl in (0..self.levels - 1).rev() {
            let c = self.channels(lvl);
            v.push((format!("dec.{lvl}.w"), vec![c, cin + c, 3, 3, 3]));
            v.push((format!("dec.{lvl}.b"), vec![c]));
            cin = c;
        }
        v.push(("dec.out.w".into(), vec![self.classes, cin, 1, 1, 1]));
        v.push(("dec.out.b".into(), vec![self.classes]));
        v
    }
}

/// Encoder, projector and (student only) decoder parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Scalar> {
    pub arch: ArchConfig,
    pub encoder: Vec<Tensor<T>>,
    pub projector: Vec<Tensor<T>>,
    pub decoder: Option<Vec<Tensor<T>>>,
}

fn he_init<T: Scalar>(shapes: &[(String, Vec<usize>)], rng: &mut impl rand::Rng) -> Vec<Tensor<T>> {
    shapes
        .iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            if name.ends_with(".b") {
                return Tensor::zeros(shape);
            }
            // Conv weights are [Co, Ci, k, k, k], linear weights [in, out].
            let fan_in = if shape.len() == 5 { n / shape[0] } else { shape[0] };
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            Tensor::from_vec(shape, (0..n).map(|_| T::of(normal.sample(rng))).collect())
        })
        .collect()
}

/// Student parameters with He fan-in initialization and zero biases.
/// Panics on an invalid architecture.
pub fn init_params<T: Scalar>(arch: &ArchConfig, seed: u64) -> ModelParams<T> {
    if let Err(e) = arch.validate() {
        panic!("init_params: {e}");
    }
    let mut rng = rng_for(seed, &[stream::INIT]);
    let encoder = he_init(&arch.encoder_shapes(), &mut rng);
    let projector = he_init(&arch.projector_shapes(), &mut rng);
    let decoder = he_init(&arch.decoder_shapes(), &mut rng);
    ModelParams {
        arch: arch.clone(),
        encoder,
        projector,
        decoder: Some(decoder),
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Exact copy of the encoder and projector, without a decoder.
    pub fn teacher_copy(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            encoder: self.encoder.clone(),
            projector: self.projector.clone(),
            decoder: None,
        }
    }

    /// All tensors in the order encoder, projector, decoder.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.encoder
            .iter()
            .chain(&self.projector)
            .chain(self.decoder.iter().flatten())
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.encoder
            .iter_mut()
            .chain(self.projector.iter_mut())
            .chain(self.decoder.iter_mut().flatten())
            .collect()
    }

    /// `(name, tensor)` pairs in [`Self::tensors`] order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut names: Vec<String> = self
            .arch
            .encoder_shapes()
            .into_iter()
            .chain(self.arch.projector_shapes())
            .map(|(n, _)| n)
            .collect();
        if self.decoder.is_some() {
            names.extend(self.arch.decoder_shapes().into_iter().map(|(n, _)| n));
        }
        names.into_iter().zip(self.tensors()).collect()
    }

    /// Clones of all tensors in [`Self::tensors`] order.
    pub fn flat(&self) -> Vec<Tensor<T>> {
        self.tensors().cloned().collect()
    }

    /// Replaces all tensors from a list in [`Self::tensors`] order.
    pub fn set_flat(&mut self, flat: Vec<Tensor<T>>) {
        let slots = self.tensors_mut();
        assert_eq!(slots.len(), flat.len(), "set_flat: tensor count differs");
        for (slot, t) in slots.into_iter().zip(flat) {
            assert_eq!(slot.shape(), t.shape(), "set_flat: shape differs");
            *slot = t;
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            arch: self.arch.clone(),
            encoder: self.encoder.iter().map(|t| t.cast()).collect(),
            projector: self.projector.iter().map(|t| t.cast()).collect(),
            decoder: self.decoder.as_ref().map(|d| d.iter().map(|t| t.cast()).collect()),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let mut leaf = |t: &Tensor<T>| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        Bound {
            encoder: self.encoder.iter().map(&mut leaf).collect(),
            projector: self.projector.iter().map(&mut leaf).collect(),
            decoder: self.decoder.as_ref().map(|d| d.iter().map(&mut leaf).collect()),
        }
    }
}

/// Graph handles for one parameter set, in [`ModelParams::tensors`] order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub encoder: Vec<NodeId>,
    pub projector: Vec<NodeId>,
    pub decoder: Option<Vec<NodeId>>,
}

impl Bound {
    pub fn all(&self) -> Vec<NodeId> {
        self.encoder
            .iter()
            .chain(&self.projector)
            .chain(self.decoder.iter().flatten())
            .copied()
            .collect()
    }
}

pub struct EncoderOutput {
    pub bottleneck: NodeId,
    /// Features of levels `0..levels-1`, finest first.
    pub skips: Vec<NodeId>,
}

/// `[1, D, H, W]` input tensor from a volume.
pub fn volume_tensor<T: Scalar>(v: &Volume) -> Tensor<T> {
    let [d, h, w] = v.extents;
    Tensor::from_vec(&[1, d, h, w], v.data.iter().map(|&x| T::of(x as f64)).collect())
}

/// Runs the encoder on `x: [1, D, H, W]`. Any extents of at least
/// `2^(levels-1)` are accepted; odd extents are floored by pooling.
pub fn encoder_forward<T: Scalar>(g: &mut Graph<T>, p: &Bound, x: NodeId) -> EncoderOutput {
    let levels = p.encoder.len() / 2;
    let s = g.shape(x).to_vec();
    assert!(
        s.len() == 4 && s[0] == 1 && s[1..].iter().all(|&e| e >= 1 << (levels - 1)),
        "encoder_forward: input {s:?} too small for {levels} levels"
    );
    let mut h = x;
    let mut skips = Vec::new();
    for i in 0..levels {
        if i > 0 {
            skips.push(h);
            h = g.max_pool2(h);
        }
        h = g.conv3d(h, p.encoder[2 * i], p.encoder[2 * i + 1], 1);
        h = g.relu(h);
    }
    EncoderOutput { bottleneck: h, skips }
}

/// Embedding `[emb_dim]` of one bottleneck `[C, d, h, w]`.
pub fn projector_forward<T: Scalar>(g: &mut Graph<T>, p: &Bound, bottleneck: NodeId) -> NodeId {
    let s = g.shape(bottleneck).to_vec();
    assert_eq!(s.len(), 4, "projector_forward: expected [C, D, H, W], got {s:?}");
    let flat = g.reshape(bottleneck, &[s[0], s[1] * s[2] * s[3]]);
    let pooled = g.mean_last(flat);
    let row = g.reshape(pooled, &[1, s[0]]);
    let h = g.matmul(row, p.projector[0]);
    let h = g.add(h, p.projector[1]);
    let h = g.relu(h);
    let z = g.matmul(h, p.projector[2]);
    let z = g.add(z, p.projector[3]);
    let d = g.shape(z)[1];
    g.reshape(z, &[d])
}

/// Logits `[classes, D, H, W]` at the input resolution.
pub fn decoder_forward<T: Scalar>(g: &mut Graph<T>, p: &Bound, enc: &EncoderOutput) -> NodeId {
    let dec = p.decoder.as_ref().expect("decoder_forward: parameter set has no decoder");
    assert_eq!(
        dec.len(),
        2 * enc.skips.len() + 2,
        "decoder_forward: {} skips for {} decoder tensors",
        enc.skips.len(),
        dec.len()
    );
    let mut h = enc.bottleneck;
    for (i, &skip) in enc.skips.iter().rev().enumerate() {
        let up = g.upsample2(h);
        assert_eq!(
            g.shape(up)[1..],
            g.shape(skip)[1..],
            "decoder_forward: upsampled features do not match skip; input extents must be divisible by 2^(levels-1)"
        );
        let cat = g.concat(&[up, skip], 0);
        h = g.conv3d(cat, dec[2 * i], dec[2 * i + 1], 1);
        h = g.relu(h);
    }
    let n = dec.len();
    g.conv3d(h, dec[n - 2], dec[n - 1], 1)
}

/// Per-voxel argmax over the class axis of `[C, D, H, W]` logits.
pub fn argmax_labels<T: Scalar>(logits: &Tensor<T>) -> LabelMap {
    let s = logits.shape();
    let (c, n) = (s[0], s[1] * s[2] * s[3]);
    let d = logits.data();
    let labels = (0..n)
        .map(|v| {
            let mut best = 0;
            for k in 1..c {
                if d[k * n + v] > d[best * n + v] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new([s[1], s[2], s[3]], c, labels).expect("argmax labels within class range")
}

impl<T: Scalar> ModelParams<T> {
    /// Segmentation logits for one volume (inference only).
    pub fn logits(&self, v: &Volume) -> Tensor<T> {
        assert_eq!(
            v.extents, self.arch.extents,
            "logits: volume extents do not match the architecture"
        );
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(volume_tensor(v));
        let enc = encoder_forward(&mut g, &p, x);
        let y = decoder_forward(&mut g, &p, &enc);
        g.value(y).clone()
    }

    pub fn predict(&self, v: &Volume) -> LabelMap {
        argmax_labels(&self.logits(v))
    }

    /// Projector embedding of one volume or crop (inference only).
    pub fn embed(&self, v: &Volume) -> Vec<T> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(volume_tensor(v));
        let enc = encoder_forward(&mut g, &p, x);
        let z = projector_forward(&mut g, &p, enc.bottleneck);
        g.value(z).to_vec()
    }
}
