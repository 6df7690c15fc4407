//! Semi-supervised volumetric segmentation with self-ensembling contrastive
//! learning, at desk scale on synthetic phantoms.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod ema;
pub mod embed;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod sampling;
pub mod trainer;
