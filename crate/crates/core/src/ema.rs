//! Exponential moving average of the student's encoder and projector.

use secl_autodiff::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelParams;

#[derive(Debug, Error, PartialEq)]
pub enum EmaError {
    #[error("momentum {0} outside [0, 1]")]
    InvalidAlpha(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaConfig {
    pub alpha: f64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self { alpha: 0.9 }
    }
}

impl EmaConfig {
    pub fn new(alpha: f64) -> Result<Self, EmaError> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(EmaError::InvalidAlpha(alpha));
        }
        Ok(Self { alpha })
    }
}

fn blend<T: Scalar>(teacher: &mut Tensor<T>, student: &Tensor<T>, alpha: f64) {
    assert_eq!(teacher.shape(), student.shape(), "ema_update: parameter shapes differ");
    // The endpoints are handled exactly so α=0 copies and α=1 is a no-op.
    if alpha == 1.0 {
        return;
    }
    if alpha == 0.0 {
        *teacher = student.clone();
        return;
    }
    // Written as z + (1-α)(θ - z) so a teacher equal to the student stays bit-identical.
    let b = T::of(1.0 - alpha);
    let data = teacher
        .data()
        .iter()
        .zip(student.data())
        .map(|(&z, &t)| z + b * (t - z))
        .collect();
    *teacher = Tensor::from_vec(student.shape(), data);
}

/// `ζ ← α ζ + (1 − α) θ` for encoder and projector; the decoder is untouched.
/// Panics if the architectures differ.
pub fn ema_update<T: Scalar>(teacher: &mut ModelParams<T>, student: &ModelParams<T>, cfg: EmaConfig) {
    assert_eq!(teacher.arch, student.arch, "ema_update: architecture mismatch");
    for (z, t) in teacher.encoder.iter_mut().zip(&student.encoder) {
        blend(z, t, cfg.alpha);
    }
    for (z, t) in teacher.projector.iter_mut().zip(&student.projector) {
        blend(z, t, cfg.alpha);
    }
}

/// Euclidean distance between the encoder+projector parameters of two sets.
pub fn shared_distance<T: Scalar>(a: &ModelParams<T>, b: &ModelParams<T>) -> f64 {
    a.encoder
        .iter()
        .chain(&a.projector)
        .zip(b.encoder.iter().chain(&b.projector))
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(&p, &q)| (p.as_f64() - q.as_f64()).powi(2)))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ArchConfig};

    fn arch() -> ArchConfig {
        ArchConfig {
            extents: [4, 4, 4],
            levels: 2,
            base_channels: 2,
            hidden_dim: 3,
            emb_dim: 2,
            classes: 2,
        }
    }

    #[test]
    fn scalar_blend() {
        let mut z = Tensor::from_vec(&[1], vec![0.0f64]);
        blend(&mut z, &Tensor::from_vec(&[1], vec![1.0]), 0.9);
        assert!((z.item() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn endpoints_are_exact() {
        let student = init_params::<f64>(&arch(), 1);
        let fresh = init_params::<f64>(&arch(), 2).teacher_copy();
        let mut t = fresh.clone();
        ema_update(&mut t, &student, EmaConfig::new(1.0).unwrap());
        assert_eq!(t, fresh);
        ema_update(&mut t, &student, EmaConfig::new(0.0).unwrap());
        assert_eq!(t.encoder, student.encoder);
        assert_eq!(t.projector, student.projector);
        assert!(t.decoder.is_none());
    }

    #[test]
    fn alpha_range_checked() {
        assert!(EmaConfig::new(-0.1).is_err());
        assert!(EmaConfig::new(1.5).is_err());
    }
}
