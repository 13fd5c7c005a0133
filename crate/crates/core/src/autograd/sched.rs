//! Learning-rate schedules.

use crate::error::{Error, Result};

/// Cosine annealing: `lr_min + 0.5*(lr_max - lr_min)*(1 + cos(pi*epoch/total))`.
pub fn cosine_lr(epoch: usize, total: usize, lr_max: f32, lr_min: f32) -> Result<f32> {
    if total < 1 || epoch > total {
        return Err(Error::EpochOutOfRange { epoch, total });
    }
    let phase = std::f64::consts::PI * epoch as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos() as f32))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 0.06, 0.0).unwrap(), 0.06);
        assert!(cosine_lr(100, 100, 0.06, 0.0).unwrap().abs() < 1e-9);
        let mid = cosine_lr(50, 100, 0.06, 0.02).unwrap();
        assert!((mid - 0.04).abs() < 1e-7);
    }

    #[test]
    fn epoch_past_total_is_an_error() {
        assert!(matches!(
            cosine_lr(101, 100, 0.06, 0.0),
            Err(Error::EpochOutOfRange { .. })
        ));
    }
}
