use std::f64::consts::PI;

use crate::config::TrainConfig;

/// Learning rate at a (possibly fractional) epoch position: linear warmup
/// from 0, then cosine decay to 0 at `epochs`.
pub fn lr_at_position(pos: f64, cfg: &TrainConfig) -> f64 {
    let w = cfg.warmup_epochs as f64;
    let e = cfg.epochs as f64;
    if pos < w {
        return cfg.base_lr * pos / w;
    }
    let progress = ((pos - w) / (e - w)).clamp(0.0, 1.0);
    cfg.base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    lr_at_position(epoch as f64, cfg)
}

/// Per-step variant: the position advances by `1 / steps_per_epoch` per step.
pub fn lr_at_step(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    lr_at_position(step as f64 / steps_per_epoch.max(1) as f64, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_boundary_and_midpoint() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(0, &c), 0.0);
        assert!((lr_at(1, &c) - 1.5e-4).abs() < 1e-18);
        assert!((lr_at(2, &c) - 3e-4).abs() < 1e-18);
        assert!((lr_at(51, &c) - 1.5e-4).abs() < 1e-18);
    }

    #[test]
    fn tail_decreases_toward_zero() {
        let c = TrainConfig::default();
        let tail: Vec<f64> = (2..100).map(|e| lr_at(e, &c)).collect();
        assert!(tail.windows(2).all(|w| w[1] <= w[0]));
        assert!(lr_at(99, &c) < 1e-6);
        assert!(lr_at(99, &c) > 0.0);
    }

    #[test]
    fn per_step_agrees_at_epoch_boundaries() {
        let c = TrainConfig::default();
        for e in 0..100 {
            assert_eq!(lr_at_step(e * 32, 32, &c), lr_at(e, &c));
        }
    }
}
