use crate::error::{config_err, Result};

/// Linear warm-up from 0 to `base_lr` over `warmup_steps`, then cosine decay
/// towards 0 over the remaining steps.
pub fn lr_schedule(step: u64, total_steps: u64, warmup_steps: u64, base_lr: f64) -> Result<f64> {
    if total_steps <= warmup_steps {
        return Err(config_err!(
            "total steps {total_steps} must exceed warm-up steps {warmup_steps}"
        ));
    }
    if step < warmup_steps {
        return Ok(base_lr * step as f64 / warmup_steps as f64);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_landmarks() {
        let base = 3e-4;
        assert_eq!(lr_schedule(100, 1000, 100, base).unwrap(), base);
        assert!((lr_schedule(50, 1000, 100, base).unwrap() - base / 2.0).abs() < 1e-18);
        assert_eq!(lr_schedule(0, 1000, 100, base).unwrap(), 0.0);
        assert!(lr_schedule(999, 1000, 100, base).unwrap() < base * 1e-3);
        assert!(lr_schedule(0, 10, 10, base).is_err());
        assert!(lr_schedule(0, 5, 10, base).is_err());
    }

    #[test]
    fn schedule_is_monotone_after_warmup() {
        let mut prev = f64::INFINITY;
        for s in 10..200 {
            let lr = lr_schedule(s, 200, 10, 1.0).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
