use std::f64::consts::PI;

/// Cosine interpolation from `start` (t = 0) to `end` (t ≥ total).
pub fn cosine_schedule(t: usize, total: usize, start: f64, end: f64) -> f64 {
    let total = total.max(1);
    let progress = t.min(total) as f64 / total as f64;
    end + (start - end) * 0.5 * (1.0 + (PI * progress).cos())
}

/// Per-epoch learning rate: linear warm-up, then cosine decay to `min_lr`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub min_lr: f64,
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            return self.base_lr * (epoch + 1) as f64 / self.warmup_epochs as f64;
        }
        let span = self.total_epochs.saturating_sub(self.warmup_epochs);
        cosine_schedule(epoch - self.warmup_epochs, span, self.base_lr, self.min_lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(cosine_schedule(0, 10, 1.0, 0.7), 1.0);
        assert_eq!(cosine_schedule(10, 10, 1.0, 0.7), 0.7);
        assert_eq!(cosine_schedule(25, 10, 1.0, 0.7), 0.7);
        assert!((cosine_schedule(5, 10, 1.0, 0.7) - 0.85).abs() < 1e-12);
    }

    #[test]
    fn monotone_between() {
        let vals: Vec<f64> = (0..=20).map(|t| cosine_schedule(t, 20, 1.0, 0.3)).collect();
        assert!(vals.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn lr_warmup_then_decay() {
        let s = LrSchedule {
            base_lr: 1e-3,
            warmup_epochs: 5,
            total_epochs: 60,
            min_lr: 1e-5,
        };
        assert!((s.at(0) - 2e-4).abs() < 1e-15);
        assert!((s.at(4) - 1e-3).abs() < 1e-15);
        assert!((s.at(5) - 1e-3).abs() < 1e-15);
        assert!((s.at(60) - 1e-5).abs() < 1e-15);
        assert!(s.at(30) < s.at(10));
    }
}
