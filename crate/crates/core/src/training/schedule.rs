//! Learning-rate schedule: linear warmup, then cosine decay to zero.

use super::config::LqaeConfig;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(cfg: &LqaeConfig, steps_per_epoch: usize) -> Self {
        LrSchedule {
            peak_lr: cfg.peak_lr,
            warmup_steps: cfg.warmup_epochs * steps_per_epoch,
            total_steps: cfg.epochs * steps_per_epoch,
        }
    }

    pub fn at(&self, step: usize) -> f64 {
        lr_schedule(step, self.peak_lr, self.warmup_steps, self.total_steps)
    }
}

pub fn lr_schedule(step: usize, peak_lr: f64, warmup_steps: usize, total_steps: usize) -> f64 {
    if step < warmup_steps {
        return peak_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return peak_lr;
    }
    let progress = ((step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64).min(1.0);
    peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

pub fn steps_per_epoch(n_items: usize, batch_size: usize) -> usize {
    n_items.div_ceil(batch_size)
}
