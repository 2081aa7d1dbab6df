use std::f64::consts::PI;

use super::TrainingConfig;

/// Learning rate at (possibly fractional) optimizer step `step`.
///
/// Linear warmup from 0 to `base_lr` over `warmup_epochs·steps_per_epoch`
/// steps, then cosine decay to `final_lr` at `epochs·steps_per_epoch`.
/// Steps past the end stay at `final_lr`.
pub fn lr_at(step: f64, steps_per_epoch: usize, cfg: &TrainingConfig) -> f64 {
    let step = step.max(0.0);
    let warmup = (cfg.warmup_epochs * steps_per_epoch) as f64;
    let total = (cfg.epochs * steps_per_epoch) as f64;
    if step < warmup {
        return cfg.base_lr * step / warmup;
    }
    let progress = if total > warmup { ((step - warmup) / (total - warmup)).min(1.0) } else { 1.0 };
    cfg.final_lr + 0.5 * (cfg.base_lr - cfg.final_lr) * (1.0 + (PI * progress).cos())
}
