//! Learning-rate schedule: linear warmup followed by cosine decay to zero.

use super::{TrainConfig, TrainError};

/// Number of warmup steps, `floor(warmup_ratio * total_steps)`.
pub fn warmup_steps(total_steps: usize, warmup_ratio: f64) -> usize {
    (warmup_ratio * total_steps as f64).floor() as usize
}

/// Learning rate at 0-based optimizer `step` of `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, config: &TrainConfig) -> Result<f64, TrainError> {
    if total_steps == 0 {
        return Err(TrainError::ZeroTotalSteps);
    }
    if step > total_steps {
        return Err(TrainError::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    let peak = config.lr;
    let warmup = warmup_steps(total_steps, config.warmup_ratio);
    if step < warmup {
        return Ok(peak * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    if progress >= 1.0 {
        return Ok(0.0);
    }
    Ok(peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
