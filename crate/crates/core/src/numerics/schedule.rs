use crate::error::{Error, Result};

/// Learning rate at `step`: linear warmup over `warmup_steps`, then cosine
/// annealing from `base_lr` to zero at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, warmup_steps: usize) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::config("cosine schedule needs total_steps > 0"));
    }
    if step > total_steps {
        return Err(Error::config(format!(
            "step {step} is past the end of a {total_steps}-step schedule"
        )));
    }
    if step < warmup_steps {
        return Ok(base_lr * step as f64 / warmup_steps as f64);
    }
    if total_steps <= warmup_steps {
        return Ok(base_lr);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(0.5 * base_lr * (1.0 + (std::f64::consts::PI * progress).cos()))
}
