use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup followed by cosine decay to a floor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub warmup_frac: f64,
    pub floor_frac: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            warmup_frac: 0.1,
            floor_frac: 0.1,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.warmup_frac) || !(0.0..=1.0).contains(&self.floor_frac) {
            return Err(Error::Config(format!(
                "warmup_frac and floor_frac must lie in [0, 1], got {} and {}",
                self.warmup_frac, self.floor_frac
            )));
        }
        Ok(())
    }

    /// Number of warmup steps, `⌈warmup_frac · total⌉`.
    pub fn warmup_steps(&self, total: usize) -> usize {
        // The small offset keeps products like 0.1 · 2000 from rounding up.
        (self.warmup_frac * total as f64 - 1e-9).ceil().max(0.0) as usize
    }

    pub fn lr(&self, t: usize, total: usize, lr_max: f64) -> Result<f64> {
        schedule(t, total, lr_max, self.warmup_frac, self.floor_frac)
    }
}

/// Learning rate at step `t` of `total`.
pub fn schedule(t: usize, total: usize, lr_max: f64, warmup_frac: f64, floor_frac: f64) -> Result<f64> {
    if t > total {
        return Err(Error::InvalidArgument(format!(
            "step {t} is past the last step {total}"
        )));
    }
    let sched = Schedule {
        warmup_frac,
        floor_frac,
    };
    sched.validate()?;
    let w = sched.warmup_steps(total);
    if t <= w {
        if w == 0 {
            return Ok(lr_max);
        }
        return Ok(lr_max * (t as f64 / w as f64));
    }
    let min = floor_frac * lr_max;
    let progress = (t - w) as f64 / (total - w) as f64;
    Ok(min + 0.5 * (lr_max - min) * (1.0 + libm::cos(std::f64::consts::PI * progress)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lr(t: usize) -> f64 {
        schedule(t, 100, 1e-3, 0.1, 0.1).unwrap()
    }

    #[test]
    fn endpoints() {
        assert_eq!(lr(10), 1e-3);
        assert!((lr(100) - 1e-4).abs() < 1e-12 * 1e-3);
        assert_eq!(lr(5), 5e-4);
        assert_eq!(lr(0), 0.0);
        assert!(schedule(101, 100, 1e-3, 0.1, 0.1).is_err());
    }

    #[test]
    fn warmup_length() {
        let s = Schedule::default();
        assert_eq!(s.warmup_steps(100), 10);
        assert_eq!(s.warmup_steps(2000), 200);
        assert_eq!(s.warmup_steps(15), 2);
        assert_eq!(Schedule { warmup_frac: 0.0, ..s }.warmup_steps(50), 0);
    }
}
