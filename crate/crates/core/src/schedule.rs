//! Learning-rate schedule: linear warm-up, then polynomial decay.

use crate::error::{param_err, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base: f64,
    pub warmup: usize,
    pub iterations: usize,
    pub power: f64,
}

impl Schedule {
    pub fn new(base: f64, warmup: usize, iterations: usize, power: f64) -> Result<Self> {
        if warmup >= iterations {
            return param_err(format!("warmup {warmup} must be below iterations {iterations}"));
        }
        if power <= 0.0 || !power.is_finite() {
            return param_err(format!("poly power must be positive, got {power}"));
        }
        if base < 0.0 || !base.is_finite() {
            return param_err(format!("base learning rate must be non-negative, got {base}"));
        }
        Ok(Self {
            base,
            warmup,
            iterations,
            power,
        })
    }

    /// Rate at `iter` in `0..=iterations`.
    pub fn lr(&self, iter: usize) -> f64 {
        if iter < self.warmup {
            self.base * (iter + 1) as f64 / self.warmup as f64
        } else {
            let frac = 1.0 - iter.min(self.iterations) as f64 / self.iterations as f64;
            self.base * frac.powf(self.power)
        }
    }
}
