use serde::{Deserialize, Serialize};

/// Cosine annealing with warm restarts every `period` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub eta_min: f64,
    pub period: f64,
}

impl LrSchedule {
    pub fn new(base: f64, eta_min: f64, period: f64) -> Self {
        Self {
            base,
            eta_min,
            period,
        }
    }

    /// Rate at a (possibly fractional) epoch.
    pub fn lr_at(&self, epoch: f64) -> f64 {
        let t = epoch.max(0.0) % self.period;
        let cos = (std::f64::consts::PI * t / self.period).cos();
        self.eta_min + (self.base - self.eta_min) * (1.0 + cos) / 2.0
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self::new(1e-4, 1e-5, 10.0)
    }
}
