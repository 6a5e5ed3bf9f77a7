use crate::error::{OffError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: u8,
    pub base_lr: f64,
    /// Iterations at which the learning rate is multiplied by 0.1.
    pub lr_milestones: Vec<usize>,
    pub momentum: f64,
    pub batch_size: usize,
    pub total_iters: usize,
    /// Training segments per clip.
    pub alpha: usize,
    /// Test segments per clip; fixes the frame interval.
    pub beta: usize,
    pub seed: u64,
    /// Loss weight per OFF level. Empty means 1.0 everywhere.
    pub level_weights: Vec<f64>,
}

impl TrainConfig {
    /// 2000 iterations with decays at 1000, 1500 and 1800, batch 16.
    pub fn desk(stage: u8) -> Self {
        TrainConfig {
            stage,
            base_lr: 0.02,
            lr_milestones: vec![1000, 1500, 1800],
            momentum: 0.9,
            batch_size: 16,
            total_iters: 2000,
            alpha: 3,
            beta: 5,
            seed: 0,
            level_weights: Vec::new(),
        }
    }

    /// 20000 iterations with decays at 10000, 15000 and 18000, batch 128.
    pub fn full(stage: u8) -> Self {
        TrainConfig {
            lr_milestones: vec![10000, 15000, 18000],
            batch_size: 128,
            total_iters: 20000,
            ..TrainConfig::desk(stage)
        }
    }

    pub fn level_weight(&self, level: usize) -> f64 {
        self.level_weights.get(level).copied().unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.stage == 1 || self.stage == 2) {
            return Err(OffError::config(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(OffError::config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(OffError::config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 || self.total_iters == 0 {
            return Err(OffError::config("batch_size and total_iters must be positive"));
        }
        if self.alpha == 0 || self.alpha > self.beta {
            return Err(OffError::config(format!(
                "need 1 <= alpha <= beta, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        if self.stage == 2 && self.alpha < 2 {
            return Err(OffError::config("stage 2 needs alpha >= 2 to form segment pairs"));
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(OffError::config("lr_milestones must be strictly increasing"));
        }
        if self.lr_milestones.last().is_some_and(|&m| m >= self.total_iters) {
            return Err(OffError::config("lr_milestones must be below total_iters"));
        }
        if self.level_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(OffError::config("level_weights must be finite and non-negative"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        TrainConfig::desk(1).validate().unwrap();
        TrainConfig::full(2).validate().unwrap();
        assert_eq!(TrainConfig::full(2).batch_size, 128);
    }

    #[test]
    fn milestone_rules() {
        let mut c = TrainConfig::desk(1);
        c.lr_milestones = vec![10, 10];
        assert!(c.validate().is_err());
        c.lr_milestones = vec![2000];
        assert!(c.validate().is_err());
    }
}
