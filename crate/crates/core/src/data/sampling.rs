use rand::Rng;

use crate::error::{OffError, Result};

/// Segment layout of one clip: `alpha` training segments and `beta` test
/// segments, both spaced `len / beta` frames apart.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplePlan {
    pub len: usize,
    pub alpha: usize,
    pub beta: usize,
}

impl SamplePlan {
    pub fn new(len: usize, alpha: usize, beta: usize) -> Result<Self> {
        if alpha == 0 || beta == 0 {
            return Err(OffError::arg(format!(
                "segment counts must be positive (alpha={alpha}, beta={beta})"
            )));
        }
        if len < beta {
            return Err(OffError::arg(format!("clip length {len} is shorter than beta={beta}")));
        }
        if alpha > beta {
            return Err(OffError::arg(format!("alpha={alpha} exceeds beta={beta}")));
        }
        Ok(SamplePlan { len, alpha, beta })
    }

    pub fn interval(&self) -> usize {
        self.len / self.beta
    }

    /// Largest legal frame seed; seeds are drawn from `0..=max_seed()`.
    pub fn max_seed(&self) -> usize {
        self.len - 1 - (self.alpha - 1) * self.interval()
    }

    pub fn train_indices_from(&self, seed: usize) -> Result<Vec<usize>> {
        if seed > self.max_seed() {
            return Err(OffError::arg(format!(
                "frame seed {seed} exceeds {}",
                self.max_seed()
            )));
        }
        Ok(progression(seed, self.interval(), self.alpha))
    }

    pub fn train_indices<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let seed = rng.gen_range(0..=self.max_seed());
        progression(seed, self.interval(), self.alpha)
    }

    /// Centred deterministic offset.
    pub fn test_offset(&self) -> usize {
        (self.len - 1 - (self.beta - 1) * self.interval()) / 2
    }

    pub fn test_indices(&self) -> Vec<usize> {
        progression(self.test_offset(), self.interval(), self.beta)
    }
}

fn progression(start: usize, step: usize, count: usize) -> Vec<usize> {
    (0..count).map(|k| start + k * step).collect()
}

/// `alpha` frame indices with a random seed and spacing `len / beta`.
pub fn train_sample_indices<R: Rng + ?Sized>(
    len: usize,
    alpha: usize,
    beta: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    Ok(SamplePlan::new(len, alpha, beta)?.train_indices(rng))
}

/// `beta` centred frame indices with spacing `len / beta`.
pub fn test_sample_indices(len: usize, beta: usize) -> Result<Vec<usize>> {
    Ok(SamplePlan::new(len, 1, beta)?.test_indices())
}
