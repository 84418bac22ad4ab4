//! Progressive patch/batch schedule and learning-rate law.

use crate::error::{Error, Result};

/// One training stage: patch edge length, batch size, iteration count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stage {
    pub patch_size: usize,
    pub batch_size: usize,
    pub iterations: usize,
}

/// Ordered stages plus the learning-rate law: the rate stays at `base_lr`
/// during the first stage (when `flat_first_stage` is set) and then follows
/// cosine annealing down to `final_lr` at the final iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct ProgressiveSchedule {
    pub stages: Vec<Stage>,
    pub base_lr: f64,
    pub final_lr: f64,
    pub flat_first_stage: bool,
}

impl Default for ProgressiveSchedule {
    fn default() -> Self {
        ProgressiveSchedule {
            stages: vec![
                Stage { patch_size: 80, batch_size: 84, iterations: 58_000 },
                Stage { patch_size: 128, batch_size: 30, iterations: 36_000 },
                Stage { patch_size: 160, batch_size: 18, iterations: 24_000 },
                Stage { patch_size: 192, batch_size: 12, iterations: 24_000 },
            ],
            base_lr: 5e-4,
            final_lr: 1e-7,
            flat_first_stage: true,
        }
    }
}

impl ProgressiveSchedule {
    /// Single-stage fine-tune schedule: (192, 12, 20000), cosine 1e-4 → 1e-7
    /// from the first iteration (no flat phase).
    pub fn finetune() -> Self {
        ProgressiveSchedule {
            stages: vec![Stage { patch_size: 192, batch_size: 12, iterations: 20_000 }],
            base_lr: 1e-4,
            final_lr: 1e-7,
            flat_first_stage: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::config("schedule has no stages"));
        }
        for w in self.stages.windows(2) {
            if w[1].patch_size < w[0].patch_size {
                return Err(Error::config("patch sizes must be nondecreasing"));
            }
            if w[1].batch_size > w[0].batch_size {
                return Err(Error::config("batch sizes must be nonincreasing"));
            }
        }
        for s in &self.stages {
            if s.patch_size == 0 || s.patch_size % 4 != 0 {
                return Err(Error::config(format!(
                    "patch size {} must be a positive multiple of 4",
                    s.patch_size
                )));
            }
            if s.batch_size == 0 || s.iterations == 0 {
                return Err(Error::config("batch size and iterations must be positive"));
            }
        }
        if !(self.base_lr > 0.0 && self.final_lr > 0.0 && self.final_lr <= self.base_lr) {
            return Err(Error::config("require 0 < final_lr <= base_lr"));
        }
        Ok(())
    }

    pub fn total_iterations(&self) -> usize {
        self.stages.iter().map(|s| s.iterations).sum()
    }

    /// Stage containing `iter` by cumulative boundaries.
    pub fn stage_at(&self, iter: usize) -> Result<Stage> {
        let mut start = 0;
        for s in &self.stages {
            if iter < start + s.iterations {
                return Ok(*s);
            }
            start += s.iterations;
        }
        Err(Error::Bounds(format!(
            "iteration {iter} outside schedule of {} iterations",
            self.total_iterations()
        )))
    }

    /// Learning rate at `iter`: flat at `base_lr` through the first stage
    /// (when enabled), then cosine annealing reaching `final_lr` exactly at
    /// the last iteration.
    pub fn lr_at(&self, iter: usize) -> f64 {
        let total = self.total_iterations();
        let cosine_start = if self.flat_first_stage {
            self.stages[0].iterations
        } else {
            0
        };
        if iter < cosine_start {
            return self.base_lr;
        }
        let span = total - cosine_start;
        if span <= 1 {
            return self.final_lr;
        }
        let t = (iter - cosine_start) as f64 / (span - 1) as f64;
        self.final_lr + (self.base_lr - self.final_lr) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
    }
}
