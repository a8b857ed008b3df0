use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Constant,
    /// Cosine annealing with warm restarts every `cycle_epochs`.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    pub min_lr: f64,
    pub cycle_epochs: usize,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            kind: ScheduleKind::Constant,
            base_lr: lr,
            min_lr: lr,
            cycle_epochs: 1,
        }
    }

    pub fn cosine(base_lr: f64, min_lr: f64, cycle_epochs: usize) -> Self {
        LrSchedule {
            kind: ScheduleKind::Cosine,
            base_lr,
            min_lr,
            cycle_epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == ScheduleKind::Cosine {
            if !(self.min_lr > 0.0 && self.min_lr <= self.base_lr) {
                return Err(invalid(format!(
                    "cosine schedule needs 0 < min_lr <= base_lr, got min {} base {}",
                    self.min_lr, self.base_lr
                )));
            }
            if self.cycle_epochs == 0 {
                return Err(invalid("cycle_epochs must be >= 1"));
            }
        } else if !(self.base_lr > 0.0) {
            return Err(invalid("learning rate must be > 0"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.kind {
            ScheduleKind::Constant => self.base_lr,
            ScheduleKind::Cosine => {
                let cycle = self.cycle_epochs.max(1);
                let phase = (epoch % cycle) as f64 / cycle as f64;
                self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (PI * phase).cos())
            }
        }
    }
}

pub fn cosine_lr(schedule: &LrSchedule, epoch: usize) -> f64 {
    schedule.lr_at(epoch)
}
