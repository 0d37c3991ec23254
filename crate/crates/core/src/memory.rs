//! Per-sample feature memory used as an N-way cosine classifier.

use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::{norm, normalized, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    slots: Matrix,
    /// Update rate used by the most recent epoch.
    pub epoch_alpha: f64,
}

/// What [`MemoryBank::update`] did with a slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotUpdate {
    Updated,
    /// The convex combination vanished; the previous slot was kept.
    Degenerate,
}

impl MemoryBank {
    /// Initialise from features, L2-normalising every row.
    pub fn init(features: &Matrix) -> Result<Self> {
        let mut slots = features.clone();
        for i in 0..slots.rows() {
            let unit = normalized(features.row(i))
                .ok_or_else(|| Error::Validation(format!("bank init: row {i} is zero or non-finite")))?;
            slots.row_mut(i).copy_from_slice(&unit);
        }
        Ok(MemoryBank {
            slots,
            epoch_alpha: 0.0,
        })
    }

    pub fn len(&self) -> usize {
        self.slots.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.slots.cols()
    }

    pub fn slots(&self) -> &Matrix {
        &self.slots
    }

    pub fn slot(&self, i: usize) -> &[f64] {
        self.slots.row(i)
    }

    /// `slot_i ← normalize((1 − α)·slot_i + α·feature)`.
    pub fn update(&mut self, i: usize, feature: &[f64], alpha: f64) -> Result<SlotUpdate> {
        if i >= self.len() {
            return Err(Error::Argument(format!("slot {i} out of range for bank of {}", self.len())));
        }
        if feature.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "feature has {} dims, bank has {}",
                feature.len(),
                self.dim()
            )));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Argument(format!("alpha {alpha} not in [0,1]")));
        }
        if alpha == 0.0 {
            return Ok(SlotUpdate::Updated);
        }
        let mixed: Vec<f64> = self
            .slot(i)
            .iter()
            .zip(feature)
            .map(|(s, f)| (1.0 - alpha) * s + alpha * f)
            .collect();
        // an exact cancellation leaves only rounding noise behind
        if norm(&mixed) <= 1e-12 {
            return Ok(SlotUpdate::Degenerate);
        }
        match normalized(&mixed) {
            Some(unit) => {
                self.slots.row_mut(i).copy_from_slice(&unit);
                Ok(SlotUpdate::Updated)
            }
            None => Ok(SlotUpdate::Degenerate),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.slots.write_bin(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::init(&Matrix::read_bin(path)?)
    }
}

/// Memory update rate: grows linearly from 0 at epoch 0 to 1 at `total_epochs`.
pub fn alpha_schedule(epoch: usize, total_epochs: usize) -> f64 {
    assert!(total_epochs >= 1, "total_epochs must be >= 1");
    (epoch.min(total_epochs)) as f64 / total_epochs as f64
}
