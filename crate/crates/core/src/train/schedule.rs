//! Per-epoch schedules for the term count `n`, the adapter weight `α` and
//! the learning rate.
//!
//! Ramps run over `epochs − 1` steps so the last training epoch already uses
//! the terminal values.

use std::f64::consts::PI;

use crate::adapter::AlphaSchedule;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleSetting {
    Fixed { n_p: usize },
    RampFromOne { n_p: usize },
    RampFromNs { n_s: usize, n_p: usize },
}

impl ScheduleSetting {
    /// Ramp from `n_s` to `2·n_s`.
    pub fn doubling(n_s: usize) -> Self {
        ScheduleSetting::RampFromNs { n_s, n_p: 2 * n_s }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ScheduleSetting::Fixed { .. } => Ok(()),
            ScheduleSetting::RampFromOne { n_p } if n_p < 1 => Err(Error::invalid("ramp from one needs n_p >= 1")),
            ScheduleSetting::RampFromNs { n_s, n_p } if n_s > n_p => {
                Err(Error::invalid(format!("ramp start n_s={n_s} exceeds n_p={n_p}")))
            }
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            ScheduleSetting::Fixed { .. } => "fixed",
            ScheduleSetting::RampFromOne { .. } => "ramp_one",
            ScheduleSetting::RampFromNs { .. } => "ramp_ns",
        }
    }

    pub fn start(&self) -> usize {
        match *self {
            ScheduleSetting::Fixed { n_p } => n_p,
            ScheduleSetting::RampFromOne { .. } => 1,
            ScheduleSetting::RampFromNs { n_s, .. } => n_s,
        }
    }

    pub fn n_p(&self) -> usize {
        match *self {
            ScheduleSetting::Fixed { n_p }
            | ScheduleSetting::RampFromOne { n_p }
            | ScheduleSetting::RampFromNs { n_p, .. } => n_p,
        }
    }

    /// Term count for `epoch` of a run lasting `epochs` epochs: linear in the
    /// epoch, rounded down, clamped to `[start, n_p]`.
    pub fn n_at(&self, epoch: usize, epochs: usize) -> Result<usize> {
        self.validate()?;
        if epoch >= epochs {
            return Err(Error::invalid(format!(
                "epoch {epoch} outside a run of {epochs} epochs"
            )));
        }
        let (start, end) = (self.start(), self.n_p());
        if epochs == 1 {
            return Ok(end);
        }
        let n = start + (end - start) * epoch / (epochs - 1);
        Ok(n.clamp(start, end))
    }
}

/// `α` for `epoch` of a run lasting `epochs` epochs; exactly zero in the last.
pub fn alpha_at(alpha0: f64, epoch: usize, epochs: usize) -> Result<f64> {
    if epoch >= epochs {
        return Err(Error::invalid(format!(
            "epoch {epoch} outside a run of {epochs} epochs"
        )));
    }
    if epochs == 1 {
        AlphaSchedule::new(alpha0, 1)?;
        return Ok(0.0);
    }
    AlphaSchedule::new(alpha0, epochs - 1)?.alpha_at(epoch)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from the initial rate to zero over the run.
    Cosine,
    /// Multiply by `gamma` every `every` epochs.
    Step {
        every: usize,
        gamma: f64,
    },
}

impl LrSchedule {
    pub fn lr_at(&self, lr0: f64, epoch: usize, epochs: usize) -> f64 {
        match *self {
            LrSchedule::Constant => lr0,
            LrSchedule::Cosine => 0.5 * lr0 * (1.0 + (PI * epoch as f64 / epochs.max(1) as f64).cos()),
            LrSchedule::Step { every, gamma } => lr0 * gamma.powi((epoch / every.max(1)) as i32),
        }
    }
}
