//! Learning-rate schedules and validation-driven stopping rules.
//!
//! Epoch conventions: [`scheduler_a`] takes a 0-based epoch (its step
//! formula floors `epoch / 15`), [`scheduler_b`] a 1-based epoch (its table
//! starts at "epoch <= 25"). The training loop numbers epochs from 1 and
//! passes `epoch - 1` to the former.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Step decay: `init_lr * 0.1^floor(epoch / 15)`, 0-based `epoch`.
pub fn scheduler_a(epoch: usize, init_lr: f64) -> f64 {
    // Dividing by the exact power of ten rounds once; repeated 0.1 factors
    // would not land on the decimal values.
    init_lr / 10f64.powi((epoch / 15) as i32)
}

/// Fixed multi-stage table, 1-based `epoch`.
pub fn scheduler_b(epoch: usize) -> Result<f64> {
    Ok(match epoch {
        0 => return Err(Error::Usage("scheduler B epochs start at 1".into())),
        1..=25 => 3.0e-4,
        26..=30 => 1.5e-4,
        31..=35 => 7.5e-5,
        36..=40 => 3.0e-5,
        _ => 1.0e-5,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Minimize,
    Maximize,
}

impl Direction {
    fn improves(self, candidate: f64, best: f64, min_delta: f64) -> bool {
        match self {
            Direction::Minimize => candidate < best - min_delta,
            Direction::Maximize => candidate > best + min_delta,
        }
    }

    fn worst(self) -> f64 {
        match self {
            Direction::Minimize => f64::INFINITY,
            Direction::Maximize => f64::NEG_INFINITY,
        }
    }
}

fn check_metric(m: f64) -> Result<()> {
    if m.is_nan() {
        return Err(Error::Domain("validation metric is NaN".into()));
    }
    Ok(())
}

/// Reduce-on-plateau automaton.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauState {
    pub best_metric: f64,
    pub epochs_since_improvement: usize,
    pub current_lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub direction: Direction,
}

impl PlateauState {
    pub fn new(init_lr: f64, direction: Direction) -> Self {
        Self {
            best_metric: direction.worst(),
            epochs_since_improvement: 0,
            current_lr: init_lr,
            factor: 0.5,
            patience: 2,
            min_delta: 1e-6,
            direction,
        }
    }

    /// Feeds one validation metric; returns the learning rate for the next
    /// epoch.
    pub fn step(&mut self, metric: f64) -> Result<f64> {
        check_metric(metric)?;
        if self.direction.improves(metric, self.best_metric, self.min_delta) {
            self.best_metric = metric;
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
            if self.epochs_since_improvement > self.patience {
                self.current_lr *= self.factor;
                self.epochs_since_improvement = 0;
            }
        }
        Ok(self.current_lr)
    }
}

pub fn plateau_step(state: &mut PlateauState, metric: f64) -> Result<f64> {
    state.step(metric)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Early-stopping automaton: stops once more than `patience` consecutive
/// epochs fail to improve on the best metric.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopState {
    pub best_metric: f64,
    pub epochs_since_improvement: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub direction: Direction,
}

impl EarlyStopState {
    pub fn new(patience: usize, direction: Direction) -> Self {
        Self {
            best_metric: direction.worst(),
            epochs_since_improvement: 0,
            patience,
            min_delta: 1e-6,
            direction,
        }
    }

    pub fn step(&mut self, metric: f64) -> Result<StopDecision> {
        check_metric(metric)?;
        if self.direction.improves(metric, self.best_metric, self.min_delta) {
            self.best_metric = metric;
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
        }
        Ok(if self.epochs_since_improvement > self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        })
    }
}

pub fn early_stop_step(state: &mut EarlyStopState, metric: f64) -> Result<StopDecision> {
    state.step(metric)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// Step decay by 0.1 every 15 epochs.
    A,
    /// Fixed multi-stage table (ignores `init_lr`).
    B,
    /// Constant start, halved after validation loss plateaus.
    Plateau,
    Fixed,
}

/// The learning-rate policy of one training run.
#[derive(Clone, Debug)]
pub struct LrSchedule {
    kind: ScheduleKind,
    init_lr: f64,
    plateau: PlateauState,
}

impl LrSchedule {
    /// `init_lr` must be positive, except that a fixed schedule also
    /// accepts 0 (frozen weights).
    pub fn new(kind: ScheduleKind, init_lr: f64) -> Result<Self> {
        let frozen = kind == ScheduleKind::Fixed && init_lr == 0.0;
        if !(init_lr > 0.0 && init_lr.is_finite()) && !frozen {
            return Err(Error::config(format!("initial learning rate must be positive, got {init_lr}")));
        }
        Ok(Self {
            kind,
            init_lr,
            plateau: PlateauState::new(init_lr, Direction::Minimize),
        })
    }

    /// Learning rate for 1-based training epoch `epoch`.
    pub fn lr(&self, epoch: usize) -> f64 {
        match self.kind {
            ScheduleKind::A => scheduler_a(epoch.saturating_sub(1), self.init_lr),
            ScheduleKind::B => scheduler_b(epoch.max(1)).expect("epoch >= 1"),
            ScheduleKind::Plateau => self.plateau.current_lr,
            ScheduleKind::Fixed => self.init_lr,
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn plateau_state(&self) -> &PlateauState {
        &self.plateau
    }

    pub fn set_plateau_state(&mut self, state: PlateauState) {
        self.plateau = state;
    }

    /// Reports the validation loss at the end of an epoch.
    pub fn observe(&mut self, val_loss: f64) -> Result<()> {
        if self.kind == ScheduleKind::Plateau {
            self.plateau.step(val_loss)?;
        } else {
            check_metric(val_loss)?;
        }
        Ok(())
    }
}
