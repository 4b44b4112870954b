use serde::{Deserialize, Serialize};

use super::TrainError;

/// Cosine-annealed learning rate with warm restarts, advanced once per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub eta_max: f64,
    pub eta_min: f64,
    /// Cycle length in epochs.
    pub cycle_len: usize,
    /// Epochs since the last restart.
    pub t_cur: usize,
    pub current_eta: f64,
}

impl ScheduleState {
    pub fn new(eta_max: f64, eta_min: f64, cycle_len: usize) -> Result<Self, TrainError> {
        if cycle_len == 0 {
            return Err(TrainError::InvalidConfig("schedule cycle length must be positive".into()));
        }
        if !(eta_min > 0.0 && eta_max >= eta_min) {
            return Err(TrainError::InvalidConfig(format!(
                "need 0 < eta_min <= eta_max, got {eta_min} and {eta_max}"
            )));
        }
        let mut s = Self {
            eta_max,
            eta_min,
            cycle_len,
            t_cur: 0,
            current_eta: eta_max,
        };
        s.current_eta = cosine_eta(&s);
        Ok(s)
    }

    /// Moves to the next epoch; reaching the end of a cycle restarts it.
    pub fn advance(&mut self) {
        self.t_cur += 1;
        if self.t_cur >= self.cycle_len {
            self.t_cur = 0;
        }
        self.current_eta = cosine_eta(self);
    }

    /// Learning rate used in epoch `epoch` (0-based) of a fresh schedule.
    pub fn eta_at_epoch(&self, epoch: usize) -> f64 {
        let probe = Self {
            t_cur: epoch % self.cycle_len,
            ..self.clone()
        };
        cosine_eta(&probe)
    }
}

/// `η_min + ½(η_max − η_min)(1 + cos(π·T_cur/T_i))`.
pub fn cosine_eta(state: &ScheduleState) -> f64 {
    let phase = std::f64::consts::PI * state.t_cur as f64 / state.cycle_len as f64;
    state.eta_min + 0.5 * (state.eta_max - state.eta_min) * (1.0 + phase.cos())
}
