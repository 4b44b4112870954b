use super::TrainError;
use crate::params::ParamStore;

/// Exponential moving average of parameters; evaluation reads the shadow.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub gamma: f64,
    shadow: Option<ParamStore>,
}

impl EmaState {
    /// An EMA without a shadow; [`ema_update`] fails until [`EmaState::init`].
    pub fn uninitialized(gamma: f64) -> Self {
        Self { gamma, shadow: None }
    }

    /// Shadow starts equal to the live parameters.
    pub fn new(gamma: f64, live: &ParamStore) -> Self {
        Self {
            gamma,
            shadow: Some(live.clone()),
        }
    }

    pub fn init(&mut self, live: &ParamStore) {
        self.shadow = Some(live.clone());
    }

    pub fn shadow(&self) -> Option<&ParamStore> {
        self.shadow.as_ref()
    }

    pub fn into_shadow(self) -> Option<ParamStore> {
        self.shadow
    }
}

/// `shadow ← γ·shadow + (1 − γ)·live`, elementwise.
pub fn ema_update(ema: &mut EmaState, live: &ParamStore) -> Result<(), TrainError> {
    let gamma = ema.gamma;
    let shadow = ema.shadow.as_mut().ok_or(TrainError::EmaUninitialized)?;
    live.check_matches(shadow)?;
    shadow.check_matches(live)?;
    for (name, s) in shadow.iter_mut() {
        let l = live.get(name)?;
        for (si, &li) in s.data_mut().iter_mut().zip(l.data()) {
            *si = gamma * *si + (1.0 - gamma) * li;
        }
    }
    Ok(())
}
