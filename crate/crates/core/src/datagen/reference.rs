use serde::{Deserialize, Serialize};

use crate::error::{ImcError, Result};

/// Decoupled discrete first-order lags with unit static gain:
/// `x(k+1) = α x(k) + (1 − α) u(k)`. Used for the model reference and for
/// the modeling-error feedback filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceModel {
    pub alpha: Vec<f64>,
}

impl ReferenceModel {
    /// `α = exp(−τ_s/τ_r)` on every channel.
    pub fn from_time_constant(tau_s: f64, tau_r: f64, channels: usize) -> Result<Self> {
        if !(tau_s > 0.0 && tau_r > 0.0) {
            return Err(ImcError::Config(format!(
                "time constants must be positive (tau_s {tau_s}, tau_r {tau_r})"
            )));
        }
        Ok(ReferenceModel {
            alpha: vec![(-tau_s / tau_r).exp(); channels],
        })
    }

    /// Pass-through with one period of delay (`α = 0`).
    pub fn delay(channels: usize) -> Self {
        ReferenceModel {
            alpha: vec![0.0; channels],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.iter().any(|a| !(0.0..1.0).contains(a)) {
            return Err(ImcError::Config(format!(
                "filter coefficients {:?} must lie in [0, 1)",
                self.alpha
            )));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.alpha.len()
    }
}

/// A [`ReferenceModel`] with state; `output` is the state before the next
/// input is absorbed, which makes the filter strictly proper.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstOrderFilter {
    model: ReferenceModel,
    state: Vec<f64>,
}

impl FirstOrderFilter {
    pub fn new(model: ReferenceModel, initial: Vec<f64>) -> Result<Self> {
        model.validate()?;
        if initial.len() != model.channels() {
            return Err(ImcError::dims("filter initial state", model.channels(), initial.len()));
        }
        Ok(FirstOrderFilter { model, state: initial })
    }

    pub fn output(&self) -> &[f64] {
        &self.state
    }

    pub fn advance(&mut self, input: &[f64]) {
        for ((x, &a), &u) in self.state.iter_mut().zip(&self.model.alpha).zip(input) {
            *x = a * *x + (1.0 - a) * u;
        }
    }

    pub fn reset(&mut self, state: Vec<f64>) {
        self.state = state;
    }
}

/// `ỹ⁰(0) = initial`, `ỹ⁰(k+1) = α ỹ⁰(k) + (1 − α) y⁰(k)`, same length as `y0`.
pub fn filter_reference(y0: &[Vec<f64>], model: &ReferenceModel, initial: &[f64]) -> Result<Vec<Vec<f64>>> {
    let mut f = FirstOrderFilter::new(model.clone(), initial.to_vec())?;
    let mut out = Vec::with_capacity(y0.len());
    for (k, y) in y0.iter().enumerate() {
        if y.len() != model.channels() {
            return Err(ImcError::dims("reference sample", model.channels(), y.len()).at_step(k));
        }
        out.push(f.output().to_vec());
        f.advance(y);
    }
    Ok(out)
}
