//! Leaky integrate-and-fire dynamics and the arctangent surrogate derivative.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// LIF constants. `tau` is dimensionless; thresholds are in potential units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LifParams {
    pub tau: f64,
    pub u_thr: f64,
    pub u_reset: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        Self { tau: 2.0, u_thr: 1.0, u_reset: 0.0 }
    }
}

impl LifParams {
    pub fn new(tau: f64, u_thr: f64, u_reset: f64) -> Result<Self> {
        let p = Self { tau, u_thr, u_reset };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.u_thr.is_finite() && self.u_reset.is_finite() && self.u_thr > self.u_reset) {
            return Err(Error::Config(format!(
                "threshold {} must exceed reset potential {}",
                self.u_thr, self.u_reset
            )));
        }
        Ok(())
    }

    /// Charging step: `H = U + (I - (U - U_reset)) / tau`.
    #[inline]
    pub fn charge(&self, u_prev: f64, input: f64) -> f64 {
        u_prev + (input - (u_prev - self.u_reset)) / self.tau
    }

    /// Heaviside with the boundary case firing.
    #[inline]
    pub fn fires(&self, h: f64) -> bool {
        h >= self.u_thr
    }
}

/// Membrane potentials of a population.
#[derive(Clone, Debug, PartialEq)]
pub struct LifState {
    pub u: Vec<f64>,
}

impl LifState {
    /// Every neuron at the reset potential.
    pub fn at_rest(len: usize, params: &LifParams) -> Self {
        Self { u: vec![params.u_reset; len] }
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }
}

/// One LIF update for the whole population.
pub fn lif_step(state: &LifState, input: &[f64], params: &LifParams) -> Result<(Vec<u8>, LifState)> {
    if state.len() != input.len() {
        return Err(Error::Dimension(format!(
            "state has {} neurons but input has {}",
            state.len(),
            input.len()
        )));
    }
    if let Some(i) = input.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("non-finite input current at neuron {i}")));
    }
    let mut spikes = Vec::with_capacity(input.len());
    let mut next = Vec::with_capacity(input.len());
    for (&u, &i) in state.u.iter().zip(input) {
        let h = params.charge(u, i);
        if params.fires(h) {
            spikes.push(1);
            next.push(params.u_reset);
        } else {
            spikes.push(0);
            next.push(h);
        }
    }
    Ok((spikes, LifState { u: next }))
}

/// Arctangent surrogate family `S(x) = atan(pi * alpha * x / 2) / pi + 1/2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Surrogate {
    pub alpha: f64,
}

impl Default for Surrogate {
    fn default() -> Self {
        Self { alpha: 2.0 }
    }
}

impl Surrogate {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::Config(format!("surrogate alpha must be positive, got {alpha}")));
        }
        Ok(Self { alpha })
    }

    /// Smooth step whose derivative is [`Surrogate::grad`].
    pub fn smooth_step(&self, x: f64) -> f64 {
        (PI * self.alpha * x / 2.0).atan() / PI + 0.5
    }

    #[inline]
    pub fn grad(&self, x: f64) -> f64 {
        surrogate_grad(x, self.alpha)
    }
}

/// Derivative of the arctangent smooth step, evaluated at `x = H - U_thr`.
#[inline]
pub fn surrogate_grad(x: f64, alpha: f64) -> f64 {
    let z = PI * alpha * x / 2.0;
    alpha / (2.0 * (1.0 + z * z))
}
