//! Power utility over the consumption-to-habit ratio and its conjugates.
//!
//! `U(t, x) = e^{-delta t} x^{1-gamma} / (1 - gamma)` with `gamma > 1`, so
//! that `-x U''/U' = gamma > 1` everywhere.

use crate::error::{ensure_finite, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PreferenceParams {
    gamma: f64,
    delta: f64,
}

fn positive(func: &'static str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain {
            func,
            value: x,
            reason: "argument must be positive and finite",
        })
    }
}

impl PreferenceParams {
    pub fn new(gamma: f64, delta: f64) -> Result<Self> {
        ensure_finite("gamma", gamma)?;
        ensure_finite("delta", delta)?;
        if !(gamma > 1.0) {
            return Err(Error::InvalidParameter {
                name: "gamma",
                value: gamma,
                reason: "relative risk aversion must exceed 1",
            });
        }
        if delta < 0.0 {
            return Err(Error::InvalidParameter {
                name: "delta",
                value: delta,
                reason: "time preference must be non-negative",
            });
        }
        Ok(Self { gamma, delta })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn utility(&self, t: f64, x: f64) -> Result<f64> {
        positive("utility", x)?;
        Ok(self.utility_from_log(t, x.ln()))
    }

    pub fn marginal_utility(&self, t: f64, x: f64) -> Result<f64> {
        positive("marginal_utility", x)?;
        Ok((-self.delta * t - self.gamma * x.ln()).exp())
    }

    /// The map `I` with `U'(t, I(t,x)) I(t,x) = x`.
    pub fn inverse_ratio_marginal(&self, t: f64, x: f64) -> Result<f64> {
        positive("inverse_ratio_marginal", x)?;
        Ok(self.log_inverse_ratio_marginal(t, x.ln()).exp())
    }

    /// Inverse marginal utility `Ihat` with `U'(t, Ihat(t,x)) = x`.
    pub fn inverse_marginal(&self, t: f64, x: f64) -> Result<f64> {
        positive("inverse_marginal", x)?;
        Ok((-(x.ln() + self.delta * t) / self.gamma).exp())
    }

    /// `V1(t,x) = inf_z { -U(t, e^{-z}) - x z }`.
    pub fn conjugate_v1(&self, t: f64, x: f64) -> Result<f64> {
        positive("conjugate_v1", x)?;
        Ok(self.conjugate_v1_log(t, x, x.ln()))
    }

    // Log-domain kernels used on hot paths; callers guarantee the domain.

    pub(crate) fn utility_from_log(&self, t: f64, log_x: f64) -> f64 {
        let g1 = 1.0 - self.gamma;
        (g1 * log_x - self.delta * t).exp() / g1
    }

    pub(crate) fn log_inverse_ratio_marginal(&self, t: f64, log_x: f64) -> f64 {
        (log_x + self.delta * t) / (1.0 - self.gamma)
    }

    pub(crate) fn conjugate_v1_log(&self, t: f64, x: f64, log_x: f64) -> f64 {
        x / (1.0 - self.gamma) * (log_x + self.delta * t - 1.0)
    }
}

/// `V2(x) = inf_z { e^z - x z } = x - x log x`.
pub fn conjugate_v2(x: f64) -> Result<f64> {
    positive("conjugate_v2", x)?;
    Ok(x - x * x.ln())
}
