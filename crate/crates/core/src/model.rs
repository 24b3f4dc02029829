use crate::error::{ensure_finite, Error, Result};
use crate::habit::HabitParams;
use crate::market::{MarketParams, TimeGrid};
use crate::preferences::PreferenceParams;

/// Everything that defines one consumption problem.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelParams {
    pub market: MarketParams,
    pub prefs: PreferenceParams,
    pub habit: HabitParams,
    pub x0: f64,
    pub horizon: f64,
}

impl ModelParams {
    pub fn new(
        market: MarketParams,
        prefs: PreferenceParams,
        habit: HabitParams,
        x0: f64,
        horizon: f64,
    ) -> Result<Self> {
        ensure_finite("X0", x0)?;
        if !(x0 > 0.0) {
            return Err(Error::InvalidParameter {
                name: "X0",
                value: x0,
                reason: "initial endowment must be positive",
            });
        }
        TimeGrid::new(horizon, 1)?;
        Ok(Self {
            market,
            prefs,
            habit,
            x0,
            horizon,
        })
    }

    /// X0=20, T=10, gamma=10, delta=0.03, alpha=beta=0.1, mu=0.05, r=0.01, sigma=0.2.
    pub fn baseline() -> Self {
        Self {
            market: MarketParams::new(0.01, 0.05, 0.2).unwrap(),
            prefs: PreferenceParams::new(10.0, 0.03).unwrap(),
            habit: HabitParams::new(0.1, 0.1).unwrap(),
            x0: 20.0,
            horizon: 10.0,
        }
    }

    pub fn grid(&self, n_steps: usize) -> Result<TimeGrid> {
        TimeGrid::new(self.horizon, n_steps)
    }
}
