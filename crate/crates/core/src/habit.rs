//! Geometric habit level `log h_t = beta int_0^t e^{-alpha (t-s)} log c_s ds`.
//!
//! On a uniform grid the integral is advanced with the exponential recursion
//!
//! ```text
//! log h_{k+1} = e^{-alpha dt} log h_k + beta dt e^{-alpha dt / 2} log c_k,   log h_0 = 0
//! ```
//!
//! so `h_k` depends on consumption at nodes `0..k` only. Substituting
//! `log c_k = log chat_k + log h_k` gives the reduced recursion driven by the
//! ratio with decay `e^{-alpha dt} + beta dt e^{-alpha dt / 2}`, which is the
//! grid counterpart of `e^{-(alpha - beta) dt}`.

use crate::error::{ensure_finite, Error, Result};
use crate::market::TimeGrid;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HabitParams {
    alpha: f64,
    beta: f64,
}

impl HabitParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        ensure_finite("alpha", alpha)?;
        ensure_finite("beta", beta)?;
        if beta < 0.0 {
            return Err(Error::InvalidParameter {
                name: "beta",
                value: beta,
                reason: "persistence weight must be non-negative",
            });
        }
        if alpha < beta {
            return Err(Error::InvalidParameter {
                name: "alpha",
                value: alpha,
                reason: "depreciation must satisfy alpha >= beta",
            });
        }
        Ok(Self { alpha, beta })
    }

    pub fn none() -> Self {
        Self { alpha: 0.0, beta: 0.0 }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// `alpha - beta`, the decay rate of the ratio-driven habit.
    pub fn net_decay(&self) -> f64 {
        self.alpha - self.beta
    }
}

/// Per-step coefficients of the grid recursion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HabitKernel {
    /// `e^{-alpha dt}`
    pub decay: f64,
    /// `beta dt e^{-alpha dt / 2}`
    pub gain: f64,
}

impl HabitKernel {
    pub fn new(hp: &HabitParams, grid: &TimeGrid) -> Self {
        let dt = grid.dt();
        Self {
            decay: (-hp.alpha * dt).exp(),
            gain: hp.beta * dt * (-0.5 * hp.alpha * dt).exp(),
        }
    }

    /// Decay of the ratio-driven recursion.
    pub fn ratio_decay(&self) -> f64 {
        self.decay + self.gain
    }

    /// Weight of `log c_i` in `log h_k` for `i < k`.
    pub fn weight(&self, k: usize, i: usize) -> f64 {
        debug_assert!(i < k);
        self.gain * self.decay.powi((k - 1 - i) as i32)
    }

    /// Weight of `log chat_i` in `log h_k` for `i < k` under the reduced recursion.
    pub fn ratio_weight(&self, k: usize, i: usize) -> f64 {
        debug_assert!(i < k);
        self.gain * self.ratio_decay().powi((k - 1 - i) as i32)
    }

    /// Fills `log_h` from `log_chat` and writes `log c = log chat + log h` into `log_c`.
    pub(crate) fn ratio_and_level_into(&self, log_chat: &[f64], log_h: &mut [f64], log_c: &mut [f64]) {
        let rho = self.ratio_decay();
        log_h[0] = 0.0;
        for k in 0..log_chat.len() - 1 {
            log_h[k + 1] = rho * log_h[k] + self.gain * log_chat[k];
        }
        for k in 0..log_chat.len() {
            log_c[k] = log_chat[k] + log_h[k];
        }
    }

    pub(crate) fn level_into(&self, log_c: &[f64], log_h: &mut [f64]) {
        log_h[0] = 0.0;
        for k in 0..log_c.len() - 1 {
            log_h[k + 1] = self.decay * log_h[k] + self.gain * log_c[k];
        }
    }
}

fn check_len(grid: &TimeGrid, got: usize) -> Result<()> {
    if got != grid.n_points() {
        return Err(Error::GridMismatch {
            expected: grid.n_points(),
            got,
        });
    }
    Ok(())
}

/// Habit path generated by a log-consumption path.
pub fn integrate_log_habit(log_c: &[f64], hp: &HabitParams, grid: &TimeGrid) -> Result<Vec<f64>> {
    check_len(grid, log_c.len())?;
    let mut log_h = vec![0.0; log_c.len()];
    HabitKernel::new(hp, grid).level_into(log_c, &mut log_h);
    Ok(log_h)
}

/// Habit and consumption level generated by a log-ratio path `log chat = log(c/h)`.
pub fn ratio_and_level(log_chat: &[f64], hp: &HabitParams, grid: &TimeGrid) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len(grid, log_chat.len())?;
    let n = log_chat.len();
    let mut log_h = vec![0.0; n];
    let mut log_c = vec![0.0; n];
    HabitKernel::new(hp, grid).ratio_and_level_into(log_chat, &mut log_h, &mut log_c);
    Ok((log_h, log_c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(t: f64, n: usize) -> TimeGrid {
        TimeGrid::new(t, n).unwrap()
    }

    #[test]
    fn params_validation() {
        assert!(HabitParams::new(0.1, 0.1).is_ok());
        assert!(HabitParams::new(0.05, 0.1).is_err());
        assert!(HabitParams::new(0.1, -0.01).is_err());
    }

    #[test]
    fn zero_consumption_gives_zero_habit() {
        let g = grid(10.0, 40);
        let h = integrate_log_habit(&[0.0; 41], &HabitParams::new(0.1, 0.1).unwrap(), &g).unwrap();
        assert!(h.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn unit_log_consumption_approaches_closed_form() {
        // (beta/alpha)(1 - e^{-alpha t}) with alpha = beta = 0.1, t = 10.
        let hp = HabitParams::new(0.1, 0.1).unwrap();
        let exact = 1.0 - (-1.0f64).exp();
        let mut prev = f64::INFINITY;
        for n in [40, 80, 160] {
            let h = integrate_log_habit(&vec![1.0; n + 1], &hp, &grid(10.0, n)).unwrap();
            let err = (h[n] - exact).abs();
            assert!(err < 1e-4, "n={n}: {}", h[n]);
            assert!(err < prev / 3.0);
            prev = err;
        }
    }

    #[test]
    fn grid_mismatch_is_reported() {
        let r = integrate_log_habit(&[0.0; 10], &HabitParams::none(), &grid(1.0, 10));
        assert!(matches!(r, Err(Error::GridMismatch { expected: 11, got: 10 })));
    }

    #[test]
    fn matches_refined_quadrature() {
        // log c_s = sin(s) + 0.3 s on a 40-step grid vs. a 64x refined left sum of the
        // continuum integral with the same piecewise-constant consumption.
        let hp = HabitParams::new(0.2, 0.15).unwrap();
        let g = grid(10.0, 40);
        let log_c: Vec<f64> = g.times().iter().map(|s| s.sin() + 0.3 * s).collect();
        let h = integrate_log_habit(&log_c, &hp, &g).unwrap();
        let fine = 40 * 64;
        let ds = 10.0 / fine as f64;
        for k in [10usize, 25, 40] {
            let t = g.time(k);
            let mut acc = 0.0;
            for m in 0..k * 64 {
                let s = (m as f64 + 0.5) * ds;
                let c = log_c[m / 64];
                acc += hp.beta() * (-hp.alpha() * (t - s)).exp() * c * ds;
            }
            assert!((h[k] - acc).abs() < 1e-3, "k={k}: {} vs {acc}", h[k]);
        }
    }

    #[test]
    fn unit_ratio_means_unit_habit() {
        let g = grid(10.0, 40);
        let (h, c) = ratio_and_level(&[0.0; 41], &HabitParams::new(0.1, 0.1).unwrap(), &g).unwrap();
        assert!(h.iter().chain(c.iter()).all(|&x| x == 0.0));
    }

    #[test]
    fn no_habit_limit() {
        let g = grid(5.0, 20);
        let lc: Vec<f64> = (0..21).map(|k| (k as f64 * 0.7).cos()).collect();
        let (h, c) = ratio_and_level(&lc, &HabitParams::none(), &g).unwrap();
        assert!(h.iter().all(|&x| x == 0.0));
        assert_eq!(c, lc);
    }

    #[test]
    fn equal_rates_reduce_to_running_sum() {
        // alpha = beta: the continuum kernel does not decay; on the grid the reduced
        // recursion has decay e^{-alpha dt} + beta dt e^{-alpha dt/2} = 1 + O(dt^3).
        let hp = HabitParams::new(0.1, 0.1).unwrap();
        let g = grid(10.0, 400);
        let lc: Vec<f64> = g.times().iter().map(|s| 0.2 + 0.05 * s).collect();
        let (h, _) = ratio_and_level(&lc, &hp, &g).unwrap();
        let dt = g.dt();
        let mut trap = 0.0;
        for k in 0..400 {
            trap += 0.5 * dt * (lc[k] + lc[k + 1]);
        }
        assert!(
            (h[400] - hp.beta() * trap).abs() < 2e-3,
            "{} vs {}",
            h[400],
            hp.beta() * trap
        );
    }

    proptest! {
        #[test]
        fn reduced_recursion_is_consistent(
            xs in proptest::collection::vec(-2.0f64..2.0, 41),
            alpha in 0.0f64..0.5,
            frac in 0.0f64..1.0,
        ) {
            let hp = HabitParams::new(alpha, alpha * frac).unwrap();
            let g = grid(10.0, 40);
            let (h, c) = ratio_and_level(&xs, &hp, &g).unwrap();
            let h2 = integrate_log_habit(&c, &hp, &g).unwrap();
            for k in 0..41 {
                prop_assert!((h[k] - h2[k]).abs() < 1e-12);
                prop_assert!((c[k] - xs[k] - h[k]).abs() < 1e-12);
            }
        }

        #[test]
        fn habit_is_monotone_in_ratio(
            xs in proptest::collection::vec(-2.0f64..2.0, 21),
            bump in proptest::collection::vec(0.0f64..1.0, 21),
        ) {
            let hp = HabitParams::new(0.3, 0.2).unwrap();
            let g = grid(5.0, 20);
            let ys: Vec<f64> = xs.iter().zip(&bump).map(|(x, b)| x + b).collect();
            let (h1, _) = ratio_and_level(&xs, &hp, &g).unwrap();
            let (h2, _) = ratio_and_level(&ys, &hp, &g).unwrap();
            for k in 0..21 {
                prop_assert!(h2[k] >= h1[k] - 1e-15);
                prop_assert!(h1[k].exp() > 0.0);
            }
        }
    }
}
