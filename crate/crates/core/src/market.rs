//! Constant-coefficient Black-Scholes market and its state-price density.
//!
//! The deflator follows `dM/M = -r dt - lambda dW`, `M_0 = 1`. Paths are
//! stepped with the exact lognormal transition, so discretisation error only
//! enters through the time integrals built on top of the grid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{ensure_finite, Error, Result};
use crate::exec::Exec;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarketParams {
    r: f64,
    mu: f64,
    sigma: f64,
    lambda: f64,
}

impl MarketParams {
    pub fn new(r: f64, mu: f64, sigma: f64) -> Result<Self> {
        ensure_finite("r", r)?;
        ensure_finite("mu", mu)?;
        let lambda = market_price_of_risk(r, mu, sigma)?;
        Ok(Self { r, mu, sigma, lambda })
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Drift magnitude of `log M`: `E[log M_t] = -(r + lambda^2/2) t`.
    pub fn log_drift(&self) -> f64 {
        self.r + 0.5 * self.lambda * self.lambda
    }
}

/// `(mu - r) / sigma`.
pub fn market_price_of_risk(r: f64, mu: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParameter {
            name: "sigma",
            value: sigma,
            reason: "volatility must be positive and finite",
        });
    }
    Ok((mu - r) / sigma)
}

/// `E[(M_s/M_t)^q | F_t]` for a lag `tau = s - t`.
pub fn spd_moment(q: f64, tau: f64, params: &MarketParams) -> f64 {
    let l2 = params.lambda * params.lambda;
    (-q * params.log_drift() * tau + 0.5 * q * q * l2 * tau).exp()
}

/// Uniform grid `t_k = k * dt`, `k = 0..=n_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidParameter {
                name: "T",
                value: horizon,
                reason: "horizon must be positive and finite",
            });
        }
        if n_steps == 0 {
            return Err(Error::InvalidParameter {
                name: "n_steps",
                value: 0.0,
                reason: "need at least one step",
            });
        }
        Ok(Self { horizon, n_steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_points(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n_points()).map(|k| self.time(k)).collect()
    }
}

/// Simulated market paths, row-major with `n_points` entries per path.
///
/// `int_log_m` is the trapezoid-accumulated running integral
/// `A_t = int_0^t log M_s ds`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathBatch {
    params: MarketParams,
    grid: TimeGrid,
    n_paths: usize,
    brownian: Vec<f64>,
    log_m: Vec<f64>,
    int_log_m: Vec<f64>,
}

impl PathBatch {
    /// Builds paths from Brownian increments laid out as `n_paths x n_steps`.
    pub fn from_increments(params: MarketParams, grid: TimeGrid, increments: &[f64], exec: Exec) -> Result<Self> {
        let n_steps = grid.n_steps();
        if increments.is_empty() || !increments.len().is_multiple_of(n_steps) {
            return Err(Error::GridMismatch {
                expected: n_steps,
                got: increments.len(),
            });
        }
        let n_paths = increments.len() / n_steps;
        Self::build(params, grid, n_paths, exec, |p, dw| {
            dw.copy_from_slice(&increments[p * n_steps..(p + 1) * n_steps])
        })
    }

    fn build<F>(params: MarketParams, grid: TimeGrid, n_paths: usize, exec: Exec, increments: F) -> Result<Self>
    where
        F: Fn(usize, &mut [f64]) + Sync + Send,
    {
        let np = grid.n_points();
        let dt = grid.dt();
        let drift = params.log_drift() * dt;
        let lambda = params.lambda;
        let mut brownian = vec![0.0; n_paths * np];
        let mut log_m = vec![0.0; n_paths * np];
        exec.for_each_row_pair(&mut brownian, &mut log_m, np, |p, w, x| {
            let mut dw = vec![0.0; np - 1];
            increments(p, &mut dw);
            for k in 0..np - 1 {
                w[k + 1] = w[k] + dw[k];
                x[k + 1] = x[k] - drift - lambda * dw[k];
            }
        });
        let mut int_log_m = vec![0.0; n_paths * np];
        exec.for_each_row(&mut int_log_m, np, |p, a| {
            let x = &log_m[p * np..(p + 1) * np];
            for k in 0..np - 1 {
                a[k + 1] = a[k] + 0.5 * dt * (x[k] + x[k + 1]);
            }
        });
        Ok(Self {
            params,
            grid,
            n_paths,
            brownian,
            log_m,
            int_log_m,
        })
    }

    pub fn params(&self) -> &MarketParams {
        &self.params
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn brownian(&self, path: usize) -> &[f64] {
        self.row(&self.brownian, path)
    }

    pub fn log_m(&self, path: usize) -> &[f64] {
        self.row(&self.log_m, path)
    }

    pub fn int_log_m(&self, path: usize) -> &[f64] {
        self.row(&self.int_log_m, path)
    }

    fn row<'a>(&self, data: &'a [f64], path: usize) -> &'a [f64] {
        let np = self.grid.n_points();
        &data[path * np..(path + 1) * np]
    }
}

/// Seeds the stream for one outer path. The stream depends only on
/// `(seed, path)`, never on scheduling.
pub(crate) fn path_rng(seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng
}

pub fn simulate_paths(
    params: &MarketParams,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    exec: Exec,
) -> Result<PathBatch> {
    if n_paths == 0 {
        return Err(Error::InvalidParameter {
            name: "n_paths",
            value: 0.0,
            reason: "need at least one path",
        });
    }
    let sqrt_dt = grid.dt().sqrt();
    PathBatch::build(*params, *grid, n_paths, exec, |p, dw| {
        let mut rng = path_rng(seed, p as u64);
        for z in dw.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *z = sqrt_dt * e;
        }
    })
}
