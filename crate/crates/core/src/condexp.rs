//! Conditional expectations of path functionals of the deflator.
//!
//! Two backends. The analytic one reduces every functional to
//! `exp(a0 + b X_s + int_t^s w(u) X_u du)` with `X_u = log(M_u/M_t)` Gaussian,
//! or, on the simulation grid, to a finite linear combination of the `X_k`.
//! The nested one re-simulates inner paths from a [`MarkovState`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::approx::{AffineRule, ConsumptionRule};
use crate::error::{Error, Result};
use crate::exec::MeanSe;
use crate::habit::HabitKernel;
use crate::market::{MarketParams, TimeGrid};

/// Adaptive Simpson quadrature with absolute tolerance `tol`.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(&f, a, b, fa, fm, fb, whole, tol, 48)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

pub const QUAD_TOL: f64 = 1e-12;

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for j in 2..=n {
                let p2 = ((2 * j - 1) as f64 * z * p1 - (j - 1) as f64 * p0) / j as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// One term `coef * (s-u)^power * e^{-rate (s-u)}` of a weight kernel on `[t, s]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelTerm {
    pub coef: f64,
    pub power: u32,
    pub rate: f64,
}

impl KernelTerm {
    pub fn constant(coef: f64) -> Self {
        Self::exponential(coef, 0.0)
    }

    pub fn exponential(coef: f64, rate: f64) -> Self {
        Self { coef, power: 0, rate }
    }

    /// Value at lag `y = s - u`.
    pub fn eval(&self, y: f64) -> f64 {
        self.coef * y.powi(self.power as i32) * (-self.rate * y).exp()
    }

    /// `int_0^z coef y^p e^{-rate y} dy`.
    pub fn cumulative(&self, z: f64) -> f64 {
        let r = self.rate;
        let rz = r * z;
        let base = match self.power {
            0 => {
                if rz.abs() < 1e-8 {
                    z * (1.0 - 0.5 * rz + rz * rz / 6.0)
                } else {
                    -(-rz).exp_m1() / r
                }
            }
            _ => {
                if rz.abs() < 1e-6 {
                    z * z * (0.5 - rz / 3.0 + rz * rz / 8.0)
                } else {
                    (-(-rz).exp_m1() - rz * (-rz).exp()) / (r * r)
                }
            }
        };
        self.coef * base
    }

    fn check(&self) -> Result<()> {
        if !self.coef.is_finite() || !self.rate.is_finite() {
            return Err(Error::UnsupportedKernel("kernel coefficients must be finite"));
        }
        if self.power > 1 {
            return Err(Error::UnsupportedKernel("kernel powers above 1"));
        }
        Ok(())
    }
}

/// `E[exp(a0 + b_end X_s + int_t^s w(u) X_u du) | F_t]`, `X_u = log(M_u / M_t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpAffineSpec {
    pub t: f64,
    pub s: f64,
    pub a0: f64,
    pub b_end: f64,
    pub kernel: Vec<KernelTerm>,
}

impl ExpAffineSpec {
    pub fn lag(&self) -> f64 {
        self.s - self.t
    }

    /// `int_{t+x}^s w(u) du`.
    pub fn tail_weight(&self, x: f64) -> f64 {
        let z = self.lag() - x;
        self.kernel.iter().map(|k| k.cumulative(z)).sum()
    }

    pub fn weight(&self, u: f64) -> f64 {
        self.kernel.iter().map(|k| k.eval(self.s - u)).sum()
    }

    fn validate(&self) -> Result<()> {
        if !(self.s >= self.t) || !self.t.is_finite() || !self.s.is_finite() {
            return Err(Error::InvalidParameter {
                name: "s",
                value: self.s,
                reason: "evaluation time must be finite and not before the conditioning time",
            });
        }
        self.kernel.iter().try_for_each(KernelTerm::check)
    }
}

/// Mean and variance of the Gaussian exponent of an [`ExpAffineSpec`], excluding `a0`.
///
/// Writing `b X_s + int w X = int_t^s (b + W(v)) dX_v` with `W(v) = int_v^s w`,
/// `mean = -(r + lambda^2/2) int (b + W)` and `var = lambda^2 int (b + W)^2`.
pub fn exp_affine_moments(spec: &ExpAffineSpec, params: &MarketParams) -> Result<(f64, f64)> {
    spec.validate()?;
    let tau = spec.lag();
    let b = spec.b_end;
    let f1 = adaptive_simpson(|x| b + spec.tail_weight(x), 0.0, tau, QUAD_TOL);
    let f2 = adaptive_simpson(
        |x| {
            let y = b + spec.tail_weight(x);
            y * y
        },
        0.0,
        tau,
        QUAD_TOL,
    );
    let l2 = params.lambda() * params.lambda();
    Ok((-params.log_drift() * f1, l2 * f2))
}

pub fn cond_exp_exp_affine(spec: &ExpAffineSpec, params: &MarketParams) -> Result<f64> {
    let (mean, var) = exp_affine_moments(spec, params)?;
    Ok((spec.a0 + mean + 0.5 * var).exp())
}

/// `E[int_t^{t+tau} e^{-kappa (s-t)} M_s/M_t ds | F_t] = (1 - e^{-(kappa+r) tau}) / (kappa + r)`.
pub fn annuity_factor(kappa: f64, tau: f64, params: &MarketParams) -> f64 {
    KernelTerm::exponential(1.0, kappa + params.r()).cumulative(tau)
}

/// Single-kernel form of `int_t^s w1(u) [X_u + int_t^u k2(u - v) X_v dv] du`.
///
/// `outer` terms are `c1 e^{-k1 (s-u)}`, `inner` terms are `c2 e^{-k2 (u-v)}`.
/// The cross term integrates to `c1 c2 (e^{-k1 x} - e^{-k2 x}) / (k2 - k1)`
/// at lag `x = s - v`, or `c1 c2 x e^{-k x}` when the rates coincide.
pub fn flatten_iterated(outer: &[KernelTerm], inner: &[KernelTerm]) -> Result<Vec<KernelTerm>> {
    for k in outer.iter().chain(inner) {
        k.check()?;
        if k.power != 0 {
            return Err(Error::UnsupportedKernel(
                "only pure exponential kernels can be flattened",
            ));
        }
    }
    let mut out = outer.to_vec();
    for o in outer {
        for i in inner {
            let c = o.coef * i.coef;
            if c == 0.0 {
                continue;
            }
            let d = i.rate - o.rate;
            if d.abs() < 1e-10 * (1.0 + o.rate.abs()) {
                out.push(KernelTerm {
                    coef: c,
                    power: 1,
                    rate: 0.5 * (o.rate + i.rate),
                });
            } else {
                out.push(KernelTerm::exponential(c / d, o.rate));
                out.push(KernelTerm::exponential(-c / d, i.rate));
            }
        }
    }
    Ok(out)
}

/// Deterministic coefficients of `log E[M_k c_k | F_j]` on the grid.
///
/// For `k >= j`, `log E[M_k c_k | F_j] = c0 + ky log M_j + ka A_j + kh log h_j`
/// when `log chat` follows an [`AffineRule`] and `log h` the grid recursion of
/// [`HabitKernel`] with the trapezoid `A`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowCoef {
    pub c0: f64,
    pub ky: f64,
    pub ka: f64,
    pub kh: f64,
}

impl FlowCoef {
    pub fn log_value(&self, log_m: f64, int_log_m: f64, log_h: f64) -> f64 {
        self.c0 + self.ky * log_m + self.ka * int_log_m + self.kh * log_h
    }
}

#[derive(Clone, Debug)]
pub struct FlowTable {
    n_points: usize,
    offsets: Vec<usize>,
    coefs: Vec<FlowCoef>,
}

impl FlowTable {
    pub fn new(
        rule: &AffineRule,
        habit: &HabitKernel,
        grid: &TimeGrid,
        params: &MarketParams,
        log_eta: f64,
    ) -> Result<Self> {
        let np = grid.n_points();
        if rule.len() != np {
            return Err(Error::GridMismatch {
                expected: np,
                got: rule.len(),
            });
        }
        let dt = grid.dt();
        let a = params.log_drift();
        let l2 = params.lambda() * params.lambda();
        let rho = habit.ratio_decay();
        let (py, pa) = (rule.load_m, rule.load_a);
        let mut offsets = Vec::with_capacity(np);
        let mut coefs = Vec::with_capacity(np * (np + 1) / 2);
        let mut beta = vec![0.0; np];
        let mut theta = vec![0.0; np];
        for j in 0..np {
            offsets.push(coefs.len());
            for k in j..np {
                // weight of log chat_i in log(M_k c_k)
                for i in j..k {
                    beta[i] = habit.gain * rho.powi((k - 1 - i) as i32);
                }
                beta[k] = 1.0;
                let mut c0 = 0.0;
                let mut ky = 1.0;
                let mut ka = 0.0;
                for i in j..=k {
                    c0 += beta[i] * rule.log_chat_deterministic(i, log_eta);
                    ky += beta[i] * (py + pa * (i - j) as f64 * dt);
                    ka += pa * beta[i];
                }
                // loading on X_l for l in j+1..=k
                let mut later = 0.0;
                for l in (j + 1..=k).rev() {
                    theta[l] = py * beta[l] + pa * dt * (later + 0.5 * beta[l]);
                    later += beta[l];
                }
                theta[k] += 1.0;
                let mut mean = 0.0;
                let mut var = 0.0;
                let mut tail = 0.0;
                for l in (j + 1..=k).rev() {
                    mean -= a * dt * (l - j) as f64 * theta[l];
                    tail += theta[l];
                    var += tail * tail;
                }
                var *= l2 * dt;
                coefs.push(FlowCoef {
                    c0: c0 + mean + 0.5 * var,
                    ky,
                    ka,
                    kh: rho.powi((k - j) as i32),
                });
            }
        }
        Ok(Self {
            n_points: np,
            offsets,
            coefs,
        })
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn coef(&self, j: usize, k: usize) -> &FlowCoef {
        assert!(j <= k && k < self.n_points);
        &self.coefs[self.offsets[j] + (k - j)]
    }
}

/// Sufficient statistic of an outer path at grid node `k`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarkovState {
    pub k: usize,
    pub t: f64,
    pub m: f64,
    pub a: f64,
    pub log_h: f64,
}

impl MarkovState {
    pub fn new(k: usize, t: f64, m: f64, a: f64, log_h: f64) -> Result<Self> {
        if !(m > 0.0) || !m.is_finite() {
            return Err(Error::Domain {
                func: "MarkovState",
                value: m,
                reason: "deflator must be positive",
            });
        }
        Ok(Self { k, t, m, a, log_h })
    }
}

/// Inner path on a uniform sub-grid starting at the state's time.
#[derive(Clone, Debug)]
pub struct InnerPath {
    pub t0: f64,
    pub h: f64,
    pub log_m: Vec<f64>,
    pub int_log_m: Vec<f64>,
}

impl InnerPath {
    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.h
    }

    /// `log(M_{t_i} / M_{t_0})`.
    pub fn rel(&self, i: usize) -> f64 {
        self.log_m[i] - self.log_m[0]
    }

    pub fn len(&self) -> usize {
        self.log_m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_m.is_empty()
    }

    /// Trapezoid rule for `int f(i)` over the sub-grid.
    pub fn trapezoid<F: Fn(usize) -> f64>(&self, f: F) -> f64 {
        let n = self.len();
        if n < 2 {
            return 0.0;
        }
        let mut acc = 0.5 * (f(0) + f(n - 1));
        for i in 1..n - 1 {
            acc += f(i);
        }
        acc * self.h
    }
}

pub type CustomFunctional<'a> = &'a (dyn Fn(&InnerPath) -> f64 + Sync);

/// Path functionals understood by [`nested_mc`].
pub enum Functional<'a> {
    /// `(M_s / M_t)^q` at `s = t + tau`.
    SpdMoment {
        q: f64,
        tau: f64,
    },
    ExpAffine(&'a ExpAffineSpec),
    /// `int_t^{t+tau} e^{-kappa (s-t)} M_s / M_t ds`.
    Annuity {
        kappa: f64,
        tau: f64,
    },
    /// `sum_{k >= j} coefs[k] M_k c_k` on the outer grid, with `c` generated by
    /// `rule` at multiplier `e^{log_eta}` and the habit recursion.
    ConsumptionFlow {
        rule: &'a ConsumptionRule,
        habit: HabitKernel,
        log_eta: f64,
        coefs: &'a [f64],
    },
    /// Arbitrary functional of an inner path over `[t, t + tau]`.
    Custom {
        tau: f64,
        f: CustomFunctional<'a>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NestedOptions {
    pub n_inner: usize,
    pub seed: u64,
    /// Outer path id; with the node index it selects the inner stream.
    pub path: u64,
    /// Sub-steps across the inner horizon for continuous-time functionals.
    pub fine_steps: usize,
}

impl NestedOptions {
    pub fn new(n_inner: usize, seed: u64) -> Self {
        Self {
            n_inner,
            seed,
            path: 0,
            fine_steps: 400,
        }
    }

    pub fn at_path(mut self, path: u64) -> Self {
        self.path = path;
        self
    }
}

pub const DEFAULT_INNER_PATHS: usize = 256;

/// Stream for the inner simulation of outer path `path` at node `node`.
pub(crate) fn inner_rng(seed: u64, path: u64, node: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&path.to_le_bytes());
    key[16..24].copy_from_slice(&node.to_le_bytes());
    key[24..].copy_from_slice(b"inner-mc");
    ChaCha8Rng::from_seed(key)
}

fn simulate_inner(
    state: &MarkovState,
    params: &MarketParams,
    h: f64,
    steps: usize,
    rng: &mut ChaCha8Rng,
    path: &mut InnerPath,
) {
    let drift = params.log_drift() * h;
    let vol = params.lambda() * h.sqrt();
    path.t0 = state.t;
    path.h = h;
    path.log_m.clear();
    path.int_log_m.clear();
    let mut y = state.m.ln();
    let mut a = state.a;
    path.log_m.push(y);
    path.int_log_m.push(a);
    for _ in 0..steps {
        let z: f64 = StandardNormal.sample(rng);
        let y1 = y - drift - vol * z;
        a += 0.5 * h * (y + y1);
        y = y1;
        path.log_m.push(y);
        path.int_log_m.push(a);
    }
}

/// Inner-simulation estimate of `E[functional | state]` with its standard error.
pub fn nested_mc(
    state: &MarkovState,
    functional: &Functional<'_>,
    grid: &TimeGrid,
    params: &MarketParams,
    opts: &NestedOptions,
) -> Result<MeanSe> {
    if opts.n_inner == 0 {
        return Err(Error::InvalidParameter {
            name: "inner_paths",
            value: 0.0,
            reason: "need at least one inner path",
        });
    }
    let horizon_tau = |tau: f64| -> Result<f64> {
        if !(tau >= 0.0) || !tau.is_finite() {
            return Err(Error::InvalidParameter {
                name: "tau",
                value: tau,
                reason: "lag must be non-negative",
            });
        }
        Ok(tau)
    };
    let (h, steps) = match functional {
        Functional::ConsumptionFlow { rule, coefs, .. } => {
            if rule.len() != grid.n_points() || coefs.len() != grid.n_points() {
                return Err(Error::GridMismatch {
                    expected: grid.n_points(),
                    got: coefs.len().min(rule.len()),
                });
            }
            if state.k > grid.n_steps() {
                return Err(Error::GridMismatch {
                    expected: grid.n_points(),
                    got: state.k + 1,
                });
            }
            (grid.dt(), grid.n_steps() - state.k)
        }
        Functional::SpdMoment { tau, .. } | Functional::Annuity { tau, .. } | Functional::Custom { tau, .. } => {
            let tau = horizon_tau(*tau)?;
            (tau / opts.fine_steps.max(1) as f64, opts.fine_steps.max(1))
        }
        Functional::ExpAffine(spec) => {
            spec.validate()?;
            let tau = spec.lag();
            (tau / opts.fine_steps.max(1) as f64, opts.fine_steps.max(1))
        }
    };

    // Degenerate lag: the functional is known at the conditioning time.
    if steps == 0 || h == 0.0 {
        let path = InnerPath {
            t0: state.t,
            h: 0.0,
            log_m: vec![state.m.ln()],
            int_log_m: vec![state.a],
        };
        let v = eval_functional(functional, state, &path);
        return Ok(MeanSe { mean: v, se: 0.0 });
    }

    let mut rng = inner_rng(opts.seed, opts.path, state.k as u64);
    let mut path = InnerPath {
        t0: state.t,
        h,
        log_m: Vec::with_capacity(steps + 1),
        int_log_m: Vec::with_capacity(steps + 1),
    };
    let mut samples = Vec::with_capacity(opts.n_inner);
    for _ in 0..opts.n_inner {
        simulate_inner(state, params, h, steps, &mut rng, &mut path);
        samples.push(eval_functional(functional, state, &path));
    }
    Ok(MeanSe::from_samples(&samples))
}

fn eval_functional(functional: &Functional<'_>, state: &MarkovState, path: &InnerPath) -> f64 {
    let last = path.len() - 1;
    match functional {
        Functional::SpdMoment { q, .. } => (q * path.rel(last)).exp(),
        Functional::ExpAffine(spec) => {
            let int = path.trapezoid(|i| spec.weight(path.time(i).min(spec.s)) * path.rel(i));
            (spec.a0 + spec.b_end * path.rel(last) + int).exp()
        }
        Functional::Annuity { kappa, .. } => path.trapezoid(|i| (path.rel(i) - kappa * i as f64 * path.h).exp()),
        Functional::ConsumptionFlow {
            rule,
            habit,
            log_eta,
            coefs,
        } => {
            let rho = habit.ratio_decay();
            let mut log_h = state.log_h;
            let mut acc = 0.0;
            for i in 0..=last {
                let k = state.k + i;
                let lc = rule.log_chat(k, *log_eta, path.log_m[i], path.int_log_m[i]);
                if coefs[k] != 0.0 {
                    acc += coefs[k] * (path.log_m[i] + lc + log_h).exp();
                }
                log_h = rho * log_h + habit.gain * lc;
            }
            acc
        }
        Functional::Custom { f, .. } => f(path),
    }
}
