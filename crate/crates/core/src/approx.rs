//! Closed-form approximations to optimal ratio consumption and their
//! budget calibration.
//!
//! Both approximations are log-affine in `(log eta, log M_t, A_t)` at first
//! order, which is what makes the grid conditional expectations in
//! [`crate::condexp::FlowTable`] exact. The literal second-order `Q` term of the
//! dual expansion is available as [`QMode::Full`]; it depends on `log M_t`
//! through an exponential and is handled by quadrature.

use serde::{Deserialize, Serialize};

use crate::condexp::{adaptive_simpson, annuity_factor, gauss_legendre, FlowTable, KernelTerm, MarkovState, QUAD_TOL};
use crate::error::{Error, Result};
use crate::exec::{pairwise_sum, Exec};
use crate::habit::HabitKernel;
use crate::market::{spd_moment, PathBatch, TimeGrid};
use crate::model::ModelParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApproxKind {
    Bbl,
    Dual,
}

impl ApproxKind {
    pub const ALL: [ApproxKind; 2] = [ApproxKind::Bbl, ApproxKind::Dual];

    pub fn name(self) -> &'static str {
        match self {
            ApproxKind::Bbl => "bbl",
            ApproxKind::Dual => "dual",
        }
    }
}

impl std::str::FromStr for ApproxKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bbl" => Ok(ApproxKind::Bbl),
            "dual" => Ok(ApproxKind::Dual),
            _ => Err(Error::Config(format!(
                "unknown approximation `{s}` (expected bbl or dual)"
            ))),
        }
    }
}

/// Treatment of the `Q` term in the dual exponent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QMode {
    /// `alpha Q_t` is of second order in `(alpha, beta)` and is dropped.
    #[default]
    FirstOrder,
    /// `Q_t = F(t) - E[int_t^T theta_s/theta_t ds | F_t]` evaluated exactly.
    Full,
}

impl std::str::FromStr for QMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first_order" => Ok(QMode::FirstOrder),
            "full" => Ok(QMode::Full),
            _ => Err(Error::Config(format!(
                "unknown dual_q `{s}` (expected first_order or full)"
            ))),
        }
    }
}

/// Left-point time weights: `dt` at `t_0..t_{n-1}`, zero at `t_n`.
pub fn time_weights(grid: &TimeGrid) -> Vec<f64> {
    let mut w = vec![grid.dt(); grid.n_points()];
    w[grid.n_steps()] = 0.0;
    w
}

/// `log chat_k = u_k + v_k log eta + load_m log M_k + load_a A_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineRule {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub load_m: f64,
    pub load_a: f64,
}

impl AffineRule {
    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn log_chat_deterministic(&self, k: usize, log_eta: f64) -> f64 {
        self.u[k] + self.v[k] * log_eta
    }

    pub fn log_chat(&self, k: usize, log_eta: f64, log_m: f64, int_log_m: f64) -> f64 {
        self.log_chat_deterministic(k, log_eta) + self.load_m * log_m + self.load_a * int_log_m
    }
}

/// The full-`Q` dual rule: the first-order affine part plus
/// `-(alpha / (1-gamma)) Q_t`, with the theta-ratio integral tabulated per node.
#[derive(Clone, Debug, PartialEq)]
pub struct FullDualRule {
    pub affine: AffineRule,
    f: Vec<f64>,
    q_coef: f64,
    w: f64,
    // per node: (log weight + deterministic exponent, lag) at the quadrature points
    nodes: Vec<Vec<(f64, f64)>>,
}

impl FullDualRule {
    pub fn theta_ratio(&self, k: usize, log_eta: f64, log_m: f64) -> f64 {
        let z = log_eta + log_m;
        self.nodes[k]
            .iter()
            .map(|&(lw, tau)| (lw + self.w * tau * z).exp())
            .sum()
    }

    pub fn q_term(&self, k: usize, log_eta: f64, log_m: f64) -> f64 {
        self.f[k] - self.theta_ratio(k, log_eta, log_m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ConsumptionRule {
    Affine(AffineRule),
    DualFull(FullDualRule),
}

impl ConsumptionRule {
    pub fn len(&self) -> usize {
        self.affine_part().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn affine_part(&self) -> &AffineRule {
        match self {
            ConsumptionRule::Affine(r) => r,
            ConsumptionRule::DualFull(r) => &r.affine,
        }
    }

    pub fn as_affine(&self) -> Option<&AffineRule> {
        match self {
            ConsumptionRule::Affine(r) => Some(r),
            ConsumptionRule::DualFull(_) => None,
        }
    }

    pub fn log_chat(&self, k: usize, log_eta: f64, log_m: f64, int_log_m: f64) -> f64 {
        match self {
            ConsumptionRule::Affine(r) => r.log_chat(k, log_eta, log_m, int_log_m),
            ConsumptionRule::DualFull(r) => {
                r.affine.log_chat(k, log_eta, log_m, int_log_m) + r.q_coef * r.q_term(k, log_eta, log_m)
            }
        }
    }
}

struct DualConsts {
    gamma: f64,
    delta: f64,
    alpha: f64,
    beta: f64,
    q: f64,
    a: f64,
    l2: f64,
    k_f: f64,
    c_f: f64,
    w: f64,
    horizon: f64,
}

impl DualConsts {
    fn new(model: &ModelParams) -> Self {
        let gamma = model.prefs.gamma();
        let delta = model.prefs.delta();
        let (alpha, beta) = (model.habit.alpha(), model.habit.beta());
        let q = 1.0 - 1.0 / gamma;
        let a = model.market.log_drift();
        let l2 = model.market.lambda().powi(2);
        Self {
            gamma,
            delta,
            alpha,
            beta,
            q,
            a,
            l2,
            k_f: delta / gamma + q * a - 0.5 * q * q * l2,
            c_f: gamma * alpha + (1.0 - gamma) * beta,
            w: -beta * q / gamma,
            horizon: model.horizon,
        }
    }

    fn f(&self, t: f64) -> f64 {
        KernelTerm::exponential(1.0, self.k_f).cumulative((self.horizon - t).max(0.0))
    }

    /// Deterministic part of `log E[theta_s / theta_t | F_t]`; the remaining
    /// dependence is `w (s-t) (log eta + log M_t)`.
    fn theta_exponent(&self, t: f64, s: f64) -> f64 {
        let tau = s - t;
        let (q, w) = (self.q, self.w);
        let mean = -self.a * (q * tau + 0.5 * w * tau * tau);
        let var = self.l2 * (q * q * tau + q * w * tau * tau + w * w * tau * tau * tau / 3.0);
        -self.delta * tau / self.gamma
            - (self.beta * q / self.gamma) * 0.5 * self.delta * (s * s - t * t)
            - (self.c_f / self.gamma) * (self.f(s) - self.f(t))
            + mean
            + 0.5 * var
    }
}

/// `F(t) = E[int_t^T M_s (e^{delta s} M_s)^{-1/gamma} ds | F_t] / (M_t (e^{delta t} M_t)^{-1/gamma})`.
pub fn dual_f(t: f64, model: &ModelParams) -> f64 {
    DualConsts::new(model).f(t)
}

fn positive_eta(eta: f64) -> Result<f64> {
    if eta > 0.0 && eta.is_finite() {
        Ok(eta.ln())
    } else {
        Err(Error::Domain {
            func: "eta",
            value: eta,
            reason: "multiplier must be positive",
        })
    }
}

/// `(eta e^{delta t} M_t {1 + beta a(alpha - beta, T - t)})^{-1/gamma}`.
pub fn bbl_ratio(t: f64, m: f64, eta: f64, model: &ModelParams) -> Result<f64> {
    let le = positive_eta(eta)?;
    if !(m > 0.0) {
        return Err(Error::Domain {
            func: "bbl_ratio",
            value: m,
            reason: "deflator must be positive",
        });
    }
    let g = model.prefs.gamma();
    let mult = 1.0 + model.habit.beta() * annuity_factor(model.habit.net_decay(), model.horizon - t, &model.market);
    Ok((-(le + model.prefs.delta() * t + m.ln() + mult.ln()) / g).exp())
}

pub fn bbl_rule(model: &ModelParams, grid: &TimeGrid) -> AffineRule {
    let g = model.prefs.gamma();
    let beta = model.habit.beta();
    let u = grid
        .times()
        .iter()
        .map(|&t| {
            let mult = 1.0 + beta * annuity_factor(model.habit.net_decay(), model.horizon - t, &model.market);
            -(model.prefs.delta() * t + mult.ln()) / g
        })
        .collect();
    AffineRule {
        u,
        v: vec![-1.0 / g; grid.n_points()],
        load_m: -1.0 / g,
        load_a: 0.0,
    }
}

/// Terms of the dual expansion at one state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DualExpansionTerms {
    pub f: f64,
    pub p: f64,
    pub p_hat: f64,
    /// `E[int_t^T theta_s / theta_t ds | F_t]`
    pub theta_ratio: f64,
    pub q: f64,
}

impl DualExpansionTerms {
    /// Loading of `P_t` on `A_t`.
    pub fn p_load_a(model: &ModelParams) -> f64 {
        -1.0 / model.prefs.gamma()
    }

    /// Loading of `P_hat_t` on `A_t`.
    pub fn p_hat_load_a(model: &ModelParams) -> f64 {
        let g = model.prefs.gamma();
        model.habit.beta() * (1.0 - 1.0 / g)
    }
}

pub fn dual_expansion_terms(state: &MarkovState, eta: f64, model: &ModelParams) -> Result<DualExpansionTerms> {
    let le = positive_eta(eta)?;
    let c = DualConsts::new(model);
    let t = state.t;
    let f = c.f(t);
    let run = t * le + 0.5 * c.delta * t * t + state.a;
    let p = -run / c.gamma + f;
    let p_hat = c.beta * c.q * run + c.c_f * f;
    let z = le + state.m.ln();
    let theta_ratio = if t < c.horizon {
        adaptive_simpson(
            |s| (c.theta_exponent(t, s) + c.w * (s - t) * z).exp(),
            t,
            c.horizon,
            QUAD_TOL,
        )
    } else {
        0.0
    };
    Ok(DualExpansionTerms {
        f,
        p,
        p_hat,
        theta_ratio,
        q: f - theta_ratio,
    })
}

/// `(eta e^{delta t + beta P_t + (alpha gamma / (1-gamma)) Q_t} M_t)^{-1/gamma}`.
pub fn dual_ratio(state: &MarkovState, eta: f64, model: &ModelParams, qmode: QMode) -> Result<f64> {
    let terms = dual_expansion_terms(state, eta, model)?;
    let g = model.prefs.gamma();
    let q = match qmode {
        QMode::FirstOrder => 0.0,
        QMode::Full => terms.q,
    };
    let expo = eta.ln()
        + model.prefs.delta() * state.t
        + model.habit.beta() * terms.p
        + model.habit.alpha() * g / (1.0 - g) * q
        + state.m.ln();
    Ok((-expo / g).exp())
}

/// `psi*_t = eta M_t (eta e^{delta t + P_hat_t} M_t)^{-1/gamma} e^{alpha R_t}`, where
/// `R_t` is the theta-ratio expectation (`QMode::Full`) or its leading term `F(t)`.
pub fn psi_star(state: &MarkovState, eta: f64, model: &ModelParams, qmode: QMode) -> Result<f64> {
    let terms = dual_expansion_terms(state, eta, model)?;
    let g = model.prefs.gamma();
    let le = eta.ln();
    let y = state.m.ln();
    let r = match qmode {
        QMode::FirstOrder => terms.f,
        QMode::Full => terms.theta_ratio,
    };
    Ok((le + y - (le + model.prefs.delta() * state.t + terms.p_hat + y) / g + model.habit.alpha() * r).exp())
}

fn dual_affine(model: &ModelParams, grid: &TimeGrid) -> AffineRule {
    let c = DualConsts::new(model);
    let g = c.gamma;
    let times = grid.times();
    AffineRule {
        u: times
            .iter()
            .map(|&t| -(c.delta * t - c.beta * c.delta * t * t / (2.0 * g) + c.beta * c.f(t)) / g)
            .collect(),
        v: times.iter().map(|&t| -(1.0 - c.beta * t / g) / g).collect(),
        load_m: -1.0 / g,
        load_a: c.beta / (g * g),
    }
}

const THETA_NODES: usize = 32;

pub fn dual_rule(model: &ModelParams, grid: &TimeGrid, qmode: QMode) -> ConsumptionRule {
    let affine = dual_affine(model, grid);
    match qmode {
        QMode::FirstOrder => ConsumptionRule::Affine(affine),
        QMode::Full => {
            let c = DualConsts::new(model);
            let (x, wq) = gauss_legendre(THETA_NODES);
            let nodes = grid
                .times()
                .iter()
                .map(|&t| {
                    let half = 0.5 * (c.horizon - t);
                    if half <= 0.0 {
                        return Vec::new();
                    }
                    x.iter()
                        .zip(&wq)
                        .map(|(&xi, &wi)| {
                            let tau = half * (xi + 1.0);
                            ((half * wi).ln() + c.theta_exponent(t, t + tau), tau)
                        })
                        .collect()
                })
                .collect();
            ConsumptionRule::DualFull(FullDualRule {
                affine,
                f: grid.times().iter().map(|&t| c.f(t)).collect(),
                q_coef: -c.alpha / (1.0 - c.gamma),
                w: c.w,
                nodes,
            })
        }
    }
}

pub fn rule_for(kind: ApproxKind, model: &ModelParams, grid: &TimeGrid, qmode: QMode) -> ConsumptionRule {
    match kind {
        ApproxKind::Bbl => ConsumptionRule::Affine(bbl_rule(model, grid)),
        ApproxKind::Dual => dual_rule(model, grid, qmode),
    }
}

/// Closed-form Merton multiplier on the grid for `alpha = beta = 0`:
/// `sum_k w_k e^{-delta t_k / gamma} E[M_k^{1-1/gamma}] eta^{-1/gamma} = X0`.
pub fn merton_log_eta(model: &ModelParams, grid: &TimeGrid) -> f64 {
    let g = model.prefs.gamma();
    let q = 1.0 - 1.0 / g;
    let w = time_weights(grid);
    let s: f64 = grid
        .times()
        .iter()
        .zip(&w)
        .map(|(&t, &wk)| wk * (-model.prefs.delta() * t / g).exp() * spd_moment(q, t, &model.market))
        .sum();
    g * (s / model.x0).ln()
}

/// Solves `budget(log eta) = target` by bracket doubling and bisection on `log eta`.
pub fn bisect_log_eta<F: FnMut(f64) -> f64>(mut budget: F, target: f64, guess: f64) -> Result<f64> {
    let sign = |b: f64| (b - target).signum();
    let s0 = sign(budget(guess));
    if s0 == 0.0 {
        return Ok(guess);
    }
    let mut width = 1.0;
    let mut bracket = None;
    for _ in 0..200 {
        let (lo, hi) = (guess - width, guess + width);
        let (slo, shi) = (sign(budget(lo)), sign(budget(hi)));
        if slo.is_nan() || shi.is_nan() {
            break;
        }
        if slo != s0 {
            bracket = Some((lo, guess, slo));
            break;
        }
        if shi != s0 {
            bracket = Some((guess, hi, s0));
            break;
        }
        width *= 2.0;
    }
    let (mut lo, mut hi, slo) = bracket.ok_or_else(|| {
        Error::Calibration(format!(
            "no sign change of the budget residual around log eta = {guess}"
        ))
    })?;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= 1e-13 * (1.0 + mid.abs()) {
            break;
        }
        let sm = sign(budget(mid));
        if sm == 0.0 {
            return Ok(mid);
        }
        if sm == slo {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// `E[sum_k w_k M_k c_k]` for an affine rule, from the grid flow table at `t = 0`.
pub fn expected_budget(rule: &AffineRule, model: &ModelParams, grid: &TimeGrid, log_eta: f64) -> Result<f64> {
    let hk = HabitKernel::new(&model.habit, grid);
    let tab = FlowTable::new(rule, &hk, grid, &model.market, log_eta)?;
    let w = time_weights(grid);
    Ok((0..grid.n_points())
        .map(|k| w[k] * tab.coef(0, k).log_value(0.0, 0.0, 0.0).exp())
        .sum())
}

/// Multiplier solving the population budget `E[sum_k w_k M_k c_k] = X0`.
pub fn calibrate_eta_expected(rule: &AffineRule, model: &ModelParams, grid: &TimeGrid) -> Result<f64> {
    let mut err = None;
    let le = bisect_log_eta(
        |le| match expected_budget(rule, model, grid, le) {
            Ok(b) => b,
            Err(e) => {
                err = Some(e);
                f64::NAN
            }
        },
        model.x0,
        merton_log_eta(model, grid),
    )?;
    match err {
        Some(e) => Err(e),
        None => Ok(le.exp()),
    }
}

pub const BUDGET_TOL: f64 = 1e-3;

/// A calibrated approximation evaluated on a path batch.
#[derive(Clone, Debug)]
pub struct ApproxSolution {
    pub kind: ApproxKind,
    pub rule: ConsumptionRule,
    pub log_eta: f64,
    /// Sample budget `mean_p sum_k w_k M_k c_k`.
    pub budget: f64,
    n_points: usize,
    log_chat: Vec<f64>,
    log_h: Vec<f64>,
}

impl ApproxSolution {
    pub fn eta(&self) -> f64 {
        self.log_eta.exp()
    }

    pub fn log_chat(&self, path: usize) -> &[f64] {
        &self.log_chat[path * self.n_points..(path + 1) * self.n_points]
    }

    pub fn log_h(&self, path: usize) -> &[f64] {
        &self.log_h[path * self.n_points..(path + 1) * self.n_points]
    }

    /// Replaces the evaluated ratio and habit rows.
    pub fn with_rows(self, log_chat: Vec<f64>, log_h: Vec<f64>) -> Self {
        assert_eq!(log_chat.len(), self.log_chat.len());
        assert_eq!(log_h.len(), self.log_h.len());
        Self {
            log_chat,
            log_h,
            ..self
        }
    }

    pub fn budget_residual(&self, x0: f64) -> f64 {
        (self.budget - x0).abs() / x0
    }
}

/// Fills ratio and habit rows for every path at a fixed multiplier.
pub fn evaluate_rule(
    rule: &ConsumptionRule,
    model: &ModelParams,
    batch: &PathBatch,
    log_eta: f64,
    exec: Exec,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let grid = batch.grid();
    let np = grid.n_points();
    if rule.len() != np {
        return Err(Error::GridMismatch {
            expected: np,
            got: rule.len(),
        });
    }
    let hk = HabitKernel::new(&model.habit, grid);
    let mut log_chat = vec![0.0; batch.n_paths() * np];
    let mut log_h = vec![0.0; batch.n_paths() * np];
    exec.for_each_row_pair(&mut log_chat, &mut log_h, np, |p, lc, lh| {
        let y = batch.log_m(p);
        let a = batch.int_log_m(p);
        for k in 0..np {
            lc[k] = rule.log_chat(k, log_eta, y[k], a[k]);
        }
        let rho = hk.ratio_decay();
        lh[0] = 0.0;
        for k in 0..np - 1 {
            lh[k + 1] = rho * lh[k] + hk.gain * lc[k];
        }
    });
    Ok((log_chat, log_h))
}

fn sample_budget(batch: &PathBatch, w: &[f64], log_chat: &[f64], log_h: &[f64], exec: Exec) -> f64 {
    let np = w.len();
    let per_path = exec.map(batch.n_paths(), |p| {
        let y = batch.log_m(p);
        let (lc, lh) = (&log_chat[p * np..(p + 1) * np], &log_h[p * np..(p + 1) * np]);
        let terms: Vec<f64> = (0..np).map(|k| w[k] * (y[k] + lc[k] + lh[k]).exp()).collect();
        pairwise_sum(&terms)
    });
    pairwise_sum(&per_path) / batch.n_paths() as f64
}

/// Calibrates `eta` so the sample budget equals `X0` on `batch` (common random
/// numbers across iterates) and returns the evaluated solution.
pub fn calibrate_eta(
    kind: ApproxKind,
    model: &ModelParams,
    batch: &PathBatch,
    qmode: QMode,
    exec: Exec,
) -> Result<ApproxSolution> {
    let grid = *batch.grid();
    let rule = rule_for(kind, model, &grid, qmode);
    calibrate_rule(kind, rule, model, batch, exec)
}

pub fn calibrate_rule(
    kind: ApproxKind,
    rule: ConsumptionRule,
    model: &ModelParams,
    batch: &PathBatch,
    exec: Exec,
) -> Result<ApproxSolution> {
    let grid = *batch.grid();
    let np = grid.n_points();
    let w = time_weights(&grid);
    let guess = merton_log_eta(model, &grid);
    let log_eta = match rule.as_affine() {
        Some(affine) => {
            // log c_k(eta) = log c_k(1) + s_k log eta with deterministic s_k.
            let hk = HabitKernel::new(&model.habit, &grid);
            let mut sens = vec![0.0; np];
            let mut sens_h = vec![0.0; np];
            hk.ratio_and_level_into(&affine.v, &mut sens_h, &mut sens);
            let (lc0, lh0) = evaluate_rule(&rule, model, batch, 0.0, exec)?;
            let base: Vec<f64> = {
                let mut b = vec![0.0; batch.n_paths() * np];
                exec.for_each_row(&mut b, np, |p, row| {
                    let y = batch.log_m(p);
                    for k in 0..np {
                        row[k] = (w[k]).ln() + y[k] + lc0[p * np + k] + lh0[p * np + k];
                    }
                });
                b
            };
            bisect_log_eta(
                |le| {
                    let per_path = exec.map(batch.n_paths(), |p| {
                        let terms: Vec<f64> = (0..np).map(|k| (base[p * np + k] + sens[k] * le).exp()).collect();
                        pairwise_sum(&terms)
                    });
                    pairwise_sum(&per_path) / batch.n_paths() as f64
                },
                model.x0,
                guess,
            )?
        }
        None => bisect_log_eta(
            |le| match evaluate_rule(&rule, model, batch, le, exec) {
                Ok((lc, lh)) => sample_budget(batch, &w, &lc, &lh, exec),
                Err(_) => f64::NAN,
            },
            model.x0,
            guess,
        )?,
    };
    let (log_chat, log_h) = evaluate_rule(&rule, model, batch, log_eta, exec)?;
    let budget = sample_budget(batch, &w, &log_chat, &log_h, exec);
    let sol = ApproxSolution {
        kind,
        rule,
        log_eta,
        budget,
        n_points: np,
        log_chat,
        log_h,
    };
    let res = sol.budget_residual(model.x0);
    if !(res < BUDGET_TOL) {
        return Err(Error::Calibration(format!(
            "{} budget residual {res:.3e} exceeds {BUDGET_TOL:.0e}",
            kind.name()
        )));
    }
    Ok(sol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condexp::{cond_exp_exp_affine, ExpAffineSpec};
    use crate::habit::HabitParams;
    use crate::market::simulate_paths;
    use crate::preferences::PreferenceParams;

    fn no_habit() -> ModelParams {
        ModelParams {
            habit: HabitParams::none(),
            ..ModelParams::baseline()
        }
    }

    fn state(t: f64, m: f64, a: f64) -> MarkovState {
        MarkovState::new(0, t, m, a, 0.0).unwrap()
    }

    #[test]
    fn bbl_reduces_to_merton_without_habit() {
        let m = no_habit();
        let (t, mt, eta) = (3.0, 0.8, 0.4);
        let merton = (eta * (0.03f64 * t).exp() * mt).powf(-0.1);
        assert!((bbl_ratio(t, mt, eta, &m).unwrap() / merton - 1.0).abs() < 1e-14);
    }

    #[test]
    fn bbl_multiplier_vanishes_at_horizon() {
        let m = ModelParams::baseline();
        let base = (0.5 * (0.03f64 * 10.0).exp() * 0.7).powf(-0.1);
        assert!((bbl_ratio(10.0, 0.7, 0.5, &m).unwrap() / base - 1.0).abs() < 1e-14);
    }

    #[test]
    fn bbl_baseline_origin_value() {
        // (1 + 0.1 (1 - e^{-0.1}) / 0.01)^{-0.1}
        let m = ModelParams::baseline();
        let expected = (1.0 + 0.1 * (1.0 - (-0.1f64).exp()) / 0.01).powf(-0.1);
        assert!((bbl_ratio(0.0, 1.0, 1.0, &m).unwrap() - expected).abs() < 1e-14);
        assert!(bbl_ratio(0.0, 1.0, 0.0, &m).is_err());
    }

    #[test]
    fn bbl_rule_matches_pointwise_formula() {
        let m = ModelParams::baseline();
        let g = m.grid(40).unwrap();
        let rule = bbl_rule(&m, &g);
        for k in [0usize, 13, 40] {
            let (y, le) = (-0.3f64, 0.7f64);
            let direct = bbl_ratio(g.time(k), y.exp(), le.exp(), &m).unwrap().ln();
            assert!((rule.log_chat(k, le, y, 5.0) - direct).abs() < 1e-13);
        }
    }

    #[test]
    fn dual_terms_vanish_at_horizon() {
        let m = ModelParams::baseline();
        let t = dual_expansion_terms(&state(10.0, 0.8, -2.0), 0.3, &m).unwrap();
        assert_eq!(t.f, 0.0);
        assert_eq!(t.q, 0.0);
        assert_eq!(t.theta_ratio, 0.0);
    }

    #[test]
    fn dual_reduces_to_merton_without_habit() {
        let m = no_habit();
        let st = state(4.0, 0.9, -0.4);
        let eta = 0.25;
        let merton = (eta * (0.03f64 * 4.0).exp() * 0.9).powf(-0.1);
        for qm in [QMode::FirstOrder, QMode::Full] {
            assert!((dual_ratio(&st, eta, &m, qm).unwrap() / merton - 1.0).abs() < 1e-12);
        }
        let t = dual_expansion_terms(&st, eta, &m).unwrap();
        assert!(t.q.abs() < 1e-12, "{t:?}");
        // psi* is the Merton optimum Ihat(t, eta M) eta M
        let psi = psi_star(&st, eta, &m, QMode::Full).unwrap();
        let ihat = m.prefs.inverse_marginal(4.0, eta * 0.9).unwrap();
        assert!((psi / (ihat * eta * 0.9) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn f_matches_direct_integral() {
        let m = ModelParams::baseline();
        let g = m.prefs.gamma();
        let q = 1.0 - 1.0 / g;
        for t in [0.0, 2.5, 9.0] {
            let direct = adaptive_simpson(
                |s| (-m.prefs.delta() * (s - t) / g).exp() * spd_moment(q, s - t, &m.market),
                t,
                10.0,
                1e-13,
            );
            assert!((dual_f(t, &m) - direct).abs() < 1e-11);
        }
    }

    #[test]
    fn theta_exponent_matches_exp_affine_backend() {
        // theta_s/theta_t = exp(det + q X_s + w int_t^s X_u du) with the X-part
        // evaluated by the general exponential-affine formula.
        let m = ModelParams::baseline();
        let c = DualConsts::new(&m);
        let (t, s) = (2.0, 7.5);
        let det = -c.delta * (s - t) / c.gamma
            - (c.beta * c.q / c.gamma) * 0.5 * c.delta * (s * s - t * t)
            - (c.c_f / c.gamma) * (c.f(s) - c.f(t));
        let spec = ExpAffineSpec {
            t,
            s,
            a0: det,
            b_end: c.q,
            kernel: vec![KernelTerm::constant(c.w)],
        };
        let oracle = cond_exp_exp_affine(&spec, &m.market).unwrap();
        assert!((c.theta_exponent(t, s).exp() / oracle - 1.0).abs() < 1e-11);
    }

    #[test]
    fn psi_star_inverts_to_dual_ratio() {
        let m = ModelParams::baseline();
        for qm in [QMode::FirstOrder, QMode::Full] {
            for (t, mt, a) in [(0.0, 1.0, 0.0), (3.0, 0.85, -0.2), (7.25, 1.3, -1.1)] {
                let st = state(t, mt, a);
                let psi = psi_star(&st, 0.02, &m, qm).unwrap();
                let via_i = m.prefs.inverse_ratio_marginal(t, psi).unwrap();
                let direct = dual_ratio(&st, 0.02, &m, qm).unwrap();
                assert!((via_i / direct - 1.0).abs() < 1e-10, "{qm:?} t={t}");
            }
        }
    }

    #[test]
    fn p_hat_decomposes_into_p_and_f() {
        let m = ModelParams::baseline();
        let (g, a, b) = (10.0, 0.1, 0.1);
        let t = dual_expansion_terms(&state(4.0, 0.9, -0.3), 0.05, &m).unwrap();
        assert!((t.p_hat - (b * (1.0 - g) * t.p + a * g * t.f)).abs() < 1e-12);
    }

    #[test]
    fn dual_eta_scaling_exponent() {
        // log chat is affine in log eta with slope -(1 - beta t / gamma) / gamma.
        let m = ModelParams::baseline();
        let st = state(6.0, 0.8, -0.5);
        let r1 = dual_ratio(&st, 1.0, &m, QMode::FirstOrder).unwrap();
        let r2 = dual_ratio(&st, 2.0, &m, QMode::FirstOrder).unwrap();
        let slope = -(1.0 - 0.1 * 6.0 / 10.0) / 10.0;
        assert!(((r2 / r1).ln() / 2f64.ln() - slope).abs() < 1e-12);
    }

    #[test]
    fn dual_rule_matches_pointwise_formula() {
        let m = ModelParams::baseline();
        let g = m.grid(40).unwrap();
        for qm in [QMode::FirstOrder, QMode::Full] {
            let rule = dual_rule(&m, &g, qm);
            for k in [0usize, 17, 39, 40] {
                let (y, a, le) = (-0.4f64, -1.2, -3.0f64);
                let direct = dual_ratio(&state(g.time(k), y.exp(), a), le.exp(), &m, qm)
                    .unwrap()
                    .ln();
                assert!((rule.log_chat(k, le, y, a) - direct).abs() < 1e-10, "{qm:?} k={k}");
            }
        }
    }

    #[test]
    fn bisection_agrees_with_merton_closed_form() {
        let m = no_habit();
        let g = m.grid(40).unwrap();
        for kind in ApproxKind::ALL {
            let rule = rule_for(kind, &m, &g, QMode::FirstOrder);
            let eta = calibrate_eta_expected(rule.as_affine().unwrap(), &m, &g).unwrap();
            let closed = merton_log_eta(&m, &g).exp();
            assert!((eta / closed - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn bisection_reports_missing_bracket() {
        assert!(matches!(bisect_log_eta(|_| 1.0, 2.0, 0.0), Err(Error::Calibration(_))));
    }

    #[test]
    fn sample_calibration_hits_the_budget() {
        let m = ModelParams::baseline();
        let g = m.grid(40).unwrap();
        let batch = simulate_paths(&m.market, &g, 500, 3, Exec::Sequential).unwrap();
        for kind in ApproxKind::ALL {
            let sol = calibrate_eta(kind, &m, &batch, QMode::FirstOrder, Exec::Sequential).unwrap();
            assert!(sol.budget_residual(m.x0) < 1e-9, "{kind:?}");
            assert!(sol.log_chat(7).iter().all(|x| x.is_finite()));
        }
        let sol = calibrate_eta(ApproxKind::Dual, &m, &batch, QMode::Full, Exec::Sequential).unwrap();
        assert!(sol.budget_residual(m.x0) < 1e-9);
    }

    #[test]
    fn richer_agent_has_lower_multiplier() {
        let base = ModelParams::baseline();
        let rich = ModelParams { x0: 40.0, ..base };
        let g = base.grid(40).unwrap();
        let batch = simulate_paths(&base.market, &g, 300, 5, Exec::Sequential).unwrap();
        for kind in ApproxKind::ALL {
            let a = calibrate_eta(kind, &base, &batch, QMode::FirstOrder, Exec::Sequential).unwrap();
            let b = calibrate_eta(kind, &rich, &batch, QMode::FirstOrder, Exec::Sequential).unwrap();
            assert!(b.eta() < a.eta());
        }
    }

    #[test]
    fn gamma_six_calibrates() {
        let m = ModelParams {
            prefs: PreferenceParams::new(6.0, 0.03).unwrap(),
            ..ModelParams::baseline()
        };
        let g = m.grid(40).unwrap();
        let batch = simulate_paths(&m.market, &g, 200, 1, Exec::Parallel).unwrap();
        let sol = calibrate_eta(ApproxKind::Dual, &m, &batch, QMode::FirstOrder, Exec::Parallel).unwrap();
        assert!(sol.eta() > 0.0);
    }
}
