//! Dual controls, primal and dual values, and the welfare-loss certificate.
//!
//! On the grid the primal is `max E[sum_k w_k U(t_k, chat_k)]` subject to
//! `E[sum_k w_k M_k c_k] <= X0` with `log h = H log c`, `H_kj = b rho^(k-1-j)`.
//! For any positive adapted `psi` and `eta > 0`,
//!
//! ```text
//! V = E[sum_k w_k (-V1(t_k, psi_k) - eta M_k V2(phi_k / (eta M_k)))] + eta X0,
//! phi_j = psi_j - sum_{k>j} H_kj E[psi_k | F_j],
//! ```
//!
//! bounds the primal from above whenever `phi > 0`.

use serde::{Deserialize, Serialize};

use crate::approx::{bisect_log_eta, calibrate_eta, time_weights, ApproxKind, ApproxSolution, QMode};
use crate::condexp::{nested_mc, FlowTable, Functional, MarkovState, NestedOptions, DEFAULT_INNER_PATHS};
use crate::error::{Error, Result};
use crate::exec::{pairwise_sum, Exec, MeanSe};
use crate::habit::HabitKernel;
use crate::market::PathBatch;
use crate::model::ModelParams;
use crate::preferences::conjugate_v2;

/// How conditional expectations inside `psi'` are computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Analytic,
    Nested { inner_paths: usize, seed: u64 },
}

impl Backend {
    pub fn nested(seed: u64) -> Self {
        Backend::Nested {
            inner_paths: DEFAULT_INNER_PATHS,
            seed,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Backend::Analytic => "analytic",
            Backend::Nested { .. } => "nested",
        }
    }
}

/// Choice of the dual multiplier `eta'` paired with `psi' = eta' G`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EtaRule {
    /// The calibrated primal multiplier `eta*`.
    Primal,
    /// The root of the budget generated by `I(t, psi')` and its habit.
    #[default]
    Budget,
}

impl std::str::FromStr for EtaRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "primal" => Ok(EtaRule::Primal),
            "budget" => Ok(EtaRule::Budget),
            _ => Err(Error::Config(format!(
                "unknown eta_rule `{s}` (expected primal or budget)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DualControls {
    pub eta_prime: f64,
    n_points: usize,
    psi: Vec<f64>,
    phi: Vec<f64>,
    /// Largest `|sum|` of the resolvent residual coefficients; zero up to rounding.
    pub resolvent_residual: f64,
}

impl DualControls {
    pub fn psi(&self, path: usize) -> &[f64] {
        &self.psi[path * self.n_points..(path + 1) * self.n_points]
    }

    pub fn phi(&self, path: usize) -> &[f64] {
        &self.phi[path * self.n_points..(path + 1) * self.n_points]
    }

    /// Same `psi` and `phi` paired with a different multiplier.
    pub fn with_eta(&self, eta_prime: f64) -> Self {
        Self {
            eta_prime,
            ..self.clone()
        }
    }
}

fn path_utility(model: &ModelParams, sol: &ApproxSolution, w: &[f64], times: &[f64], p: usize) -> f64 {
    let lc = sol.log_chat(p);
    let terms: Vec<f64> = (0..w.len())
        .map(|k| w[k] * model.prefs.utility_from_log(times[k], lc[k]))
        .collect();
    pairwise_sum(&terms)
}

/// Per-path `sum_k w_k U(t_k, chat_k)`.
pub fn primal_samples(sol: &ApproxSolution, model: &ModelParams, batch: &PathBatch, exec: Exec) -> Vec<f64> {
    let grid = batch.grid();
    let w = time_weights(grid);
    let times = grid.times();
    exec.map(batch.n_paths(), |p| path_utility(model, sol, &w, &times, p))
}

pub fn primal_value(sol: &ApproxSolution, model: &ModelParams, batch: &PathBatch, exec: Exec) -> MeanSe {
    MeanSe::from_samples(&primal_samples(sol, model, batch, exec))
}

/// Toeplitz coefficients of `psi` (`resolvent[d] = b rho_c^(d-1)`), of the
/// habit kernel (`habit[d] = b rho^(d-1)`) and of the residual
/// `resolvent - habit - habit * resolvent` that multiplies `E[M c | F_j]` in `phi`.
fn kernels(hk: &HabitKernel, np: usize) -> (Vec<f64>, Vec<f64>) {
    let mut res = vec![0.0; np];
    let mut hab = vec![0.0; np];
    for d in 1..np {
        res[d] = hk.gain * hk.ratio_decay().powi(d as i32 - 1);
        hab[d] = hk.gain * hk.decay.powi(d as i32 - 1);
    }
    let mut resid = vec![0.0; np];
    for d in 1..np {
        let mut conv = 0.0;
        for e in 1..d {
            conv += hab[e] * res[d - e];
        }
        resid[d] = res[d] - hab[d] - conv;
    }
    (res, resid)
}

/// `G_j = psi'_j / eta'` and `phi_j / eta'` on every path.
fn dual_paths(
    sol: &ApproxSolution,
    model: &ModelParams,
    batch: &PathBatch,
    backend: Backend,
    exec: Exec,
) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let grid = *batch.grid();
    let np = grid.n_points();
    let n = grid.n_steps();
    let hk = HabitKernel::new(&model.habit, &grid);
    let (res, resid) = kernels(&hk, np);
    let max_resid = resid.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut g = vec![0.0; batch.n_paths() * np];
    let mut f = vec![0.0; batch.n_paths() * np];
    match backend {
        Backend::Analytic => {
            let affine = sol.rule.as_affine().ok_or(Error::UnsupportedKernel(
                "the full dual expansion is not exponential-affine; use the nested backend",
            ))?;
            let tab = FlowTable::new(affine, &hk, &grid, &model.market, sol.log_eta)?;
            exec.for_each_row_pair(&mut g, &mut f, np, |p, gr, fr| {
                let y = batch.log_m(p);
                let a = batch.int_log_m(p);
                let (lc, lh) = (sol.log_chat(p), sol.log_h(p));
                for j in 0..np {
                    let own = (y[j] + lc[j] + lh[j]).exp();
                    let mut sg = 0.0;
                    let mut sf = 0.0;
                    for k in j + 1..n {
                        let flow = tab.coef(j, k).log_value(y[j], a[j], lh[j]).exp();
                        sg += res[k - j] * flow;
                        sf += resid[k - j] * flow;
                    }
                    gr[j] = own + sg;
                    fr[j] = own + sf;
                }
            });
        }
        Backend::Nested { inner_paths, seed } => {
            let rows: Vec<Result<(Vec<f64>, Vec<f64>)>> = exec.map(batch.n_paths(), |p| {
                let mut gr = vec![0.0; np];
                let mut fr = vec![0.0; np];
                nested_row(
                    sol,
                    model,
                    batch,
                    &hk,
                    (&res, &resid),
                    p,
                    inner_paths,
                    seed,
                    &mut gr,
                    &mut fr,
                )?;
                Ok((gr, fr))
            });
            for (p, row) in rows.into_iter().enumerate() {
                let (gr, fr) = row?;
                g[p * np..(p + 1) * np].copy_from_slice(&gr);
                f[p * np..(p + 1) * np].copy_from_slice(&fr);
            }
        }
    }
    Ok((g, f, max_resid))
}

#[allow(clippy::too_many_arguments)]
fn nested_row(
    sol: &ApproxSolution,
    model: &ModelParams,
    batch: &PathBatch,
    hk: &HabitKernel,
    (res, resid): (&[f64], &[f64]),
    p: usize,
    inner_paths: usize,
    seed: u64,
    gr: &mut [f64],
    fr: &mut [f64],
) -> Result<()> {
    let grid = batch.grid();
    let np = grid.n_points();
    let n = grid.n_steps();
    let y = batch.log_m(p);
    let a = batch.int_log_m(p);
    let (lc, lh) = (sol.log_chat(p), sol.log_h(p));
    let opts = NestedOptions::new(inner_paths, seed).at_path(p as u64);
    let mut cg = vec![0.0; np];
    let mut cf = vec![0.0; np];
    for j in 0..np {
        let own = (y[j] + lc[j] + lh[j]).exp();
        if j + 1 >= n {
            gr[j] = own;
            fr[j] = own;
            continue;
        }
        cg.iter_mut().for_each(|c| *c = 0.0);
        cf.iter_mut().for_each(|c| *c = 0.0);
        cg[j + 1..n].copy_from_slice(&res[1..n - j]);
        cf[j + 1..n].copy_from_slice(&resid[1..n - j]);
        let st = MarkovState::new(j, grid.time(j), y[j].exp(), a[j], lh[j])?;
        let fg = Functional::ConsumptionFlow {
            rule: &sol.rule,
            habit: *hk,
            log_eta: sol.log_eta,
            coefs: &cg,
        };
        let ff = Functional::ConsumptionFlow {
            rule: &sol.rule,
            habit: *hk,
            log_eta: sol.log_eta,
            coefs: &cf,
        };
        gr[j] = own + nested_mc(&st, &fg, grid, &model.market, &opts)?.mean;
        fr[j] = own + nested_mc(&st, &ff, grid, &model.market, &opts)?.mean;
    }
    Ok(())
}

/// `E[sum_k w_k e^{log M_k + log I(t_k, psi_k) + log h_k}]` with `psi = e^{log_eta} G`.
fn dual_budget(model: &ModelParams, batch: &PathBatch, g: &[f64], log_eta: f64, exec: Exec) -> f64 {
    let grid = batch.grid();
    let np = grid.n_points();
    let w = time_weights(grid);
    let times = grid.times();
    let hk = HabitKernel::new(&model.habit, grid);
    let per_path = exec.map(batch.n_paths(), |p| {
        let y = batch.log_m(p);
        let mut lh = 0.0;
        let mut terms = Vec::with_capacity(np);
        for k in 0..np {
            let li = model
                .prefs
                .log_inverse_ratio_marginal(times[k], log_eta + g[p * np + k].ln());
            terms.push(w[k] * (y[k] + li + lh).exp());
            lh = hk.ratio_decay() * lh + hk.gain * li;
        }
        pairwise_sum(&terms)
    });
    pairwise_sum(&per_path) / batch.n_paths() as f64
}

/// `psi'_j = eta' (M_j c'_j + sum_{k>j} b rho_c^(k-1-j) E[M_k c'_k | F_j])`.
pub fn build_dual_controls(
    sol: &ApproxSolution,
    model: &ModelParams,
    batch: &PathBatch,
    backend: Backend,
    eta_rule: EtaRule,
    exec: Exec,
) -> Result<DualControls> {
    let np = batch.grid().n_points();
    let (g, f, resolvent_residual) = dual_paths(sol, model, batch, backend, exec)?;
    if let Some(bad) = g.iter().position(|x| !(*x > 0.0) || !x.is_finite()) {
        return Err(Error::Domain {
            func: "build_dual_controls",
            value: g[bad],
            reason: "psi' must be positive",
        });
    }
    let log_eta = match eta_rule {
        EtaRule::Primal => sol.log_eta,
        EtaRule::Budget => {
            let le = bisect_log_eta(|le| dual_budget(model, batch, &g, le, exec), model.x0, sol.log_eta)?;
            let res = (dual_budget(model, batch, &g, le, exec) - model.x0).abs() / model.x0;
            if !(res < crate::approx::BUDGET_TOL) {
                return Err(Error::Calibration(format!("dual budget residual {res:.3e}")));
            }
            le
        }
    };
    let eta = log_eta.exp();
    let nodes = batch.n_paths() * batch.grid().n_steps();
    let violations = (0..batch.n_paths())
        .map(|p| (0..np - 1).filter(|&j| !(f[p * np + j] > 0.0)).count())
        .sum::<usize>();
    if violations > 0 {
        return Err(Error::InfeasibleDual { violations, nodes });
    }
    Ok(DualControls {
        eta_prime: eta,
        n_points: np,
        psi: g.iter().map(|x| eta * x).collect(),
        phi: f.iter().map(|x| eta * x).collect(),
        resolvent_residual,
    })
}

/// Per-path pieces of the dual objective.
#[derive(Clone, Debug)]
pub struct DualSamples {
    /// `sum_k w_k (-V1 - eta M V2) + eta X0`
    pub direct: Vec<f64>,
    /// `direct - sum_k w_k (phi_k log c_k - psi_k log chat_k)`, same mean.
    pub adjusted: Vec<f64>,
}

pub fn dual_samples(
    controls: &DualControls,
    sol: &ApproxSolution,
    model: &ModelParams,
    batch: &PathBatch,
    exec: Exec,
) -> Result<DualSamples> {
    let grid = batch.grid();
    let np = grid.n_points();
    let w = time_weights(grid);
    let times = grid.times();
    let eta = controls.eta_prime;
    if !(eta > 0.0) {
        return Err(Error::Domain {
            func: "dual_value",
            value: eta,
            reason: "multiplier must be positive",
        });
    }
    let rows: Vec<Result<(f64, f64)>> = exec.map(batch.n_paths(), |p| {
        let y = batch.log_m(p);
        let (psi, phi) = (controls.psi(p), controls.phi(p));
        let (lc, lh) = (sol.log_chat(p), sol.log_h(p));
        let mut direct = Vec::with_capacity(np);
        let mut cv = Vec::with_capacity(np);
        for k in 0..np {
            if w[k] == 0.0 {
                continue;
            }
            let m = y[k].exp();
            let v1 = model.prefs.conjugate_v1_log(times[k], psi[k], psi[k].ln());
            let v2 = conjugate_v2(phi[k] / (eta * m))?;
            direct.push(w[k] * (-v1 - eta * m * v2));
            cv.push(w[k] * (phi[k] * (lc[k] + lh[k]) - psi[k] * lc[k]));
        }
        let d = pairwise_sum(&direct) + eta * model.x0;
        Ok((d, d - pairwise_sum(&cv)))
    });
    let mut out = DualSamples {
        direct: Vec::with_capacity(batch.n_paths()),
        adjusted: Vec::with_capacity(batch.n_paths()),
    };
    for r in rows {
        let (d, a) = r?;
        out.direct.push(d);
        out.adjusted.push(a);
    }
    Ok(out)
}

/// Control-variate adjusted dual value and its direct counterpart.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DualValue {
    pub adjusted: MeanSe,
    pub direct: MeanSe,
}

pub fn dual_value(
    controls: &DualControls,
    sol: &ApproxSolution,
    model: &ModelParams,
    batch: &PathBatch,
    exec: Exec,
) -> Result<DualValue> {
    let s = dual_samples(controls, sol, model, batch, exec)?;
    Ok(DualValue {
        adjusted: MeanSe::from_samples(&s.adjusted),
        direct: MeanSe::from_samples(&s.direct),
    })
}

pub fn duality_gap(j: f64, v: f64) -> f64 {
    v - j
}

/// `C` solving `J = V(X0 (1 - C))`; the dual objective is affine in `X0` with slope `eta'`.
pub fn welfare_loss(d: f64, eta_prime: f64, x0: f64) -> Result<f64> {
    if !(eta_prime > 0.0) || !eta_prime.is_finite() {
        return Err(Error::InvalidParameter {
            name: "eta_prime",
            value: eta_prime,
            reason: "dual multiplier must be positive",
        });
    }
    if !(x0 > 0.0) {
        return Err(Error::InvalidParameter {
            name: "X0",
            value: x0,
            reason: "initial endowment must be positive",
        });
    }
    Ok(d / (eta_prime * x0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct WelfareReport {
    pub approx: ApproxKind,
    pub j: f64,
    pub se_j: f64,
    /// Selected (smallest) dual bound, control-variate adjusted.
    pub v: f64,
    pub se_v: f64,
    pub d: f64,
    pub se_d: f64,
    pub c: f64,
    pub c_percent: f64,
    pub eta_star: f64,
    pub eta_prime: f64,
    /// This approximation's own dual bound.
    pub v_own: f64,
    pub v_own_direct: f64,
    pub se_v_own_direct: f64,
    pub v_source: ApproxKind,
    pub budget_residual: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub qmode: QMode,
    pub backend: Backend,
    pub eta_rule: EtaRule,
    pub exec: Exec,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            qmode: QMode::FirstOrder,
            backend: Backend::Analytic,
            eta_rule: EtaRule::Budget,
            exec: Exec::default(),
        }
    }
}

/// One approximation carried through calibration, primal and dual evaluation.
pub struct Candidate {
    pub solution: ApproxSolution,
    pub primal: Vec<f64>,
    pub controls: DualControls,
    pub dual: DualSamples,
}

pub fn evaluate_candidate(
    kind: ApproxKind,
    model: &ModelParams,
    batch: &PathBatch,
    opts: &EvalOptions,
) -> Result<Candidate> {
    let solution = calibrate_eta(kind, model, batch, opts.qmode, opts.exec)?;
    let primal = primal_samples(&solution, model, batch, opts.exec);
    let controls = build_dual_controls(&solution, model, batch, opts.backend, opts.eta_rule, opts.exec)?;
    let dual = dual_samples(&controls, &solution, model, batch, opts.exec)?;
    Ok(Candidate {
        solution,
        primal,
        controls,
        dual,
    })
}

/// Welfare reports for `kinds`, all measured against the smallest dual bound.
pub fn welfare_reports(candidates: &[Candidate], model: &ModelParams) -> Result<Vec<WelfareReport>> {
    let means: Vec<f64> = candidates
        .iter()
        .map(|c| MeanSe::from_samples(&c.dual.adjusted).mean)
        .collect();
    let best = (0..candidates.len())
        .min_by(|&a, &b| means[a].total_cmp(&means[b]))
        .ok_or_else(|| Error::Config("no approximation selected".into()))?;
    let b = &candidates[best];
    let v = MeanSe::from_samples(&b.dual.adjusted);
    candidates
        .iter()
        .map(|c| {
            let j = MeanSe::from_samples(&c.primal);
            let diff: Vec<f64> = b.dual.adjusted.iter().zip(&c.primal).map(|(v, j)| v - j).collect();
            let d = MeanSe::from_samples(&diff);
            let own_direct = MeanSe::from_samples(&c.dual.direct);
            let cc = welfare_loss(d.mean, b.controls.eta_prime, model.x0)?;
            Ok(WelfareReport {
                approx: c.solution.kind,
                j: j.mean,
                se_j: j.se,
                v: v.mean,
                se_v: v.se,
                d: d.mean,
                se_d: d.se,
                c: cc,
                c_percent: 100.0 * cc,
                eta_star: c.solution.eta(),
                eta_prime: b.controls.eta_prime,
                v_own: MeanSe::from_samples(&c.dual.adjusted).mean,
                v_own_direct: own_direct.mean,
                se_v_own_direct: own_direct.se,
                v_source: b.solution.kind,
                budget_residual: c.solution.budget_residual(model.x0),
            })
        })
        .collect()
}

pub fn evaluate(
    kinds: &[ApproxKind],
    model: &ModelParams,
    batch: &PathBatch,
    opts: &EvalOptions,
) -> Result<Vec<WelfareReport>> {
    let candidates = kinds
        .iter()
        .map(|&k| evaluate_candidate(k, model, batch, opts))
        .collect::<Result<Vec<_>>>()?;
    welfare_reports(&candidates, model)
}

/// Analytic vs nested `G_j` at one node; returns `(analytic, nested estimate)`.
pub fn cross_check_node(
    sol: &ApproxSolution,
    model: &ModelParams,
    batch: &PathBatch,
    path: usize,
    node: usize,
    inner_paths: usize,
    seed: u64,
) -> Result<(f64, MeanSe)> {
    let grid = *batch.grid();
    let np = grid.n_points();
    let n = grid.n_steps();
    let hk = HabitKernel::new(&model.habit, &grid);
    let (res, _) = kernels(&hk, np);
    let affine = sol
        .rule
        .as_affine()
        .ok_or(Error::UnsupportedKernel("analytic flows need an affine rule"))?;
    let tab = FlowTable::new(affine, &hk, &grid, &model.market, sol.log_eta)?;
    let y = batch.log_m(path);
    let a = batch.int_log_m(path);
    let lh = sol.log_h(path);
    let mut coefs = vec![0.0; np];
    let mut analytic = 0.0;
    for k in node + 1..n {
        coefs[k] = res[k - node];
        analytic += res[k - node] * tab.coef(node, k).log_value(y[node], a[node], lh[node]).exp();
    }
    let st = MarkovState::new(node, grid.time(node), y[node].exp(), a[node], lh[node])?;
    let f = Functional::ConsumptionFlow {
        rule: &sol.rule,
        habit: hk,
        log_eta: sol.log_eta,
        coefs: &coefs,
    };
    let est = nested_mc(
        &st,
        &f,
        &grid,
        &model.market,
        &NestedOptions::new(inner_paths, seed).at_path(path as u64),
    )?;
    Ok((analytic, est))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::habit::HabitParams;
    use crate::market::simulate_paths;

    fn merton() -> ModelParams {
        ModelParams {
            habit: HabitParams::none(),
            ..ModelParams::baseline()
        }
    }

    #[test]
    fn resolvent_residual_vanishes() {
        let g = ModelParams::baseline().grid(40).unwrap();
        let hk = HabitKernel::new(&HabitParams::new(0.3, 0.2).unwrap(), &g);
        let (_, resid) = kernels(&hk, 41);
        assert!(resid.iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn welfare_loss_closed_form() {
        assert_eq!(welfare_loss(0.0, 1.0, 20.0).unwrap(), 0.0);
        assert!((welfare_loss(0.04, 1.0, 20.0).unwrap() - 0.002).abs() < 1e-15);
        assert!(welfare_loss(0.04, 0.0, 20.0).is_err());
        assert!(welfare_loss(0.04, -1.0, 20.0).is_err());
    }

    #[test]
    fn welfare_loss_equals_bisection_root() {
        // V(X) = V(X0) + eta'(X - X0); solve J = V(X0 (1 - C)) by bisection.
        let (j, v, eta, x0) = (-3.21, -3.17, 0.0123, 20.0);
        let vx = |x: f64| v + eta * (x - x0);
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if vx(x0 * (1.0 - mid)) > j {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let closed = welfare_loss(duality_gap(j, v), eta, x0).unwrap();
        assert!((closed - 0.5 * (lo + hi)).abs() < 1e-10);
    }

    #[test]
    fn constant_ratio_primal_value_is_exact() {
        let m = ModelParams::baseline();
        let g = m.grid(40).unwrap();
        let batch = simulate_paths(&m.market, &g, 50, 1, Exec::Sequential).unwrap();
        let mut sol = calibrate_eta(ApproxKind::Bbl, &m, &batch, QMode::FirstOrder, Exec::Sequential).unwrap();
        sol = sol.with_rows(vec![0.0; 50 * 41], vec![0.0; 50 * 41]);
        let j = primal_value(&sol, &m, &batch, Exec::Sequential);
        let w = time_weights(&g);
        let exact: f64 = g
            .times()
            .iter()
            .zip(&w)
            .map(|(t, w)| w * (-0.03 * t).exp() / -9.0)
            .sum();
        assert!((j.mean - exact).abs() < 1e-13);
        assert!(j.se < 1e-15);
    }

    #[test]
    fn merton_pair_closes_the_gap() {
        let m = merton();
        let g = m.grid(40).unwrap();
        let batch = simulate_paths(&m.market, &g, 400, 11, Exec::Sequential).unwrap();
        for kind in ApproxKind::ALL {
            let c = evaluate_candidate(kind, &m, &batch, &EvalOptions::default()).unwrap();
            let j = MeanSe::from_samples(&c.primal).mean;
            let v = MeanSe::from_samples(&c.dual.adjusted).mean;
            let vd = MeanSe::from_samples(&c.dual.direct).mean;
            assert!((v - j).abs() < 1e-9 * j.abs(), "{kind:?}: {v} vs {j}");
            assert!((vd - j).abs() < 1e-9 * j.abs(), "{kind:?}: {vd} vs {j}");
            // psi' = eta M c' = Ihat(t, eta M) eta M
            let y = batch.log_m(3);
            let t = g.time(5);
            let ihat = m.prefs.inverse_marginal(t, c.controls.eta_prime * y[5].exp()).unwrap();
            let want = ihat * c.controls.eta_prime * y[5].exp();
            assert!((c.controls.psi(3)[5] / want - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn weak_duality_at_baseline() {
        let m = ModelParams::baseline();
        let g = m.grid(40).unwrap();
        let batch = simulate_paths(&m.market, &g, 300, 2, Exec::Sequential).unwrap();
        for rule in [EtaRule::Primal, EtaRule::Budget] {
            let opts = EvalOptions {
                eta_rule: rule,
                ..EvalOptions::default()
            };
            let reps = evaluate(&ApproxKind::ALL, &m, &batch, &opts).unwrap();
            for r in &reps {
                assert!(r.d > -3.0 * (r.se_j + r.se_v), "{r:?}");
                assert!(r.v <= r.v_own + 1e-12);
            }
        }
    }

    #[test]
    fn terminal_psi_is_own_flow() {
        let m = ModelParams::baseline();
        let g = m.grid(20).unwrap();
        let batch = simulate_paths(&m.market, &g, 20, 4, Exec::Sequential).unwrap();
        let sol = calibrate_eta(ApproxKind::Dual, &m, &batch, QMode::FirstOrder, Exec::Sequential).unwrap();
        let ctl = build_dual_controls(&sol, &m, &batch, Backend::Analytic, EtaRule::Primal, Exec::Sequential).unwrap();
        let y = batch.log_m(0);
        let (lc, lh) = (sol.log_chat(0), sol.log_h(0));
        let own = sol.eta() * (y[20] + lc[20] + lh[20]).exp();
        assert!((ctl.psi(0)[20] / own - 1.0).abs() < 1e-14);
        // phi / (eta M) recovers c'
        for k in [0usize, 7, 19] {
            let c = (lc[k] + lh[k]).exp();
            assert!((ctl.phi(0)[k] / (sol.eta() * y[k].exp()) / c - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn eta_scaling_matches_closed_formula() {
        // With psi and phi fixed, V(eta2) - V(eta1) is
        // E[sum w M (phi/M)(log eta2 - log eta1)... ] evaluated termwise.
        let m = ModelParams::baseline();
        let g = m.grid(20).unwrap();
        let batch = simulate_paths(&m.market, &g, 40, 8, Exec::Sequential).unwrap();
        let sol = calibrate_eta(ApproxKind::Bbl, &m, &batch, QMode::FirstOrder, Exec::Sequential).unwrap();
        let ctl = build_dual_controls(&sol, &m, &batch, Backend::Analytic, EtaRule::Primal, Exec::Sequential).unwrap();
        let e1 = ctl.eta_prime;
        let e2 = 2.0 * e1;
        let v1 = dual_value(&ctl, &sol, &m, &batch, Exec::Sequential)
            .unwrap()
            .direct
            .mean;
        let v2 = dual_value(&ctl.with_eta(e2), &sol, &m, &batch, Exec::Sequential)
            .unwrap()
            .direct
            .mean;
        // eta M V2(phi/(eta M)) = phi - phi log phi + phi log(eta M): linear in log eta.
        let w = time_weights(&g);
        let mut phi_sum = 0.0;
        for p in 0..40 {
            for k in 0..20 {
                phi_sum += w[k] * ctl.phi(p)[k];
            }
        }
        phi_sum /= 40.0;
        let predicted = -phi_sum * (e2 / e1).ln() + (e2 - e1) * m.x0;
        assert!((v2 - v1 - predicted).abs() < 1e-9 * v1.abs().max(1.0));
    }

    #[test]
    fn full_expansion_needs_nested_backend() {
        let m = ModelParams::baseline();
        let g = m.grid(10).unwrap();
        let batch = simulate_paths(&m.market, &g, 10, 4, Exec::Sequential).unwrap();
        let sol = calibrate_eta(ApproxKind::Dual, &m, &batch, QMode::Full, Exec::Sequential).unwrap();
        let r = build_dual_controls(&sol, &m, &batch, Backend::Analytic, EtaRule::Primal, Exec::Sequential);
        assert!(matches!(r, Err(Error::UnsupportedKernel(_))));
        let ctl = build_dual_controls(
            &sol,
            &m,
            &batch,
            Backend::Nested {
                inner_paths: 16,
                seed: 1,
            },
            EtaRule::Primal,
            Exec::Sequential,
        )
        .unwrap();
        assert!(ctl.psi(0).iter().all(|x| *x > 0.0));
    }

    #[test]
    fn nested_backend_tracks_analytic() {
        let m = ModelParams::baseline();
        let g = m.grid(20).unwrap();
        let batch = simulate_paths(&m.market, &g, 4, 6, Exec::Sequential).unwrap();
        let sol = calibrate_eta(ApproxKind::Dual, &m, &batch, QMode::FirstOrder, Exec::Sequential).unwrap();
        let a = build_dual_controls(&sol, &m, &batch, Backend::Analytic, EtaRule::Primal, Exec::Sequential).unwrap();
        let n = build_dual_controls(
            &sol,
            &m,
            &batch,
            Backend::Nested {
                inner_paths: 2000,
                seed: 3,
            },
            EtaRule::Primal,
            Exec::Sequential,
        )
        .unwrap();
        for p in 0..4 {
            for j in [0usize, 5, 15] {
                let rel = n.psi(p)[j] / a.psi(p)[j] - 1.0;
                assert!(rel.abs() < 0.02, "p={p} j={j}: {rel}");
            }
        }
    }
}
