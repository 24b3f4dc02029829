//! Experiment configuration and drivers for single runs, the welfare-loss
//! sweep and quantile plot data.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::approx::{calibrate_eta, ApproxKind, QMode};
use crate::condexp::DEFAULT_INNER_PATHS;
use crate::duality::{build_dual_controls, cross_check_node, evaluate, Backend, EtaRule, EvalOptions, WelfareReport};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::habit::HabitParams;
use crate::market::{simulate_paths, MarketParams};
use crate::model::ModelParams;
use crate::preferences::PreferenceParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Approximation {
    Bbl,
    Dual,
    Both,
}

impl Approximation {
    pub fn kinds(self) -> Vec<ApproxKind> {
        match self {
            Approximation::Bbl => vec![ApproxKind::Bbl],
            Approximation::Dual => vec![ApproxKind::Dual],
            Approximation::Both => ApproxKind::ALL.to_vec(),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Approximation::Bbl => "bbl",
            Approximation::Dual => "dual",
            Approximation::Both => "both",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendChoice {
    Analytic,
    Nested,
    /// Analytic values, cross-checked against the nested oracle at sampled nodes.
    Both,
}

impl BackendChoice {
    fn name(self) -> &'static str {
        match self {
            BackendChoice::Analytic => "analytic",
            BackendChoice::Nested => "nested",
            BackendChoice::Both => "both",
        }
    }
}

impl std::str::FromStr for BackendChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "analytic" => Ok(BackendChoice::Analytic),
            "nested" => Ok(BackendChoice::Nested),
            "both" => Ok(BackendChoice::Both),
            _ => Err(Error::Config(format!(
                "unknown backend `{s}` (expected analytic, nested or both)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub r: f64,
    pub mu: f64,
    pub sigma: f64,
    pub gamma: f64,
    pub delta: f64,
    pub alpha: f64,
    pub beta: f64,
    #[serde(rename = "X0")]
    pub x0: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub approximation: Approximation,
    pub condexp_backend: BackendChoice,
    pub inner_paths: usize,
    pub cross_check_nodes: usize,
    pub dual_q: QMode,
    pub eta_rule: EtaRule,
    pub parallel_cells: bool,
    pub plot_variables: Vec<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            r: 0.01,
            mu: 0.05,
            sigma: 0.2,
            gamma: 10.0,
            delta: 0.03,
            alpha: 0.1,
            beta: 0.1,
            x0: 20.0,
            horizon: 10.0,
            n_paths: 10_000,
            n_steps: 40,
            seed: 20_240_601,
            approximation: Approximation::Both,
            condexp_backend: BackendChoice::Analytic,
            inner_paths: DEFAULT_INNER_PATHS,
            cross_check_nodes: 50,
            dual_q: QMode::FirstOrder,
            eta_rule: EtaRule::Budget,
            parallel_cells: false,
            plot_variables: PLOT_VARIABLES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

pub const PLOT_VARIABLES: [&str; 4] = ["chat", "h", "c", "psi"];
pub const PLOT_QUANTILES: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

pub const CONFIG_KEYS: [&str; 20] = [
    "r",
    "mu",
    "sigma",
    "gamma",
    "delta",
    "alpha",
    "beta",
    "X0",
    "T",
    "n_paths",
    "n_steps",
    "seed",
    "approximation",
    "condexp_backend",
    "inner_paths",
    "cross_check_nodes",
    "dual_q",
    "eta_rule",
    "parallel_cells",
    "plot_variables",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

impl ExperimentConfig {
    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "r" => self.r = parse_num(key, value)?,
            "mu" => self.mu = parse_num(key, value)?,
            "sigma" => self.sigma = parse_num(key, value)?,
            "gamma" => self.gamma = parse_num(key, value)?,
            "delta" => self.delta = parse_num(key, value)?,
            "alpha" => self.alpha = parse_num(key, value)?,
            "beta" => self.beta = parse_num(key, value)?,
            "alpha_beta" => {
                self.alpha = parse_num(key, value)?;
                self.beta = self.alpha;
            }
            "X0" => self.x0 = parse_num(key, value)?,
            "T" => self.horizon = parse_num(key, value)?,
            "n_paths" => self.n_paths = parse_num(key, value)?,
            "n_steps" => self.n_steps = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "approximation" => {
                self.approximation = match value {
                    "bbl" => Approximation::Bbl,
                    "dual" => Approximation::Dual,
                    "both" => Approximation::Both,
                    _ => return Err(Error::Config(format!("unknown approximation `{value}`"))),
                }
            }
            "condexp_backend" | "backend" => self.condexp_backend = value.parse()?,
            "inner_paths" => self.inner_paths = parse_num(key, value)?,
            "cross_check_nodes" => self.cross_check_nodes = parse_num(key, value)?,
            "dual_q" => self.dual_q = value.parse()?,
            "eta_rule" => self.eta_rule = value.parse()?,
            "parallel_cells" => self.parallel_cells = parse_num(key, value)?,
            "plot_variables" => {
                let vars: Vec<String> = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::to_string)
                    .collect();
                if let Some(bad) = vars.iter().find(|v| !PLOT_VARIABLES.contains(&v.as_str())) {
                    return Err(Error::Config(format!("unknown plot variable `{bad}`")));
                }
                self.plot_variables = vars;
            }
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got `{assignment}`")))?;
        self.set(k, v)
    }

    /// Parses a flat `key = value` file; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn value_of(&self, key: &str) -> Option<String> {
        Some(match key {
            "r" => self.r.to_string(),
            "mu" => self.mu.to_string(),
            "sigma" => self.sigma.to_string(),
            "gamma" => self.gamma.to_string(),
            "delta" => self.delta.to_string(),
            "alpha" => self.alpha.to_string(),
            "beta" => self.beta.to_string(),
            "X0" => self.x0.to_string(),
            "T" => self.horizon.to_string(),
            "n_paths" => self.n_paths.to_string(),
            "n_steps" => self.n_steps.to_string(),
            "seed" => self.seed.to_string(),
            "approximation" => self.approximation.name().to_string(),
            "condexp_backend" => self.condexp_backend.name().to_string(),
            "inner_paths" => self.inner_paths.to_string(),
            "cross_check_nodes" => self.cross_check_nodes.to_string(),
            "dual_q" => match self.dual_q {
                QMode::FirstOrder => "first_order".into(),
                QMode::Full => "full".into(),
            },
            "eta_rule" => match self.eta_rule {
                EtaRule::Primal => "primal".into(),
                EtaRule::Budget => "budget".into(),
            },
            "parallel_cells" => self.parallel_cells.to_string(),
            "plot_variables" => self.plot_variables.join(","),
            _ => return None,
        })
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for key in CONFIG_KEYS {
            let _ = writeln!(out, "{key} = {}", self.value_of(key).unwrap());
        }
        out
    }

    pub fn model(&self) -> Result<ModelParams> {
        ModelParams::new(
            MarketParams::new(self.r, self.mu, self.sigma)?,
            PreferenceParams::new(self.gamma, self.delta)?,
            HabitParams::new(self.alpha, self.beta)?,
            self.x0,
            self.horizon,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.model()?;
        self.model()?.grid(self.n_steps)?;
        if self.n_paths == 0 {
            return Err(Error::Config("n_paths must be at least 1".into()));
        }
        if self.n_paths < 2 {
            return Err(Error::Config("n_paths must be at least 2 for standard errors".into()));
        }
        if self.inner_paths == 0 {
            return Err(Error::Config("inner_paths must be at least 1".into()));
        }
        Ok(())
    }

    fn eval_options(&self, exec: Exec) -> EvalOptions {
        EvalOptions {
            qmode: self.dual_q,
            backend: match self.condexp_backend {
                BackendChoice::Nested => Backend::Nested {
                    inner_paths: self.inner_paths,
                    seed: self.seed,
                },
                _ => Backend::Analytic,
            },
            eta_rule: self.eta_rule,
            exec,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CrossCheck {
    pub approx: ApproxKind,
    pub nodes: usize,
    pub inner_paths: usize,
    pub within_3se: usize,
    pub max_abs_z: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub reports: Vec<WelfareReport>,
    pub cross_checks: Vec<CrossCheck>,
}

impl RunReport {
    pub fn report(&self, kind: ApproxKind) -> Option<&WelfareReport> {
        self.reports.iter().find(|r| r.approx == kind)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// Three-decimal percentage as printed in reports.
pub fn format_percent(fraction: f64) -> String {
    format!("{:.3}", 100.0 * fraction)
}

pub fn run(config: &ExperimentConfig, exec: Exec) -> Result<RunReport> {
    config.validate()?;
    let model = config.model()?;
    let grid = model.grid(config.n_steps)?;
    let batch = simulate_paths(&model.market, &grid, config.n_paths, config.seed, exec)?;
    let opts = config.eval_options(exec);
    let kinds = config.approximation.kinds();
    let reports = evaluate(&kinds, &model, &batch, &opts)?;
    let mut cross_checks = Vec::new();
    if config.condexp_backend == BackendChoice::Both {
        for &kind in &kinds {
            cross_checks.push(cross_check(config, &model, &batch, kind, exec)?);
        }
    }
    Ok(RunReport {
        config: config.clone(),
        seed: config.seed,
        reports,
        cross_checks,
    })
}

/// Compares analytic and nested dual flows at randomly sampled `(path, node)` pairs.
pub fn cross_check(
    config: &ExperimentConfig,
    model: &ModelParams,
    batch: &crate::market::PathBatch,
    kind: ApproxKind,
    exec: Exec,
) -> Result<CrossCheck> {
    let sol = calibrate_eta(kind, model, batch, config.dual_q, exec)?;
    let n = batch.grid().n_steps();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_c0de);
    let picks: Vec<(usize, usize)> = (0..config.cross_check_nodes)
        .map(|_| {
            (
                rng.random_range(0..batch.n_paths()),
                rng.random_range(0..n.saturating_sub(1).max(1)),
            )
        })
        .collect();
    let results = exec.map(picks.len(), |i| {
        let (p, j) = picks[i];
        cross_check_node(&sol, model, batch, p, j, config.inner_paths, config.seed)
    });
    let mut within = 0;
    let mut max_z = 0.0f64;
    for r in results {
        let (a, est) = r?;
        let z = if est.se > 0.0 {
            (est.mean - a).abs() / est.se
        } else if (est.mean - a).abs() < 1e-12 {
            0.0
        } else {
            f64::INFINITY
        };
        if z <= 3.0 {
            within += 1;
        }
        max_z = max_z.max(z);
    }
    Ok(CrossCheck {
        approx: kind,
        nodes: picks.len(),
        inner_paths: config.inner_paths,
        within_3se: within,
        max_abs_z: max_z,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Table1Row {
    pub sweep_param: String,
    pub sweep_value: f64,
    pub report: WelfareReport,
    pub seed: u64,
}

pub const TABLE1_HEADER: &str = "sweep_param,sweep_value,approx,J,V,D,C_percent,se_J,se_V,eta_star,eta_prime,seed";

/// The sweep cells: each parameter at three values around the baseline.
pub fn table1_cells() -> Vec<(&'static str, f64)> {
    let mut cells = Vec::new();
    for v in [6.0, 10.0, 14.0] {
        cells.push(("gamma", v));
    }
    for v in [10.0, 20.0, 30.0] {
        cells.push(("X0", v));
    }
    for v in [0.01, 0.1, 0.2] {
        cells.push(("alpha_beta", v));
    }
    for v in [1.0, 10.0, 20.0] {
        cells.push(("T", v));
    }
    cells
}

pub fn table1_cell(config: &ExperimentConfig, param: &str, value: f64, exec: Exec) -> Result<Vec<Table1Row>> {
    let mut cfg = config.clone();
    cfg.approximation = Approximation::Both;
    cfg.set(param, &value.to_string())?;
    let rep = run(&cfg, exec)?;
    Ok(rep
        .reports
        .into_iter()
        .map(|report| Table1Row {
            sweep_param: param.to_string(),
            sweep_value: value,
            report,
            seed: cfg.seed,
        })
        .collect())
}

pub fn table1(config: &ExperimentConfig, exec: Exec) -> Result<Vec<Table1Row>> {
    let cells = table1_cells();
    let rows: Vec<Result<Vec<Table1Row>>> = if config.parallel_cells {
        exec.map(cells.len(), |i| table1_cell(config, cells[i].0, cells[i].1, exec))
    } else {
        cells.iter().map(|(p, v)| table1_cell(config, p, *v, exec)).collect()
    };
    let mut out = Vec::new();
    for r in rows {
        out.extend(r?);
    }
    Ok(out)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn table1_csv(rows: &[Table1Row]) -> String {
    let mut out = String::new();
    out.push_str(TABLE1_HEADER);
    out.push_str("\r\n");
    for row in rows {
        let r = &row.report;
        let _ = write!(
            out,
            "{},{},{},{:e},{:e},{:e},{},{:e},{:e},{:e},{:e},{}\r\n",
            csv_field(&row.sweep_param),
            row.sweep_value,
            r.approx.name(),
            r.j,
            r.v,
            r.d,
            format_percent(r.c),
            r.se_j,
            r.se_v,
            r.eta_star,
            r.eta_prime,
            row.seed
        );
    }
    out
}

/// Linear-interpolation sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub const PLOT_HEADER: &str = "t,quantile,variable,value";

/// Per-time quantiles of `chat`, `h`, `c'` and `psi'` for each selected approximation.
pub fn emit_plot_data(config: &ExperimentConfig, exec: Exec) -> Result<String> {
    config.validate()?;
    let mut out = String::new();
    out.push_str(PLOT_HEADER);
    out.push_str("\r\n");
    if config.plot_variables.is_empty() {
        return Ok(out);
    }
    let model = config.model()?;
    let grid = model.grid(config.n_steps)?;
    let batch = simulate_paths(&model.market, &grid, config.n_paths, config.seed, exec)?;
    let opts = config.eval_options(exec);
    let np = grid.n_points();
    for kind in config.approximation.kinds() {
        let sol = calibrate_eta(kind, &model, &batch, opts.qmode, exec)?;
        let ctl = if config.plot_variables.iter().any(|v| v == "psi") {
            Some(build_dual_controls(
                &sol,
                &model,
                &batch,
                opts.backend,
                opts.eta_rule,
                exec,
            )?)
        } else {
            None
        };
        for var in &config.plot_variables {
            for k in 0..np {
                let mut xs: Vec<f64> = (0..batch.n_paths())
                    .map(|p| match var.as_str() {
                        "chat" => sol.log_chat(p)[k].exp(),
                        "h" => sol.log_h(p)[k].exp(),
                        "c" => (sol.log_chat(p)[k] + sol.log_h(p)[k]).exp(),
                        _ => ctl.as_ref().map(|c| c.psi(p)[k]).unwrap_or(f64::NAN),
                    })
                    .collect();
                xs.sort_by(f64::total_cmp);
                for q in PLOT_QUANTILES {
                    let _ = write!(
                        out,
                        "{},{},{}.{},{:e}\r\n",
                        grid.time(k),
                        q,
                        kind.name(),
                        var,
                        quantile_sorted(&xs, q)
                    );
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_baseline() {
        let c = ExperimentConfig::default();
        assert_eq!(c.model().unwrap(), ModelParams::baseline());
        assert_eq!((c.n_paths, c.n_steps), (10_000, 40));
    }

    #[test]
    fn kv_round_trip_is_idempotent() {
        let mut c = ExperimentConfig::default();
        c.apply_override("gamma=6").unwrap();
        c.apply_override("plot_variables=h,c").unwrap();
        c.apply_override("approximation=dual").unwrap();
        let text = c.to_kv();
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_kv(), text);
    }

    #[test]
    fn parser_rejects_bad_input() {
        assert!(ExperimentConfig::parse("gamma = abc").is_err());
        assert!(ExperimentConfig::parse("nonsense = 1").is_err());
        assert!(ExperimentConfig::parse("gamma 3").is_err());
        assert!(ExperimentConfig::parse("n_paths = 0").is_err());
        assert!(ExperimentConfig::parse("gamma = 1").is_err());
        assert!(ExperimentConfig::parse("alpha = 0.05\nbeta = 0.1").is_err());
        let c = ExperimentConfig::parse("# comment\n\nX0 = 30 # trailing\n").unwrap();
        assert_eq!(c.x0, 30.0);
    }

    #[test]
    fn quantiles_interpolate() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile_sorted(&xs, 0.5), 3.0);
        assert_eq!(quantile_sorted(&xs, 0.25), 2.0);
        assert!((quantile_sorted(&xs, 0.1) - 1.4).abs() < 1e-15);
    }

    #[test]
    fn sweep_has_twelve_cells() {
        assert_eq!(table1_cells().len(), 12);
    }

    #[test]
    fn empty_plot_list_is_header_only() {
        let mut c = ExperimentConfig::default();
        c.plot_variables.clear();
        assert_eq!(
            emit_plot_data(&c, Exec::Sequential).unwrap(),
            format!("{PLOT_HEADER}\r\n")
        );
    }

    #[test]
    fn no_habit_plot_has_unit_habit() {
        let mut c = ExperimentConfig::default();
        c.n_paths = 50;
        c.alpha = 0.0;
        c.beta = 0.0;
        c.plot_variables = vec!["h".into()];
        let csv = emit_plot_data(&c, Exec::Sequential).unwrap();
        for line in csv.lines().skip(1) {
            let v: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn csv_escapes_fields() {
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("plain"), "plain");
    }
}
