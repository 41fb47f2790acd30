//! Monte Carlo coverage experiments: draw replication datasets from the
//! configured normal model, run each interval method on them and tabulate
//! coverage of the true optimal value (or optimality gap) together with the
//! bound and width statistics.
//!
//! Random streams: replication `r` at sample size `n` reads stream
//! `seed / 0 / n / r`, the truth oracle reads `seed / 1`. Changing the
//! replication count or the list of sample sizes leaves every other
//! dataset untouched.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drosolve::DroSettings;
use crate::error::{Error, Result};
use crate::estimators::{gap_ci, value_ci, Method};
use crate::problems::{ProblemKind, ProblemSpec, StochasticProgram};
use crate::stats::{normal_cdf, normal_pdf, normal_quantile, sample_mvnormal, RandomSource};

/// Fewest Monte Carlo draws the oracle accepts.
pub const MIN_ORACLE_DRAWS: u64 = 10_000;
const ORACLE_CHUNK: u64 = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentMode {
    /// Intervals on the optimal value.
    Value,
    /// Intervals on the optimality gap of a fixed candidate solution.
    Gap,
}

impl FromStr for ExperimentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "value" => Ok(ExperimentMode::Value),
            "gap" => Ok(ExperimentMode::Gap),
            other => Err(Error::Config(vec![format!(
                "mode: unknown value '{other}' (expected value or gap)"
            )])),
        }
    }
}

impl fmt::Display for ExperimentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExperimentMode::Value => "value",
            ExperimentMode::Gap => "gap",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OracleMode {
    /// Closed form where one exists, Monte Carlo otherwise.
    #[serde(rename = "analytic")]
    Analytic,
    #[serde(rename = "monte-carlo")]
    MonteCarlo,
}

impl FromStr for OracleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "analytic" => Ok(OracleMode::Analytic),
            "monte-carlo" => Ok(OracleMode::MonteCarlo),
            other => Err(Error::Config(vec![format!(
                "oracle: unknown value '{other}' (expected analytic or monte-carlo)"
            )])),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleSettings {
    pub mode: OracleMode,
    pub draws: u64,
}

impl Default for OracleSettings {
    fn default() -> Self {
        OracleSettings {
            mode: OracleMode::Analytic,
            draws: 10_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    pub mode: ExperimentMode,
    pub sample_sizes: Vec<usize>,
    pub replications: usize,
    pub beta: f64,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub oracle: OracleSettings,
    /// Candidate solution for gap experiments. For the portfolio the CVaR
    /// threshold `c` may be omitted; it is then set to the true loss quantile.
    pub x_hat: Option<Vec<f64>>,
    pub dro: DroSettings,
}

const EXPERIMENT_KEYS: [&str; 10] = [
    "mode",
    "sample_sizes",
    "replications",
    "beta",
    "seed",
    "methods",
    "oracle",
    "oracle_draws",
    "x_hat",
    "restarts",
];

impl ExperimentConfig {
    /// The usual table setup for `kind`: n ∈ {10, 50, 100}, 100
    /// replications, β = 0.05, and the standard candidate solutions for gap
    /// runs.
    pub fn new(kind: ProblemKind, mode: ExperimentMode) -> Self {
        let problem = ProblemSpec::defaults(kind);
        let x_hat = match mode {
            ExperimentMode::Value => None,
            ExperimentMode::Gap => default_x_hat(&problem),
        };
        ExperimentConfig {
            problem,
            mode,
            sample_sizes: vec![10, 50, 100],
            replications: 100,
            beta: 0.05,
            seed: 0,
            methods: default_methods(mode),
            oracle: OracleSettings::default(),
            x_hat,
            dro: DroSettings::default(),
        }
    }

    /// Parses a TOML experiment file. Every schema violation is reported.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(vec![e.message().to_string()]))?;
        let mut errors = Vec::new();
        let problem = match ProblemSpec::from_table(&table, &EXPERIMENT_KEYS) {
            Ok(p) => p,
            Err(Error::Config(mut e)) => {
                errors.append(&mut e);
                ProblemSpec::defaults(ProblemKind::Quadratic)
            }
            Err(e) => return Err(e),
        };

        let mode = match table.get("mode") {
            None => ExperimentMode::Value,
            Some(toml::Value::String(s)) => s.parse().unwrap_or_else(|e| {
                push_config(&mut errors, e);
                ExperimentMode::Value
            }),
            Some(_) => {
                errors.push("mode: expected a string".into());
                ExperimentMode::Value
            }
        };
        let mut config = ExperimentConfig::new(problem.problem, mode);
        config.problem = problem;
        config.x_hat = match mode {
            ExperimentMode::Value => None,
            ExperimentMode::Gap => default_x_hat(&config.problem),
        };

        if let Some(v) = table.get("sample_sizes") {
            match v
                .as_array()
                .and_then(|a| a.iter().map(|x| x.as_integer()).collect::<Option<Vec<_>>>())
            {
                Some(sizes) if sizes.iter().all(|&n| n >= 0) => {
                    config.sample_sizes = sizes.into_iter().map(|n| n as usize).collect()
                }
                _ => errors.push("sample_sizes: expected an array of non-negative integers".into()),
            }
        }
        if let Some(v) = table.get("replications") {
            match v.as_integer() {
                Some(r) if r >= 0 => config.replications = r as usize,
                _ => errors.push("replications: expected a non-negative integer".into()),
            }
        }
        if let Some(v) = table.get("beta") {
            match v.as_float().or_else(|| v.as_integer().map(|i| i as f64)) {
                Some(b) => config.beta = b,
                None => errors.push("beta: expected a number".into()),
            }
        }
        if let Some(v) = table.get("seed") {
            match v.as_integer() {
                Some(s) if s >= 0 => config.seed = s as u64,
                _ => errors.push("seed: expected a non-negative integer".into()),
            }
        }
        if let Some(v) = table.get("methods") {
            match v.as_array() {
                Some(items) => {
                    let mut methods = Vec::new();
                    for item in items {
                        match item.as_str().map(Method::from_str) {
                            Some(Ok(m)) => methods.push(m),
                            Some(Err(e)) => errors.push(format!("methods: {e}")),
                            None => errors.push("methods: expected strings".into()),
                        }
                    }
                    config.methods = methods;
                }
                None => errors.push("methods: expected an array of strings".into()),
            }
        }
        if let Some(v) = table.get("oracle") {
            match v.as_str() {
                Some(s) => match s.parse() {
                    Ok(m) => config.oracle.mode = m,
                    Err(e) => push_config(&mut errors, e),
                },
                None => errors.push("oracle: expected a string".into()),
            }
        }
        if let Some(v) = table.get("oracle_draws") {
            match v.as_integer() {
                Some(d) if d >= 0 => config.oracle.draws = d as u64,
                _ => errors.push("oracle_draws: expected a non-negative integer".into()),
            }
        }
        if let Some(v) = table.get("x_hat") {
            let parsed = match v {
                toml::Value::Array(a) => a
                    .iter()
                    .map(|x| x.as_float().or_else(|| x.as_integer().map(|i| i as f64)))
                    .collect::<Option<Vec<_>>>(),
                toml::Value::Float(f) => Some(vec![*f]),
                toml::Value::Integer(i) => Some(vec![*i as f64]),
                _ => None,
            };
            match parsed {
                Some(x) => config.x_hat = Some(x),
                None => errors.push("x_hat: expected a number or an array of numbers".into()),
            }
        }
        if let Some(v) = table.get("restarts") {
            match v.as_integer() {
                Some(r) if r >= 0 => config.dro.restarts = r as usize,
                _ => errors.push("restarts: expected a non-negative integer".into()),
            }
        }
        config.dro.seed = config.seed;

        errors.extend(config.check());
        if errors.is_empty() {
            Ok(config)
        } else {
            Err(Error::Config(errors))
        }
    }

    /// Consistency problems, empty when the config can be run.
    pub fn check(&self) -> Vec<String> {
        let mut errors = self.problem.check();
        if self.replications < 1 {
            errors.push("replications: must be at least 1".into());
        }
        if self.sample_sizes.is_empty() {
            errors.push("sample_sizes: must not be empty".into());
        }
        if let Some(n) = self.sample_sizes.iter().find(|&&n| n < 2) {
            errors.push(format!(
                "sample_sizes: every size must be at least 2, got {n}"
            ));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            errors.push(format!("beta: must lie in (0,1), got {}", self.beta));
        }
        if self.methods.is_empty() {
            errors.push("methods: must not be empty".into());
        }
        for m in &self.methods {
            let ok = match self.mode {
                ExperimentMode::Value => m.estimates_value(),
                ExperimentMode::Gap => m.estimates_gap(),
            };
            if !ok {
                errors.push(format!(
                    "methods: {m} does not apply to {} experiments",
                    self.mode
                ));
            }
        }
        if self.oracle.draws < MIN_ORACLE_DRAWS {
            errors.push(format!(
                "oracle_draws: must be at least {MIN_ORACLE_DRAWS}, got {}",
                self.oracle.draws
            ));
        }
        match (self.mode, &self.x_hat) {
            (ExperimentMode::Gap, None) => {
                errors.push("x_hat: required for gap experiments".into())
            }
            (ExperimentMode::Gap, Some(x)) if errors.is_empty() => {
                if let Err(e) = complete_solution(&self.problem, x) {
                    errors.push(format!("x_hat: {e}"));
                }
            }
            (ExperimentMode::Value, Some(_)) => {
                errors.push("x_hat: only used by gap experiments".into())
            }
            _ => {}
        }
        errors
    }
}

fn push_config(errors: &mut Vec<String>, e: Error) {
    match e {
        Error::Config(mut list) => errors.append(&mut list),
        other => errors.push(other.to_string()),
    }
}

fn default_methods(mode: ExperimentMode) -> Vec<Method> {
    match mode {
        ExperimentMode::Value => vec![Method::El, Method::Clt, Method::Clt2],
        ExperimentMode::Gap => vec![Method::El, Method::Srp],
    }
}

fn default_x_hat(spec: &ProblemSpec) -> Option<Vec<f64>> {
    match spec.problem {
        ProblemKind::Quadratic => Some(vec![0.62]),
        ProblemKind::Cvar => Some(vec![0.71]),
        ProblemKind::Portfolio if spec.dimension == 2 => Some(vec![0.21, 0.79]),
        ProblemKind::Portfolio => None,
    }
}

/// A true optimal value or gap with its Monte Carlo standard error (zero for
/// closed forms).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub value: f64,
    pub std_error: f64,
    pub monte_carlo: bool,
}

/// Mean and standard deviation of the loss `−ξᵀx` under the model.
fn loss_moments(spec: &ProblemSpec, x: &[f64]) -> (f64, f64) {
    let mean = -spec.mean.iter().zip(x).map(|(m, xi)| m * xi).sum::<f64>();
    let mut var = 0.0;
    for (i, row) in spec.cov.iter().enumerate() {
        for (j, c) in row.iter().enumerate() {
            var += x[i] * c * x[j];
        }
    }
    (mean, var.max(0.0).sqrt())
}

/// `CVaR_α` of a normal variable.
fn normal_cvar(mean: f64, sd: f64, alpha: f64) -> Result<f64> {
    Ok(mean + sd * normal_pdf(normal_quantile(alpha)?) / (1.0 - alpha))
}

/// `c + E[(Y − c)⁺]/(1 − α)` for normal `Y`.
fn normal_cvar_objective(mean: f64, sd: f64, alpha: f64, c: f64) -> f64 {
    let excess = if sd > 0.0 {
        let u = (c - mean) / sd;
        sd * normal_pdf(u) - (c - mean) * (1.0 - normal_cdf(u))
    } else {
        (mean - c).max(0.0)
    };
    c + excess / (1.0 - alpha)
}

/// Minimizer of the normal-model portfolio CVaR
/// `−μᵀx + κ·sqrt(xᵀΣx)` over the simplex with `μᵀx ≥ r_b`, by Frank–Wolfe
/// over the vertices of that polytope.
fn portfolio_optimum(spec: &ProblemSpec) -> Result<Vec<f64>> {
    let d = spec.dimension;
    let mu = &spec.mean;
    let mut vertices = Vec::new();
    for i in 0..d {
        if mu[i] >= spec.r_b {
            let mut v = vec![0.0; d];
            v[i] = 1.0;
            vertices.push(v);
        }
        for j in 0..d {
            if mu[i] < spec.r_b && spec.r_b < mu[j] {
                let mut v = vec![0.0; d];
                v[i] = (mu[j] - spec.r_b) / (mu[j] - mu[i]);
                v[j] = 1.0 - v[i];
                vertices.push(v);
            }
        }
    }
    if vertices.is_empty() {
        return Err(Error::Infeasible(format!(
            "no portfolio reaches the target return {}",
            spec.r_b
        )));
    }
    let f = |x: &[f64]| -> f64 {
        let (m, s) = loss_moments(spec, x);
        normal_cvar(m, s, spec.alpha).unwrap_or(f64::NAN)
    };
    let kappa = normal_pdf(normal_quantile(spec.alpha)?) / (1.0 - spec.alpha);
    let mut x = vertices
        .iter()
        .min_by(|a, b| f(a).total_cmp(&f(b)))
        .cloned()
        .expect("non-empty");
    for _ in 0..5000 {
        let (_, sd) = loss_moments(spec, &x);
        let grad: Vec<f64> = (0..d)
            .map(|i| {
                let sigma_x: f64 = (0..d).map(|j| spec.cov[i][j] * x[j]).sum();
                -mu[i] + if sd > 0.0 { kappa * sigma_x / sd } else { 0.0 }
            })
            .collect();
        let dot = |v: &[f64]| v.iter().zip(&grad).map(|(a, b)| a * b).sum::<f64>();
        let target = vertices
            .iter()
            .min_by(|a, b| dot(a).total_cmp(&dot(b)))
            .expect("non-empty");
        let dual_gap = dot(&x) - dot(target);
        if dual_gap <= 1e-13 {
            break;
        }
        let at =
            |g: f64| -> Vec<f64> { x.iter().zip(target).map(|(a, b)| a + g * (b - a)).collect() };
        let (mut lo, mut hi) = (0.0, 1.0);
        let ratio = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..80 {
            let g1 = hi - ratio * (hi - lo);
            let g2 = lo + ratio * (hi - lo);
            if f(&at(g1)) <= f(&at(g2)) {
                hi = g2;
            } else {
                lo = g1;
            }
        }
        x = at(0.5 * (lo + hi));
    }
    Ok(x)
}

/// A minimizer of the true objective under the configured normal model:
/// `μ` for the quadratic, the α-quantile for CVaR, and the normal-model
/// optimal weights plus their loss quantile for the portfolio.
pub fn optimal_decision(spec: &ProblemSpec) -> Result<Vec<f64>> {
    let errors = spec.check();
    if !errors.is_empty() {
        return Err(Error::Config(errors));
    }
    let z = normal_quantile(spec.alpha)?;
    Ok(match spec.problem {
        ProblemKind::Quadratic => vec![spec.mean[0]],
        ProblemKind::Cvar => vec![spec.mean[0] + spec.cov[0][0].sqrt() * z],
        ProblemKind::Portfolio => {
            let mut x = portfolio_optimum(spec)?;
            let (m, s) = loss_moments(spec, &x);
            x.push(m + s * z);
            x
        }
    })
}

/// Full decision vector for a candidate solution. Portfolio weights given
/// without `c` get the true α-quantile of their loss.
pub fn complete_solution(spec: &ProblemSpec, x_hat: &[f64]) -> Result<Vec<f64>> {
    let program = spec.build()?;
    let p = program.decision_dim();
    let mut x = x_hat.to_vec();
    if spec.problem == ProblemKind::Portfolio && x.len() == spec.dimension {
        let (m, s) = loss_moments(spec, &x);
        x.push(m + s * normal_quantile(spec.alpha)?);
    }
    if x.len() != p {
        return Err(Error::Dimension {
            what: "candidate solution",
            expected: p,
            got: x_hat.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain(
            "candidate solution has non-finite entries".into(),
        ));
    }
    for k in 0..program.num_deterministic_constraints() {
        let g = program.deterministic_constraint(k, &x);
        if g > 1e-6 {
            return Err(Error::Domain(format!(
                "candidate solution violates deterministic constraint {k} by {g:.3e}"
            )));
        }
    }
    Ok(x)
}

fn check_draws(draws: u64) -> Result<()> {
    if draws < MIN_ORACLE_DRAWS {
        return Err(Error::Domain(format!(
            "oracle needs at least {MIN_ORACLE_DRAWS} draws, got {draws}"
        )));
    }
    Ok(())
}

/// Monte Carlo mean of `f(ξ)` over `draws` model draws with its standard
/// error. Chunks read their own child streams and are summed in order, so
/// the result does not depend on the thread count.
fn monte_carlo_mean<F>(spec: &ProblemSpec, draws: u64, source: &RandomSource, f: F) -> Result<Truth>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let chunks = draws.div_ceil(ORACLE_CHUNK);
    let partial: Vec<(f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|k| {
            let size = ORACLE_CHUNK.min(draws - k * ORACLE_CHUNK) as usize;
            let mut stream = source.split(k);
            let data = sample_mvnormal(&mut stream, &spec.mean, &spec.cov, size)?;
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for row in data.rows() {
                let v = f(row);
                sum += v;
                sum_sq += v * v;
            }
            Ok((sum, sum_sq))
        })
        .collect::<Result<_>>()?;
    let (sum, sum_sq) = partial
        .iter()
        .fold((0.0, 0.0), |(a, b), (s, q)| (a + s, b + q));
    let n = draws as f64;
    let mean = sum / n;
    let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok(Truth {
        value: mean,
        std_error: (var / n).sqrt(),
        monte_carlo: true,
    })
}

/// Monte Carlo estimate of the optimal value: the sample mean of the
/// objective at [`optimal_decision`].
pub fn monte_carlo_value(spec: &ProblemSpec, draws: u64, source: &RandomSource) -> Result<Truth> {
    check_draws(draws)?;
    let program = spec.build()?;
    let x = optimal_decision(spec)?;
    monte_carlo_mean(spec, draws, source, |xi| program.objective(&x, xi))
}

/// The true optimal value: closed form for the quadratic (`σ²`) and CVaR
/// (`μ + σ·φ(z_α)/(1 − α)`) problems, Monte Carlo at the optimum for the
/// portfolio.
pub fn true_value_oracle(spec: &ProblemSpec, draws: u64, source: &RandomSource) -> Result<Truth> {
    check_draws(draws)?;
    let exact = |value| Truth {
        value,
        std_error: 0.0,
        monte_carlo: false,
    };
    match spec.problem {
        ProblemKind::Quadratic => {
            let _ = spec.build()?;
            Ok(exact(spec.cov[0][0]))
        }
        ProblemKind::Cvar => {
            let _ = spec.build()?;
            Ok(exact(normal_cvar(
                spec.mean[0],
                spec.cov[0][0].sqrt(),
                spec.alpha,
            )?))
        }
        ProblemKind::Portfolio => monte_carlo_value(spec, draws, source),
    }
}

/// The true optimality gap `h(x̂) − z*` of a candidate solution. Monte Carlo
/// estimates use common draws for both terms.
pub fn true_gap_oracle(
    spec: &ProblemSpec,
    x_hat: &[f64],
    oracle: &OracleSettings,
    source: &RandomSource,
) -> Result<Truth> {
    check_draws(oracle.draws)?;
    let x = complete_solution(spec, x_hat)?;
    let analytic = oracle.mode == OracleMode::Analytic && spec.problem != ProblemKind::Portfolio;
    if analytic {
        let sd = spec.cov[0][0].sqrt();
        let mu = spec.mean[0];
        let value = match spec.problem {
            ProblemKind::Quadratic => (x[0] - mu).powi(2),
            _ => normal_cvar_objective(mu, sd, spec.alpha, x[0]) - normal_cvar(mu, sd, spec.alpha)?,
        };
        return Ok(Truth {
            value,
            std_error: 0.0,
            monte_carlo: false,
        });
    }
    let program = spec.build()?;
    let x_star = optimal_decision(spec)?;
    monte_carlo_mean(spec, oracle.draws, source, |xi| {
        program.objective(&x, xi) - program.objective(&x_star, xi)
    })
}

/// One interval from one replication; failures keep their message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub method: Method,
    pub n: usize,
    pub replication: usize,
    pub lower: f64,
    pub upper: f64,
    pub covered: bool,
    pub error: Option<String>,
}

/// The table statistics for one (method, n) cell. Failed replications are
/// excluded from every statistic and counted in `failures`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageCell {
    pub method: Method,
    pub n: usize,
    pub coverage: f64,
    pub mean_lower: f64,
    pub mean_upper: f64,
    pub mean_width: f64,
    pub sd_width: f64,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageReport {
    pub problem: String,
    pub mode: ExperimentMode,
    pub beta: f64,
    pub seed: u64,
    pub replications: usize,
    pub truth: Truth,
    /// Ordered by sample size, then by method in config order.
    pub cells: Vec<CoverageCell>,
    pub records: Vec<ReplicationRecord>,
}

fn summarize(method: Method, n: usize, records: &[&ReplicationRecord]) -> CoverageCell {
    let ok: Vec<_> = records.iter().filter(|r| r.error.is_none()).collect();
    let count = ok.len() as f64;
    let mean = |f: &dyn Fn(&ReplicationRecord) -> f64| ok.iter().map(|r| f(r)).sum::<f64>() / count;
    let mean_width = mean(&|r| r.upper - r.lower);
    let sd_width = if ok.len() > 1 {
        let ss: f64 = ok
            .iter()
            .map(|r| (r.upper - r.lower - mean_width).powi(2))
            .sum();
        (ss / (count - 1.0)).sqrt()
    } else if ok.len() == 1 {
        0.0
    } else {
        f64::NAN
    };
    CoverageCell {
        method,
        n,
        coverage: ok.iter().filter(|r| r.covered).count() as f64 / count,
        mean_lower: mean(&|r| r.lower),
        mean_upper: mean(&|r| r.upper),
        mean_width,
        sd_width,
        failures: records.len() - ok.len(),
    }
}

/// Dataset of replication `r` at sample size `n`.
pub fn replication_data(config: &ExperimentConfig, n: usize, r: usize) -> Result<crate::SampleSet> {
    let mut stream = RandomSource::new(config.seed)
        .split(0)
        .split(n as u64)
        .split(r as u64);
    sample_mvnormal(&mut stream, &config.problem.mean, &config.problem.cov, n)
}

fn run_replication(
    config: &ExperimentConfig,
    program: &dyn StochasticProgram,
    x_hat: Option<&[f64]>,
    truth: f64,
    n: usize,
    r: usize,
) -> Result<Vec<ReplicationRecord>> {
    let data = replication_data(config, n, r)?;
    Ok(config
        .methods
        .iter()
        .map(|&method| {
            let ci = match x_hat {
                None => value_ci(method, program, &data, config.beta, &config.dro),
                Some(x) => gap_ci(method, program, &data, x, config.beta, &config.dro),
            };
            match ci {
                Ok(ci) => ReplicationRecord {
                    method,
                    n,
                    replication: r,
                    lower: ci.lower,
                    upper: ci.upper,
                    covered: ci.contains(truth),
                    error: None,
                },
                Err(e) => ReplicationRecord {
                    method,
                    n,
                    replication: r,
                    lower: f64::NAN,
                    upper: f64::NAN,
                    covered: false,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect())
}

/// Runs every (n, replication) in parallel on the current rayon pool and
/// reduces in replication order.
pub fn run_coverage_experiment(config: &ExperimentConfig) -> Result<CoverageReport> {
    let errors = config.check();
    if !errors.is_empty() {
        return Err(Error::Config(errors));
    }
    let program = config.problem.build()?;
    let oracle_stream = RandomSource::new(config.seed).split(1);
    let (truth, x_hat) = match config.mode {
        ExperimentMode::Value => (
            match config.oracle.mode {
                OracleMode::Analytic => {
                    true_value_oracle(&config.problem, config.oracle.draws, &oracle_stream)?
                }
                OracleMode::MonteCarlo => {
                    monte_carlo_value(&config.problem, config.oracle.draws, &oracle_stream)?
                }
            },
            None,
        ),
        ExperimentMode::Gap => {
            let given = config.x_hat.as_deref().expect("checked");
            (
                true_gap_oracle(&config.problem, given, &config.oracle, &oracle_stream)?,
                Some(complete_solution(&config.problem, given)?),
            )
        }
    };

    let mut records = Vec::new();
    let mut cells = Vec::new();
    for &n in &config.sample_sizes {
        let per_rep: Vec<Vec<ReplicationRecord>> = (0..config.replications)
            .into_par_iter()
            .map(|r| {
                run_replication(
                    config,
                    program.as_ref(),
                    x_hat.as_deref(),
                    truth.value,
                    n,
                    r,
                )
            })
            .collect::<Result<_>>()?;
        let flat: Vec<ReplicationRecord> = per_rep.into_iter().flatten().collect();
        for &method in &config.methods {
            let subset: Vec<&ReplicationRecord> =
                flat.iter().filter(|r| r.method == method).collect();
            cells.push(summarize(method, n, &subset));
        }
        records.extend(flat);
    }
    Ok(CoverageReport {
        problem: program.name(),
        mode: config.mode,
        beta: config.beta,
        seed: config.seed,
        replications: config.replications,
        truth,
        cells,
        records,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    /// Table grouped by sample size, values to the given number of decimals.
    Markdown {
        precision: usize,
    },
}

pub const REPORT_COLUMNS: [&str; 8] = [
    "method",
    "n",
    "coverage",
    "mean_lower",
    "mean_upper",
    "mean_width",
    "sd_width",
    "failures",
];

/// Renders the cell table. CSV floats use the shortest representation that
/// parses back to the same value.
pub fn emit_report(report: &CoverageReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => {
            let mut w = csv::WriterBuilder::new()
                .has_headers(false)
                .from_writer(Vec::new());
            w.write_record(REPORT_COLUMNS).expect("in-memory write");
            for c in &report.cells {
                w.serialize(c).expect("in-memory write");
            }
            String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf-8")
        }
        ReportFormat::Markdown { precision } => markdown(report, precision),
    }
}

fn markdown(report: &CoverageReport, precision: usize) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "| n | method | coverage probability | mean lower bound | mean upper bound | mean interval width | sd of interval width | failures |"
    );
    let _ = writeln!(out, "|---|---|---|---|---|---|---|---|");
    let mut last_n = None;
    for c in &report.cells {
        let n_label = if last_n == Some(c.n) {
            String::new()
        } else {
            format!("n={}", c.n)
        };
        last_n = Some(c.n);
        let method = if c.method == Method::Srp {
            "CLT-SRP"
        } else {
            c.method.as_str()
        };
        let _ = writeln!(
            out,
            "| {n_label} | {method} | {:.p$} | {:.p$} | {:.p$} | {:.p$} | {:.p$} | {} |",
            c.coverage,
            c.mean_lower,
            c.mean_upper,
            c.mean_width,
            c.sd_width,
            c.failures,
            p = precision
        );
    }
    out
}

/// One CSV row per replication and method.
pub fn emit_records(report: &CoverageReport) -> String {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record([
        "method",
        "n",
        "replication",
        "lower",
        "upper",
        "covered",
        "error",
    ])
    .expect("in-memory write");
    for r in &report.records {
        w.serialize(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf-8")
}

/// Reads back the cell table written by [`emit_report`] in CSV format.
pub fn parse_report_csv(text: &str) -> Result<Vec<CoverageCell>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(e.to_string()))?
        .clone();
    if headers.iter().ne(REPORT_COLUMNS) {
        return Err(Error::Data(format!(
            "unexpected report columns: {headers:?}"
        )));
    }
    reader
        .deserialize()
        .map(|row| row.map_err(|e| Error::Data(e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: ProblemKind, mode: ExperimentMode) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(kind, mode);
        c.sample_sizes = vec![20];
        c.replications = 8;
        c.oracle.draws = 200_000;
        c
    }

    #[test]
    fn analytic_truths() {
        let src = RandomSource::new(0);
        let q = true_value_oracle(&ProblemSpec::defaults(ProblemKind::Quadratic), 10_000, &src)
            .unwrap();
        assert_eq!(q.value, 1.0);
        let c = true_value_oracle(&ProblemSpec::defaults(ProblemKind::Cvar), 10_000, &src).unwrap();
        assert!((c.value - 1.754983).abs() < 1e-5, "{}", c.value);
        assert!(!c.monte_carlo);
    }

    #[test]
    fn monte_carlo_agrees_with_closed_forms() {
        let src = RandomSource::new(5);
        for kind in [ProblemKind::Quadratic, ProblemKind::Cvar] {
            let spec = ProblemSpec::defaults(kind);
            let exact = true_value_oracle(&spec, 10_000, &src).unwrap().value;
            let mc = monte_carlo_value(&spec, 400_000, &src).unwrap();
            assert!(
                (mc.value - exact).abs() < 5.0 * mc.std_error,
                "{kind}: {mc:?} vs {exact}"
            );
        }
        // Normal-model portfolio CVaR at the optimum.
        let spec = ProblemSpec::defaults(ProblemKind::Portfolio);
        let x = optimal_decision(&spec).unwrap();
        assert!(
            (x[0] - 0.5).abs() < 1e-6 && (x[1] - 0.5).abs() < 1e-6,
            "{x:?}"
        );
        let (m, s) = loss_moments(&spec, &x);
        let exact = normal_cvar(m, s, spec.alpha).unwrap();
        let mc = monte_carlo_value(&spec, 400_000, &src).unwrap();
        assert!(
            (mc.value - exact).abs() < 5.0 * mc.std_error,
            "{mc:?} vs {exact}"
        );
    }

    #[test]
    fn gap_truths_match_table_setups() {
        let src = RandomSource::new(1);
        let analytic = OracleSettings {
            mode: OracleMode::Analytic,
            draws: 10_000,
        };
        let q = true_gap_oracle(
            &ProblemSpec::defaults(ProblemKind::Quadratic),
            &[0.62],
            &analytic,
            &src,
        )
        .unwrap();
        assert!((q.value - 0.3844).abs() < 1e-12);
        let c = true_gap_oracle(
            &ProblemSpec::defaults(ProblemKind::Cvar),
            &[0.71],
            &analytic,
            &src,
        )
        .unwrap();
        assert!((c.value - 0.36).abs() < 0.005, "{}", c.value);
        let p = true_gap_oracle(
            &ProblemSpec::defaults(ProblemKind::Portfolio),
            &[0.21, 0.79],
            &OracleSettings {
                mode: OracleMode::MonteCarlo,
                draws: 400_000,
            },
            &src,
        )
        .unwrap();
        assert!((p.value - 0.73).abs() < 0.02, "{p:?}");
    }

    #[test]
    fn oracle_rejects_few_draws() {
        let spec = ProblemSpec::defaults(ProblemKind::Quadratic);
        assert!(true_value_oracle(&spec, 9_999, &RandomSource::new(0)).is_err());
    }

    #[test]
    fn single_replication_coverage_is_binary() {
        let mut c = small(ProblemKind::Quadratic, ExperimentMode::Value);
        c.replications = 1;
        let report = run_coverage_experiment(&c).unwrap();
        for cell in &report.cells {
            assert!(cell.coverage == 0.0 || cell.coverage == 1.0);
        }
    }

    #[test]
    fn report_statistics_are_consistent() {
        let report =
            run_coverage_experiment(&small(ProblemKind::Cvar, ExperimentMode::Value)).unwrap();
        assert_eq!(report.cells.len(), 3);
        assert_eq!(report.records.len(), 3 * 8);
        for cell in &report.cells {
            assert!((0.0..=1.0).contains(&cell.coverage));
            assert!((cell.mean_width - (cell.mean_upper - cell.mean_lower)).abs() < 1e-9);
        }
    }

    #[test]
    fn datasets_do_not_depend_on_replication_count() {
        let mut c = small(ProblemKind::Quadratic, ExperimentMode::Value);
        let a = run_coverage_experiment(&c).unwrap();
        c.replications = 12;
        c.sample_sizes = vec![10, 20];
        let b = run_coverage_experiment(&c).unwrap();
        let tail: Vec<_> = b
            .records
            .iter()
            .filter(|r| r.n == 20 && r.replication < 8)
            .collect();
        assert_eq!(tail.len(), a.records.len());
        for (x, y) in a.records.iter().zip(tail) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn smaller_beta_covers_at_least_as_often() {
        let mut c = small(ProblemKind::Quadratic, ExperimentMode::Gap);
        c.replications = 12;
        let wide_cfg = ExperimentConfig {
            beta: 0.01,
            ..c.clone()
        };
        let narrow = run_coverage_experiment(&c).unwrap();
        let wide = run_coverage_experiment(&wide_cfg).unwrap();
        for (a, b) in narrow.records.iter().zip(&wide.records) {
            if a.covered {
                assert!(b.covered, "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let mut report =
            run_coverage_experiment(&small(ProblemKind::Quadratic, ExperimentMode::Gap)).unwrap();
        let text = emit_report(&report, ReportFormat::Csv);
        let parsed = parse_report_csv(&text).unwrap();
        assert_eq!(parsed.len(), report.cells.len());
        for (a, b) in parsed.iter().zip(&report.cells) {
            assert_eq!((a.method, a.n, a.failures), (b.method, b.n, b.failures));
            for (x, y) in [
                (a.coverage, b.coverage),
                (a.mean_lower, b.mean_lower),
                (a.mean_upper, b.mean_upper),
                (a.mean_width, b.mean_width),
                (a.sd_width, b.sd_width),
            ] {
                assert!((x - y).abs() <= 1e-12);
            }
        }
        report.cells.clear();
        let empty = emit_report(&report, ReportFormat::Csv);
        assert_eq!(empty.trim_end(), REPORT_COLUMNS.join(","));
    }

    #[test]
    fn markdown_groups_by_sample_size() {
        let mut c = small(ProblemKind::Quadratic, ExperimentMode::Gap);
        c.sample_sizes = vec![10, 20];
        c.replications = 2;
        let md = emit_report(
            &run_coverage_experiment(&c).unwrap(),
            ReportFormat::Markdown { precision: 2 },
        );
        let rows: Vec<&str> = md.lines().collect();
        assert_eq!(rows.len(), 2 + 4);
        assert!(rows[2].starts_with("| n=10 | EL |"));
        assert!(rows[3].starts_with("|  | CLT-SRP |"));
    }

    #[test]
    fn config_parses_and_reports_every_error() {
        let c = ExperimentConfig::from_toml_str(
            "problem = \"portfolio\"\nmode = \"gap\"\nsample_sizes = [10, 50]\nreplications = 5\nmethods = [\"el\", \"srp\"]\nseed = 3\n",
        )
        .unwrap();
        assert_eq!(c.x_hat, Some(vec![0.21, 0.79]));
        assert_eq!(c.dro.seed, 3);
        assert_eq!(c.sample_sizes, vec![10, 50]);

        let err = ExperimentConfig::from_toml_str(
            "problem = \"quadratic\"\nreplications = 0\nsample_sizes = [1]\nbeta = 2.0\nmethods = [\"srp\"]\nbogus = 1\n",
        )
        .unwrap_err();
        let Error::Config(list) = err else {
            panic!("{err:?}")
        };
        let text = list.join("\n");
        for needle in ["bogus", "replications", "sample_sizes", "beta", "SRP"] {
            assert!(text.contains(needle), "missing {needle} in {text}");
        }
    }

    #[test]
    fn gap_config_checks_candidate() {
        let err = ExperimentConfig::from_toml_str(
            "problem = \"portfolio\"\nmode = \"gap\"\nx_hat = [0.5, 0.6]\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("x_hat"), "{err}");
        let err = ExperimentConfig::from_toml_str(
            "problem = \"cvar\"\nmode = \"gap\"\nx_hat = [0.5, 0.6]\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("x_hat"), "{err}");
    }
}
